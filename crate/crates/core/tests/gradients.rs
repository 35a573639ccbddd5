mod common;

use common::{finite_diff, max_rel_err, naive_conv, random_tensor, rng};
use rand::Rng;
use railmeta::nn::{
    bce_loss_batch, build_model, conv2d_forward, draw_dropout_mask, model_backward, model_forward,
    one_hot, DropoutMask, InitPolicy, LayerSpec, Mode, ModelConfig, OneHot, ParamRole,
    ParameterSet,
};
use railmeta::Tensor;

fn loss_at(
    cfg: &ModelConfig,
    template: &ParameterSet,
    values: &[f64],
    x: &Tensor,
    mask: Option<&DropoutMask>,
    labels: &[OneHot],
) -> f64 {
    let p = ParameterSet::from_values(template.layout().clone(), values.to_vec()).unwrap();
    let mode = if mask.is_some() { Mode::Train } else { Mode::Eval };
    let (_, trace) = model_forward(cfg, &p, x, mode, mask).unwrap();
    bce_loss_batch(&trace.probs(), labels).unwrap()
}

fn check_config(cfg: &ModelConfig, batch: usize, seed: u64) -> f64 {
    let params = build_model(cfg, InitPolicy::Uniform, seed).unwrap();
    // perturb scales/shifts and biases away from their neutral init
    let mut r = rng(seed ^ 0xabc);
    let values: Vec<f64> = params.values().iter().map(|v| v + r.random_range(-0.2..0.2)).collect();
    let params = ParameterSet::from_values(params.layout().clone(), values).unwrap();
    let [c, h, w] = cfg.input;
    let x = random_tensor(&[batch, c, h, w], seed + 100);
    let labels: Vec<OneHot> = (0..batch).map(|i| one_hot((i + seed as usize) % 2)).collect();
    let mask = cfg.has_dropout().then(|| {
        let width = cfg
            .layers
            .iter()
            .find_map(|l| match l {
                LayerSpec::Linear { inputs, .. } => Some(*inputs),
                _ => None,
            })
            .unwrap();
        draw_dropout_mask(width, 0.7, seed + 7).unwrap()
    });
    let mode = if mask.is_some() { Mode::Train } else { Mode::Eval };
    let (_, trace) = model_forward(cfg, &params, &x, mode, mask.as_ref()).unwrap();
    let grad = model_backward(&trace, &labels).unwrap();
    let fd = finite_diff(
        |v| loss_at(cfg, &params, v, &x, mask.as_ref(), &labels),
        params.values(),
        1e-6,
    );
    max_rel_err(grad.values(), &fd)
}

fn small_configs() -> Vec<ModelConfig> {
    let mut proof = ModelConfig::proof_model(6, 3);
    proof.name = "proof".into();
    let mut f1 = ModelConfig::f_theta_1(3, 16, 16, Some(0.7));
    for l in &mut f1.layers {
        if let LayerSpec::Conv { filters, .. } = l {
            *filters = 3;
        }
        if let LayerSpec::Linear { inputs, .. } = l {
            *inputs = 3 * 24;
        }
    }
    let mixed = ModelConfig {
        name: "mixed".into(),
        input: [2, 16, 16],
        layers: vec![
            LayerSpec::Conv { filters: 3, size: 3, stride: 1, padding: 1, bias: true },
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::Conv { filters: 3, size: 2, stride: 2, padding: 0, bias: false },
            LayerSpec::Relu,
            LayerSpec::AdaptivePool { out_h: 3, out_w: 2 },
            LayerSpec::Flatten,
            LayerSpec::BatchNorm,
            LayerSpec::Dropout { keep_prob: 0.5 },
            LayerSpec::Linear { inputs: 18, outputs: 4, bias: true },
            LayerSpec::Relu,
            LayerSpec::Linear { inputs: 4, outputs: 2, bias: false },
            LayerSpec::Softmax,
        ],
    };
    vec![proof, ModelConfig::f_theta_0(1, 16, 16, 2), f1, mixed]
}

#[test]
fn analytic_gradients_match_finite_differences() {
    for cfg in small_configs() {
        for seed in 0..20 {
            let err = check_config(&cfg, 3, seed);
            assert!(err < 1e-5, "{} seed {seed}: max relative error {err:e}", cfg.name);
        }
    }
}

#[test]
fn conv_matches_direct_loop_oracle() {
    let x = random_tensor(&[1, 8, 8], 1);
    let w = random_tensor(&[4, 1, 3, 3], 2);
    let z = conv2d_forward(&x, &w, 2, 1).unwrap();
    let (oracle, oh, ow) = naive_conv(x.data(), (1, 8, 8), w.data(), 4, 3, 2, 1);
    assert_eq!(z.shape(), &[4, oh, ow]);
    let err = z.data().iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-12, "{err}");
}

#[test]
fn softmax_ce_gradient_is_p_minus_y() {
    // flatten -> identity linear with bias -> softmax: bias gradient equals ∂L/∂u
    let cfg = ModelConfig {
        name: "head".into(),
        input: [2, 1, 1],
        layers: vec![
            LayerSpec::Flatten,
            LayerSpec::Linear { inputs: 2, outputs: 2, bias: true },
            LayerSpec::Softmax,
        ],
    };
    let mut p = build_model(&cfg, InitPolicy::Zeros, 0).unwrap();
    p.segment_mut(1, ParamRole::Weight).unwrap().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
    let mut r = rng(3);
    for _ in 0..50 {
        let u = [r.random_range(-5.0..5.0), r.random_range(-5.0..5.0)];
        let x = Tensor::new(vec![2, 1, 1], u.to_vec()).unwrap();
        for y in [one_hot(0), one_hot(1)] {
            let (probs, trace) = model_forward(&cfg, &p, &x, Mode::Eval, None).unwrap();
            let g = model_backward(&trace, &[y]).unwrap();
            let db = g.segment(1, ParamRole::Bias).unwrap();
            for j in 0..2 {
                assert!((db[j] - (probs.data()[j] - y[j])).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn head_gradient_sign_law() {
    let cfg = ModelConfig::proof_model(5, 2);
    let mut p = build_model(&cfg, InitPolicy::Uniform, 4).unwrap();
    let eta0 = p.segment(2, ParamRole::Weight).unwrap()[..16].to_vec();
    p.segment_mut(2, ParamRole::Weight).unwrap()[16..].copy_from_slice(&eta0);
    let x = random_tensor(&[1, 5, 5], 9);
    let omega = Tensor::new(vec![1, 1, 2, 2], p.segment(0, ParamRole::Weight).unwrap().to_vec()).unwrap();
    let z = conv2d_forward(&x, &omega, 1, 0).unwrap();
    let (probs, trace) = model_forward(&cfg, &p, &x, Mode::Eval, None).unwrap();
    assert_eq!(probs.data(), &[0.5, 0.5]);
    for (label, sign) in [(one_hot(0), -1.0), (one_hot(1), 1.0)] {
        let g = model_backward(&trace, &[label]).unwrap();
        let head = g.segment(2, ParamRole::Weight).unwrap();
        for (k, &zk) in z.data().iter().enumerate() {
            assert_eq!(head[k], sign * 0.5 * zk);
            assert_eq!(head[16 + k], -sign * 0.5 * zk);
        }
    }
}

#[test]
fn constant_model_has_zero_head_gradient() {
    let cfg = ModelConfig::proof_model(6, 3);
    let p = build_model(&cfg, InitPolicy::Zeros, 0).unwrap();
    let x = random_tensor(&[2, 1, 6, 6], 1);
    let (_, t) = model_forward(&cfg, &p, &x, Mode::Eval, None).unwrap();
    let g = model_backward(&t, &[one_hot(0), one_hot(1)]).unwrap();
    assert!(g.segment(2, ParamRole::Weight).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn outputs_stay_finite_and_normalised() {
    let cfg = ModelConfig::f_theta_1(4, 48, 64, Some(0.7));
    let p = build_model(&cfg, InitPolicy::Uniform, 1).unwrap();
    let x = random_tensor(&[3, 4, 48, 64], 2);
    let (probs, t) = model_forward(&cfg, &p, &x, Mode::Eval, None).unwrap();
    for row in probs.data().chunks(2) {
        assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
        assert!(row[0] > 0.0 && row[0] < 1.0);
    }
    let g = model_backward(&t, &[one_hot(0), one_hot(1), one_hot(0)]).unwrap();
    assert!(g.values().iter().all(|v| v.is_finite()));
}

/// Layer-by-layer evaluation of the f_theta_1 stack written without the
/// crate's kernels. Returns logits per sample.
fn reference_logits(cfg: &ModelConfig, p: &ParameterSet, x: &Tensor) -> Vec<[f64; 2]> {
    let n = x.shape()[0];
    let [mut c, mut h, mut w] = cfg.input;
    let mut acts: Vec<Vec<f64>> = (0..n).map(|i| x.slice0(i).into_data()).collect();
    let mut logits = Vec::new();
    for (li, layer) in cfg.layers.iter().enumerate() {
        match *layer {
            LayerSpec::Conv { filters, size, stride, padding, .. } => {
                let wt = p.segment(li, ParamRole::Weight).unwrap();
                let b = p.segment(li, ParamRole::Bias).unwrap();
                let mut dims = (0, 0);
                for a in &mut acts {
                    let (mut z, oh, ow) = naive_conv(a, (c, h, w), wt, filters, size, stride, padding);
                    for (k, v) in z.iter_mut().enumerate() {
                        *v += b[k / (oh * ow)];
                    }
                    *a = z;
                    dims = (oh, ow);
                }
                (c, h, w) = (filters, dims.0, dims.1);
            }
            LayerSpec::BatchNorm => {
                let g = p.segment(li, ParamRole::Scale).unwrap();
                let s = p.segment(li, ParamRole::Shift).unwrap();
                for ch in 0..c {
                    let vals: Vec<f64> = acts.iter().flat_map(|a| a[ch * h * w..(ch + 1) * h * w].to_vec()).collect();
                    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
                    for a in &mut acts {
                        for v in &mut a[ch * h * w..(ch + 1) * h * w] {
                            *v = g[ch] * (*v - mean) / (var + 1e-5).sqrt() + s[ch];
                        }
                    }
                }
            }
            LayerSpec::Relu => acts.iter_mut().flatten().for_each(|v| *v = v.max(0.0)),
            LayerSpec::MaxPool { size } => {
                let (oh, ow) = ((h / size).max(1), (w / size).max(1));
                for a in &mut acts {
                    let mut out = vec![f64::NEG_INFINITY; c * oh * ow];
                    for ch in 0..c {
                        for iy in 0..h {
                            for ix in 0..w {
                                let (oy, ox) = (iy / size, ix / size);
                                if (oy < oh || h < size) && (ox < ow || w < size) {
                                    let o = (ch * oh + oy.min(oh - 1)) * ow + ox.min(ow - 1);
                                    out[o] = out[o].max(a[(ch * h + iy) * w + ix]);
                                }
                            }
                        }
                    }
                    *a = out;
                }
                (h, w) = (oh, ow);
            }
            LayerSpec::AdaptivePool { out_h, out_w } => {
                for a in &mut acts {
                    let mut out = vec![0.0; c * out_h * out_w];
                    for ch in 0..c {
                        for oy in 0..out_h {
                            for ox in 0..out_w {
                                let y0 = (oy as f64 * h as f64 / out_h as f64).floor() as usize;
                                let y1 = ((oy + 1) as f64 * h as f64 / out_h as f64).ceil() as usize;
                                let x0 = (ox as f64 * w as f64 / out_w as f64).floor() as usize;
                                let x1 = ((ox + 1) as f64 * w as f64 / out_w as f64).ceil() as usize;
                                let mut s = 0.0;
                                for iy in y0..y1 {
                                    for ix in x0..x1 {
                                        s += a[(ch * h + iy) * w + ix];
                                    }
                                }
                                out[(ch * out_h + oy) * out_w + ox] = s / ((y1 - y0) * (x1 - x0)) as f64;
                            }
                        }
                    }
                    *a = out;
                }
                (h, w) = (out_h, out_w);
            }
            LayerSpec::Flatten | LayerSpec::Dropout { .. } => {}
            LayerSpec::Linear { inputs, outputs, .. } => {
                let wt = p.segment(li, ParamRole::Weight).unwrap();
                let b = p.segment(li, ParamRole::Bias).unwrap();
                for a in &mut acts {
                    *a = (0..outputs)
                        .map(|o| (0..inputs).map(|i| wt[o * inputs + i] * a[i]).sum::<f64>() + b[o])
                        .collect();
                }
            }
            LayerSpec::Softmax => logits = acts.iter().map(|a| [a[0], a[1]]).collect(),
        }
    }
    logits
}

#[test]
fn f_theta_1_forward_matches_reference_evaluator() {
    for (seed, (h, w)) in [(1u64, (48, 64)), (2, (16, 16)), (3, (30, 40))] {
        let cfg = ModelConfig::f_theta_1(4, h, w, Some(0.7));
        let p = build_model(&cfg, InitPolicy::Uniform, seed).unwrap();
        let x = random_tensor(&[2, 4, h, w], seed + 10);
        let (_, trace) = model_forward(&cfg, &p, &x, Mode::Eval, None).unwrap();
        let expect = reference_logits(&cfg, &p, &x);
        for (u, e) in trace.logits().chunks(2).zip(&expect) {
            assert!((u[0] - e[0]).abs() < 1e-10 && (u[1] - e[1]).abs() < 1e-10, "{u:?} vs {e:?}");
        }
    }
}
