use rand::Rng as _;

use super::config::{LayerSpec, ModelConfig, Shape};
use super::kernels::{self, BnCache, ConvGeom};
use super::params::{ParamRole, ParameterSet};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// A one-hot label over the two classes. Index 0 is `[1, 0]`.
pub type OneHot = [f64; 2];

pub fn one_hot(class: usize) -> OneHot {
    if class == 0 {
        [1.0, 0.0]
    } else {
        [0.0, 1.0]
    }
}

/// Predicted class of a probability pair; ties go to class 0.
pub fn argmax(p: [f64; 2]) -> usize {
    usize::from(p[1] > p[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// 0/1 mask over the linear layer's input features.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    values: Vec<f64>,
    keep_prob: f64,
}

impl DropoutMask {
    pub fn ones(width: usize) -> Self {
        DropoutMask {
            values: vec![1.0; width],
            keep_prob: 1.0,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn keep_prob(&self) -> f64 {
        self.keep_prob
    }

    pub fn width(&self) -> usize {
        self.values.len()
    }
}

/// Draws i.i.d. Bernoulli(`keep_prob`) entries. No rescaling is applied to
/// the kept features.
pub fn draw_dropout_mask(width: usize, keep_prob: f64, seed: u64) -> Result<DropoutMask> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(Error::pre(format!("keep probability {keep_prob} outside (0, 1]")));
    }
    let mut rng = rng::rng(seed);
    let values = (0..width)
        .map(|_| if keep_prob >= 1.0 || rng.random::<f64>() < keep_prob { 1.0 } else { 0.0 })
        .collect();
    Ok(DropoutMask { values, keep_prob })
}

/// Single-image convolution: `x` is `[C, H, W]`, `filters` is `[F, C, M, M]`.
/// Reads outside the image are zero.
pub fn conv2d_forward(x: &Tensor, filters: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (&[c, h, w], &[f, fc, m, m2]) = (x.shape(), filters.shape()) else {
        return Err(Error::config(format!(
            "conv: expected [C,H,W] input and [F,C,M,M] filters, got {:?} and {:?}",
            x.shape(),
            filters.shape()
        )));
    };
    if fc != c || m != m2 || stride == 0 || h + 2 * padding < m || w + 2 * padding < m {
        return Err(Error::config(format!(
            "conv: filters {:?} stride {stride} padding {padding} do not fit input {:?}",
            filters.shape(),
            x.shape()
        )));
    }
    let g = ConvGeom { n: 1, c, h, w, f, m, stride, pad: padding };
    let out = kernels::conv_forward(&g, x.data(), filters.data(), None);
    Tensor::new(vec![f, g.out_h(), g.out_w()], out)
}

enum Cache {
    Conv { input: Vec<f64>, geom: ConvGeom },
    BatchNorm(BnCache),
    Relu { active: Vec<bool> },
    MaxPool { arg: Vec<usize>, in_len: usize },
    AdaptivePool,
    Pass,
    Linear { input: Vec<f64> },
    Dropout { mask: Option<Vec<f64>> },
    Softmax,
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardTrace<'a> {
    config: &'a ModelConfig,
    params: &'a ParameterSet,
    input: Tensor,
    shapes: Vec<Shape>,
    caches: Vec<Cache>,
    mode: Mode,
    mask: Option<DropoutMask>,
    batch: usize,
    logits: Vec<f64>,
    output: Vec<f64>,
}

impl<'a> ForwardTrace<'a> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Output of the last executed layer, `[batch, width]` flattened.
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    pub fn input(&self) -> &Tensor {
        &self.input
    }

    pub fn mask(&self) -> Option<&DropoutMask> {
        self.mask.as_ref()
    }

    /// Linear outputs feeding the softmax, when the full model ran.
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn probs(&self) -> Vec<[f64; 2]> {
        self.output.chunks(2).map(|p| [p[0], p[1]]).collect()
    }

    /// Mean cross-entropy computed from the logits (stable for saturated
    /// softmax outputs), with the same probability clamp as [`bce_loss`].
    pub fn mean_loss(&self, labels: &[OneHot]) -> Result<f64> {
        check_labels(labels, self.batch)?;
        let lo = PROB_CLAMP.ln();
        let hi = (1.0 - PROB_CLAMP).ln();
        let mut total = 0.0;
        for (u, y) in self.logits.chunks(2).zip(labels) {
            let max = u[0].max(u[1]);
            let lse = max + ((u[0] - max).exp() + (u[1] - max).exp()).ln();
            for j in 0..2 {
                total -= y[j] * (u[j] - lse).clamp(lo, hi);
            }
        }
        Ok(total / self.batch as f64)
    }

    /// Re-runs the same forward pass from the stored input and mask.
    pub fn replay(&self) -> Result<ForwardTrace<'a>> {
        forward_range(self.config, self.params, &self.input, self.mode, self.mask.as_ref(), self.caches.len())
    }
}

fn check_labels(labels: &[OneHot], batch: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::pre(format!("{} labels for a batch of {batch}", labels.len())));
    }
    for y in labels {
        if *y != [1.0, 0.0] && *y != [0.0, 1.0] {
            return Err(Error::pre(format!("label {y:?} is not one-hot")));
        }
    }
    Ok(())
}

/// Runs the full model. `x` is one `[C,H,W]` image or a `[N,C,H,W]` batch;
/// batch normalisation always uses the statistics of this batch.
///
/// In [`Mode::Train`] a model with a dropout layer needs `dropout_mask`,
/// shared by every sample of the batch; in [`Mode::Eval`] dropout is the
/// identity and no mask may be given.
pub fn model_forward<'a>(
    config: &'a ModelConfig,
    params: &'a ParameterSet,
    x: &Tensor,
    mode: Mode,
    dropout_mask: Option<&DropoutMask>,
) -> Result<(Tensor, ForwardTrace<'a>)> {
    let trace = forward_range(config, params, x, mode, dropout_mask, config.layers.len())?;
    let probs = Tensor::new(vec![trace.batch, 2], trace.output.clone())?;
    Ok((probs, trace))
}

/// Runs the layers before the dropout/linear head in eval mode and returns
/// the `[N, D]` feature matrix.
pub fn forward_features<'a>(
    config: &'a ModelConfig,
    params: &'a ParameterSet,
    x: &Tensor,
) -> Result<(Tensor, ForwardTrace<'a>)> {
    let trace = forward_range(config, params, x, Mode::Eval, None, config.embedding_end())?;
    let d = trace.output.len() / trace.batch;
    let feats = Tensor::new(vec![trace.batch, d], trace.output.clone())?;
    Ok((feats, trace))
}

fn forward_range<'a>(
    config: &'a ModelConfig,
    params: &'a ParameterSet,
    x: &Tensor,
    mode: Mode,
    dropout_mask: Option<&DropoutMask>,
    end: usize,
) -> Result<ForwardTrace<'a>> {
    let shapes = config.shapes()?;
    let [c, h, w] = config.input;
    let batch = match x.shape() {
        s if s == [c, h, w] => 1,
        &[n, xc, xh, xw] if [xc, xh, xw] == [c, h, w] => n,
        s => {
            return Err(Error::pre(format!(
                "input {s:?} does not match model input {:?}",
                config.input
            )))
        }
    };
    let uses_dropout = config.layers[..end].iter().any(|l| matches!(l, LayerSpec::Dropout { .. }));
    let mask = match (mode, uses_dropout, dropout_mask) {
        (Mode::Train, true, Some(m)) => Some(m.clone()),
        (Mode::Train, true, None) => {
            return Err(Error::pre("training pass through a dropout layer needs a dropout mask"))
        }
        (_, _, None) => None,
        (_, _, Some(_)) => {
            return Err(Error::pre("dropout mask given for a pass where dropout is inactive"))
        }
    };
    let get = |layer: usize, role| {
        params
            .segment(layer, role)
            .ok_or_else(|| Error::pre(format!("parameters lack layer {layer} {role:?}")))
    };

    let mut act = x.data().to_vec();
    let mut caches = Vec::with_capacity(end);
    let mut logits = Vec::new();
    for (i, layer) in config.layers[..end].iter().enumerate() {
        let shape = shapes[i];
        let (next, cache) = match *layer {
            LayerSpec::Conv { filters, size, stride, padding, bias } => {
                let Shape::Map { c, h, w } = shape else { unreachable!() };
                let geom = ConvGeom { n: batch, c, h, w, f: filters, m: size, stride, pad: padding };
                let b = if bias { Some(get(i, ParamRole::Bias)?) } else { None };
                let out = kernels::conv_forward(&geom, &act, get(i, ParamRole::Weight)?, b);
                (out, Cache::Conv { input: act, geom })
            }
            LayerSpec::BatchNorm => {
                let (ch, sp) = shape.channels_spatial();
                let (out, cache) = kernels::batchnorm_forward(
                    &act,
                    batch,
                    ch,
                    sp,
                    get(i, ParamRole::Scale)?,
                    get(i, ParamRole::Shift)?,
                );
                (out, Cache::BatchNorm(cache))
            }
            LayerSpec::Relu => {
                let active: Vec<bool> = act.iter().map(|&v| v > 0.0).collect();
                let out = act.iter().map(|&v| v.max(0.0)).collect();
                (out, Cache::Relu { active })
            }
            LayerSpec::MaxPool { size } => {
                let Shape::Map { c, h, w } = shape else { unreachable!() };
                let (out, arg) = kernels::maxpool_forward(&act, batch * c, h, w, size);
                (out, Cache::MaxPool { arg, in_len: act.len() })
            }
            LayerSpec::AdaptivePool { out_h, out_w } => {
                let Shape::Map { c, h, w } = shape else { unreachable!() };
                let out = kernels::adaptive_pool_forward(&act, batch * c, h, w, out_h, out_w);
                (out, Cache::AdaptivePool)
            }
            LayerSpec::Flatten => (act, Cache::Pass),
            LayerSpec::Linear { inputs, outputs, bias } => {
                let b = if bias { Some(get(i, ParamRole::Bias)?) } else { None };
                let out = kernels::linear_forward(&act, batch, inputs, outputs, get(i, ParamRole::Weight)?, b);
                (out, Cache::Linear { input: act })
            }
            LayerSpec::Dropout { .. } => match &mask {
                Some(m) => {
                    let width = shape.size();
                    if m.width() != width {
                        return Err(Error::pre(format!(
                            "dropout mask has width {} but layer {i} has {width} features",
                            m.width()
                        )));
                    }
                    let mut out = act;
                    for row in out.chunks_mut(width) {
                        row.iter_mut().zip(m.values()).for_each(|(v, d)| *v *= d);
                    }
                    (out, Cache::Dropout { mask: Some(m.values().to_vec()) })
                }
                None => (act, Cache::Dropout { mask: None }),
            },
            LayerSpec::Softmax => {
                let k = shape.size();
                let p = kernels::softmax_rows(&act, batch, k);
                logits = act;
                (p, Cache::Softmax)
            }
        };
        act = next;
        caches.push(cache);
    }
    Ok(ForwardTrace {
        config,
        params,
        input: x.clone(),
        shapes,
        caches,
        mode,
        mask,
        batch,
        logits,
        output: act,
    })
}

/// Gradient of the mean cross-entropy over the traced batch with respect to
/// every trainable parameter. Uses `∂L/∂u = (p − y) / N` at the logits.
pub fn model_backward(trace: &ForwardTrace<'_>, labels: &[OneHot]) -> Result<ParameterSet> {
    if !matches!(trace.caches.last(), Some(Cache::Softmax)) {
        return Err(Error::pre("trace does not end in a softmax"));
    }
    check_labels(labels, trace.batch)?;
    let n = trace.batch as f64;
    let mut up = Vec::with_capacity(trace.output.len());
    for (p, y) in trace.output.chunks(2).zip(labels) {
        up.push((p[0] - y[0]) / n);
        up.push((p[1] - y[1]) / n);
    }
    backward_layers(trace, trace.caches.len() - 1, up)
}

/// Back-propagates `upstream` (gradient w.r.t. the trace's final output).
pub fn backward_from_output(trace: &ForwardTrace<'_>, upstream: &[f64]) -> Result<ParameterSet> {
    if upstream.len() != trace.output.len() {
        return Err(Error::pre(format!(
            "upstream gradient has {} entries, output has {}",
            upstream.len(),
            trace.output.len()
        )));
    }
    backward_layers(trace, trace.caches.len(), upstream.to_vec())
}

/// Gradient w.r.t. the input of layer `end` and all parameters before it.
fn backward_layers(trace: &ForwardTrace<'_>, end: usize, mut grad: Vec<f64>) -> Result<ParameterSet> {
    let mut grads = trace.params.zeros_like();
    let batch = trace.batch;
    for i in (0..end).rev() {
        let need_dx = i > 0;
        let layer = &trace.config.layers[i];
        grad = match (&trace.caches[i], layer) {
            (Cache::Conv { input, geom }, LayerSpec::Conv { bias, .. }) => {
                let wt = trace.params.segment(i, ParamRole::Weight).unwrap();
                let (dx, dw, db) = kernels::conv_backward(geom, input, wt, &grad, need_dx);
                grads.segment_mut(i, ParamRole::Weight).unwrap().copy_from_slice(&dw);
                if *bias {
                    grads.segment_mut(i, ParamRole::Bias).unwrap().copy_from_slice(&db);
                }
                dx
            }
            (Cache::BatchNorm(cache), _) => {
                let (ch, sp) = trace.shapes[i].channels_spatial();
                let scale = trace.params.segment(i, ParamRole::Scale).unwrap();
                let (dx, ds, dsh) = kernels::batchnorm_backward(cache, &grad, batch, ch, sp, scale);
                grads.segment_mut(i, ParamRole::Scale).unwrap().copy_from_slice(&ds);
                grads.segment_mut(i, ParamRole::Shift).unwrap().copy_from_slice(&dsh);
                dx
            }
            (Cache::Relu { active }, _) => grad
                .iter()
                .zip(active)
                .map(|(&g, &a)| if a { g } else { 0.0 })
                .collect(),
            (Cache::MaxPool { arg, in_len }, _) => {
                let mut dx = vec![0.0; *in_len];
                for (&g, &j) in grad.iter().zip(arg) {
                    dx[j] += g;
                }
                dx
            }
            (Cache::AdaptivePool, LayerSpec::AdaptivePool { out_h, out_w }) => {
                let Shape::Map { c, h, w } = trace.shapes[i] else { unreachable!() };
                kernels::adaptive_pool_backward(&grad, batch * c, h, w, *out_h, *out_w)
            }
            (Cache::Pass, _) => grad,
            (Cache::Linear { input }, LayerSpec::Linear { inputs, outputs, bias }) => {
                let wt = trace.params.segment(i, ParamRole::Weight).unwrap();
                let (dx, dw, db) = kernels::linear_backward(input, &grad, batch, *inputs, *outputs, wt);
                grads.segment_mut(i, ParamRole::Weight).unwrap().copy_from_slice(&dw);
                if *bias {
                    grads.segment_mut(i, ParamRole::Bias).unwrap().copy_from_slice(&db);
                }
                dx
            }
            (Cache::Dropout { mask }, _) => match mask {
                Some(m) => {
                    let width = m.len();
                    let mut g = grad;
                    for row in g.chunks_mut(width) {
                        row.iter_mut().zip(m).for_each(|(v, d)| *v *= d);
                    }
                    g
                }
                None => grad,
            },
            (Cache::Softmax, _) => {
                return Err(Error::pre("softmax can only be the final layer"));
            }
            _ => unreachable!("cache does not match layer {i}"),
        };
    }
    Ok(grads)
}

/// Probabilities are clamped into `[PROB_CLAMP, 1 − PROB_CLAMP]` inside the loss.
pub const PROB_CLAMP: f64 = 1e-12;

/// `−y₀ ln p₀ − y₁ ln p₁`
pub fn bce_loss(p: [f64; 2], y: OneHot) -> Result<f64> {
    check_labels(&[y], 1)?;
    if p.iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
        return Err(Error::Numeric(format!("probabilities {p:?} outside (0, 1]")));
    }
    Ok(-(0..2)
        .map(|j| y[j] * p[j].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).ln())
        .sum::<f64>())
}

pub fn bce_loss_batch(probs: &[[f64; 2]], labels: &[OneHot]) -> Result<f64> {
    check_labels(labels, probs.len())?;
    let mut total = 0.0;
    for (p, y) in probs.iter().zip(labels) {
        total += bce_loss(*p, *y)?;
    }
    Ok(total / probs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_model, InitPolicy};
    use approx::assert_abs_diff_eq;

    fn image(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::rng(seed);
        Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
    }

    #[test]
    fn conv_of_ones_is_window_sum() {
        let x = Tensor::filled(&[1, 3, 3], 1.0);
        let w = Tensor::filled(&[1, 1, 2, 2], 1.0);
        let z = conv2d_forward(&x, &w, 1, 0).unwrap();
        assert_eq!(z.shape(), &[1, 2, 2]);
        assert!(z.data().iter().all(|&v| v == 4.0));
        let zero = conv2d_forward(&image(&[2, 5, 5], 1), &Tensor::zeros(&[3, 2, 3, 3]), 2, 1).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        assert!(conv2d_forward(&x, &Tensor::zeros(&[1, 2, 2, 2]), 1, 0).is_err());
    }

    #[test]
    fn loss_values() {
        assert_abs_diff_eq!(bce_loss([0.5, 0.5], [1.0, 0.0]).unwrap(), std::f64::consts::LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(bce_loss([0.8, 0.2], [0.0, 1.0]).unwrap(), 1.6094379124341003, epsilon = 1e-12);
        let eps = 1e-9;
        assert_abs_diff_eq!(bce_loss([1.0 - eps, eps], [1.0, 0.0]).unwrap(), eps, epsilon = 1e-15);
        assert!(matches!(bce_loss([0.0, 1.0], [1.0, 0.0]), Err(Error::Numeric(_))));
        assert!(bce_loss([0.5, 0.5], [0.5, 0.5]).is_err());
    }

    #[test]
    fn zero_parameters_give_even_odds() {
        let cfg = ModelConfig::f_theta_1(3, 16, 16, None);
        let p = build_model(&cfg, InitPolicy::Zeros, 0).unwrap();
        let (probs, _) = model_forward(&cfg, &p, &image(&[2, 3, 16, 16], 4), Mode::Eval, None).unwrap();
        assert_eq!(probs.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn mask_rules() {
        let cfg = ModelConfig::f_theta_1(3, 16, 16, Some(0.7));
        let p = build_model(&cfg, InitPolicy::Uniform, 0).unwrap();
        let x = image(&[3, 16, 16], 2);
        assert!(model_forward(&cfg, &p, &x, Mode::Train, None).is_err());
        let m = DropoutMask::ones(768);
        assert!(model_forward(&cfg, &p, &x, Mode::Eval, Some(&m)).is_err());
        assert!(model_forward(&cfg, &p, &x, Mode::Train, Some(&DropoutMask::ones(10))).is_err());
        let (train, _) = model_forward(&cfg, &p, &x, Mode::Train, Some(&m)).unwrap();
        let (eval, _) = model_forward(&cfg, &p, &x, Mode::Eval, None).unwrap();
        assert_eq!(train, eval);
    }

    #[test]
    fn dropout_masks() {
        let full = draw_dropout_mask(50, 1.0, 3).unwrap();
        assert!(full.values().iter().all(|&v| v == 1.0));
        let m = draw_dropout_mask(100_000, 0.7, 11).unwrap();
        let mean = m.values().iter().sum::<f64>() / 1e5;
        assert!((0.69..=0.71).contains(&mean), "{mean}");
        assert!(m.values().iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(m, draw_dropout_mask(100_000, 0.7, 11).unwrap());
        assert!(draw_dropout_mask(4, 0.0, 1).is_err());
    }

    #[test]
    fn replay_is_bit_identical() {
        let cfg = ModelConfig::f_theta_1(3, 16, 16, Some(0.7));
        let p = build_model(&cfg, InitPolicy::Uniform, 5).unwrap();
        let m = draw_dropout_mask(768, 0.7, 1).unwrap();
        let (_, trace) = model_forward(&cfg, &p, &image(&[3, 3, 16, 16], 6), Mode::Train, Some(&m)).unwrap();
        let again = trace.replay().unwrap();
        assert_eq!(trace.output(), again.output());
    }

    #[test]
    fn mean_loss_matches_bce_batch() {
        let cfg = ModelConfig::f_theta_0(1, 8, 8, 3);
        let p = build_model(&cfg, InitPolicy::Uniform, 2).unwrap();
        let (_, t) = model_forward(&cfg, &p, &image(&[4, 1, 8, 8], 3), Mode::Eval, None).unwrap();
        let labels = [one_hot(0), one_hot(1), one_hot(1), one_hot(0)];
        let a = t.mean_loss(&labels).unwrap();
        let b = bce_loss_batch(&t.probs(), &labels).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }
}
