use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One layer of a feed-forward CNN.
///
/// The JSON form is internally tagged, e.g.
/// `{"kind": "conv", "filters": 32, "size": 3, "stride": 2, "padding": 1}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        filters: usize,
        size: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    /// Per-channel normalisation with current-batch statistics and a
    /// trainable scale and shift.
    #[serde(rename = "batchnorm")]
    BatchNorm,
    Relu,
    /// Non-overlapping max pooling with floor semantics, except that a
    /// dimension smaller than the window pools its whole extent into one cell.
    #[serde(rename = "maxpool")]
    MaxPool { size: usize },
    /// Average pooling onto a fixed `out_h × out_w` grid.
    AdaptivePool { out_h: usize, out_w: usize },
    Flatten,
    Linear {
        inputs: usize,
        outputs: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    /// Element-wise 0/1 mask on the features; active in training passes only.
    Dropout { keep_prob: f64 },
    Softmax,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::BatchNorm => "batchnorm",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::AdaptivePool { .. } => "adaptive_pool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Softmax => "softmax",
        }
    }
}

/// Per-sample activation shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Map { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl Shape {
    pub fn size(&self) -> usize {
        match *self {
            Shape::Map { c, h, w } => c * h * w,
            Shape::Flat(d) => d,
        }
    }

    /// Channel count and spatial size, treating a flat vector as `d` channels of one pixel.
    pub(crate) fn channels_spatial(&self) -> (usize, usize) {
        match *self {
            Shape::Map { c, h, w } => (c, h * w),
            Shape::Flat(d) => (d, 1),
        }
    }
}

/// Declarative CNN architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    /// `[channels, height, width]`
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl ModelConfig {
    /// Builds the two-way variant of the four-block CNN with stride-2 blocks,
    /// an adaptive pool onto a 4×6 grid and a 768-wide linear head.
    ///
    /// With three input channels the parameter count is 30434, independent of
    /// the input resolution.
    pub fn f_theta_1(channels: usize, height: usize, width: usize, keep_prob: Option<f64>) -> Self {
        let mut layers = Vec::new();
        for stride in [2, 2, 2, 1] {
            layers.extend(conv_block(32, stride));
        }
        layers.push(LayerSpec::AdaptivePool { out_h: 4, out_w: 6 });
        layers.push(LayerSpec::Flatten);
        if let Some(keep_prob) = keep_prob {
            layers.push(LayerSpec::Dropout { keep_prob });
        }
        layers.push(LayerSpec::Linear {
            inputs: 768,
            outputs: 2,
            bias: true,
        });
        layers.push(LayerSpec::Softmax);
        ModelConfig {
            name: "f_theta_1".into(),
            input: [channels, height, width],
            layers,
        }
    }

    /// The referenced four-block CNN (stride 1, pad 1, 2×2 pooling) with a
    /// two-way head sized to whatever the input resolution flattens to.
    /// At 84×84 the head is 800×2.
    pub fn f_theta_0(channels: usize, height: usize, width: usize, filters: usize) -> Self {
        let mut layers = Vec::new();
        for _ in 0..4 {
            layers.extend(conv_block(filters, 1));
        }
        let (mut h, mut w) = (height, width);
        for _ in 0..4 {
            h = pooled(h, 2);
            w = pooled(w, 2);
        }
        layers.push(LayerSpec::Flatten);
        layers.push(LayerSpec::Linear {
            inputs: filters * h * w,
            outputs: 2,
            bias: true,
        });
        layers.push(LayerSpec::Softmax);
        ModelConfig {
            name: "f_theta_0".into(),
            input: [channels, height, width],
            layers,
        }
    }

    /// Single-channel, single-filter convolution (no bias, no padding,
    /// stride 1) feeding a bias-free two-way linear head. This is the
    /// minimal model the gradient-difference analysis reasons about.
    pub fn proof_model(side: usize, filter: usize) -> Self {
        let out = (side + 1).saturating_sub(filter);
        ModelConfig {
            name: "proof".into(),
            input: [1, side, side],
            layers: vec![
                LayerSpec::Conv {
                    filters: 1,
                    size: filter,
                    stride: 1,
                    padding: 0,
                    bias: false,
                },
                LayerSpec::Flatten,
                LayerSpec::Linear {
                    inputs: out * out,
                    outputs: 2,
                    bias: false,
                },
                LayerSpec::Softmax,
            ],
        }
    }

    pub fn input_shape(&self) -> Shape {
        let [c, h, w] = self.input;
        Shape::Map { c, h, w }
    }

    /// Checks shape compatibility and returns the per-sample input shape of
    /// every layer followed by the final output shape.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        if self.input.iter().any(|&d| d == 0) {
            return Err(Error::config(format!("input shape {:?} has a zero dimension", self.input)));
        }
        let mut shapes = vec![self.input_shape()];
        for (i, layer) in self.layers.iter().enumerate() {
            let cur = *shapes.last().unwrap();
            let bad = |why: String| Error::config(format!("layer {i} ({}): {why}", layer.kind()));
            let next = match (*layer, cur) {
                (LayerSpec::Conv { filters, size, stride, padding, .. }, Shape::Map { h, w, .. }) => {
                    if filters == 0 || size == 0 || stride == 0 {
                        return Err(bad("filter count, size and stride must be at least 1".into()));
                    }
                    if h + 2 * padding < size || w + 2 * padding < size {
                        return Err(bad(format!(
                            "padded input {}x{} is smaller than the {size}x{size} filter",
                            h + 2 * padding,
                            w + 2 * padding
                        )));
                    }
                    Shape::Map {
                        c: filters,
                        h: (h + 2 * padding - size) / stride + 1,
                        w: (w + 2 * padding - size) / stride + 1,
                    }
                }
                (LayerSpec::BatchNorm | LayerSpec::Relu, s) => s,
                (LayerSpec::MaxPool { size }, Shape::Map { c, h, w }) => {
                    if size == 0 {
                        return Err(bad("pool size must be at least 1".into()));
                    }
                    Shape::Map { c, h: pooled(h, size), w: pooled(w, size) }
                }
                (LayerSpec::AdaptivePool { out_h, out_w }, Shape::Map { c, .. }) => {
                    if out_h == 0 || out_w == 0 {
                        return Err(bad("output grid must be non-empty".into()));
                    }
                    Shape::Map { c, h: out_h, w: out_w }
                }
                (LayerSpec::Flatten, s) => Shape::Flat(s.size()),
                (LayerSpec::Linear { inputs, outputs, .. }, Shape::Flat(d)) => {
                    if inputs != d {
                        return Err(bad(format!(
                            "declared {inputs} inputs but the flattened feature width is {d}"
                        )));
                    }
                    if outputs == 0 {
                        return Err(bad("at least one output required".into()));
                    }
                    Shape::Flat(outputs)
                }
                (LayerSpec::Dropout { keep_prob }, s) => {
                    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
                        return Err(bad(format!("keep probability {keep_prob} outside (0, 1]")));
                    }
                    s
                }
                (LayerSpec::Softmax, Shape::Flat(d)) => Shape::Flat(d),
                (_, s) => return Err(bad(format!("incompatible input shape {s:?}"))),
            };
            shapes.push(next);
        }
        match (self.layers.last(), shapes.last()) {
            (Some(LayerSpec::Softmax), Some(Shape::Flat(2))) => Ok(shapes),
            _ => Err(Error::config(format!(
                "model '{}' must end in a softmax over exactly 2 logits",
                self.name
            ))),
        }
    }

    pub fn has_dropout(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, LayerSpec::Dropout { .. }))
    }

    /// Index of the first dropout/linear layer after the last spatial layer:
    /// everything before it is the feature extractor.
    pub fn embedding_end(&self) -> usize {
        self.layers
            .iter()
            .position(|l| matches!(l, LayerSpec::Dropout { .. } | LayerSpec::Linear { .. }))
            .unwrap_or(self.layers.len())
    }

    pub fn with_channels(&self, channels: usize) -> Self {
        let mut c = self.clone();
        c.input[0] = channels;
        c
    }

    pub fn without_dropout(&self) -> Self {
        let mut c = self.clone();
        c.layers.retain(|l| !matches!(l, LayerSpec::Dropout { .. }));
        c
    }
}

pub(crate) fn pooled(len: usize, k: usize) -> usize {
    (len / k).max(1)
}

fn conv_block(filters: usize, stride: usize) -> [LayerSpec; 4] {
    [
        LayerSpec::Conv {
            filters,
            size: 3,
            stride,
            padding: 1,
            bias: true,
        },
        LayerSpec::BatchNorm,
        LayerSpec::Relu,
        LayerSpec::MaxPool { size: 2 },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f_theta_1_chains_at_several_resolutions() {
        for (h, w) in [(480, 640), (48, 64), (16, 16), (24, 32)] {
            let shapes = ModelConfig::f_theta_1(3, h, w, Some(0.7)).shapes().unwrap();
            assert_eq!(*shapes.last().unwrap(), Shape::Flat(2));
        }
    }

    #[test]
    fn f_theta_0_at_84_has_800_features() {
        let cfg = ModelConfig::f_theta_0(3, 84, 84, 32);
        match cfg.layers[cfg.layers.len() - 2] {
            LayerSpec::Linear { inputs, .. } => assert_eq!(inputs, 800),
            _ => unreachable!(),
        }
        cfg.shapes().unwrap();
    }

    #[test]
    fn mismatched_head_is_a_config_error_naming_the_layer() {
        let mut cfg = ModelConfig::f_theta_1(3, 48, 64, None);
        let n = cfg.layers.len();
        cfg.layers[n - 2] = LayerSpec::Linear { inputs: 700, outputs: 2, bias: true };
        let err = cfg.shapes().unwrap_err().to_string();
        assert!(err.contains("linear"), "{err}");
        assert!(err.contains("768"), "{err}");
    }

    #[test]
    fn filter_larger_than_input_is_rejected() {
        let cfg = ModelConfig::proof_model(3, 5);
        assert!(matches!(cfg.shapes(), Err(Error::Config(_))));
    }

    #[test]
    fn json_round_trip() {
        let cfg = ModelConfig::f_theta_1(4, 48, 64, Some(0.7));
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert!(text.contains("\"kind\": \"batchnorm\""));
        let back: ModelConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let minimal: LayerSpec =
            serde_json::from_str(r#"{"kind": "conv", "filters": 4, "size": 3}"#).unwrap();
        assert_eq!(
            minimal,
            LayerSpec::Conv { filters: 4, size: 3, stride: 1, padding: 0, bias: true }
        );
    }
}
