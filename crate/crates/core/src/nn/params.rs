use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::config::{LayerSpec, ModelConfig};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Weight,
    Bias,
    Scale,
    Shift,
}

/// One contiguous run of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    /// Index into `ModelConfig::layers`.
    pub layer: usize,
    /// Reporting group: `conv{i}` for a convolution and the normalisation
    /// that follows it, `linear{j}` for a linear layer.
    pub group: String,
    pub role: ParamRole,
    pub offset: usize,
    pub len: usize,
}

pub type Layout = Arc<[Segment]>;

/// Builds the parameter layout of a validated config.
pub fn layout(config: &ModelConfig) -> Result<Layout> {
    let shapes = config.shapes()?;
    let mut segs = Vec::new();
    let mut offset = 0;
    let mut push = |segs: &mut Vec<Segment>, layer, group: &str, role, len| {
        segs.push(Segment {
            layer,
            group: group.to_string(),
            role,
            offset,
            len,
        });
        offset += len;
    };
    let (mut convs, mut linears) = (0, 0);
    let mut group = String::from("input");
    for (i, layer) in config.layers.iter().enumerate() {
        let (c_in, _) = shapes[i].channels_spatial();
        match *layer {
            LayerSpec::Conv { filters, size, bias, .. } => {
                group = format!("conv{convs}");
                convs += 1;
                push(&mut segs, i, &group, ParamRole::Weight, filters * c_in * size * size);
                if bias {
                    push(&mut segs, i, &group, ParamRole::Bias, filters);
                }
            }
            LayerSpec::BatchNorm => {
                push(&mut segs, i, &group, ParamRole::Scale, c_in);
                push(&mut segs, i, &group, ParamRole::Shift, c_in);
            }
            LayerSpec::Linear { inputs, outputs, bias } => {
                group = format!("linear{linears}");
                linears += 1;
                push(&mut segs, i, &group, ParamRole::Weight, inputs * outputs);
                if bias {
                    push(&mut segs, i, &group, ParamRole::Bias, outputs);
                }
            }
            _ => {}
        }
    }
    Ok(segs.into())
}

/// Flat trainable parameters together with their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    values: Vec<f64>,
    layout: Layout,
}

impl ParameterSet {
    pub fn from_values(layout: Layout, values: Vec<f64>) -> Result<Self> {
        let total = layout.last().map_or(0, |s| s.offset + s.len);
        if total != values.len() {
            return Err(Error::pre(format!(
                "layout expects {total} parameters, got {}",
                values.len()
            )));
        }
        Ok(ParameterSet { values, layout })
    }

    pub fn zeros_like(&self) -> Self {
        ParameterSet {
            values: vec![0.0; self.values.len()],
            layout: self.layout.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn segment(&self, layer: usize, role: ParamRole) -> Option<&[f64]> {
        self.layout
            .iter()
            .find(|s| s.layer == layer && s.role == role)
            .map(|s| &self.values[s.offset..s.offset + s.len])
    }

    pub fn segment_mut(&mut self, layer: usize, role: ParamRole) -> Option<&mut [f64]> {
        let s = self.layout.iter().find(|s| s.layer == layer && s.role == role)?;
        Some(&mut self.values[s.offset..s.offset + s.len])
    }

    /// Reporting groups in layout order with their concatenated values.
    pub fn groups(&self) -> Vec<(String, Vec<f64>)> {
        let mut out: Vec<(String, Vec<f64>)> = Vec::new();
        for s in self.layout.iter() {
            let vals = &self.values[s.offset..s.offset + s.len];
            match out.last_mut() {
                Some((g, v)) if *g == s.group => v.extend_from_slice(vals),
                _ => out.push((s.group.clone(), vals.to_vec())),
            }
        }
        out
    }

    pub fn same_layout(&self, other: &ParameterSet) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }

    fn check_layout(&self, other: &ParameterSet) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::pre("parameter layouts differ"))
        }
    }

    /// `self + c · other`
    pub fn axpy(&self, c: f64, other: &ParameterSet) -> Result<ParameterSet> {
        self.check_layout(other)?;
        Ok(ParameterSet {
            values: self.values.iter().zip(&other.values).map(|(a, b)| a + c * b).collect(),
            layout: self.layout.clone(),
        })
    }

    pub fn add_assign(&mut self, other: &ParameterSet) -> Result<()> {
        self.check_layout(other)?;
        self.values.iter_mut().zip(&other.values).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn scale(&self, c: f64) -> ParameterSet {
        ParameterSet {
            values: self.values.iter().map(|v| v * c).collect(),
            layout: self.layout.clone(),
        }
    }
}

/// One plain gradient-descent step, `θ − lr·∇`.
pub fn sgd_step(params: &ParameterSet, grads: &ParameterSet, lr: f64) -> Result<ParameterSet> {
    params.axpy(-lr, grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    /// Weights uniform in `±sqrt(6 / fan_in)`, biases and shifts 0, scales 1.
    #[default]
    Uniform,
    Zeros,
}

pub fn build_model(config: &ModelConfig, init: InitPolicy, seed: u64) -> Result<ParameterSet> {
    let layout = layout(config)?;
    let total = layout.last().map_or(0, |s| s.offset + s.len);
    let mut values = vec![0.0; total];
    if init == InitPolicy::Uniform {
        let shapes = config.shapes()?;
        let mut rng = rng::rng(seed);
        for s in layout.iter() {
            let slot = &mut values[s.offset..s.offset + s.len];
            match (s.role, &config.layers[s.layer]) {
                (ParamRole::Weight, LayerSpec::Conv { size, .. }) => {
                    let fan_in = shapes[s.layer].channels_spatial().0 * size * size;
                    fill_uniform(slot, (6.0 / fan_in as f64).sqrt(), &mut rng);
                }
                (ParamRole::Weight, LayerSpec::Linear { inputs, .. }) => {
                    fill_uniform(slot, (6.0 / *inputs as f64).sqrt(), &mut rng);
                }
                (ParamRole::Scale, _) => slot.fill(1.0),
                _ => {}
            }
        }
    }
    ParameterSet::from_values(layout, values)
}

fn fill_uniform(slot: &mut [f64], bound: f64, rng: &mut rng::Rng) {
    for v in slot {
        *v = rng.random_range(-bound..bound);
    }
}
