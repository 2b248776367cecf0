use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::store::ParameterStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::AutodiffError;
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

/// Fully connected network shape: `hidden_layers` rectified layers of
/// `hidden_width` units followed by a linear output layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(input_dim: usize, output_dim: usize, hidden_layers: usize, hidden_width: usize) -> Self {
        Self {
            input_dim,
            output_dim,
            hidden_layers,
            hidden_width,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<(), AutodiffError> {
        if self.input_dim == 0 || self.output_dim == 0 || (self.hidden_layers > 0 && self.hidden_width == 0) {
            return Err(AutodiffError::InvalidSpec(format!("{self:?}")));
        }
        Ok(())
    }

    /// Whether the depth and width sit inside the searched architecture range
    /// (2–5 hidden layers, 10–1000 units).
    pub fn in_search_range(&self) -> bool {
        (2..=5).contains(&self.hidden_layers) && (10..=1000).contains(&self.hidden_width)
    }

    /// `(fan_in, fan_out)` of every layer in order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layers + 1);
        let mut prev = self.input_dim;
        for _ in 0..self.hidden_layers {
            dims.push((prev, self.hidden_width));
            prev = self.hidden_width;
        }
        dims.push((prev, self.output_dim));
        dims
    }
}

pub fn weight_name(prefix: &str, layer: usize) -> String {
    format!("{prefix}/l{layer}/w")
}

pub fn bias_name(prefix: &str, layer: usize) -> String {
    format!("{prefix}/l{layer}/b")
}

/// He initialization: weights ~ N(0, 2 / fan_in), biases zero.
pub fn kaiming_init(
    store: &mut ParameterStore,
    prefix: &str,
    spec: &MlpSpec,
    rng: &mut RngStream,
) -> Result<(), AutodiffError> {
    spec.validate()?;
    for (layer, (fan_in, fan_out)) in spec.layer_dims().into_iter().enumerate() {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let data: Vec<f64> = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
        store.insert(weight_name(prefix, layer), Tensor::new(vec![fan_in, fan_out], data)?)?;
        store.insert(bias_name(prefix, layer), Tensor::zeros(&[fan_out]))?;
    }
    Ok(())
}

/// Applies the MLP stored under `prefix` to the rows of `x`.
pub fn mlp_forward(
    tape: &mut Tape,
    x: Var,
    store: &ParameterStore,
    prefix: &str,
    spec: &MlpSpec,
) -> Result<Var, AutodiffError> {
    mlp_forward_with(tape, x, spec, |tape, name| store.load(tape, name), prefix)
}

/// Same as [`mlp_forward`] but with weights recorded as constants.
pub fn mlp_forward_frozen(
    tape: &mut Tape,
    x: Var,
    store: &ParameterStore,
    prefix: &str,
    spec: &MlpSpec,
) -> Result<Var, AutodiffError> {
    mlp_forward_with(tape, x, spec, |tape, name| store.load_frozen(tape, name), prefix)
}

fn mlp_forward_with(
    tape: &mut Tape,
    x: Var,
    spec: &MlpSpec,
    mut load: impl FnMut(&mut Tape, &str) -> Result<Var, AutodiffError>,
    prefix: &str,
) -> Result<Var, AutodiffError> {
    let cols = tape.value(x).cols();
    if cols != spec.input_dim {
        return Err(AutodiffError::ShapeMismatch {
            op: "mlp input",
            left: vec![spec.input_dim],
            right: tape.value(x).shape().to_vec(),
        });
    }
    let mut h = x;
    let last = spec.hidden_layers;
    for layer in 0..=last {
        let w = load(tape, &weight_name(prefix, layer))?;
        let b = load(tape, &bias_name(prefix, layer))?;
        h = tape.linear(h, w, Some(b))?;
        if layer < last {
            h = match spec.activation {
                Activation::Relu => tape.relu(h),
            };
        }
    }
    Ok(h)
}
