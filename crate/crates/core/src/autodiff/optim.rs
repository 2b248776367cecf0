use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::store::ParameterStore;
use super::tensor::Tensor;
use super::AutodiffError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    /// θ ← θ − λ g
    PlainGradient,
    /// Bias-corrected first/second moment update.
    #[default]
    AdaptiveMoment,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::AdaptiveMoment,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn plain(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::PlainGradient,
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), AutodiffError> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && self.beta1 > 0.0
            && (0.0..1.0).contains(&self.beta2)
            && self.beta2 > 0.0
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(AutodiffError::InvalidSpec(format!("optimizer {self:?}")))
        }
    }
}

/// Applies one update to every parameter that has a gradient entry.
///
/// Parameters without an entry are treated as having a zero gradient, which
/// still advances their moment estimates in adaptive mode.
pub fn optimizer_step(
    store: &mut ParameterStore,
    grads: &BTreeMap<String, Tensor>,
    cfg: &OptimizerConfig,
) -> Result<(), AutodiffError> {
    for name in grads.keys() {
        let p = store.get(name)?;
        if p.shape() != grads[name].shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "optimizer_step",
                left: p.shape().to_vec(),
                right: grads[name].shape().to_vec(),
            });
        }
    }
    let grads = store.complete_gradients(grads);
    store.step += 1;
    let lr = cfg.learning_rate;
    match cfg.kind {
        OptimizerKind::PlainGradient => {
            for (name, g) in &grads {
                let p = store.get_mut(name)?;
                for (pi, gi) in p.data_mut().iter_mut().zip(g.data()) {
                    *pi -= lr * gi;
                }
            }
        }
        OptimizerKind::AdaptiveMoment => {
            let t = store.step as i32;
            let c1 = 1.0 - cfg.beta1.powi(t);
            let c2 = 1.0 - cfg.beta2.powi(t);
            let mut moments = store.moments.take().unwrap_or_default();
            for (name, g) in &grads {
                let m = moments
                    .first
                    .entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(g.shape()));
                let v = moments
                    .second
                    .entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(g.shape()));
                let p = store.params_mut_unchecked(name);
                for (((pi, gi), mi), vi) in p
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(m.data_mut())
                    .zip(v.data_mut())
                {
                    *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                    *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                    let m_hat = *mi / c1;
                    let v_hat = *vi / c2;
                    *pi -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
                }
            }
            store.moments = Some(moments);
        }
    }
    Ok(())
}

impl ParameterStore {
    fn params_mut_unchecked(&mut self, name: &str) -> &mut Tensor {
        self.get_mut(name).expect("gradient keys come from the store")
    }
}
