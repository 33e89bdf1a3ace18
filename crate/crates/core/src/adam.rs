//! Bias-corrected Adam. Moments are kept per parameter path and the update
//! walks paths in sorted order, so a step is a deterministic function of
//! (parameters, gradients, state, learning rate).

use std::collections::BTreeMap;

use crate::diffcore::{ParameterSet, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub first: Tensor,
    pub second: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub moments: BTreeMap<String, Moments>,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState::new()
    }
}

impl AdamState {
    pub fn new() -> Self {
        AdamState {
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            moments: BTreeMap::new(),
        }
    }
}

/// One optimizer step over every gradient entry. Parameters without a
/// gradient, and parameters marked non-trainable, are left untouched
/// (their moments do not decay either).
pub fn adam_step(
    params: &mut ParameterSet,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::config(format!("learning rate {lr} must be finite and >= 0")));
    }
    state.step += 1;
    let t = state.step;
    let bias1 = 1.0 - state.beta1.powi(t as i32);
    let bias2 = 1.0 - state.beta2.powi(t as i32);
    for (path, grad) in grads {
        let param = match params.get_mut(path) {
            Some(p) => p,
            None => {
                return Err(Error::config(format!(
                    "gradient for unknown parameter '{path}'"
                )))
            }
        };
        if !param.trainable {
            continue;
        }
        if param.tensor.shape() != grad.shape() {
            return Err(Error::shape(format!(
                "gradient for '{path}' has shape {:?}, parameter is {:?}",
                grad.shape(),
                param.tensor.shape()
            )));
        }
        if grad.data().iter().any(|g| !g.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite gradient for parameter '{path}'"
            )));
        }
        let entry = state.moments.entry(path.clone()).or_insert_with(|| Moments {
            first: Tensor::zeros(grad.shape().to_vec()),
            second: Tensor::zeros(grad.shape().to_vec()),
        });
        let m = entry.first.data_mut();
        let v = entry.second.data_mut();
        let theta = param.tensor.data_mut();
        for ((m_i, v_i), (theta_i, &g)) in m
            .iter_mut()
            .zip(v.iter_mut())
            .zip(theta.iter_mut().zip(grad.data()))
        {
            *m_i = state.beta1 * *m_i + (1.0 - state.beta1) * g;
            *v_i = state.beta2 * *v_i + (1.0 - state.beta2) * g * g;
            let m_hat = *m_i / bias1;
            let v_hat = *v_i / bias2;
            *theta_i -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}
