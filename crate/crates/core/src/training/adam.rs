use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::autodiff::{Gradients, ParamSet};
use crate::tensor::{Scalar, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates per parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(BETA1, BETA2, EPSILON)
    }
}

impl AdamState {
    pub fn new(beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            beta1,
            beta2,
            epsilon,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.first.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.second.get(name).map(Vec::as_slice)
    }
}

/// One bias-corrected Adam step. Parameters without a gradient entry are
/// treated as having zero gradient.
pub fn adam_update<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &Gradients<T>,
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TrainError> {
    for (name, g) in grads.iter() {
        match params.get(name) {
            None => {
                return Err(TrainError::Contract(format!(
                    "gradient for unknown parameter {name}"
                )))
            }
            Some(p) if p.shape() != g.shape() => {
                return Err(TrainError::Contract(format!(
                    "gradient for {name} has shape {:?}, parameter has {:?}",
                    g.shape(),
                    p.shape()
                )))
            }
            Some(_) => {}
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    for (name, p) in params.iter_mut() {
        let n = p.len();
        let m = state
            .first
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; n]);
        let v = state
            .second
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; n]);
        if m.len() != n {
            return Err(TrainError::Contract(format!(
                "moment size for {name} does not match the parameter"
            )));
        }
        let g: Option<&Tensor<T>> = grads.get(name);
        for (i, x) in p.data_mut().iter_mut().enumerate() {
            let gi = g.map_or(0.0, |g| g.data()[i].as_f64());
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            *x = T::from_f64(x.as_f64() - lr * mhat / (vhat.sqrt() + eps));
        }
    }
    Ok(())
}
