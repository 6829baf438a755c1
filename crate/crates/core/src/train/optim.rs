//! Adam with decayed-polynomial learning rate and L2 regularization folded
//! into the gradient.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::layers::ParamVisit;
use crate::model::Model;
use crate::tensor::Scalar;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGrad(String),
    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),
}

/// `lr0 * (1 - step/max_steps)^power`, clamped to 0 past the horizon.
pub fn poly_lr(step: u64, max_steps: u64, lr0: f64, power: f64) -> f64 {
    if step >= max_steps {
        return 0.0;
    }
    lr0 * (1.0 - step as f64 / max_steps as f64).powf(power)
}

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// First and second moment estimates, keyed by parameter name. The key set
/// is pinned by the model's traversal order, so updates and checkpoints are
/// deterministic.
pub struct AdamState<T: Scalar> {
    pub step: u64,
    pub m: BTreeMap<String, Vec<T>>,
    pub v: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(model: &Model<T>) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        model.visit("model", &mut |name, t| {
            m.insert(name.clone(), vec![T::ZERO; t.numel()]);
            v.insert(name, vec![T::ZERO; t.numel()]);
        });
        AdamState { step: 0, m, v }
    }
}

/// One Adam update over every parameter from its accumulated gradient.
/// L2 regularization enters as `grad + weight_decay * param` before the
/// moment update. Fails without touching anything if any gradient is
/// non-finite.
pub fn adam_step<T: Scalar>(
    model: &mut Model<T>,
    state: &mut AdamState<T>,
    lr: f64,
    hp: &AdamHyper,
) -> Result<(), OptimError> {
    // Validation pass first so a poisoned batch cannot half-update the model.
    let mut poisoned: Option<String> = None;
    model.visit("model", &mut |name, t| {
        if poisoned.is_some() {
            return;
        }
        match t.grad() {
            Some(g) => {
                if g.iter().any(|v| !v.is_finite()) {
                    poisoned = Some(name);
                }
            }
            None => poisoned = Some(name),
        }
    });
    if let Some(name) = poisoned {
        return Err(OptimError::NonFiniteGrad(name));
    }

    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - hp.beta1.powi(t as i32);
    let bc2 = 1.0 - hp.beta2.powi(t as i32);
    let (m_map, v_map) = (&mut state.m, &mut state.v);
    let mut missing: Option<String> = None;
    model.visit_mut("model", &mut |name, tensor| {
        if missing.is_some() {
            return;
        }
        let grad = tensor.grad().expect("validated above");
        let (Some(m), Some(v)) = (m_map.get_mut(&name), v_map.get_mut(&name)) else {
            missing = Some(name);
            return;
        };
        tensor.update_data(|data| {
            for i in 0..data.len() {
                let g = grad[i].to_f64() + hp.weight_decay * data[i].to_f64();
                let mi = hp.beta1 * m[i].to_f64() + (1.0 - hp.beta1) * g;
                let vi = hp.beta2 * v[i].to_f64() + (1.0 - hp.beta2) * g * g;
                m[i] = T::from_f64(mi);
                v[i] = T::from_f64(vi);
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                data[i] = T::from_f64(data[i].to_f64() - lr * mhat / (vhat.sqrt() + hp.eps));
            }
        });
    });
    match missing {
        Some(name) => Err(OptimError::MissingGrad(name)),
        None => Ok(()),
    }
}
