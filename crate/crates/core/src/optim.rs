//! AdamW with decoupled weight decay, applied to the trainable parameter
//! groups of a model. Used both for source training and for per-utterance
//! adaptation.

use std::collections::BTreeMap;

use crate::error::{contract, Result};
use crate::matrix::Matrix;
use crate::model::ModelState;

#[derive(Debug, Clone, Copy)]
pub struct AdamWParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        AdamWParams { lr: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, weight_decay: 1e-4 }
    }
}

/// First/second moment accumulators keyed by parameter group name.
#[derive(Debug, Clone, Default)]
pub struct OptState {
    m: BTreeMap<String, Matrix>,
    v: BTreeMap<String, Matrix>,
    step: u64,
}

impl OptState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected update over the trainable parameters. Frozen groups
/// are untouched. A trainable parameter absent from `grads` sat outside the
/// loss's dependency cone this step; its true gradient is zero and it is
/// updated as such (moments decay, weight decay still applies).
pub fn adamw_step(
    model: &mut ModelState,
    grads: &BTreeMap<String, Matrix>,
    state: &mut OptState,
    hp: &AdamWParams,
) -> Result<()> {
    for (name, g) in grads {
        let p = model
            .param(name)
            .ok_or_else(|| crate::error::Error::Contract(format!("unknown parameter {name}")))?;
        contract!(
            g.shape() == p.shape(),
            "gradient shape {:?} does not match parameter {name} {:?}",
            g.shape(),
            p.shape()
        );
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);

    for name in model.trainable_names() {
        let shape = model.param(&name).expect("trainable name exists").shape();
        let zero_grad;
        let g = match grads.get(&name) {
            Some(g) => g,
            None => {
                zero_grad = Matrix::zeros(shape.0, shape.1);
                &zero_grad
            }
        };
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Matrix::zeros(shape.0, shape.1));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Matrix::zeros(shape.0, shape.1));
        let p = model.param_mut(&name).expect("trainable name exists");
        for idx in 0..p.len() {
            let gi = g.data()[idx];
            let mi = hp.beta1 * m.data()[idx] + (1.0 - hp.beta1) * gi;
            let vi = hp.beta2 * v.data()[idx] + (1.0 - hp.beta2) * gi * gi;
            m.data_mut()[idx] = mi;
            v.data_mut()[idx] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            let old = p.data()[idx];
            p.data_mut()[idx] = old * (1.0 - hp.lr * hp.weight_decay) - hp.lr * m_hat / (v_hat.sqrt() + hp.epsilon);
        }
    }
    Ok(())
}
