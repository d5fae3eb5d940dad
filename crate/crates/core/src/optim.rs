//! Adam with bias correction, one state per parameter tensor.

use serde::{Deserialize, Serialize};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First/second moments and step count for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    /// Grows the state for parameters appended at the end; new entries start
    /// with zero moments.
    pub fn resize(&mut self, len: usize) {
        self.m.resize(len, 0.0);
        self.v.resize(len, 0.0);
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// One bias-corrected Adam update, elementwise.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) {
    assert_eq!(params.len(), grads.len(), "parameter/gradient length mismatch");
    assert_eq!(params.len(), state.len(), "parameter/moment length mismatch");
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for ((p, &g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = BETA1 * *m + (1.0 - BETA1) * g;
        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + EPS);
    }
}
