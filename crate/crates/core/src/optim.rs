//! Adam with bias correction and optional decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Matrix,
    pub v: Matrix,
}

impl AdamState {
    pub fn zeros_like(p: &Matrix) -> Self {
        Self {
            m: Matrix::zeros(p.rows(), p.cols()),
            v: Matrix::zeros(p.rows(), p.cols()),
        }
    }

    /// Clears both moments at the given flat indices.
    pub fn reset(&mut self, indices: impl IntoIterator<Item = usize>) {
        for i in indices {
            self.m.data_mut()[i] = 0.0;
            self.v.data_mut()[i] = 0.0;
        }
    }
}

/// One Adam(W) update of `param` at step `t` (1-based).
pub fn adam_step(
    param: &mut Matrix,
    grad: &Matrix,
    state: &mut AdamState,
    lr: f64,
    hp: AdamParams,
    t: u64,
    weight_decay: f64,
) {
    assert_eq!(param.shape(), grad.shape(), "adam_step: gradient shape");
    assert_eq!(param.shape(), state.m.shape(), "adam_step: state shape");
    assert!(t >= 1, "adam_step: steps are 1-based");
    let bc1 = 1.0 - hp.beta1.powf(t as f64);
    let bc2 = 1.0 - hp.beta2.powf(t as f64);
    let p = param.data_mut();
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for (i, &g) in grad.data().iter().enumerate() {
        m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g;
        v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        if weight_decay != 0.0 {
            p[i] -= lr * weight_decay * p[i];
        }
        p[i] -= lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
}
