//! Adam with bias correction, cosine learning-rate decay and global-norm
//! gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

impl Adam {
    /// One bias-corrected Adam update of every parameter in place.
    pub fn step<T: Real>(
        &self,
        params: &mut [Tensor<T>],
        grads: &[Tensor<T>],
        state: &mut AdamState<T>,
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != state.m.len() {
            return Err(Error::shape(
                "adam",
                &[params.len()],
                &[grads.len(), state.m.len()],
            ));
        }
        for ((p, g), (m, v)) in params
            .iter()
            .zip(grads)
            .zip(state.m.iter().zip(&state.v))
        {
            if p.shape() != g.shape() || p.shape() != m.shape() || p.shape() != v.shape() {
                return Err(Error::shape("adam", p.shape(), g.shape()));
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let c1 = T::from_f64(1.0 - self.beta1.powi(t));
        let c2 = T::from_f64(1.0 - self.beta2.powi(t));
        let lr = T::from_f64(lr);
        let eps = T::from_f64(self.eps);
        let one = T::one();
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = state.m[i].data_mut();
            let v = state.v[i].data_mut();
            for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = b1 * m[j] + (one - b1) * gv;
                v[j] = b2 * v[j] + (one - b2) * gv * gv;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Cosine decay from `base_lr` at step 0 to zero at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
