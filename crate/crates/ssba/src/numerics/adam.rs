//! Adam optimizer with bias correction.

use super::tensor::{NumericsError, Tensor};

pub const DEFAULT_LR: f64 = 1e-3;
pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

/// Per-parameter first/second moment estimates plus the step counter.
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &[&Tensor], lr: f64) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            step: 0,
            lr,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of every parameter in place. A non-finite
    /// gradient is a training-divergence signal and aborts the step.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[&Tensor],
    ) -> Result<(), NumericsError> {
        assert_eq!(params.len(), grads.len(), "param/grad count mismatch");
        for (pi, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(NumericsError::DimMismatch {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            if let Some(index) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(NumericsError::NonFiniteGradient { param: pi, index });
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (pi, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[pi].data_mut();
            let v = self.v[pi].data_mut();
            let pd = p.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                pd[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
