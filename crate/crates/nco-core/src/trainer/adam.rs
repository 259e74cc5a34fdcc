//! Adam optimizer over a policy's named tensors.

use crate::error::{Error, Result};
use crate::policy::PolicyParams;

/// First-moment decay.
const BETA1: f64 = 0.9;
/// Second-moment decay.
const BETA2: f64 = 0.999;
/// Denominator stabilizer.
const EPS: f64 = 1e-8;

/// Adam state: one moment pair per parameter entry, aligned with the
/// policy's tensor order.
pub struct Adam {
    learning_rate: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64, params: &PolicyParams) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive and finite, got {learning_rate}"
            )));
        }
        let m: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.tensor.len()])
            .collect();
        let v = m.clone();
        Ok(Adam {
            learning_rate,
            step: 0,
            m,
            v,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update: `p -= lr * m_hat / (sqrt(v_hat) + eps)` per entry.
    /// `grads` must align with `params.tensors()`, tensor by tensor.
    pub fn apply(&mut self, params: &mut PolicyParams, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Config(format!(
                "gradient count {} does not match parameter tensor count {}",
                grads.len(),
                self.m.len()
            )));
        }
        for (i, tensor) in params.tensors().iter().enumerate() {
            if grads[i].len() != tensor.tensor.len() {
                return Err(Error::Config(format!(
                    "gradient for '{}' has {} entries, tensor has {}",
                    tensor.name,
                    grads[i].len(),
                    tensor.tensor.len()
                )));
            }
        }

        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        for (i, named) in params.tensors_mut().iter_mut().enumerate() {
            let data = named.tensor.data_mut();
            for (j, g) in grads[i].iter().enumerate() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                data[j] -= self.learning_rate * m_hat / (v_hat.sqrt() + EPS);
            }
        }
        Ok(())
    }
}
