use crate::{ParamStore, Result, TensorError};

/// ADAM with bias-corrected moment estimates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
        }
    }

    /// Applies one update to every parameter and clears the gradients.
    ///
    /// Every parameter must carry a gradient; nothing is modified otherwise.
    pub fn step(&self, params: &mut ParamStore) -> Result<()> {
        if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
            return Err(TensorError::MissingGrad(p.name.clone()));
        }
        for p in params.iter_mut() {
            let grad = p.grad.take().expect("checked above");
            p.step_count += 1;
            let t = p.step_count as i32;
            let bias1 = 1.0 - self.beta1.powi(t);
            let bias2 = 1.0 - self.beta2.powi(t);
            let m = p.adam_m.data_mut();
            let v = p.adam_v.data_mut();
            let w = p.value.data_mut();
            for (i, &g) in grad.data().iter().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                w[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
