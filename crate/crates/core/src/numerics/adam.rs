use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Adam moments for a fixed list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<T: Real> AdamState<T> {
    /// Zeroed moments with β1=0.9, β2=0.999, ε=1e-8.
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self::with_hyper(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(params: &[Tensor<T>], beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            first_moment: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            second_moment: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            step_count: 0,
            beta1,
            beta2,
            epsilon,
        }
    }

    /// One bias-corrected Adam update. Elements whose mask entry is `false`
    /// keep their value and both moments untouched. A missing gradient is
    /// treated as zero.
    pub fn step_masked(
        &mut self,
        params: &mut [Tensor<T>],
        grads: &[Option<&[T]>],
        lr: f64,
        masks: &[Option<&[bool]>],
    ) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::config(format!(
                "learning rate {lr} must be finite and ≥ 0"
            )));
        }
        if params.len() != grads.len()
            || params.len() != self.first_moment.len()
            || (!masks.is_empty() && masks.len() != params.len())
        {
            return Err(Error::dim(format!(
                "adam over {} params, {} grads, {} moment buffers, {} masks",
                params.len(),
                grads.len(),
                self.first_moment.len(),
                masks.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if self.first_moment[i].len() != p.len() {
                return Err(Error::dim(format!(
                    "moment buffer {i} does not match its parameter"
                )));
            }
            if let Some(g) = g {
                if g.len() != p.len() {
                    return Err(Error::dim(format!(
                        "gradient {i} does not match its parameter"
                    )));
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::numeric(format!(
                        "non-finite gradient for parameter {i}"
                    )));
                }
            }
            if let Some(Some(m)) = masks.get(i) {
                if m.len() != p.len() {
                    return Err(Error::dim(format!("mask {i} does not match its parameter")));
                }
            }
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let eps = T::lit(self.epsilon);
        let lr = T::lit(lr);
        let (one, zero) = (T::one(), T::zero());

        for (i, p) in params.iter_mut().enumerate() {
            let grad = grads[i];
            let mask = masks.get(i).copied().flatten();
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                if let Some(mask) = mask {
                    if !mask[j] {
                        continue;
                    }
                }
                let g = grad.map_or(zero, |g| g[j]);
                m[j] = b1 * m[j] + (one - b1) * g;
                v[j] = b2 * v[j] + (one - b2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Unmasked Adam update over all parameters.
pub fn adam_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Option<&[T]>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    state.step_masked(params, grads, lr, &[])
}
