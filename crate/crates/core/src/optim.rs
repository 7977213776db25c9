//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::ParamTensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid("adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(invalid("adam eps must be > 0"));
        }
        Ok(())
    }
}

/// Applies one Adam update to every parameter. Gradients are left in place;
/// the caller zeroes them before the next accumulation pass.
pub fn adam_step<'a>(params: impl IntoIterator<Item = &'a mut ParamTensor>, cfg: &AdamConfig) -> Result<()> {
    cfg.validate()?;
    for p in params {
        p.step_count += 1;
        let t = p.step_count as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let grad = p.grad.data();
        let m = p.adam_m.data_mut();
        for (mi, &g) in m.iter_mut().zip(grad) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
        }
        let v = p.adam_v.data_mut();
        for (vi, &g) in v.iter_mut().zip(grad) {
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
        }
        let (m, v) = (p.adam_m.data(), p.adam_v.data());
        for ((w, &mi), &vi) in p.value.data_mut().iter_mut().zip(m).zip(v) {
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_param(v: f64, g: f64) -> ParamTensor {
        let mut p = ParamTensor::new(Tensor::scalar_vec(vec![v]));
        p.grad = Tensor::scalar_vec(vec![g]);
        p
    }

    #[test]
    fn zero_grad_leaves_value() {
        let mut p = ParamTensor::new(Tensor::scalar_vec(vec![1.0, -2.0, 3.0]));
        adam_step([&mut p], &AdamConfig::default()).unwrap();
        assert_eq!(p.value.data(), &[1.0, -2.0, 3.0]);
        assert_eq!(p.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // t=1: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps)
        let mut p = scalar_param(0.5, 1.0);
        let cfg = AdamConfig { lr: 0.01, ..Default::default() };
        adam_step([&mut p], &cfg).unwrap();
        let expected = 0.5 - 0.01 * 1.0 / (1.0 + 1e-8);
        assert!((p.value.data()[0] - expected).abs() < 1e-15);
        assert_eq!(p.grad.data(), &[1.0]);
    }

    #[test]
    fn identical_params_identical_trajectories() {
        let mut a = scalar_param(0.3, 0.7);
        let mut b = a.clone();
        for _ in 0..5 {
            adam_step([&mut a, &mut b], &AdamConfig::default()).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_non_positive_lr() {
        let mut p = scalar_param(0.0, 1.0);
        let cfg = AdamConfig { lr: 0.0, ..Default::default() };
        assert!(matches!(adam_step([&mut p], &cfg), Err(crate::Error::InvalidArgument(_))));
    }
}
