use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::Parameter;
use crate::tensor::Tensor;

/// Adam with bias correction:
///
/// ```text
/// m ← β1·m + (1 − β1)·g
/// v ← β2·v + (1 − β2)·g²
/// p ← p − lr · (m / (1 − β1^t)) / (√(v / (1 − β2^t)) + eps)
/// ```
///
/// Moment buffers are kept per parameter in the order the parameters are
/// passed to [`Adam::step`], which must stay the same between calls.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    pub first_moments: Vec<Tensor>,
    pub second_moments: Vec<Tensor>,
}

impl Adam {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        Ok(Self {
            learning_rate,
            beta1: Self::BETA1,
            beta2: Self::BETA2,
            eps: Self::EPS,
            step_count: 0,
            first_moments: Vec::new(),
            second_moments: Vec::new(),
        })
    }

    /// Applies one update from each parameter's `grad`. Nothing is modified
    /// when any gradient holds a non-finite value.
    pub fn step(&mut self, params: &mut [&mut Parameter]) -> Result<()> {
        if let Some(bad) = params.iter().find(|p| !p.grad.is_finite()) {
            return Err(Error::NonFiniteGradient {
                param: bad.name().to_string(),
            });
        }
        if self.first_moments.is_empty() {
            self.first_moments = params.iter().map(|p| Tensor::zeros_like(&p.value)).collect();
            self.second_moments = self.first_moments.clone();
        }
        if self.first_moments.len() != params.len() {
            return Err(Error::Validation(format!(
                "optimizer tracks {} parameters, got {}",
                self.first_moments.len(),
                params.len()
            )));
        }
        for (p, m) in params.iter().zip(&self.first_moments) {
            if p.value.shape() != m.shape() {
                return Err(Error::shape("adam_step", p.value.shape(), m.shape()));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.eps);
        for ((p, m), v) in params
            .iter_mut()
            .zip(&mut self.first_moments)
            .zip(&mut self.second_moments)
        {
            let grad = p.grad.data().to_vec();
            let value = p.value.data_mut();
            for (((x, m), v), g) in value
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(grad)
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: &[f64]) -> Parameter {
        Parameter::new("w", Tensor::new(vec![values.len()], values.to_vec()).unwrap())
    }

    #[test]
    fn zero_gradient_leaves_parameters_and_decays_moments() {
        let mut p = param(&[1.0, -2.0]);
        let mut adam = Adam::new(0.1).unwrap();
        adam.step(&mut [&mut p]).unwrap();
        assert_eq!(p.value.data(), &[1.0, -2.0]);

        p.grad = Tensor::new(vec![2], vec![0.5, -0.5]).unwrap();
        adam.step(&mut [&mut p]).unwrap();
        let (m, v) = (adam.first_moments[0].clone(), adam.second_moments[0].clone());
        p.zero_grad();
        adam.step(&mut [&mut p]).unwrap();
        for i in 0..2 {
            assert_eq!(adam.first_moments[0].data()[i], 0.9 * m.data()[i]);
            assert_eq!(adam.second_moments[0].data()[i], 0.999 * v.data()[i]);
        }
    }

    #[test]
    fn first_step_moves_by_about_lr_against_the_gradient() {
        let mut p = param(&[0.0, 0.0, 0.0]);
        p.grad = Tensor::new(vec![3], vec![3.0, -1e-3, 250.0]).unwrap();
        let mut adam = Adam::new(1e-3).unwrap();
        adam.step(&mut [&mut p]).unwrap();
        // m̂ = g and v̂ = g² on the first step, so the move is lr·g/(|g| + eps)
        for (x, g) in p.value.data().iter().zip([3.0f64, -1e-3, 250.0]) {
            let expected = -1e-3 * g / (g.abs() + 1e-8);
            assert!((x - expected).abs() < 1e-15, "{x} vs {expected}");
        }
    }

    #[test]
    fn nan_gradient_names_the_parameter_and_changes_nothing() {
        let mut a = param(&[1.0]);
        let mut b = Parameter::new("layers.0.bias", Tensor::new(vec![1], vec![2.0]).unwrap());
        a.grad = Tensor::new(vec![1], vec![1.0]).unwrap();
        b.grad = Tensor::new(vec![1], vec![f64::NAN]).unwrap();
        let mut adam = Adam::new(0.1).unwrap();
        let err = adam.step(&mut [&mut a, &mut b]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { ref param } if param == "layers.0.bias"));
        assert_eq!(a.value.data(), &[1.0]);
        assert_eq!(adam.step_count, 0);
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let run = || {
            let mut p = param(&[0.3, -0.7]);
            let mut adam = Adam::new(0.01).unwrap();
            for k in 0..50 {
                let g: Vec<f64> = p.value.data().iter().map(|x| 2.0 * x + 0.01 * k as f64).collect();
                p.grad = Tensor::new(vec![2], g).unwrap();
                adam.step(&mut [&mut p]).unwrap();
            }
            p.value
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_bad_learning_rate() {
        assert!(Adam::new(0.0).is_err());
        assert!(Adam::new(f64::NAN).is_err());
    }
}
