use serde::{Deserialize, Serialize};

use crate::error::{check_dim, DcaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Gradient accumulator and Adam state for one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTape {
    pub grad: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl ParamTape {
    pub fn new(len: usize) -> Self {
        Self { grad: vec![0.0; len], m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }

    pub fn len(&self) -> usize {
        self.grad.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grad.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Bias-corrected Adam update of `params` from the accumulated gradient,
    /// which is zeroed afterwards. Non-finite gradients abort without
    /// touching `params`.
    pub fn adam_step(&mut self, params: &mut [f64], cfg: &AdamConfig) -> Result<()> {
        check_dim(self.grad.len(), params.len())?;
        if let Some(index) = self.grad.iter().position(|g| !g.is_finite()) {
            return Err(DcaError::NonFiniteGradient { index });
        }
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powf(self.step as f64);
        let bc2 = 1.0 - cfg.beta2.powf(self.step as f64);
        for i in 0..params.len() {
            let g = self.grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            let delta = cfg.lr * mh / (vh.sqrt() + cfg.eps);
            // Skipping zero steps keeps signed zeros intact.
            if delta != 0.0 {
                params[i] -= delta;
            }
            self.grad[i] = 0.0;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut tape = ParamTape::new(3);
        let mut p = vec![1.0, -2.0, 3.5];
        tape.adam_step(&mut p, &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.5]);
        assert_eq!(tape.step(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig::with_lr(0.01);
        let mut tape = ParamTape::new(2);
        tape.grad = vec![3.0, -0.2];
        let mut p = vec![0.0, 0.0];
        tape.adam_step(&mut p, &cfg).unwrap();
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps).
        assert!((p[0] + 0.01 * 3.0 / (3.0 + 1e-8)).abs() < 1e-15);
        assert!((p[1] - 0.01 * 0.2 / (0.2 + 1e-8)).abs() < 1e-15);
        assert_eq!(tape.grad, vec![0.0, 0.0]);
    }

    #[test]
    fn nan_gradient_rejected() {
        let mut tape = ParamTape::new(2);
        tape.grad[1] = f64::NAN;
        let mut p = vec![1.0, 1.0];
        assert!(matches!(
            tape.adam_step(&mut p, &AdamConfig::default()),
            Err(DcaError::NonFiniteGradient { index: 1 })
        ));
        assert_eq!(p, vec![1.0, 1.0]);
    }

    #[test]
    fn zero_learning_rate_is_bit_identical() {
        let mut tape = ParamTape::new(3);
        let mut p = vec![0.1, -0.0, 7.25];
        let orig = p.clone();
        for k in 0..5 {
            tape.grad = vec![k as f64, -3.0, 0.5];
            tape.adam_step(&mut p, &AdamConfig::with_lr(0.0)).unwrap();
        }
        assert_eq!(
            p.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            orig.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }
}
