use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, DcaError, Result};
use crate::rng;
use crate::vector::{log_sum_exp, softmax, sq_dist};

/// One isotropic Gaussian component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub mean: Vec<f64>,
    pub variance: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMixture {
    pub components: Vec<Component>,
}

/// Exact class-conditional Gaussian mixture the synthetic data is drawn from.
///
/// The marginal density is `p(z) = Σ_k π_k Σ_j w_kj N(z; μ_kj, σ²_kj I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmOracle {
    pub dim: usize,
    pub classes: Vec<ClassMixture>,
    pub priors: Vec<f64>,
}

impl GmmOracle {
    pub fn new(dim: usize, classes: Vec<ClassMixture>, priors: Vec<f64>) -> Result<Self> {
        if classes.is_empty() || classes.len() != priors.len() {
            return Err(DcaError::InvalidArgument(
                "one prior per class required".into(),
            ));
        }
        for (k, class) in classes.iter().enumerate() {
            if class.components.is_empty() {
                return Err(DcaError::InvalidArgument(format!("class {k} has no components")));
            }
            let total: f64 = class.components.iter().map(|c| c.weight).sum();
            if (total - 1.0).abs() > 1e-12 {
                return Err(DcaError::InvalidArgument(format!(
                    "class {k} mixture weights sum to {total}"
                )));
            }
            for c in &class.components {
                check_dim(dim, c.mean.len())?;
                if !(c.variance > 0.0) || !c.variance.is_finite() {
                    return Err(DcaError::InvalidArgument("variances must be > 0".into()));
                }
            }
        }
        let ptotal: f64 = priors.iter().sum();
        if (ptotal - 1.0).abs() > 1e-12 || priors.iter().any(|p| *p <= 0.0) {
            return Err(DcaError::InvalidArgument("class priors must be positive and sum to 1".into()));
        }
        Ok(Self { dim, classes, priors })
    }

    /// A single Gaussian `N(mean, variance·I)` as a one-class oracle.
    pub fn single(mean: Vec<f64>, variance: f64) -> Result<Self> {
        let dim = mean.len();
        Self::new(
            dim,
            vec![ClassMixture { components: vec![Component { mean, variance, weight: 1.0 }] }],
            vec![1.0],
        )
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Mean of each class (weighted over its components).
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        self.classes
            .iter()
            .map(|c| {
                let mut m = vec![0.0; self.dim];
                for comp in &c.components {
                    for (mi, ci) in m.iter_mut().zip(&comp.mean) {
                        *mi += comp.weight * ci;
                    }
                }
                m
            })
            .collect()
    }

    /// `(class, ln π_k w_kj N(z; ·))` for every component.
    fn log_terms(&self, z: &[f64]) -> Vec<(usize, f64, &Component)> {
        let d = self.dim as f64;
        let mut out = Vec::new();
        for (k, class) in self.classes.iter().enumerate() {
            for c in &class.components {
                let lg = self.priors[k].ln() + c.weight.ln()
                    - 0.5 * d * (2.0 * std::f64::consts::PI * c.variance).ln()
                    - sq_dist(z, &c.mean) / (2.0 * c.variance);
                out.push((k, lg, c));
            }
        }
        out
    }

    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        check_dim(self.dim, z.len())?;
        let terms: Vec<f64> = self.log_terms(z).iter().map(|t| t.1).collect();
        Ok(log_sum_exp(&terms))
    }

    /// Closed-form `∇_z log p(z)` of the class-marginalized mixture.
    pub fn score(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, z.len())?;
        let terms = self.log_terms(z);
        let logs: Vec<f64> = terms.iter().map(|t| t.1).collect();
        if !log_sum_exp(&logs).is_finite() {
            return Err(DcaError::NumericUnderflow);
        }
        let resp = softmax(&logs);
        let mut s = vec![0.0; self.dim];
        for ((_, _, c), r) in terms.iter().zip(&resp) {
            for ((si, mi), zi) in s.iter_mut().zip(&c.mean).zip(z) {
                *si += r * (mi - zi) / c.variance;
            }
        }
        Ok(s)
    }

    /// Bayes posterior `P(k | z)`.
    pub fn class_posterior(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, z.len())?;
        let terms = self.log_terms(z);
        let mut per_class = vec![Vec::new(); self.num_classes()];
        for (k, lg, _) in terms {
            per_class[k].push(lg);
        }
        let logs: Vec<f64> = per_class.iter().map(|v| log_sum_exp(v)).collect();
        if !log_sum_exp(&logs).is_finite() {
            return Err(DcaError::NumericUnderflow);
        }
        Ok(softmax(&logs))
    }

    /// Marginal of `√ᾱ z₀ + √(1−ᾱ) ε` when `z₀` follows this mixture.
    pub fn noised(&self, alpha_bar: f64) -> GmmOracle {
        let s = alpha_bar.sqrt();
        let classes = self
            .classes
            .iter()
            .map(|c| ClassMixture {
                components: c
                    .components
                    .iter()
                    .map(|comp| Component {
                        mean: comp.mean.iter().map(|m| m * s).collect(),
                        variance: alpha_bar * comp.variance + (1.0 - alpha_bar),
                        weight: comp.weight,
                    })
                    .collect(),
            })
            .collect();
        GmmOracle { dim: self.dim, classes, priors: self.priors.clone() }
    }

    /// One draw from class `k`.
    pub fn sample_class<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Vec<f64> {
        let class = &self.classes[k];
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = &class.components[class.components.len() - 1];
        for c in &class.components {
            acc += c.weight;
            if u < acc {
                chosen = c;
                break;
            }
        }
        let sd = chosen.variance.sqrt();
        chosen.mean.iter().map(|m| m + sd * rng::normal(rng)).collect()
    }
}
