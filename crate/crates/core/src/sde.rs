//! Classifier-guided latent SDE.
//!
//! `dz = f(z) ds + γ(s) dw` with `γ(s) = 1 − s/T` and drift
//! `f = κ((1−λ) v_manifold + λ v_boundary)`, where both directions are unit
//! vectors (or zero when undefined). Integrated with Euler–Maruyama on a fixed
//! number of steps so a noise path can be reused across horizons.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::diffusion::ScoreModel;
use crate::error::{check_dim, DcaError, Result};
use crate::rng;
use crate::selfcorrect::CounterfactualSample;
use crate::synthdata::Codec;
use crate::vector::{all_finite, argmax, safe_normalize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdeConfig {
    /// Simulation horizon `T_SDE`.
    pub t_sde: f64,
    pub n_steps: usize,
    pub lambda: f64,
    pub kappa: f64,
    /// Diffusion timestep at which the score is read.
    pub t_score: usize,
    pub seed: u64,
}

impl Default for SdeConfig {
    fn default() -> Self {
        Self { t_sde: 1.0, n_steps: 1000, lambda: 0.7, kappa: 2.5, t_score: 20, seed: 0 }
    }
}

impl SdeConfig {
    pub fn validate(&self, schedule_steps: usize) -> Result<()> {
        let bad = |m: String| Err(DcaError::InvalidArgument(m));
        if !(self.t_sde > 0.0 && self.t_sde.is_finite()) {
            return bad(format!("T_SDE must be positive, got {}", self.t_sde));
        }
        if self.n_steps < 1 {
            return bad("N_SDE must be ≥ 1".into());
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return bad(format!("kappa {} must be non-negative", self.kappa));
        }
        if self.t_score < 1 || self.t_score > schedule_steps {
            return Err(DcaError::TimestepOutOfRange { t: self.t_score, max: schedule_steps });
        }
        Ok(())
    }

    pub fn step_size(&self) -> f64 {
        self.t_sde / self.n_steps as f64
    }

    pub fn with_horizon(mut self, t_sde: f64) -> Self {
        self.t_sde = t_sde;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Diffusion coefficient `γ(s) = 1 − s/T`.
pub fn gamma(s: f64, horizon: f64) -> f64 {
    1.0 - s / horizon
}

/// One Euler–Maruyama update `z + f·Δs + γ·√Δs·ε`.
pub fn em_step(z: &[f64], f: &[f64], ds: f64, gamma: f64, eps: &[f64]) -> Vec<f64> {
    let noise = gamma * ds.sqrt();
    z.iter().zip(f).zip(eps).map(|((zi, fi), ei)| zi + fi * ds + noise * ei).collect()
}

/// Cached standard-normal increments, one `d`-vector per step.
#[derive(Debug, Clone, PartialEq)]
pub struct WienerPath {
    pub seed: u64,
    dim: usize,
    increments: Vec<f64>,
}

impl WienerPath {
    pub fn new(seed: u64, n_steps: usize, dim: usize) -> Self {
        let mut r = rng::stream(seed, "wiener", 0);
        Self { seed, dim, increments: rng::normal_vec(&mut r, n_steps * dim) }
    }

    pub fn zeros(n_steps: usize, dim: usize) -> Self {
        Self { seed: 0, dim, increments: vec![0.0; n_steps * dim] }
    }

    pub fn from_increments(steps: &[Vec<f64>]) -> Result<Self> {
        let dim = steps.first().map(|s| s.len()).unwrap_or(0);
        let mut increments = Vec::with_capacity(steps.len() * dim);
        for s in steps {
            check_dim(dim, s.len())?;
            increments.extend_from_slice(s);
        }
        Ok(Self { seed: 0, dim, increments })
    }

    pub fn n_steps(&self) -> usize {
        self.increments.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn step(&self, i: usize) -> &[f64] {
        &self.increments[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Drift {
    pub f: Vec<f64>,
    pub v_manifold: Vec<f64>,
    pub v_boundary: Vec<f64>,
}

/// Drift plus the classifier read-out at the same state.
pub trait DriftField {
    fn dim(&self) -> usize;
    fn probs(&self, z: &[f64]) -> Result<Vec<f64>>;
    fn drift_and_probs(&self, z: &[f64]) -> Result<(Vec<f64>, Vec<f64>)>;
}

/// Manifold force from the score model, boundary force from the frozen `C*`.
pub struct GuidedField<'a> {
    pub model: &'a ScoreModel,
    pub c_star: &'a Classifier,
    pub codec: &'a Codec,
    pub y: usize,
    pub y_prime: usize,
    pub lambda: f64,
    pub kappa: f64,
    pub t_score: usize,
}

impl<'a> GuidedField<'a> {
    pub fn new(
        model: &'a ScoreModel,
        c_star: &'a Classifier,
        codec: &'a Codec,
        y: usize,
        y_prime: usize,
        cfg: &SdeConfig,
    ) -> Result<Self> {
        if y == y_prime {
            return Err(DcaError::SameClass(y));
        }
        if !c_star.is_frozen() {
            return Err(DcaError::Precondition("guidance requires a frozen classifier".into()));
        }
        cfg.validate(model.schedule.timesteps())?;
        check_dim(model.dim(), codec.dim())?;
        Ok(Self { model, c_star, codec, y, y_prime, lambda: cfg.lambda, kappa: cfg.kappa, t_score: cfg.t_score })
    }

    pub fn drift_full(&self, z: &[f64]) -> Result<(Drift, Vec<f64>)> {
        let v_manifold = safe_normalize(&self.model.score_at(z, self.t_score)?);
        let eval = self.c_star.boundary_eval(self.codec, z, self.y, self.y_prime)?;
        let v_boundary = safe_normalize(&eval.grad);
        let f = v_manifold
            .iter()
            .zip(&v_boundary)
            .map(|(m, b)| self.kappa * ((1.0 - self.lambda) * m + self.lambda * b))
            .collect();
        Ok((Drift { f, v_manifold, v_boundary }, eval.probs))
    }
}

impl DriftField for GuidedField<'_> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn probs(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.c_star.class_probs(&self.codec.decode(z)?)
    }

    fn drift_and_probs(&self, z: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (d, p) = self.drift_full(z)?;
        Ok((d.f, p))
    }
}

/// Drift `(f, v_manifold, v_boundary)` at `z`.
pub fn drift(
    model: &ScoreModel,
    c_star: &Classifier,
    codec: &Codec,
    z: &[f64],
    y: usize,
    y_prime: usize,
    cfg: &SdeConfig,
) -> Result<Drift> {
    Ok(GuidedField::new(model, c_star, codec, y, y_prime, cfg)?.drift_full(z)?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryState {
    pub s: f64,
    pub z: Vec<f64>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<TrajectoryState>,
    pub config: SdeConfig,
    pub y: usize,
    pub y_prime: usize,
}

impl Trajectory {
    pub fn last(&self) -> &TrajectoryState {
        self.states.last().expect("trajectory has N_SDE + 1 states")
    }

    /// `step,s,z0..z{d-1},p0..p{K-1}` rows.
    pub fn write_csv<W: Write>(&self, mut w: W, comment: Option<&str>) -> Result<()> {
        if let Some(c) = comment {
            writeln!(w, "# {c}")?;
        }
        let first = &self.states[0];
        let mut header = String::from("step,s");
        for i in 0..first.z.len() {
            header.push_str(&format!(",z{i}"));
        }
        for k in 0..first.probs.len() {
            header.push_str(&format!(",p{k}"));
        }
        writeln!(w, "{header}")?;
        for (i, st) in self.states.iter().enumerate() {
            let mut row = format!("{i},{}", st.s);
            for v in st.z.iter().chain(&st.probs) {
                row.push_str(&format!(",{v}"));
            }
            writeln!(w, "{row}")?;
        }
        Ok(())
    }
}

/// Euler–Maruyama over `path.n_steps()` steps of size `horizon / n`.
pub fn integrate_field<F: DriftField + ?Sized>(
    field: &F,
    z0: &[f64],
    horizon: f64,
    path: &WienerPath,
) -> Result<Vec<TrajectoryState>> {
    check_dim(field.dim(), z0.len())?;
    if !all_finite(z0) {
        return Err(DcaError::NonFiniteState { step: 0 });
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(DcaError::InvalidArgument(format!("horizon must be positive, got {horizon}")));
    }
    let n = path.n_steps();
    if n < 1 {
        return Err(DcaError::InvalidArgument("Wiener path has no steps".into()));
    }
    check_dim(z0.len(), path.dim)?;
    let ds = horizon / n as f64;
    let mut states = Vec::with_capacity(n + 1);
    let mut z = z0.to_vec();
    for i in 0..n {
        let s = i as f64 * ds;
        let (f, probs) = field.drift_and_probs(&z)?;
        let next = em_step(&z, &f, ds, gamma(s, horizon), path.step(i));
        states.push(TrajectoryState { s, z, probs });
        if !all_finite(&next) {
            return Err(DcaError::NonFiniteState { step: i + 1 });
        }
        z = next;
    }
    let probs = field.probs(&z)?;
    states.push(TrajectoryState { s: n as f64 * ds, z, probs });
    Ok(states)
}

/// Integrates with the noise path drawn from `path`.
#[allow(clippy::too_many_arguments)]
pub fn integrate_with_path(
    model: &ScoreModel,
    c_star: &Classifier,
    codec: &Codec,
    z0: &[f64],
    y: usize,
    y_prime: usize,
    cfg: &SdeConfig,
    path: &WienerPath,
) -> Result<Trajectory> {
    if path.n_steps() != cfg.n_steps {
        return Err(DcaError::InvalidArgument(format!(
            "path has {} steps, config wants {}",
            path.n_steps(),
            cfg.n_steps
        )));
    }
    let field = GuidedField::new(model, c_star, codec, y, y_prime, cfg)?;
    let states = integrate_field(&field, z0, cfg.t_sde, path)?;
    Ok(Trajectory { states, config: *cfg, y, y_prime })
}

/// Integrates with the Wiener path derived from `cfg.seed`.
pub fn integrate(
    model: &ScoreModel,
    c_star: &Classifier,
    codec: &Codec,
    z0: &[f64],
    y: usize,
    y_prime: usize,
    cfg: &SdeConfig,
) -> Result<Trajectory> {
    let path = WienerPath::new(cfg.seed, cfg.n_steps, z0.len());
    integrate_with_path(model, c_star, codec, z0, y, y_prime, cfg, &path)
}

/// Refines the states at steps `every, 2·every, …, N` and labels each by the
/// `C*` argmax of its decoded refined latent.
#[allow(clippy::too_many_arguments)]
pub fn extract_counterfactuals(
    traj: &Trajectory,
    every: usize,
    refine_steps: usize,
    model: &ScoreModel,
    c_star: &Classifier,
    codec: &Codec,
    seed: u64,
    source_id: usize,
) -> Result<Vec<CounterfactualSample>> {
    let n = traj.states.len() - 1;
    if every == 0 || !n.is_multiple_of(every) {
        return Err(DcaError::Divisibility { every, steps: n });
    }
    let max = model.schedule.timesteps();
    if refine_steps < 1 || refine_steps > max {
        return Err(DcaError::StepCountOutOfRange { steps: refine_steps, max });
    }
    (1..=n / every)
        .map(|j| {
            let step = j * every;
            let z_prime = model.refine(&traj.states[step].z, refine_steps, rng::derive_seed(seed, "extract", step as u64))?;
            let x_prime = codec.decode(&z_prime)?;
            let label = argmax(&c_star.logits(&x_prime)?);
            Ok(CounterfactualSample {
                source_id,
                step,
                y: traj.y,
                target: traj.y_prime,
                y_prime: label,
                t_used: traj.config.t_sde,
                seed,
                z_prime,
                x_prime,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Constant drift, class probabilities from the first coordinate.
    struct Constant(Vec<f64>);

    impl DriftField for Constant {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn probs(&self, z: &[f64]) -> Result<Vec<f64>> {
            let p = 1.0 / (1.0 + (-z[0]).exp());
            Ok(vec![1.0 - p, p])
        }
        fn drift_and_probs(&self, z: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
            Ok((self.0.clone(), self.probs(z)?))
        }
    }

    #[test]
    fn gamma_endpoints() {
        assert_eq!(gamma(0.0, 2.5), 1.0);
        assert_eq!(gamma(2.5, 2.5), 0.0);
        assert!(gamma(1.0, 2.5) > gamma(1.1, 2.5));
    }

    #[test]
    fn zero_drift_zero_noise_is_fixed_point() {
        let field = Constant(vec![0.0, 0.0]);
        let path = WienerPath::zeros(50, 2);
        let states = integrate_field(&field, &[0.4, -1.0], 3.0, &path).unwrap();
        assert_eq!(states.len(), 51);
        assert!(states.iter().all(|s| s.z == vec![0.4, -1.0]));
        assert_eq!(states[0].s, 0.0);
        assert!(states.windows(2).all(|w| w[1].s > w[0].s));
    }

    #[test]
    fn single_step_matches_hand_computation() {
        let f = vec![0.3, -0.8];
        let eps = vec![1.7, 0.25];
        let field = Constant(f.clone());
        let path = WienerPath::from_increments(&[eps.clone()]).unwrap();
        let z0 = [0.1, 0.2];
        let horizon = 0.64;
        let states = integrate_field(&field, &z0, horizon, &path).unwrap();
        let ds = horizon;
        let want: Vec<f64> = (0..2).map(|i| z0[i] + f[i] * ds + 1.0 * ds.sqrt() * eps[i]).collect();
        for i in 0..2 {
            assert!((states[1].z[i] - want[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn gamma_reaches_one_step_at_the_end() {
        let n = 10;
        let horizon = 2.0;
        let ds = horizon / n as f64;
        let last_start = (n - 1) as f64 * ds;
        assert!((gamma(last_start, horizon) - ds / horizon).abs() < 1e-15);
    }

    #[test]
    fn non_finite_state_reports_step() {
        let field = Constant(vec![f64::MAX, 0.0]);
        let path = WienerPath::zeros(5, 2);
        // f·Δs overflows on the first update.
        let err = integrate_field(&field, &[f64::MAX, 0.0], 5.0, &path).unwrap_err();
        assert!(matches!(err, DcaError::NonFiniteState { step: 1 }));
    }

    #[test]
    fn wiener_paths_reproduce() {
        assert_eq!(WienerPath::new(3, 10, 2), WienerPath::new(3, 10, 2));
        assert_ne!(WienerPath::new(3, 10, 2), WienerPath::new(4, 10, 2));
        assert_eq!(WienerPath::new(3, 10, 2).n_steps(), 10);
    }

    #[test]
    fn config_validation() {
        let c = SdeConfig::default();
        assert!(c.validate(200).is_ok());
        assert!(SdeConfig { lambda: 1.7, ..c }.validate(200).is_err());
        assert!(SdeConfig { n_steps: 0, ..c }.validate(200).is_err());
        assert!(SdeConfig { t_score: 201, ..c }.validate(200).is_err());
        assert!(SdeConfig { t_sde: 0.0, ..c }.validate(200).is_err());
    }
}
