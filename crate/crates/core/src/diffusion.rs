//! Forward/reverse diffusion on latent vectors.
//!
//! Timesteps are 1-based: `beta(1)` is the first forward step and
//! `alpha_bar(0) = 1` by convention.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, DcaError, Result};
use crate::nn::checkpoint::{self, CheckpointMeta, ModelKind};
use crate::nn::{Activation, AdamConfig, Mlp, ParamTape};
use crate::rng;
use crate::synthdata::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self { timesteps: 200, beta_start: 1e-4, beta_end: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas spaced linearly from `beta_start` to `beta_end`.
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        Self::from_spec(ScheduleSpec { timesteps, beta_start, beta_end })
    }

    pub fn from_spec(spec: ScheduleSpec) -> Result<Self> {
        let ScheduleSpec { timesteps, beta_start, beta_end } = spec;
        let ok = |b: f64| b > 0.0 && b < 1.0;
        if timesteps < 1 || !ok(beta_start) || !ok(beta_end) {
            return Err(DcaError::InvalidArgument(format!(
                "schedule needs T ≥ 1 and betas in (0,1), got T={timesteps}, [{beta_start}, {beta_end}]"
            )));
        }
        let beta: Vec<f64> = (0..timesteps)
            .map(|i| {
                if timesteps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
                }
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(timesteps);
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self { spec, beta, alpha, alpha_bar })
    }

    pub fn spec(&self) -> ScheduleSpec {
        self.spec
    }

    pub fn timesteps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= 1 && t <= self.timesteps() {
            Ok(())
        } else {
            Err(DcaError::TimestepOutOfRange { t, max: self.timesteps() })
        }
    }

    /// Standard deviation of the reverse-step noise at `t`:
    /// `√((1−α_t)(1−ᾱ_{t−1})/(1−ᾱ_t))`.
    pub fn posterior_std(&self, t: usize) -> f64 {
        ((1.0 - self.alpha(t)) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))).sqrt()
    }
}

/// Anything that predicts the noise `ε_θ(z, t)`.
pub trait EpsModel {
    fn eps(&self, z: &[f64], t: usize) -> Result<Vec<f64>>;
}

/// Source of standard-normal draws for the stochastic chains.
pub trait NoiseSource {
    fn fill(&mut self, out: &mut [f64]);
}

pub struct GaussianNoise(pub ChaCha8Rng);

impl NoiseSource for GaussianNoise {
    fn fill(&mut self, out: &mut [f64]) {
        rng::fill_normal(&mut self.0, out);
    }
}

/// Always zero; turns the reverse chain into its deterministic skeleton.
pub struct ZeroNoise;

impl NoiseSource for ZeroNoise {
    fn fill(&mut self, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// One reverse step `z_t → z_{t−1}`; the `t = 1` step draws no noise.
pub fn reverse_step<E: EpsModel + ?Sized, N: NoiseSource + ?Sized>(
    model: &E,
    schedule: &NoiseSchedule,
    z: &[f64],
    t: usize,
    noise: &mut N,
) -> Result<Vec<f64>> {
    let eps = model.eps(z, t)?;
    check_dim(z.len(), eps.len())?;
    let a = schedule.alpha(t);
    let coef = (1.0 - a) / (1.0 - schedule.alpha_bar(t)).sqrt();
    let inv_sqrt_a = 1.0 / a.sqrt();
    let mut next: Vec<f64> = z.iter().zip(&eps).map(|(zi, ei)| inv_sqrt_a * (zi - coef * ei)).collect();
    if t > 1 {
        let sigma = schedule.posterior_std(t);
        let mut draw = vec![0.0; z.len()];
        noise.fill(&mut draw);
        for (n, e) in next.iter_mut().zip(&draw) {
            *n += sigma * e;
        }
    }
    Ok(next)
}

/// Runs the reverse chain from `z_t` at `from_t` down to `z_0`.
pub fn reverse_chain<E: EpsModel + ?Sized, N: NoiseSource + ?Sized>(
    model: &E,
    schedule: &NoiseSchedule,
    z_t: &[f64],
    from_t: usize,
    noise: &mut N,
) -> Result<Vec<f64>> {
    let mut z = z_t.to_vec();
    for t in (1..=from_t).rev() {
        z = reverse_step(model, schedule, &z, t, noise)?;
    }
    Ok(z)
}

/// Forward-diffuses `z` to `steps` via `q(z_t | z_0)` and denoises back to 0.
pub fn refine_with<E: EpsModel + ?Sized, N: NoiseSource + ?Sized>(
    model: &E,
    schedule: &NoiseSchedule,
    z: &[f64],
    steps: usize,
    noise: &mut N,
) -> Result<Vec<f64>> {
    if steps < 1 || steps > schedule.timesteps() {
        return Err(DcaError::StepCountOutOfRange { steps, max: schedule.timesteps() });
    }
    let ab = schedule.alpha_bar(steps);
    let mut draw = vec![0.0; z.len()];
    noise.fill(&mut draw);
    let z_t: Vec<f64> = z
        .iter()
        .zip(&draw)
        .map(|(zi, e)| ab.sqrt() * zi + (1.0 - ab).sqrt() * e)
        .collect();
    reverse_chain(model, schedule, &z_t, steps, noise)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreNetConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub embed_width: usize,
}

impl Default for ScoreNetConfig {
    fn default() -> Self {
        Self { hidden: vec![64, 64], activation: Activation::Silu, embed_width: 32 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreTrainConfig {
    pub iterations: usize,
    /// Peak learning rate; decays along a half cosine to `lr_floor · lr`.
    pub lr: f64,
    pub lr_floor: f64,
    pub batch: usize,
    /// Decay of the parameter moving average returned as the model; 0 disables it.
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for ScoreTrainConfig {
    fn default() -> Self {
        Self { iterations: 60_000, lr: 3e-3, lr_floor: 0.05, batch: 64, ema_decay: 0.999, seed: 0 }
    }
}

impl ScoreTrainConfig {
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let progress = iteration as f64 / self.iterations.max(1) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr * (self.lr_floor + (1.0 - self.lr_floor) * cos)
    }
}

/// Noise-prediction network `ε_θ(z, t)` bound to its schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreModel {
    pub net: Mlp,
    pub schedule: NoiseSchedule,
    pub seed: u64,
}

impl EpsModel for ScoreModel {
    fn eps(&self, z: &[f64], t: usize) -> Result<Vec<f64>> {
        self.schedule.check_t(t)?;
        self.net.forward(z, Some(t))
    }
}

impl ScoreModel {
    pub fn new(net: Mlp, schedule: NoiseSchedule, seed: u64) -> Result<Self> {
        if net.time_embed().is_none() || net.output_dim() != net.input_dim() {
            return Err(DcaError::ArchitectureMismatch(
                "score net needs a time embedding and output width equal to its input width".into(),
            ));
        }
        Ok(Self { net, schedule, seed })
    }

    pub fn dim(&self) -> usize {
        self.net.input_dim()
    }

    /// `∇ log p(z) ≈ −ε_θ(z, t)/√(1 − ᾱ_t)`.
    pub fn score_at(&self, z: &[f64], t: usize) -> Result<Vec<f64>> {
        let eps = self.eps(z, t)?;
        let s = -1.0 / (1.0 - self.schedule.alpha_bar(t)).sqrt();
        Ok(eps.into_iter().map(|e| s * e).collect())
    }

    /// Partial reverse-chain refinement with noise drawn from `seed`.
    pub fn refine(&self, z: &[f64], refine_steps: usize, seed: u64) -> Result<Vec<f64>> {
        check_dim(self.dim(), z.len())?;
        let mut noise = GaussianNoise(rng::stream(seed, "refine", 0));
        refine_with(self, &self.schedule, z, refine_steps, &mut noise)
    }

    /// `n` ancestral samples from `t = T`; sample `i` uses its own stream.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        (0..n)
            .map(|i| {
                let mut noise = GaussianNoise(rng::stream(seed, "sample", i as u64));
                let mut z = vec![0.0; self.dim()];
                noise.fill(&mut z);
                reverse_chain(self, &self.schedule, &z, self.schedule.timesteps(), &mut noise)
            })
            .collect()
    }

    pub fn to_checkpoint(&self, config_hash: Option<String>) -> Result<Vec<u8>> {
        let mut meta = CheckpointMeta::for_net(ModelKind::Score, &self.net, self.seed);
        meta.schedule = Some(self.schedule.spec());
        meta.config_hash = config_hash;
        checkpoint::encode(&meta, self.net.params())
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<(Self, CheckpointMeta)> {
        let (meta, params) = checkpoint::decode(bytes)?;
        if meta.kind != ModelKind::Score {
            return Err(DcaError::Checkpoint("not a score checkpoint".into()));
        }
        let spec = meta
            .schedule
            .ok_or_else(|| DcaError::Checkpoint("score checkpoint lacks a schedule".into()))?;
        let net = checkpoint::to_mlp(&meta, params)?;
        let model = Self::new(net, NoiseSchedule::from_spec(spec)?, meta.seed)?;
        Ok((model, meta))
    }
}

/// Trained model plus its per-iteration mean loss.
#[derive(Debug, Clone)]
pub struct ScoreTraining {
    pub model: ScoreModel,
    pub losses: Vec<f64>,
}

/// Minimizes `E‖ε − ε_θ(√ᾱ_t z₀ + √(1−ᾱ_t) ε, t)‖²` with `t ~ U{1..T}`.
pub fn train_score(
    dataset: &Dataset,
    schedule: &NoiseSchedule,
    net_cfg: &ScoreNetConfig,
    cfg: &ScoreTrainConfig,
) -> Result<ScoreTraining> {
    if dataset.is_empty() {
        return Err(DcaError::EmptySet);
    }
    if cfg.batch == 0 {
        return Err(DcaError::InvalidArgument("batch must be ≥ 1".into()));
    }
    let d = dataset.dim;
    let net = Mlp::new(
        d,
        &net_cfg.hidden,
        d,
        net_cfg.activation,
        Some(net_cfg.embed_width),
        rng::derive_seed(cfg.seed, "score-init", 0),
    )?;
    let mut model = ScoreModel::new(net, schedule.clone(), cfg.seed)?;
    let mut tape = ParamTape::new(model.net.num_params());
    if !(0.0..1.0).contains(&cfg.ema_decay) {
        return Err(DcaError::InvalidArgument(format!("EMA decay {} outside [0, 1)", cfg.ema_decay)));
    }
    let mut adam = AdamConfig::with_lr(cfg.lr);
    let mut ema = model.net.params().to_vec();
    let mut r = rng::stream(cfg.seed, "score-train", 0);
    let mut losses = Vec::with_capacity(cfg.iterations);
    let big_t = schedule.timesteps();
    let inv_b = 1.0 / cfg.batch as f64;
    let mut eps = vec![0.0; d];
    for iteration in 0..cfg.iterations {
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            let z0 = &dataset.points[r.random_range(0..dataset.len())].z;
            let t = r.random_range(1..=big_t);
            rng::fill_normal(&mut r, &mut eps);
            let ab = schedule.alpha_bar(t);
            let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
            let zt: Vec<f64> = z0.iter().zip(&eps).map(|(z, e)| sa * z + sn * e).collect();
            let trace = model.net.trace(&zt, Some(t))?;
            let diff: Vec<f64> = trace.output().iter().zip(&eps).map(|(o, e)| o - e).collect();
            loss += diff.iter().map(|v| v * v).sum::<f64>() * inv_b;
            let cot: Vec<f64> = diff.iter().map(|v| 2.0 * v * inv_b).collect();
            model.net.backward_from(&trace, &cot, Some(&mut tape.grad))?;
        }
        if !loss.is_finite() {
            return Err(DcaError::NonFiniteLoss { iteration, loss });
        }
        losses.push(loss);
        adam.lr = cfg.lr_at(iteration);
        tape.adam_step(model.net.params_mut(), &adam)?;
        // Warm-started average: early iterations track the raw weights.
        let decay = cfg.ema_decay.min((1 + iteration) as f64 / (10 + iteration) as f64);
        for (e, p) in ema.iter_mut().zip(model.net.params()) {
            *e = decay * *e + (1.0 - decay) * p;
        }
    }
    if cfg.ema_decay > 0.0 && cfg.iterations > 0 {
        model.net.params_mut().copy_from_slice(&ema);
    }
    Ok(ScoreTraining { model, losses })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(Vec<f64>);

    impl EpsModel for Fixed {
        fn eps(&self, _z: &[f64], _t: usize) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
    }

    fn default_schedule() -> NoiseSchedule {
        NoiseSchedule::linear(200, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn schedule_invariants() {
        let s = default_schedule();
        let mut prod = 1.0;
        for t in 1..=s.timesteps() {
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            prod *= s.alpha(t);
            assert!((s.alpha_bar(t) - prod).abs() <= 1e-15);
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!((s.beta(1) - 1e-4).abs() < 1e-18 && (s.beta(200) - 0.02).abs() < 1e-15);
        assert_eq!(s.posterior_std(1), 0.0);
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
    }

    fn zero_score_model() -> ScoreModel {
        let net = Mlp::new(2, &[4], 2, Activation::Silu, Some(4), 0).unwrap();
        let n = net.num_params();
        let net = Mlp::from_parts(net.widths().to_vec(), Activation::Silu, Some(4), vec![0.0; n]).unwrap();
        ScoreModel::new(net, default_schedule(), 0).unwrap()
    }

    #[test]
    fn zero_eps_gives_zero_score() {
        let m = zero_score_model();
        assert_eq!(m.score_at(&[0.3, -1.0], 7).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(m.score_at(&[0.0, 0.0], 0), Err(DcaError::TimestepOutOfRange { .. })));
        assert!(matches!(m.score_at(&[0.0, 0.0], 201), Err(DcaError::TimestepOutOfRange { .. })));
    }

    #[test]
    fn score_scaling_closed_form() {
        // ᾱ = 0.75 gives a factor of −1/√0.25 = −2.
        let s = -1.0 / (1.0f64 - 0.75).sqrt();
        assert_eq!([1.0 * s, 0.0 * s], [-2.0, -0.0]);
    }

    #[test]
    fn refine_with_zero_noise_replays_by_hand() {
        let sched = default_schedule();
        let eps = Fixed(vec![0.0, 0.0]);
        let z = [1.3, -0.4];
        for steps in [1usize, 5, 50, 200] {
            let got = refine_with(&eps, &sched, &z, steps, &mut ZeroNoise).unwrap();
            let mut want: Vec<f64> = z.iter().map(|v| sched.alpha_bar(steps).sqrt() * v).collect();
            for t in (1..=steps).rev() {
                want = want.iter().map(|v| v / sched.alpha(t).sqrt()).collect();
            }
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() <= 1e-14);
            }
            // The corrective factors undo the forward shrinkage.
            assert!((got[0] - z[0]).abs() < 1e-12 && (got[1] - z[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn reverse_step_matches_formula() {
        let sched = default_schedule();
        let eps = Fixed(vec![0.5, -1.0]);
        struct Ones;
        impl NoiseSource for Ones {
            fn fill(&mut self, out: &mut [f64]) {
                out.iter_mut().for_each(|v| *v = 1.0);
            }
        }
        let z = [0.2, 0.9];
        let t = 17;
        let got = reverse_step(&eps, &sched, &z, t, &mut Ones).unwrap();
        let a = sched.alpha(t);
        let ab = sched.alpha_bar(t);
        let abp = sched.alpha_bar(t - 1);
        let sigma = ((1.0 - a) * (1.0 - abp) / (1.0 - ab)).sqrt();
        for i in 0..2 {
            let want = (z[i] - (1.0 - a) / (1.0 - ab).sqrt() * eps.0[i]) / a.sqrt() + sigma;
            assert!((got[i] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn refine_step_range_and_determinism() {
        let m = zero_score_model();
        assert!(matches!(m.refine(&[0.0, 0.0], 0, 1), Err(DcaError::StepCountOutOfRange { .. })));
        assert!(matches!(m.refine(&[0.0, 0.0], 201, 1), Err(DcaError::StepCountOutOfRange { .. })));
        assert_eq!(m.refine(&[0.4, 0.1], 50, 9).unwrap(), m.refine(&[0.4, 0.1], 50, 9).unwrap());
        assert_ne!(m.refine(&[0.4, 0.1], 50, 9).unwrap(), m.refine(&[0.4, 0.1], 50, 10).unwrap());
    }

    #[test]
    fn sampling_edge_cases() {
        let m = zero_score_model();
        assert!(m.sample(0, 1).unwrap().is_empty());
        assert_eq!(m.sample(3, 4).unwrap(), m.sample(3, 4).unwrap());
    }

    #[test]
    fn zero_iterations_keeps_init() {
        let (data, _) = crate::synthdata::make_grade_chain(2, 2, 5, 0.5, 0).unwrap();
        let sched = default_schedule();
        let cfg = ScoreTrainConfig { iterations: 0, ..Default::default() };
        let a = train_score(&data, &sched, &ScoreNetConfig::default(), &cfg).unwrap();
        let init = Mlp::new(2, &[64, 64], 2, Activation::Silu, Some(32), rng::derive_seed(0, "score-init", 0)).unwrap();
        assert_eq!(a.model.net, init);
        assert!(a.losses.is_empty());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = zero_score_model();
        let bytes = m.to_checkpoint(Some("h".into())).unwrap();
        let (back, meta) = ScoreModel::from_checkpoint(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta.schedule.unwrap().timesteps, 200);
    }
}
