//! Counterfactual augmentation and uncertainty-weighted fine-tuning.

use std::collections::HashSet;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::barrier::BarrierStats;
use crate::classifier::Classifier;
use crate::diffusion::ScoreModel;
use crate::error::{DcaError, Result};
use crate::metrics;
use crate::nn::adam::{AdamConfig, ParamTape};
use crate::rng;
use crate::sde::{extract_counterfactuals, integrate, SdeConfig};
use crate::synthdata::{csv_line, Codec, Dataset, LabeledPoint, Split};
use crate::vector::{argmax, softmax};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualSample {
    /// Index of the source point in the train split.
    pub source_id: usize,
    /// SDE step the latent was taken from.
    pub step: usize,
    pub y: usize,
    /// Direction the trajectory was driven towards.
    pub target: usize,
    /// `C*` argmax on `x_prime`.
    pub y_prime: usize,
    pub t_used: f64,
    pub seed: u64,
    pub z_prime: Vec<f64>,
    pub x_prime: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UncertaintyWeights {
    pub log_sigma_ce: f64,
    pub log_sigma_align: f64,
}

impl UncertaintyWeights {
    /// Stationary point `σ² = 2L` for fixed component losses.
    pub fn stationary(l_ce: f64, l_align: f64) -> Self {
        Self { log_sigma_ce: 0.5 * (2.0 * l_ce).ln(), log_sigma_align: 0.5 * (2.0 * l_align).ln() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CfConfig {
    /// Step count, λ, κ and `t_score`; the horizon is set per direction.
    pub sde: SdeConfig,
    pub every: usize,
    pub refine_steps: usize,
    /// Horizon as a multiple of the mean `T_min` for the direction.
    pub t_scale: f64,
    /// Only every `source_stride`-th train point seeds trajectories.
    pub source_stride: usize,
}

impl Default for CfConfig {
    fn default() -> Self {
        Self { sde: SdeConfig::default(), every: 100, refine_steps: 50, t_scale: 1.5, source_stride: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CfSet {
    pub samples: Vec<CounterfactualSample>,
    /// Samples discarded because `C*` put them in a non-adjacent class.
    pub dropped: usize,
}

/// Counterfactuals for one source point and direction.
#[allow(clippy::too_many_arguments)]
pub fn generate_for(
    model: &ScoreModel,
    c_star: &Classifier,
    codec: &Codec,
    x: &[f64],
    source_id: usize,
    y: usize,
    target: usize,
    t_sde: f64,
    cfg: &CfConfig,
    seed: u64,
) -> Result<Vec<CounterfactualSample>> {
    let z0 = codec.encode(x)?;
    let sde = cfg.sde.with_horizon(t_sde).with_seed(rng::derive_seed(seed, "cf-path", 0));
    let traj = integrate(model, c_star, codec, &z0, y, target, &sde)?;
    let extract_seed = rng::derive_seed(seed, "cf-refine", 0);
    let mut out = extract_counterfactuals(&traj, cfg.every, cfg.refine_steps, model, c_star, codec, extract_seed, source_id)?;
    for s in &mut out {
        s.seed = seed;
    }
    Ok(out)
}

/// Drives every train point towards each adjacent class with horizon
/// `t_scale × mean T_min` and pools the refined intermediate states.
pub fn build_cf_dataset(
    train: &Dataset,
    model: &ScoreModel,
    c_star: &Classifier,
    codec: &Codec,
    stats: &BarrierStats,
    cfg: &CfConfig,
    seed: u64,
) -> Result<CfSet> {
    if train.split != Split::Train {
        return Err(DcaError::Precondition("counterfactuals augment the train split only".into()));
    }
    if cfg.source_stride == 0 {
        return Err(DcaError::InvalidArgument("source_stride must be ≥ 1".into()));
    }
    let k = train.num_classes;
    let mut work = Vec::new();
    for (i, p) in train.points.iter().enumerate().step_by(cfg.source_stride) {
        let dirs = [p.label.checked_sub(1), Some(p.label + 1).filter(|&t| t < k)];
        for target in dirs.into_iter().flatten() {
            let mean = stats.mean_for(p.label, target).ok_or(DcaError::MissingBarrierStats(p.label, target))?;
            work.push((i, p.label, target, cfg.t_scale * mean));
        }
    }
    let per_item = work
        .par_iter()
        .map(|&(i, y, target, t)| {
            let s = rng::derive_seed(rng::derive_seed(seed, "cf-source", i as u64), "cf-target", target as u64);
            generate_for(model, c_star, codec, &train.points[i].z, i, y, target, t, cfg, s)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut set = CfSet::default();
    for s in per_item.into_iter().flatten() {
        if s.y.abs_diff(s.y_prime) <= 1 {
            set.samples.push(s);
        } else {
            set.dropped += 1;
        }
    }
    Ok(set)
}

/// Which classifier outputs the alignment term compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignSpace {
    #[default]
    Probs,
    Logits,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LossOptions {
    /// Train counterfactuals against the full `C*` distribution instead of its argmax.
    pub soft_labels: bool,
    pub align: AlignSpace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub total: f64,
    pub l_ce: f64,
    pub l_align: f64,
    pub grad_params: Vec<f64>,
    pub grad_log_sigma_ce: f64,
    pub grad_log_sigma_align: f64,
}

/// `e^{−2a} L_CE + e^{−2b} L_align + a + b` with `a = log σ_CE`, `b = log σ_align`.
///
/// `L_CE` averages over originals and counterfactuals together; `L_align`
/// averages `‖C(x') − C*(x')‖²` over counterfactuals and is 0 without any.
pub fn total_loss(
    c: &Classifier,
    c_star: &Classifier,
    orig: &[&LabeledPoint],
    cf: &[&CounterfactualSample],
    w: &UncertaintyWeights,
    opts: &LossOptions,
) -> Result<LossOutput> {
    if !c_star.is_frozen() {
        return Err(DcaError::Precondition("the reference classifier must be frozen".into()));
    }
    let n = orig.len() + cf.len();
    if n == 0 {
        return Err(DcaError::EmptyBatch);
    }
    let w_ce = (-2.0 * w.log_sigma_ce).exp();
    let w_al = (-2.0 * w.log_sigma_align).exp();
    let net = c.net();
    let mut grad = vec![0.0; net.num_params()];
    let inv_n = 1.0 / n as f64;
    let mut l_ce = 0.0;
    for p in orig {
        let trace = net.trace(&p.z, None)?;
        let probs = softmax(trace.output());
        l_ce -= probs[p.label].max(f64::MIN_POSITIVE).ln();
        let mut cot: Vec<f64> = probs.iter().map(|q| q * w_ce * inv_n).collect();
        cot[p.label] -= w_ce * inv_n;
        net.backward_from(&trace, &cot, Some(&mut grad))?;
    }
    let inv_m = if cf.is_empty() { 0.0 } else { 1.0 / cf.len() as f64 };
    let mut l_align = 0.0;
    for s in cf {
        let trace = net.trace(&s.x_prime, None)?;
        let logits = trace.output();
        let probs = softmax(logits);
        let ref_logits = c_star.logits(&s.x_prime)?;
        let ref_probs = softmax(&ref_logits);
        let target = if opts.soft_labels {
            ref_probs.clone()
        } else {
            let mut t = vec![0.0; probs.len()];
            t[s.y_prime] = 1.0;
            t
        };
        l_ce -= target
            .iter()
            .zip(&probs)
            .filter(|(t, _)| **t > 0.0)
            .map(|(t, q)| t * q.max(f64::MIN_POSITIVE).ln())
            .sum::<f64>();
        let mut cot: Vec<f64> = probs.iter().zip(&target).map(|(q, t)| (q - t) * w_ce * inv_n).collect();
        match opts.align {
            AlignSpace::Probs => {
                let g: Vec<f64> = probs.iter().zip(&ref_probs).map(|(a, b)| 2.0 * (a - b)).collect();
                l_align += probs.iter().zip(&ref_probs).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                let pg: f64 = probs.iter().zip(&g).map(|(p, g)| p * g).sum();
                for (i, c) in cot.iter_mut().enumerate() {
                    *c += w_al * inv_m * probs[i] * (g[i] - pg);
                }
            }
            AlignSpace::Logits => {
                l_align += logits.iter().zip(&ref_logits).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                for (i, c) in cot.iter_mut().enumerate() {
                    *c += w_al * inv_m * 2.0 * (logits[i] - ref_logits[i]);
                }
            }
        }
        net.backward_from(&trace, &cot, Some(&mut grad))?;
    }
    l_ce *= inv_n;
    l_align *= inv_m;
    Ok(LossOutput {
        total: w_ce * l_ce + w_al * l_align + w.log_sigma_ce + w.log_sigma_align,
        l_ce,
        l_align,
        grad_params: grad,
        grad_log_sigma_ce: 1.0 - 2.0 * w_ce * l_ce,
        grad_log_sigma_align: 1.0 - 2.0 * w_al * l_align,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelfCorrectConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub loss: LossOptions,
}

impl Default for SelfCorrectConfig {
    fn default() -> Self {
        Self { epochs: 20, lr: 1e-3, batch: 64, loss: LossOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub l_ce: f64,
    pub l_align: f64,
    pub train_accuracy: f64,
    pub log_sigma_ce: f64,
    pub log_sigma_align: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfCorrectReport {
    pub epochs: Vec<EpochRecord>,
    pub weights: UncertaintyWeights,
    pub n_original: usize,
    pub n_counterfactual: usize,
    pub c_star_checksum: u64,
}

/// Fine-tunes a copy of `c_init` on the train split plus `cf`, with Adam
/// over the network parameters and both log σ (initialized to 0).
pub fn self_correct(
    c_init: &Classifier,
    c_star: &Classifier,
    train: &Dataset,
    cf: &[CounterfactualSample],
    cfg: &SelfCorrectConfig,
    seed: u64,
) -> Result<(Classifier, SelfCorrectReport)> {
    if !c_init.net().same_architecture(c_star.net()) || c_init.num_classes() != c_star.num_classes() {
        return Err(DcaError::ArchitectureMismatch("C and C* must share an architecture".into()));
    }
    if cfg.batch == 0 {
        return Err(DcaError::InvalidArgument("batch must be ≥ 1".into()));
    }
    audit_provenance(cf, train, &[])?;
    let mut c = c_init.thawed_copy();
    let mut w = UncertaintyWeights::default();
    let mut net_tape = ParamTape::new(c.net().num_params());
    let mut sigma_tape = ParamTape::new(2);
    let adam = AdamConfig::with_lr(cfg.lr);
    let n_orig = train.len();
    let mut order: Vec<usize> = (0..n_orig + cf.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        rng::shuffle(&mut rng::stream(seed, "selfcorrect-epoch", epoch as u64), &mut order);
        let (mut total, mut l_ce, mut l_align) = (0.0, 0.0, 0.0);
        let batches = order.chunks(cfg.batch).count() as f64;
        for (b, chunk) in order.chunks(cfg.batch).enumerate() {
            let orig: Vec<&LabeledPoint> = chunk.iter().filter(|&&i| i < n_orig).map(|&i| &train.points[i]).collect();
            let cfs: Vec<&CounterfactualSample> = chunk.iter().filter(|&&i| i >= n_orig).map(|&i| &cf[i - n_orig]).collect();
            let out = total_loss(&c, c_star, &orig, &cfs, &w, &cfg.loss)?;
            if !out.total.is_finite() {
                return Err(DcaError::NonFiniteLoss { iteration: epoch * order.len() + b, loss: out.total });
            }
            total += out.total / batches;
            l_ce += out.l_ce / batches;
            l_align += out.l_align / batches;
            net_tape.grad.copy_from_slice(&out.grad_params);
            net_tape.adam_step(c.params_mut()?, &adam)?;
            sigma_tape.grad[0] = out.grad_log_sigma_ce;
            sigma_tape.grad[1] = out.grad_log_sigma_align;
            let mut s = [w.log_sigma_ce, w.log_sigma_align];
            sigma_tape.adam_step(&mut s, &adam)?;
            w = UncertaintyWeights { log_sigma_ce: s[0], log_sigma_align: s[1] };
        }
        epochs.push(EpochRecord {
            epoch,
            total,
            l_ce,
            l_align,
            train_accuracy: metrics::accuracy(&c, train)?,
            log_sigma_ce: w.log_sigma_ce,
            log_sigma_align: w.log_sigma_align,
        });
    }
    c.meta.epochs = c_init.meta.epochs + cfg.epochs;
    let report = SelfCorrectReport {
        epochs,
        weights: w,
        n_original: n_orig,
        n_counterfactual: cf.len(),
        c_star_checksum: c_star.checksum(),
    };
    Ok((c, report))
}

/// Checks that every counterfactual traces back to a train point of its
/// source label and that none coincides with a held-out point.
pub fn audit_provenance(cf: &[CounterfactualSample], train: &Dataset, held_out: &[&Dataset]) -> Result<()> {
    if train.split != Split::Train {
        return Err(DcaError::Precondition(format!("counterfactuals attached to the {} split", train.split)));
    }
    let key = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<u64>>();
    let mut held = HashSet::new();
    for d in held_out {
        if d.split == Split::Train {
            return Err(DcaError::Precondition("held-out set is a train split".into()));
        }
        held.extend(d.points.iter().map(|p| key(&p.z)));
    }
    for (i, s) in cf.iter().enumerate() {
        let src = train.points.get(s.source_id).ok_or_else(|| {
            DcaError::Precondition(format!("counterfactual {i} names missing source {}", s.source_id))
        })?;
        if src.label != s.y {
            return Err(DcaError::Precondition(format!("counterfactual {i} source label mismatch")));
        }
        if s.y_prime >= train.num_classes {
            return Err(DcaError::Precondition(format!("counterfactual {i} label {} out of range", s.y_prime)));
        }
        if held.contains(&key(&s.x_prime)) {
            return Err(DcaError::Precondition(format!("counterfactual {i} duplicates a held-out point")));
        }
    }
    Ok(())
}

/// Replays the `C*` labels of a counterfactual set.
pub fn labels_consistent(cf: &[CounterfactualSample], c_star: &Classifier) -> Result<bool> {
    for s in cf {
        if argmax(&c_star.logits(&s.x_prime)?) != s.y_prime {
            return Ok(false);
        }
    }
    Ok(true)
}

const CF_FIXED: [&str; 7] = ["source_id", "step", "y", "y_prime", "t_used", "target", "seed"];

/// `source_id,step,y,y_prime,t_used,target,seed,z0..`.
pub fn write_cf_csv<W: Write>(cf: &[CounterfactualSample], dim: usize, mut w: W, comment: Option<&str>) -> Result<()> {
    if let Some(c) = comment {
        writeln!(w, "# {c}")?;
    }
    let mut header = CF_FIXED.join(",");
    for i in 0..dim {
        header.push_str(&format!(",z{i}"));
    }
    writeln!(w, "{header}")?;
    for s in cf {
        let mut row = format!("{},{},{},{},{},{},{}", s.source_id, s.step, s.y, s.y_prime, s.t_used, s.target, s.seed);
        for v in &s.z_prime {
            row.push_str(&format!(",{v}"));
        }
        writeln!(w, "{row}")?;
    }
    Ok(())
}

/// Reads a counterfactual set, recomputing `x_prime = decode(z_prime)`.
pub fn read_cf_csv<R: Read>(r: R, codec: &Codec) -> Result<Vec<CounterfactualSample>> {
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    let perr = |line: usize, message: String| DcaError::Parse { line, message };
    let header = reader.headers().map_err(|e| perr(csv_line(&e), e.to_string()))?.clone();
    let dim = codec.dim();
    let ok = header.len() == CF_FIXED.len() + dim
        && header.iter().zip(CF_FIXED).all(|(h, w)| h == w)
        && header.iter().skip(CF_FIXED.len()).enumerate().all(|(i, h)| h == format!("z{i}"));
    if !ok {
        return Err(perr(1, format!("expected header {},z0..z{}", CF_FIXED.join(","), dim.saturating_sub(1))));
    }
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| perr(csv_line(&e), e.to_string()))?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let int = |i: usize| -> Result<u64> { rec[i].trim().parse().map_err(|_| perr(line, format!("bad integer {:?}", &rec[i]))) };
        let t_used: f64 = rec[4].trim().parse().map_err(|_| perr(line, format!("bad horizon {:?}", &rec[4])))?;
        let z_prime = rec
            .iter()
            .skip(CF_FIXED.len())
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| perr(line, e.to_string()))?;
        let x_prime = codec.decode(&z_prime)?;
        out.push(CounterfactualSample {
            source_id: int(0)? as usize,
            step: int(1)? as usize,
            y: int(2)? as usize,
            y_prime: int(3)? as usize,
            t_used,
            target: int(5)? as usize,
            seed: int(6)?,
            z_prime,
            x_prime,
        });
    }
    Ok(out)
}
