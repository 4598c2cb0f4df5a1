//! Minimum simulation time `T_min` needed to push an input across an
//! adjacent class boundary, found by bisection under a shared noise path.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::diffusion::ScoreModel;
use crate::error::{DcaError, Result};
use crate::rng;
use crate::sde::{integrate_with_path, SdeConfig, WienerPath};
use crate::synthdata::{csv_line, Codec, Dataset};
use crate::vector::argmax;

/// What the iteration budget counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterationMode {
    /// Bisection rounds after the `T_max` check.
    #[default]
    Rounds,
    /// SDE evaluations, the `T_max` check included.
    Evaluations,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub t_max: f64,
    pub iterations: usize,
    pub mode: IterationMode,
    pub n_per_pair: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { t_max: 6.0, iterations: 30, mode: IterationMode::Rounds, n_per_pair: 20 }
    }
}

impl ProbeConfig {
    fn rounds(&self) -> usize {
        match self.mode {
            IterationMode::Rounds => self.iterations,
            IterationMode::Evaluations => self.iterations.saturating_sub(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarrierResult {
    pub y: usize,
    pub y_prime: usize,
    pub input_id: usize,
    /// `f64::INFINITY` when the target was not reached by `T_max`.
    pub t_min: f64,
    pub iterations: usize,
    pub t_lo: f64,
    pub t_hi: f64,
    pub success: bool,
    /// Seed of the shared Wiener path.
    pub path_seed: u64,
}

/// Outcome of bisecting a predicate that is false at 0 and true at `t_max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bisection {
    pub success: bool,
    pub t_lo: f64,
    pub t_hi: f64,
    pub t_min: f64,
    pub iterations: usize,
}

/// Bisects `[0, t_max]` keeping `pred(lo) = false`, `pred(hi) = true`.
/// Stops early once a halving is no longer exact in floating point, so
/// `hi − lo = t_max / 2^iterations` holds for the reported count.
pub fn bisect<P>(mut pred: P, t_max: f64, rounds: usize) -> Result<Bisection>
where
    P: FnMut(f64) -> Result<bool>,
{
    if !(t_max > 0.0 && t_max.is_finite()) {
        return Err(DcaError::InvalidArgument(format!("T_max must be positive, got {t_max}")));
    }
    if !pred(t_max)? {
        return Ok(Bisection { success: false, t_lo: 0.0, t_hi: t_max, t_min: f64::INFINITY, iterations: 0 });
    }
    let (mut lo, mut hi) = (0.0, t_max);
    let mut used = 0;
    for _ in 0..rounds {
        let half = 0.5 * (hi - lo);
        let mid = lo + half;
        if mid - lo != half || hi - mid != half {
            break;
        }
        if pred(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
        used += 1;
    }
    Ok(Bisection { success: true, t_lo: lo, t_hi: hi, t_min: lo + 0.5 * (hi - lo), iterations: used })
}

/// True when the endpoint of the horizon-`t` trajectory has `P(y'|x) > 0.5`.
/// Horizon 0 is the untouched input.
#[allow(clippy::too_many_arguments)]
pub fn predicate(
    model: &ScoreModel,
    c_star: &Classifier,
    codec: &Codec,
    z0: &[f64],
    y: usize,
    y_prime: usize,
    base: &SdeConfig,
    path: &WienerPath,
    t: f64,
) -> Result<bool> {
    let probs = if t == 0.0 {
        c_star.class_probs(&codec.decode(z0)?)?
    } else {
        let traj = integrate_with_path(model, c_star, codec, z0, y, y_prime, &base.with_horizon(t), path)?;
        traj.last().probs.clone()
    };
    Ok(probs[y_prime] > 0.5)
}

/// Probes one latent input. `base.seed` keys the Wiener path shared by every
/// horizon tried.
#[allow(clippy::too_many_arguments)]
pub fn probe_one(
    model: &ScoreModel,
    c_star: &Classifier,
    codec: &Codec,
    z0: &[f64],
    y: usize,
    y_prime: usize,
    base: &SdeConfig,
    probe: &ProbeConfig,
    input_id: usize,
) -> Result<BarrierResult> {
    if probe.iterations < 1 {
        return Err(DcaError::InvalidArgument("iterations must be ≥ 1".into()));
    }
    let start = argmax(&c_star.logits(&codec.decode(z0)?)?);
    if start != y {
        return Err(DcaError::Precondition(format!("input {input_id} is classified {start}, not {y}")));
    }
    let path = WienerPath::new(base.seed, base.n_steps, z0.len());
    let b = bisect(|t| predicate(model, c_star, codec, z0, y, y_prime, base, &path, t), probe.t_max, probe.rounds())?;
    Ok(BarrierResult {
        y,
        y_prime,
        input_id,
        t_min: b.t_min,
        iterations: b.iterations,
        t_lo: b.t_lo,
        t_hi: b.t_hi,
        success: b.success,
        path_seed: base.seed,
    })
}

/// Seed of the Wiener path for one (pair, input).
pub fn probe_seed(seed: u64, pair_index: usize, input_id: usize) -> u64 {
    rng::derive_seed(rng::derive_seed(seed, "barrier-pair", pair_index as u64), "barrier-input", input_id as u64)
}

/// Both directions of every adjacent pair in `0..k`, in `(0,1), (1,0), (1,2), …` order.
pub fn adjacent_pairs(k: usize) -> Vec<(usize, usize)> {
    (0..k.saturating_sub(1)).flat_map(|a| [(a, a + 1), (a + 1, a)]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    pub y: usize,
    pub y_prime: usize,
    pub count: usize,
    pub failures: usize,
    /// NaN when `count == 0`.
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BarrierStats {
    pub pairs: Vec<PairStats>,
}

impl BarrierStats {
    pub fn get(&self, y: usize, y_prime: usize) -> Option<&PairStats> {
        self.pairs.iter().find(|p| p.y == y && p.y_prime == y_prime)
    }

    /// Finite mean `T_min` for a direction.
    pub fn mean_for(&self, y: usize, y_prime: usize) -> Option<f64> {
        self.get(y, y_prime).map(|p| p.mean).filter(|m| m.is_finite())
    }

    /// `y,y_prime,count,failures,mean,std,median,q1,q3`.
    pub fn write_csv<W: Write>(&self, mut w: W, comment: Option<&str>) -> Result<()> {
        if let Some(c) = comment {
            writeln!(w, "# {c}")?;
        }
        writeln!(w, "y,y_prime,count,failures,mean,std,median,q1,q3")?;
        for p in &self.pairs {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                p.y, p.y_prime, p.count, p.failures, p.mean, p.std, p.median, p.q1, p.q3
            )?;
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
        let header = reader.headers().map_err(|e| parse_err(&e))?.clone();
        let want = ["y", "y_prime", "count", "failures", "mean", "std", "median", "q1", "q3"];
        if header.iter().ne(want) {
            return Err(DcaError::Parse { line: 1, message: "unexpected barrier stats header".into() });
        }
        let mut pairs = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| parse_err(&e))?;
            let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
            let int = |i: usize| -> Result<usize> {
                rec[i].parse().map_err(|_| DcaError::Parse { line, message: format!("bad integer {:?}", &rec[i]) })
            };
            let real = |i: usize| -> Result<f64> {
                rec[i].parse().map_err(|_| DcaError::Parse { line, message: format!("bad number {:?}", &rec[i]) })
            };
            pairs.push(PairStats {
                y: int(0)?,
                y_prime: int(1)?,
                count: int(2)?,
                failures: int(3)?,
                mean: real(4)?,
                std: real(5)?,
                median: real(6)?,
                q1: real(7)?,
                q3: real(8)?,
            });
        }
        Ok(Self { pairs })
    }
}

fn parse_err(e: &csv::Error) -> DcaError {
    DcaError::Parse { line: csv_line(e), message: e.to_string() }
}

/// Type-7 (linear interpolation) quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Aggregates results per direction. Sums run over sorted values, so the
/// result does not depend on input order.
pub fn summarize(results: &[BarrierResult], pairs: &[(usize, usize)]) -> BarrierStats {
    let pairs = pairs
        .iter()
        .map(|&(y, y_prime)| {
            let mine: Vec<&BarrierResult> = results.iter().filter(|r| r.y == y && r.y_prime == y_prime).collect();
            let mut t: Vec<f64> = mine.iter().filter(|r| r.success).map(|r| r.t_min).collect();
            t.sort_by(f64::total_cmp);
            let failures = mine.len() - t.len();
            let n = t.len();
            if n == 0 {
                let nan = f64::NAN;
                return PairStats { y, y_prime, count: 0, failures, mean: nan, std: nan, median: nan, q1: nan, q3: nan };
            }
            let mean = t.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                let mut dev: Vec<f64> = t.iter().map(|v| (v - mean) * (v - mean)).collect();
                dev.sort_by(f64::total_cmp);
                (dev.iter().sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            PairStats {
                y,
                y_prime,
                count: n,
                failures,
                mean,
                std,
                median: quantile(&t, 0.5),
                q1: quantile(&t, 0.25),
                q3: quantile(&t, 0.75),
            }
        })
        .collect();
    BarrierStats { pairs }
}

/// Latent test inputs of class `y` that `C*` also assigns to `y`, in a
/// seed-determined order, at most `n`.
pub fn select_inputs(
    test: &Dataset,
    c_star: &Classifier,
    codec: &Codec,
    y: usize,
    n: usize,
    seed: u64,
    pair_index: usize,
) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut idx = test.indices_of(y);
    if idx.is_empty() {
        return Err(DcaError::EmptyClass(y));
    }
    rng::shuffle(&mut rng::stream(seed, "barrier-select", pair_index as u64), &mut idx);
    let mut out = Vec::with_capacity(n);
    for i in idx {
        if out.len() == n {
            break;
        }
        let x = &test.points[i].z;
        if c_star.predict(x)? == y {
            out.push((i, codec.encode(x)?));
        }
    }
    Ok(out)
}

/// Probes up to `n_per_pair` inputs per direction. Work items run on the
/// ambient rayon pool and are collected in index order.
#[allow(clippy::too_many_arguments)]
pub fn probe_all(
    test: &Dataset,
    pairs: &[(usize, usize)],
    model: &ScoreModel,
    c_star: &Classifier,
    codec: &Codec,
    base: &SdeConfig,
    probe: &ProbeConfig,
    seed: u64,
) -> Result<(Vec<BarrierResult>, BarrierStats)> {
    let mut work = Vec::new();
    for (pi, &(y, y_prime)) in pairs.iter().enumerate() {
        if y.abs_diff(y_prime) != 1 {
            return Err(DcaError::NonAdjacentPair(y, y_prime));
        }
        if probe.n_per_pair == 0 {
            continue;
        }
        for (id, z) in select_inputs(test, c_star, codec, y, probe.n_per_pair, seed, pi)? {
            work.push((pi, y, y_prime, id, z));
        }
    }
    let results = work
        .par_iter()
        .map(|(pi, y, y_prime, id, z)| {
            let cfg = base.with_seed(probe_seed(seed, *pi, *id));
            probe_one(model, c_star, codec, z, *y, *y_prime, &cfg, probe, *id)
        })
        .collect::<Result<Vec<_>>>()?;
    let stats = summarize(&results, pairs);
    Ok((results, stats))
}

/// `pair_src,pair_dst,input_id,success,t_min,iterations`.
pub fn write_results_csv<W: Write>(results: &[BarrierResult], mut w: W, comment: Option<&str>) -> Result<()> {
    if let Some(c) = comment {
        writeln!(w, "# {c}")?;
    }
    writeln!(w, "pair_src,pair_dst,input_id,success,t_min,iterations")?;
    for r in results {
        writeln!(w, "{},{},{},{},{},{}", r.y, r.y_prime, r.input_id, r.success, r.t_min, r.iterations)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(y: usize, yp: usize, t: f64) -> BarrierResult {
        BarrierResult {
            y,
            y_prime: yp,
            input_id: 0,
            t_min: t,
            iterations: 30,
            t_lo: t,
            t_hi: t,
            success: t.is_finite(),
            path_seed: 0,
        }
    }

    #[test]
    fn bisection_localizes_a_step() {
        let b = bisect(|t| Ok(t >= 3.2), 10.0, 30).unwrap();
        assert!(b.success);
        assert_eq!(b.iterations, 30);
        let tol = 10.0 / 2f64.powi(30);
        assert!((b.t_min - 3.2).abs() <= tol);
        assert_eq!(b.t_hi - b.t_lo, tol);
        assert!(b.t_hi >= 3.2 && b.t_lo < 3.2);
    }

    #[test]
    fn bisection_failure_is_infinite() {
        let b = bisect(|_| Ok(false), 10.0, 30).unwrap();
        assert!(!b.success);
        assert_eq!(b.t_min, f64::INFINITY);
    }

    #[test]
    fn hundred_rounds_keep_exact_width() {
        let b = bisect(|t| Ok(t >= 3.2), 10.0, 100).unwrap();
        assert!(b.iterations <= 100);
        assert_eq!(b.t_hi - b.t_lo, 10.0 / 2f64.powi(b.iterations as i32));
    }

    #[test]
    fn evaluation_mode_counts_the_first_check() {
        let p = ProbeConfig { iterations: 10, mode: IterationMode::Evaluations, ..Default::default() };
        let mut calls = 0;
        bisect(
            |t| {
                calls += 1;
                Ok(t > 1.0)
            },
            p.t_max,
            p.rounds(),
        )
        .unwrap();
        assert_eq!(calls, 10);
    }

    #[test]
    fn stats_quartiles_and_failures() {
        let rs: Vec<_> = [1.0, 2.0, 3.0, 4.0, f64::INFINITY].iter().map(|&t| result(0, 1, t)).collect();
        let s = summarize(&rs, &[(0, 1), (1, 0)]);
        let p = s.get(0, 1).unwrap();
        assert_eq!((p.count, p.failures), (4, 1));
        assert_eq!(p.mean, 2.5);
        assert_eq!(p.median, 2.5);
        assert_eq!((p.q1, p.q3), (1.75, 3.25));
        assert!(s.get(1, 0).unwrap().mean.is_nan());
        assert_eq!(s.mean_for(1, 0), None);
    }

    #[test]
    fn stats_ignore_order() {
        let ts = [0.3, 1.7, 2.2, 9.1, 0.05, 4.4];
        let a: Vec<_> = ts.iter().map(|&t| result(1, 2, t)).collect();
        let mut b = a.clone();
        b.reverse();
        assert_eq!(summarize(&a, &[(1, 2)]), summarize(&b, &[(1, 2)]));
    }

    #[test]
    fn stats_csv_roundtrip() {
        let rs: Vec<_> = [1.0, 2.5, 7.0].iter().map(|&t| result(0, 1, t)).collect();
        let s = summarize(&rs, &[(0, 1), (1, 0)]);
        let mut buf = Vec::new();
        s.write_csv(&mut buf, Some("config_hash=ab")).unwrap();
        let back = BarrierStats::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.pairs[0], s.pairs[0]);
        assert!(back.pairs[1].mean.is_nan());
    }

    #[test]
    fn adjacent_pairs_both_directions() {
        assert_eq!(adjacent_pairs(3), vec![(0, 1), (1, 0), (1, 2), (2, 1)]);
        assert!(adjacent_pairs(1).is_empty());
    }
}
