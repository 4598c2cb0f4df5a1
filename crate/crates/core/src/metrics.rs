//! Distribution distances, accuracy and significance tests.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize, Serializer};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::classifier::Classifier;
use crate::error::{DcaError, Result};
use crate::synthdata::Dataset;
use crate::vector::{argmax, dist, sq_dist};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    Fixed(f64),
    /// Median pairwise distance over `X ∪ Y`.
    Median,
}

/// Order-independent sum: sorting first makes the result a function of the
/// multiset of values alone.
fn canonical_sum(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

fn check_sets(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<usize> {
    let d = x.first().ok_or(DcaError::EmptySet)?.len();
    if y.is_empty() {
        return Err(DcaError::EmptySet);
    }
    for p in x.iter().chain(y) {
        if p.len() != d {
            return Err(DcaError::DimensionMismatch { expected: d, got: p.len() });
        }
    }
    Ok(d)
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Median of all pairwise distances within `points`; 1 when degenerate.
pub fn median_heuristic(points: &[&Vec<f64>]) -> f64 {
    let mut ds = Vec::with_capacity(points.len() * points.len().saturating_sub(1) / 2);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            ds.push(dist(points[i], points[j]));
        }
    }
    match median(ds) {
        Some(m) if m > 0.0 => m,
        _ => 1.0,
    }
}

/// Resolves the bandwidth actually used for `(X, Y)`.
pub fn resolve_bandwidth(x: &[Vec<f64>], y: &[Vec<f64>], bw: Bandwidth) -> Result<f64> {
    match bw {
        Bandwidth::Fixed(s) if s > 0.0 && s.is_finite() => Ok(s),
        Bandwidth::Fixed(s) => Err(DcaError::InvalidArgument(format!("bandwidth {s} must be > 0"))),
        Bandwidth::Median => Ok(median_heuristic(&x.iter().chain(y).collect::<Vec<_>>())),
    }
}

fn mean_kernel(a: &[Vec<f64>], b: &[Vec<f64>], gamma: f64) -> f64 {
    let mut vals = Vec::with_capacity(a.len() * b.len());
    for p in a {
        for q in b {
            vals.push((-sq_dist(p, q) * gamma).exp());
        }
    }
    canonical_sum(vals) / (a.len() * b.len()) as f64
}

/// Biased (V-statistic) MMD² with `k(a,b) = exp(−‖a−b‖²/(2σ²))`.
pub fn mmd2_rbf(x: &[Vec<f64>], y: &[Vec<f64>], bw: Bandwidth) -> Result<f64> {
    check_sets(x, y)?;
    let sigma = resolve_bandwidth(x, y, bw)?;
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let kxx = mean_kernel(x, x, gamma);
    let kyy = mean_kernel(y, y, gamma);
    let kxy = mean_kernel(x, y, gamma);
    Ok(kxx + kyy - 2.0 * kxy)
}

/// Mean over `generated` of the Euclidean distance to the k-th nearest
/// `reference` point.
pub fn knn_dist(generated: &[Vec<f64>], reference: &[Vec<f64>], k: usize) -> Result<f64> {
    if k == 0 || reference.len() < k {
        return Err(DcaError::InsufficientReference { k, have: reference.len() });
    }
    check_sets(generated, reference)?;
    let mut total = 0.0;
    let mut ds = vec![0.0; reference.len()];
    for g in generated {
        for (d, r) in ds.iter_mut().zip(reference) {
            *d = dist(g, r);
        }
        let (_, kth, _) = ds.select_nth_unstable_by(k - 1, f64::total_cmp);
        total += *kth;
    }
    Ok(total / generated.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ImageMetrics {
    /// `+∞` when the inputs are identical.
    pub psnr: f64,
    pub ssim: f64,
    pub rmse: f64,
}

/// PSNR, global single-window SSIM and RMSE for two equal-length rasters.
pub fn image_metrics(a: &[f64], b: &[f64], max_val: f64) -> Result<ImageMetrics> {
    if a.len() != b.len() {
        return Err(DcaError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(DcaError::EmptySet);
    }
    if !(max_val > 0.0) {
        return Err(DcaError::InvalidArgument("max_val must be > 0".into()));
    }
    let n = a.len() as f64;
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    let rmse = mse.sqrt();
    let psnr = if mse == 0.0 { f64::INFINITY } else { 10.0 * (max_val * max_val / mse).log10() };
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let va = a.iter().map(|x| (x - ma) * (x - ma)).sum::<f64>() / n;
    let vb = b.iter().map(|y| (y - mb) * (y - mb)).sum::<f64>() / n;
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
    let c1 = (0.01 * max_val).powi(2);
    let c2 = (0.03 * max_val).powi(2);
    let ssim = ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    Ok(ImageMetrics { psnr, ssim, rmse })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0))
}

/// Welch's two-sample t-test with a two-sided p-value.
///
/// When both samples have zero variance the statistic is 0 (equal means,
/// `p = 1`) or ±∞ (`p = 0`).
pub fn t_test_ind(a: &[f64], b: &[f64]) -> Result<TTest> {
    for s in [a, b] {
        if s.len() < 2 {
            return Err(DcaError::InsufficientSample(s.len()));
        }
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if se2 == 0.0 {
        return Ok(if ma == mb {
            TTest { t: 0.0, p: 1.0, df: f64::INFINITY }
        } else {
            TTest { t: (ma - mb).signum() * f64::INFINITY, p: 0.0, df: f64::INFINITY }
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| DcaError::InvalidArgument(e.to_string()))?;
    // sf(|t|) avoids the cancellation in 1 − cdf for large |t|.
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest { t, p, df })
}

/// Fraction of argmax-correct predictions.
pub fn accuracy(c: &Classifier, split: &Dataset) -> Result<f64> {
    if split.is_empty() {
        return Err(DcaError::EmptySplit);
    }
    let mut correct = 0usize;
    for p in &split.points {
        if c.predict(&p.z)? == p.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / split.len() as f64)
}

/// Binary accuracy on the points of classes `a` and `b`, deciding between
/// those two logits only.
pub fn pair_accuracy(c: &Classifier, split: &Dataset, a: usize, b: usize) -> Result<f64> {
    let mut n = 0usize;
    let mut correct = 0usize;
    for p in split.points.iter().filter(|p| p.label == a || p.label == b) {
        let l = c.logits(&p.z)?;
        let pred = if argmax(&[l[a], l[b]]) == 0 { a } else { b };
        n += 1;
        if pred == p.label {
            correct += 1;
        }
    }
    if n == 0 {
        return Err(DcaError::EmptySplit);
    }
    Ok(correct as f64 / n as f64)
}

/// Mean of [`pair_accuracy`] over the `K − 1` adjacent pairs.
pub fn adjacent_pair_accuracy(c: &Classifier, split: &Dataset) -> Result<f64> {
    let k = c.num_classes();
    let mut total = 0.0;
    for a in 0..k - 1 {
        total += pair_accuracy(c, split, a, a + 1)?;
    }
    Ok(total / (k - 1) as f64)
}

fn ser_real<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_nan() {
        s.serialize_str("nan")
    } else if *v > 0.0 {
        s.serialize_str("+inf")
    } else {
        s.serialize_str("-inf")
    }
}

fn ser_opt_real<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) => ser_real(x, s),
        None => s.serialize_none(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metric {
    #[serde(serialize_with = "ser_real")]
    pub value: f64,
    /// Present iff the value is a mean over more than one trial.
    #[serde(serialize_with = "ser_opt_real")]
    pub std: Option<f64>,
    pub n: usize,
}

/// Named scalar metrics plus free-form metadata, in stable key order.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    pub metrics: BTreeMap<String, Metric>,
    pub metadata: BTreeMap<String, String>,
}

impl MetricsReport {
    pub fn insert(&mut self, name: impl Into<String>, value: f64, n: usize) -> Result<()> {
        if n == 0 {
            return Err(DcaError::InvalidArgument("metrics need a positive sample count".into()));
        }
        self.metrics.insert(name.into(), Metric { value, std: None, n });
        Ok(())
    }

    /// Mean over trials, with the sample standard deviation when `trials > 1`.
    pub fn insert_trials(&mut self, name: impl Into<String>, values: &[f64]) -> Result<()> {
        if values.is_empty() {
            return Err(DcaError::InvalidArgument("metrics need a positive sample count".into()));
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = (n > 1).then(|| {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        });
        self.metrics.insert(name.into(), Metric { value: mean, std, n });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).map(|m| m.value)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    /// `metric,value,std,n` rows in key order.
    pub fn write_csv<W: Write>(&self, mut w: W, comment: Option<&str>) -> Result<()> {
        if let Some(c) = comment {
            writeln!(w, "# {c}")?;
        }
        writeln!(w, "metric,value,std,n")?;
        for (name, m) in &self.metrics {
            let std = m.std.map(|s| s.to_string()).unwrap_or_default();
            writeln!(w, "{name},{},{std},{}", m.value, m.n)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mmd_two_singletons() {
        let v = mmd2_rbf(&[vec![0.0]], &[vec![1.0]], Bandwidth::Fixed(1.0)).unwrap();
        assert!((v - (2.0 - 2.0 * (-0.5f64).exp())).abs() < 1e-15);
        assert!((v - 0.78693).abs() < 1e-5);
    }

    #[test]
    fn mmd_identical_multisets_exactly_zero() {
        let x = vec![vec![0.1, 2.0], vec![-1.0, 0.3], vec![0.5, 0.5]];
        let mut y = x.clone();
        y.reverse();
        assert_eq!(mmd2_rbf(&x, &y, Bandwidth::Median).unwrap(), 0.0);
        assert_eq!(mmd2_rbf(&x, &x, Bandwidth::Fixed(0.3)).unwrap(), 0.0);
    }

    #[test]
    fn mmd_errors() {
        assert!(matches!(mmd2_rbf(&[], &[vec![1.0]], Bandwidth::Median), Err(DcaError::EmptySet)));
        assert!(matches!(
            mmd2_rbf(&[vec![1.0]], &[vec![1.0, 2.0]], Bandwidth::Median),
            Err(DcaError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn knn_hand_enumerated() {
        let g = vec![vec![0.5, 0.0]];
        let r = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![3.0, 0.0]];
        assert_eq!(knn_dist(&g, &r, 2).unwrap(), 0.5);
        assert_eq!(knn_dist(&r[..2], &r, 1).unwrap(), 0.0);
        assert!(matches!(knn_dist(&g, &r, 4), Err(DcaError::InsufficientReference { .. })));
        assert!(matches!(knn_dist(&g, &r, 0), Err(DcaError::InsufficientReference { .. })));
    }

    #[test]
    fn image_identity_and_constant() {
        let a = vec![0.2, 0.4, 0.9];
        let m = image_metrics(&a, &a, 1.0).unwrap();
        assert_eq!(m.rmse, 0.0);
        assert_eq!(m.psnr, f64::INFINITY);
        assert!((m.ssim - 1.0).abs() < 1e-15);
        let m = image_metrics(&[0.0; 4], &[0.5; 4], 1.0).unwrap();
        assert_eq!(m.rmse, 0.5);
        assert!((m.psnr - 6.020599913279624).abs() < 1e-12);
        assert!(matches!(image_metrics(&[0.0], &[0.0, 1.0], 1.0), Err(DcaError::LengthMismatch(1, 2))));
    }

    #[test]
    fn welch_reference_values() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [2.0, 3.0, 4.0, 5.0, 6.0];
        let r = t_test_ind(&a, &b).unwrap();
        assert!((r.t + 1.0).abs() < 1e-12);
        assert!((r.df - 8.0).abs() < 1e-12);
        // Two-sided p for t = 1 on 8 degrees of freedom.
        assert!((r.p - 0.346594).abs() < 1e-5, "p = {}", r.p);
        let s = t_test_ind(&b, &a).unwrap();
        assert_eq!(s.t, -r.t);
        assert_eq!(s.p, r.p);
        let same = t_test_ind(&a, &a).unwrap();
        assert_eq!((same.t, same.p), (0.0, 1.0));
        assert!(matches!(t_test_ind(&[1.0], &a), Err(DcaError::InsufficientSample(1))));
    }

    #[test]
    fn report_serializes_infinity() {
        let mut r = MetricsReport::default();
        r.insert("psnr", f64::INFINITY, 1).unwrap();
        r.insert_trials("acc", &[0.5, 0.7]).unwrap();
        let json = r.to_json();
        assert!(json.contains("\"+inf\""));
        assert!(r.metrics["acc"].std.is_some());
        assert!(r.insert("empty", 1.0, 0).is_err());
    }
}
