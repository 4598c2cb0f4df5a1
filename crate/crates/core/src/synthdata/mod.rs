//! Synthetic ordinal datasets with exact density oracles.
//!
//! Classes are isotropic Gaussian clusters whose means sit in order along a
//! bent chain, so adjacent grades are nearest neighbours in mean space. Per-gap
//! spacing and per-class spread multipliers make asymmetric transitions
//! possible on purpose.

mod codec;
mod oracle;

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use codec::{AffineCodec, Codec};
pub use oracle::{ClassMixture, Component, GmmOracle};

use crate::error::{DcaError, Result};
use crate::rng;
use crate::vector::all_finite;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPoint {
    pub z: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = DcaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(DcaError::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub points: Vec<LabeledPoint>,
    pub num_classes: usize,
    pub dim: usize,
    pub split: Split,
}

impl Dataset {
    /// Validates shapes and labels. A train split must contain every class.
    pub fn new(points: Vec<LabeledPoint>, num_classes: usize, dim: usize, split: Split) -> Result<Self> {
        if dim < 2 {
            return Err(DcaError::InvalidArgument(format!("dimension {dim} < 2")));
        }
        let mut seen = vec![false; num_classes];
        for p in &points {
            if p.z.len() != dim {
                return Err(DcaError::DimensionMismatch { expected: dim, got: p.z.len() });
            }
            if p.label >= num_classes {
                return Err(DcaError::InvalidArgument(format!(
                    "label {} outside 0..{num_classes}",
                    p.label
                )));
            }
            if !all_finite(&p.z) {
                return Err(DcaError::InvalidArgument("non-finite coordinate".into()));
            }
            seen[p.label] = true;
        }
        if split == Split::Train {
            if let Some(missing) = seen.iter().position(|s| !s) {
                return Err(DcaError::DegenerateDataset(format!(
                    "class {missing} absent from train split"
                )));
            }
        }
        Ok(Self { points, num_classes, dim, split })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Indices of points carrying `label`, in dataset order.
    pub fn indices_of(&self, label: usize) -> Vec<usize> {
        self.points
            .iter()
            .enumerate()
            .filter(|(_, p)| p.label == label)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn class_points(&self, label: usize) -> Vec<Vec<f64>> {
        self.points.iter().filter(|p| p.label == label).map(|p| p.z.clone()).collect()
    }

    /// Writes `dim,label,z0,...` rows. `comment` becomes a leading `#` line.
    pub fn write_csv<W: Write>(&self, mut w: W, comment: Option<&str>) -> Result<()> {
        if let Some(c) = comment {
            writeln!(w, "# {c}")?;
        }
        let mut header = String::from("dim,label");
        for i in 0..self.dim {
            header.push_str(&format!(",z{i}"));
        }
        writeln!(w, "{header}")?;
        for p in &self.points {
            let mut row = format!("{},{}", self.dim, p.label);
            for v in &p.z {
                row.push_str(&format!(",{v}"));
            }
            writeln!(w, "{row}")?;
        }
        Ok(())
    }

    /// Parses the CSV written by [`Dataset::write_csv`]. When `num_classes`
    /// is `None` it is inferred as `max label + 1`.
    pub fn read_csv<R: Read>(r: R, split: Split, num_classes: Option<usize>) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .has_headers(true)
            .from_reader(r);
        let parse_err = |line: usize, message: String| DcaError::Parse { line, message };
        let headers = reader
            .headers()
            .map_err(|e| parse_err(csv_line(&e), e.to_string()))?
            .clone();
        if headers.len() < 4 || &headers[0] != "dim" || &headers[1] != "label" {
            return Err(parse_err(1, "expected header dim,label,z0,z1,...".into()));
        }
        let dim = headers.len() - 2;
        for (i, h) in headers.iter().skip(2).enumerate() {
            if h != format!("z{i}") {
                return Err(parse_err(1, format!("unexpected column {h:?}")));
            }
        }
        let mut points = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| parse_err(csv_line(&e), e.to_string()))?;
            let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
            if rec.len() != dim + 2 {
                return Err(parse_err(line, format!("expected {} fields, got {}", dim + 2, rec.len())));
            }
            let row_dim: usize = rec[0]
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("bad dim {:?}", &rec[0])))?;
            if row_dim != dim {
                return Err(parse_err(line, format!("row dim {row_dim} != header dim {dim}")));
            }
            let label: usize = rec[1]
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("bad label {:?}", &rec[1])))?;
            let z = rec
                .iter()
                .skip(2)
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| parse_err(line, e.to_string()))?;
            points.push(LabeledPoint { z, label });
        }
        let k = match num_classes {
            Some(k) => k,
            None => points.iter().map(|p| p.label + 1).max().unwrap_or(0),
        };
        Dataset::new(points, k, dim, split)
    }
}

pub(crate) fn csv_line(e: &csv::Error) -> usize {
    e.position().map(|p| p.line() as usize).unwrap_or(0)
}

/// Builder for the ordinal grade-chain family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeChain {
    pub num_classes: usize,
    pub dim: usize,
    pub spread: f64,
    /// Distance between consecutive means before gap multipliers.
    pub spacing: f64,
    /// Turning angle (radians) between consecutive chain segments.
    pub turn: f64,
    /// Per-gap spacing multipliers, length `K − 1` (empty = all ones).
    pub spacing_multipliers: Vec<f64>,
    /// Per-class standard-deviation multipliers, length `K` (empty = all ones).
    pub spread_multipliers: Vec<f64>,
}

impl GradeChain {
    pub fn new(num_classes: usize, dim: usize, spread: f64) -> Self {
        // About 4 rad of total bend, so inner classes have a curved exit on
        // both sides; capped at a right angle per gap.
        let turn = if num_classes > 1 {
            (4.0 / (num_classes - 1) as f64).min(std::f64::consts::FRAC_PI_2)
        } else {
            0.0
        };
        Self {
            num_classes,
            dim,
            spread,
            spacing: 8.0,
            turn,
            spacing_multipliers: Vec::new(),
            spread_multipliers: Vec::new(),
        }
    }

    pub fn with_spacing(mut self, spacing: f64) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn with_turn(mut self, turn: f64) -> Self {
        self.turn = turn;
        self
    }

    pub fn with_spacing_multipliers(mut self, m: Vec<f64>) -> Self {
        self.spacing_multipliers = m;
        self
    }

    pub fn with_spread_multipliers(mut self, m: Vec<f64>) -> Self {
        self.spread_multipliers = m;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DcaError::InvalidArgument(m));
        if self.num_classes < 2 {
            return bad(format!("K = {} < 2", self.num_classes));
        }
        if self.dim < 2 {
            return bad(format!("d = {} < 2", self.dim));
        }
        if !(self.spread > 0.0 && self.spread.is_finite()) {
            return bad(format!("spread must be > 0, got {}", self.spread));
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return bad(format!("spacing must be > 0, got {}", self.spacing));
        }
        if !(0.0..=std::f64::consts::FRAC_PI_2).contains(&self.turn.abs()) {
            return bad(format!("turn {} must be at most π/2", self.turn));
        }
        let k = self.num_classes;
        if !self.spacing_multipliers.is_empty() && self.spacing_multipliers.len() != k - 1 {
            return bad(format!("need {} spacing multipliers", k - 1));
        }
        if !self.spread_multipliers.is_empty() && self.spread_multipliers.len() != k {
            return bad(format!("need {k} spread multipliers"));
        }
        if self.spacing_multipliers.iter().chain(&self.spread_multipliers).any(|m| !(*m > 0.0)) {
            return bad("multipliers must be > 0".into());
        }
        Ok(())
    }

    /// Class means, centred at the origin; coordinates beyond the first two are 0.
    pub fn means(&self) -> Vec<Vec<f64>> {
        let k = self.num_classes;
        let mut pts = vec![[0.0f64, 0.0f64]];
        let start = -self.turn * (k as f64 - 2.0) / 2.0;
        for gap in 0..k - 1 {
            let m = self.spacing_multipliers.get(gap).copied().unwrap_or(1.0);
            let phi = start + self.turn * gap as f64;
            let prev = pts[gap];
            pts.push([prev[0] + self.spacing * m * phi.cos(), prev[1] + self.spacing * m * phi.sin()]);
        }
        let cx = pts.iter().map(|p| p[0]).sum::<f64>() / k as f64;
        let cy = pts.iter().map(|p| p[1]).sum::<f64>() / k as f64;
        pts.iter()
            .map(|p| {
                let mut v = vec![0.0; self.dim];
                v[0] = p[0] - cx;
                v[1] = p[1] - cy;
                v
            })
            .collect()
    }

    pub fn oracle(&self) -> Result<GmmOracle> {
        self.validate()?;
        let k = self.num_classes;
        let classes = self
            .means()
            .into_iter()
            .enumerate()
            .map(|(c, mean)| {
                let sd = self.spread * self.spread_multipliers.get(c).copied().unwrap_or(1.0);
                ClassMixture { components: vec![Component { mean, variance: sd * sd, weight: 1.0 }] }
            })
            .collect();
        GmmOracle::new(self.dim, classes, vec![1.0 / k as f64; k])
    }

    /// Draws `n_per_class` points per class from the oracle for `split`.
    pub fn sample(&self, oracle: &GmmOracle, n_per_class: usize, split: Split, seed: u64) -> Result<Dataset> {
        if n_per_class < 1 {
            return Err(DcaError::InvalidArgument("n_per_class must be ≥ 1".into()));
        }
        let mut points = Vec::with_capacity(n_per_class * self.num_classes);
        for k in 0..self.num_classes {
            let mut r = rng::stream(seed, split.as_str(), k as u64);
            for _ in 0..n_per_class {
                points.push(LabeledPoint { z: oracle.sample_class(k, &mut r), label: k });
            }
        }
        Dataset::new(points, self.num_classes, self.dim, split)
    }

    /// Oracle plus a train split.
    pub fn build(&self, n_per_class: usize, seed: u64) -> Result<(Dataset, GmmOracle)> {
        let oracle = self.oracle()?;
        let data = self.sample(&oracle, n_per_class, Split::Train, seed)?;
        Ok((data, oracle))
    }
}

/// `K` isotropic clusters of standard deviation `spread` along the default chain.
pub fn make_grade_chain(
    num_classes: usize,
    dim: usize,
    n_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<(Dataset, GmmOracle)> {
    GradeChain::new(num_classes, dim, spread).build(n_per_class, seed)
}
