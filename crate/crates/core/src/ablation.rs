//! Refinement ablation: SDE endpoints with and without the diffusion
//! refinement pass, each compared against the real points of the class
//! `C*` assigns them to.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::barrier::{adjacent_pairs, select_inputs, BarrierStats};
use crate::classifier::Classifier;
use crate::diffusion::ScoreModel;
use crate::error::{DcaError, Result};
use crate::metrics::{knn_dist, median_heuristic, mmd2_rbf, Bandwidth};
use crate::rng;
use crate::sde::{integrate, SdeConfig};
use crate::synthdata::{Codec, Dataset};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub sde: SdeConfig,
    /// Horizon as a multiple of the mean `T_min` for the direction.
    pub t_scale: f64,
    pub refine_steps: usize,
    /// Source points per adjacent direction.
    pub n_per_direction: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { sde: SdeConfig::default(), t_scale: 1.5, refine_steps: 50, n_per_direction: 60 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Raw SDE endpoints.
    Unrefined,
    /// Endpoints after the refinement chain.
    Refined,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Unrefined => "W/O",
            Variant::Refined => "W/",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub class: usize,
    pub variant: Variant,
    /// Generated points `C*` assigns to `class`.
    pub n: usize,
    pub mmd2: f64,
    pub knn1: f64,
    pub knn5: f64,
    pub knn10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Median-heuristic bandwidth of each real class, shared by both variants.
    pub bandwidths: Vec<f64>,
}

impl AblationReport {
    pub fn row(&self, class: usize, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.class == class && r.variant == variant)
    }

    /// Refined strictly better on both MMD² and 1-NN distance for `class`.
    pub fn refinement_wins(&self, class: usize) -> bool {
        match (self.row(class, Variant::Refined), self.row(class, Variant::Unrefined)) {
            (Some(w), Some(wo)) => w.mmd2 < wo.mmd2 && w.knn1 < wo.knn1,
            _ => false,
        }
    }

    /// `class,variant,n,mmd2,knn1,knn5,knn10`; metrics of an empty group are written as `nan`.
    pub fn write_csv<W: Write>(&self, mut w: W, comment: Option<&str>) -> Result<()> {
        if let Some(c) = comment {
            writeln!(w, "# {c}")?;
        }
        writeln!(w, "class,variant,n,mmd2,knn1,knn5,knn10")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{:e},{:e},{:e},{:e}",
                r.class,
                r.variant.as_str(),
                r.n,
                r.mmd2,
                r.knn1,
                r.knn5,
                r.knn10
            )?;
        }
        Ok(())
    }
}

fn knn_or_nan(g: &[Vec<f64>], r: &[Vec<f64>], k: usize) -> Result<f64> {
    if g.is_empty() {
        return Ok(f64::NAN);
    }
    knn_dist(g, r, k.min(r.len()))
}

/// Drives `n_per_direction` sources of every adjacent direction for
/// `t_scale × mean T_min`, refines each endpoint, and scores both versions
/// per class against `real`.
#[allow(clippy::too_many_arguments)]
pub fn refinement_ablation(
    sources: &Dataset,
    real: &Dataset,
    model: &ScoreModel,
    c_star: &Classifier,
    codec: &Codec,
    stats: &BarrierStats,
    cfg: &AblationConfig,
    seed: u64,
) -> Result<AblationReport> {
    let k = real.num_classes;
    let mut work = Vec::new();
    for (pi, (y, target)) in adjacent_pairs(k).into_iter().enumerate() {
        let mean = stats.mean_for(y, target).ok_or(DcaError::MissingBarrierStats(y, target))?;
        for (id, z) in select_inputs(sources, c_star, codec, y, cfg.n_per_direction, seed, pi)? {
            work.push((pi, y, target, id, z, cfg.t_scale * mean));
        }
    }
    let ends = work
        .par_iter()
        .map(|(pi, y, target, id, z, horizon)| {
            let s = rng::derive_seed(rng::derive_seed(seed, "ablation-pair", *pi as u64), "ablation-input", *id as u64);
            let sde = cfg.sde.with_horizon(*horizon).with_seed(rng::derive_seed(s, "path", 0));
            let raw = integrate(model, c_star, codec, z, *y, *target, &sde)?.last().z.clone();
            let refined = model.refine(&raw, cfg.refine_steps, rng::derive_seed(s, "refine", 0))?;
            let raw_label = c_star.predict(&codec.decode(&raw)?)?;
            let refined_label = c_star.predict(&codec.decode(&refined)?)?;
            Ok(((raw_label, raw), (refined_label, refined)))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(2 * k);
    let mut bandwidths = Vec::with_capacity(k);
    for class in 0..k {
        let reference: Vec<Vec<f64>> = real.class_points(class).iter().map(|x| codec.encode(x)).collect::<Result<_>>()?;
        if reference.is_empty() {
            return Err(DcaError::EmptyClass(class));
        }
        let sigma = median_heuristic(&reference.iter().collect::<Vec<_>>());
        bandwidths.push(sigma);
        for variant in [Variant::Refined, Variant::Unrefined] {
            let group: Vec<Vec<f64>> = ends
                .iter()
                .map(|(raw, refined)| if variant == Variant::Refined { refined } else { raw })
                .filter(|(label, _)| *label == class)
                .map(|(_, z)| z.clone())
                .collect();
            let mmd2 = if group.is_empty() { f64::NAN } else { mmd2_rbf(&group, &reference, Bandwidth::Fixed(sigma))? };
            rows.push(AblationRow {
                class,
                variant,
                n: group.len(),
                mmd2,
                knn1: knn_or_nan(&group, &reference, 1)?,
                knn5: knn_or_nan(&group, &reference, 5)?,
                knn10: knn_or_nan(&group, &reference, 10)?,
            });
        }
    }
    Ok(AblationReport { rows, bandwidths })
}
