//! One function per subcommand. Each reads its inputs from the workspace,
//! writes its artifacts stamped with the config hash, and returns a short
//! human summary for stdout.

use std::collections::BTreeMap;

use dca_core::ablation::refinement_ablation;
use dca_core::barrier::{adjacent_pairs, probe_all, write_results_csv};
use dca_core::classifier::train_classifier;
use dca_core::diffusion::{train_score, NoiseSchedule};
use dca_core::metrics::{accuracy, adjacent_pair_accuracy, pair_accuracy, t_test_ind, MetricsReport};
use dca_core::rng::derive_seed;
use dca_core::sde::integrate;
use dca_core::selfcorrect::{
    audit_provenance, build_cf_dataset, generate_for, labels_consistent, self_correct, write_cf_csv, SelfCorrectReport,
};
use dca_core::synthdata::Split;
use dca_core::vector::cosine;
use dca_core::DcaError;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::svg;
use crate::workspace::*;

pub type Outcome = Result<String, CliError>;

pub fn gen_data(cfg: &ExperimentConfig, ws: &Workspace) -> Outcome {
    let chain = cfg.chain();
    let oracle = chain.oracle()?;
    let seed = derive_seed(cfg.seed, "data", 0);
    let d = &cfg.data;
    let mut sizes = Vec::new();
    for (split, n, rel) in [(Split::Train, d.n_per_class, TRAIN), (Split::Val, d.n_val_per_class, VAL), (Split::Test, d.n_test_per_class, TEST)] {
        let data = chain.sample(&oracle, n, split, seed)?;
        ws.write_with(rel, |w| data.write_csv(w, Some(&ws.stamp())))?;
        sizes.push(data.len());
    }
    Ok(format!("wrote train/val/test splits of {}/{}/{} points", sizes[0], sizes[1], sizes[2]))
}

#[derive(Serialize)]
struct ScoreReport {
    config_hash: String,
    iterations: usize,
    /// Mean loss over consecutive blocks of iterations.
    loss_curve: Vec<f64>,
    final_loss: f64,
}

pub fn train_score_cmd(cfg: &ExperimentConfig, ws: &Workspace) -> Outcome {
    let train = ws.dataset(Split::Train)?;
    let schedule = NoiseSchedule::from_spec(cfg.schedule_spec())?;
    let out = train_score(&train, &schedule, &cfg.score_net(), &cfg.score_train(derive_seed(cfg.seed, "score", 0)))?;
    ws.write(SCORE, &out.model.to_checkpoint(Some(ws.hash.clone()))?)?;
    let block = (out.losses.len() / 100).max(1);
    let loss_curve: Vec<f64> = out.losses.chunks(block).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    let tail = &out.losses[out.losses.len().saturating_sub(500)..];
    let final_loss = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
    ws.write_json(SCORE_REPORT, &ScoreReport { config_hash: ws.hash.clone(), iterations: out.losses.len(), loss_curve, final_loss })?;
    Ok(format!("score model trained, final loss {final_loss:.4}"))
}

pub fn train_classifier_cmd(cfg: &ExperimentConfig, ws: &Workspace) -> Outcome {
    let train = ws.dataset(Split::Train)?;
    let val = ws.dataset(Split::Val)?;
    let test = ws.dataset(Split::Test)?;
    let train_cfg = cfg.classifier_train(cfg.classifier.epochs, derive_seed(cfg.seed, "classifier", 0));
    let c = train_classifier(&train, Some(&val), &cfg.classifier_net(), &train_cfg)?.freeze();
    ws.write(CLASSIFIER, &c.to_checkpoint(Some(ws.hash.clone()))?)?;
    let test_acc = accuracy(&c, &test)?;
    let adjacent = adjacent_pair_accuracy(&c, &test)?;
    ws.write_json(
        CLASSIFIER_REPORT,
        &json!({
            "config_hash": ws.hash,
            "val_accuracy": c.meta.val_accuracy,
            "test_accuracy": test_acc,
            "test_adjacent_pair_accuracy": adjacent,
            "checksum": c.checksum(),
        }),
    )?;
    Ok(format!("classifier trained, test accuracy {test_acc:.4}, adjacent-pair {adjacent:.4}"))
}

pub fn probe_barrier(cfg: &ExperimentConfig, ws: &Workspace) -> Outcome {
    let test = ws.dataset(Split::Test)?;
    let model = ws.score_model()?;
    let c_star = ws.classifier()?;
    let pairs = adjacent_pairs(ws.num_classes);
    let (results, stats) =
        probe_all(&test, &pairs, &model, &c_star, &ws.codec, &cfg.sde_base(), &cfg.probe(), derive_seed(cfg.seed, "barrier", 0))?;
    ws.write_with(BARRIER_RESULTS, |w| write_results_csv(&results, w, Some(&ws.stamp())))?;
    ws.write_with(BARRIER_STATS, |w| stats.write_csv(w, Some(&ws.stamp())))?;
    let mut lines = vec![format!("probed {} inputs", results.len())];
    for p in &stats.pairs {
        lines.push(format!("  {} -> {}: mean T_min {:.3} ({} of {} failed)", p.y, p.y_prime, p.mean, p.failures, p.count + p.failures));
    }
    Ok(lines.join("\n"))
}

/// Options of `generate` that pick a single input instead of the whole train split.
#[derive(Debug, Clone, Copy, Default)]
pub struct Single {
    pub input: usize,
    pub target: Option<usize>,
    pub horizon: Option<f64>,
}

pub fn generate(cfg: &ExperimentConfig, ws: &Workspace, single: Option<Single>) -> Outcome {
    let model = ws.score_model()?;
    let c_star = ws.classifier()?;
    match single {
        Some(s) => generate_single(cfg, ws, &model, &c_star, s),
        None => generate_batch(cfg, ws, &model, &c_star),
    }
}

fn generate_single(
    cfg: &ExperimentConfig,
    ws: &Workspace,
    model: &dca_core::diffusion::ScoreModel,
    c_star: &dca_core::classifier::Classifier,
    s: Single,
) -> Outcome {
    let test = ws.dataset(Split::Test)?;
    let point = test
        .points
        .get(s.input)
        .ok_or_else(|| CliError::Usage(format!("--input {} out of range (test split has {})", s.input, test.len())))?;
    let y = point.label;
    let k = ws.num_classes;
    let target = s.target.unwrap_or(if y + 1 < k { y + 1 } else { y - 1 });
    if target >= k || y.abs_diff(target) != 1 {
        return Err(CliError::Usage(format!("target {target} is not adjacent to class {y}")));
    }
    let horizon = match s.horizon {
        Some(h) => h,
        None => {
            let stats = ws.barrier_stats()?;
            cfg.sde.t_sde_scale * stats.mean_for(y, target).ok_or(DcaError::MissingBarrierStats(y, target))?
        }
    };
    let cf_cfg = cfg.cf();
    let seed = derive_seed(cfg.seed, "generate-single", s.input as u64);
    // Same seeds as `generate_for`, so the exported path is the one sampled from.
    let z0 = ws.codec.encode(&point.z)?;
    let sde = cf_cfg.sde.with_horizon(horizon).with_seed(derive_seed(seed, "cf-path", 0));
    let traj = integrate(model, c_star, &ws.codec, &z0, y, target, &sde)?;
    let samples = generate_for(model, c_star, &ws.codec, &point.z, s.input, y, target, horizon, &cf_cfg, seed)?;
    let stem = format!("cf/single_{}_{y}-{target}", s.input);
    ws.write_with(&format!("{stem}_trajectory.csv"), |w| traj.write_csv(w, Some(&ws.stamp())))?;
    ws.write_with(&format!("{stem}_samples.csv"), |w| write_cf_csv(&samples, ws.codec.dim(), w, Some(&ws.stamp())))?;
    let end = &traj.last().probs;
    Ok(format!(
        "input {} ({y} -> {target}), horizon {horizon:.3}: endpoint p(target) = {:.3}, {} samples",
        s.input,
        end[target],
        samples.len()
    ))
}

fn generate_batch(
    cfg: &ExperimentConfig,
    ws: &Workspace,
    model: &dca_core::diffusion::ScoreModel,
    c_star: &dca_core::classifier::Classifier,
) -> Outcome {
    let train = ws.dataset(Split::Train)?;
    let val = ws.dataset(Split::Val)?;
    let test = ws.dataset(Split::Test)?;
    let stats = ws.barrier_stats()?;
    let set = build_cf_dataset(&train, model, c_star, &ws.codec, &stats, &cfg.cf(), derive_seed(cfg.seed, "cf", 0))?;
    audit_provenance(&set.samples, &train, &[&val, &test])?;
    let consistent = labels_consistent(&set.samples, c_star)?;
    if !consistent {
        return Err(DcaError::Precondition("stored labels disagree with C*".into()).into());
    }
    ws.write_with(CF_SET, |w| write_cf_csv(&set.samples, ws.codec.dim(), w, Some(&ws.stamp())))?;

    let final_step = cfg.sde.n_steps;
    let mut per_direction: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    for s in &set.samples {
        let e = per_direction.entry(format!("{}->{}", s.y, s.target)).or_default();
        e.0 += 1;
        if s.step == final_step {
            e.1 += 1;
            e.2 += usize::from(s.y_prime == s.target);
        }
    }
    let endpoints: usize = per_direction.values().map(|v| v.1).sum();
    let hits: usize = per_direction.values().map(|v| v.2).sum();
    let directions: BTreeMap<_, _> = per_direction
        .iter()
        .map(|(k, (n, ends, hit))| (k.clone(), json!({ "samples": n, "endpoints": ends, "endpoint_target_rate": *hit as f64 / (*ends).max(1) as f64 })))
        .collect();
    let rate = hits as f64 / endpoints.max(1) as f64;
    ws.write_json(
        CF_REPORT,
        &json!({
            "config_hash": ws.hash,
            "samples": set.samples.len(),
            "dropped_non_adjacent": set.dropped,
            "labels_consistent": consistent,
            "provenance_audit": "pass",
            "endpoint_target_rate": rate,
            "directions": directions,
        }),
    )?;
    Ok(format!("{} counterfactuals ({} dropped), endpoint target rate {rate:.3}", set.samples.len(), set.dropped))
}

#[derive(Serialize)]
struct Trial {
    trial: usize,
    seed: u64,
    baseline_adjacent_accuracy: f64,
    tuned_adjacent_accuracy: f64,
    delta: f64,
    baseline_accuracy: f64,
    tuned_accuracy: f64,
    /// Accuracy on each adjacent pair `(k, k+1)` after fine-tuning.
    tuned_pair_accuracy: Vec<f64>,
    training: SelfCorrectReport,
}

pub fn self_correct_cmd(cfg: &ExperimentConfig, ws: &Workspace) -> Outcome {
    let train = ws.dataset(Split::Train)?;
    let val = ws.dataset(Split::Val)?;
    let test = ws.dataset(Split::Test)?;
    let c_star = ws.classifier()?;
    let cf = ws.counterfactuals()?;
    let before = c_star.checksum();
    let sc = &cfg.self_correct;
    let sc_cfg = cfg.self_correct_cfg();
    let outcomes = (0..sc.trials)
        .into_par_iter()
        .map(|i| -> Result<_, CliError> {
            let c_init = if sc.baseline_epochs > 0 {
                let tc = cfg.classifier_train(sc.baseline_epochs, derive_seed(cfg.seed, "baseline", i as u64));
                train_classifier(&train, Some(&val), &cfg.classifier_net(), &tc)?
            } else {
                c_star.thawed_copy()
            };
            let seed = derive_seed(cfg.seed, "self-correct", i as u64);
            let (tuned, training) = self_correct(&c_init, &c_star, &train, &cf, &sc_cfg, seed)?;
            let k = ws.num_classes;
            let trial = Trial {
                trial: i,
                seed,
                baseline_adjacent_accuracy: adjacent_pair_accuracy(&c_init, &test)?,
                tuned_adjacent_accuracy: adjacent_pair_accuracy(&tuned, &test)?,
                delta: 0.0,
                baseline_accuracy: accuracy(&c_init, &test)?,
                tuned_accuracy: accuracy(&tuned, &test)?,
                tuned_pair_accuracy: (0..k - 1).map(|a| pair_accuracy(&tuned, &test, a, a + 1)).collect::<dca_core::Result<_>>()?,
                training,
            };
            Ok((trial, tuned.to_checkpoint(Some(ws.hash.clone()))?))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let after = c_star.checksum();
    if before != after {
        return Err(DcaError::Precondition("C* changed during fine-tuning".into()).into());
    }
    let mut trials = Vec::with_capacity(outcomes.len());
    for (mut t, ckpt) in outcomes {
        ws.write(&format!("models/tuned_{}.dca", t.trial), &ckpt)?;
        t.delta = t.tuned_adjacent_accuracy - t.baseline_adjacent_accuracy;
        trials.push(t);
    }
    let base: Vec<f64> = trials.iter().map(|t| t.baseline_adjacent_accuracy).collect();
    let tuned: Vec<f64> = trials.iter().map(|t| t.tuned_adjacent_accuracy).collect();
    let mean_delta = trials.iter().map(|t| t.delta).sum::<f64>() / trials.len() as f64;
    let improved = trials.iter().filter(|t| t.delta > 0.0).count();
    let welch = if trials.len() >= 2 { Some(t_test_ind(&tuned, &base)?) } else { None };
    ws.write_json(
        SELF_CORRECT_REPORT,
        &json!({
            "config_hash": ws.hash,
            "c_star_checksum_before": before,
            "c_star_checksum_after": after,
            "baseline": if sc.baseline_epochs > 0 { format!("separately trained for {} epochs", sc.baseline_epochs) } else { "copy of C*".to_string() },
            "counterfactuals": cf.len(),
            "mean_delta": mean_delta,
            "improved_trials": improved,
            "welch": welch,
            "trials": trials,
        }),
    )?;
    let p = welch.map(|w| format!("{:.4}", w.p)).unwrap_or_else(|| "n/a".into());
    Ok(format!("{improved}/{} trials improved, mean adjacent-pair delta {mean_delta:+.4}, Welch p = {p}", trials.len()))
}

pub fn ablate(cfg: &ExperimentConfig, ws: &Workspace) -> Outcome {
    let train = ws.dataset(Split::Train)?;
    let test = ws.dataset(Split::Test)?;
    let model = ws.score_model()?;
    let c_star = ws.classifier()?;
    let stats = ws.barrier_stats()?;
    let ab = cfg.ablation_cfg();
    let k = ws.num_classes;
    let mut wins = vec![0usize; k];
    let mut runs = Vec::new();
    for j in 0..cfg.ablation.seeds {
        let seed = derive_seed(cfg.seed, "ablation", j as u64);
        let report = refinement_ablation(&test, &train, &model, &c_star, &ws.codec, &stats, &ab, seed)?;
        ws.write_with(&format!("reports/ablation_seed{j}.csv"), |w| report.write_csv(w, Some(&ws.stamp())))?;
        for (c, w) in wins.iter_mut().enumerate() {
            *w += usize::from(report.refinement_wins(c));
        }
        runs.push(json!({ "seed": seed, "bandwidths": report.bandwidths, "rows": report.rows }));
    }
    ws.write_json(ABLATION_REPORT, &json!({ "config_hash": ws.hash, "seeds": cfg.ablation.seeds, "refined_wins_per_class": wins, "runs": runs }))?;
    Ok(format!("refinement lowers both MMD² and 1-NN distance in {wins:?} of {} seeds per class", cfg.ablation.seeds))
}

fn read_json(ws: &Workspace, rel: &str) -> Result<Value, CliError> {
    let bytes = ws.read(rel, "evaluate")?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Report { path: ws.path(rel), message: e.to_string() })
}

fn num(v: &Value) -> Option<f64> {
    v.as_f64()
}

/// Mean cosine between learned and analytic scores at `t_score` over test
/// points above the 10th percentile of the data density.
fn score_fidelity(cfg: &ExperimentConfig, ws: &Workspace) -> Result<(f64, usize), CliError> {
    let model = ws.score_model()?;
    let test = ws.dataset(Split::Test)?;
    let oracle = cfg.chain().oracle()?;
    let t = cfg.sde.t_score;
    let noised = oracle.noised(model.schedule.alpha_bar(t));
    let mut dens = test.points.iter().map(|p| Ok((oracle.log_density(&p.z)?, &p.z))).collect::<dca_core::Result<Vec<_>>>()?;
    dens.sort_by(|a, b| a.0.total_cmp(&b.0));
    let keep = &dens[dens.len() / 10..];
    let mut total = 0.0;
    for (_, z) in keep {
        total += cosine(&model.score_at(z, t)?, &noised.score(z)?);
    }
    Ok((total / keep.len() as f64, keep.len()))
}

const STAMPED: [&str; 14] = [
    TRAIN,
    VAL,
    TEST,
    SCORE,
    CLASSIFIER,
    BARRIER_RESULTS,
    BARRIER_STATS,
    CF_SET,
    SCORE_REPORT,
    CLASSIFIER_REPORT,
    CF_REPORT,
    SELF_CORRECT_REPORT,
    ABLATION_REPORT,
    RESOLVED_CONFIG,
];

pub fn evaluate(cfg: &ExperimentConfig, ws: &Workspace, force: bool) -> Outcome {
    let mut seen = BTreeMap::new();
    for rel in STAMPED.iter().filter(|r| **r != RESOLVED_CONFIG && ws.exists(r)) {
        seen.insert(rel.to_string(), ws.recorded_hash(rel)?);
    }
    let foreign: Vec<String> =
        seen.iter().filter(|(_, h)| h.as_deref() != Some(ws.hash.as_str())).map(|(r, h)| format!("{r} ({})", h.as_deref().unwrap_or("none"))).collect();
    if !foreign.is_empty() && !force {
        return Err(CliError::HashMismatch(format!("current config {} but {}; pass --force to evaluate anyway", ws.hash, foreign.join(", "))));
    }

    let mut m = MetricsReport::default();
    m.metadata.insert("config_hash".into(), ws.hash.clone());
    m.metadata.insert("mmd_scale".into(), "raw (not multiplied by 1e2)".into());
    if !foreign.is_empty() {
        m.metadata.insert("foreign_artifacts".into(), foreign.join("; "));
    }
    let test = ws.dataset(Split::Test)?;
    let c_star = ws.classifier()?;
    m.insert("classifier/test_accuracy", accuracy(&c_star, &test)?, test.len())?;
    m.insert("classifier/test_adjacent_pair_accuracy", adjacent_pair_accuracy(&c_star, &test)?, test.len())?;
    if ws.exists(SCORE) {
        let (cos, n) = score_fidelity(cfg, ws)?;
        m.insert("score/mean_cosine", cos, n)?;
    }
    if ws.exists(BARRIER_STATS) {
        for p in ws.barrier_stats()?.pairs {
            let name = format!("barrier/{}->{}", p.y, p.y_prime);
            if p.count > 0 {
                m.insert(format!("{name}/t_min_mean"), p.mean, p.count)?;
                m.insert(format!("{name}/t_min_median"), p.median, p.count)?;
            }
            if p.count + p.failures > 0 {
                m.insert(format!("{name}/failures"), p.failures as f64, p.count + p.failures)?;
            }
        }
    }
    if ws.exists(CF_REPORT) {
        let r = read_json(ws, CF_REPORT)?;
        let n = r["samples"].as_u64().unwrap_or(0) as usize;
        if n > 0 {
            m.insert("counterfactuals/samples", n as f64, n)?;
            if let Some(rate) = num(&r["endpoint_target_rate"]) {
                m.insert("counterfactuals/endpoint_target_rate", rate, n)?;
            }
        }
    }
    if ws.exists(SELF_CORRECT_REPORT) {
        let r = read_json(ws, SELF_CORRECT_REPORT)?;
        let trials = r["trials"].as_array().cloned().unwrap_or_default();
        let col = |key: &str| trials.iter().filter_map(|t| num(&t[key])).collect::<Vec<f64>>();
        for key in ["baseline_adjacent_accuracy", "tuned_adjacent_accuracy", "delta"] {
            let v = col(key);
            if !v.is_empty() {
                m.insert_trials(format!("self_correct/{key}"), &v)?;
            }
        }
        if let Some(p) = num(&r["welch"]["p"]) {
            m.insert("self_correct/welch_p", p, trials.len())?;
        }
    }
    if ws.exists(ABLATION_REPORT) {
        let r = read_json(ws, ABLATION_REPORT)?;
        let mut cells: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for run in r["runs"].as_array().into_iter().flatten() {
            for row in run["rows"].as_array().into_iter().flatten() {
                let name = format!("ablation/class{}/{}", row["class"], if row["variant"] == "Refined" { "w" } else { "wo" });
                for key in ["mmd2", "knn1", "knn5", "knn10"] {
                    if let Some(v) = num(&row[key]) {
                        cells.entry(format!("{name}/{key}")).or_default().push(v);
                    }
                }
            }
        }
        for (name, v) in cells {
            m.insert_trials(name, &v)?;
        }
    }
    let mut json_text = m.to_json();
    json_text.push('\n');
    ws.write(METRICS_JSON, json_text.as_bytes())?;
    ws.write_with(METRICS_CSV, |w| m.write_csv(w, Some(&ws.stamp())))?;
    Ok(format!("{} metrics written to {}", m.metrics.len(), ws.path(METRICS_JSON).display()))
}

pub fn plot(ws: &Workspace, deterministic: bool) -> Outcome {
    let stamp = (!deterministic).then(svg::timestamp);
    let train = ws.dataset(Split::Train)?;
    let mut trajectories = Vec::new();
    let cf_dir = ws.path("cf");
    if let Ok(entries) = std::fs::read_dir(&cf_dir) {
        let mut names: Vec<_> = entries.filter_map(|e| e.ok()).map(|e| e.file_name().to_string_lossy().into_owned()).collect();
        names.sort();
        for n in names.iter().filter(|n| n.ends_with("_trajectory.csv")) {
            let rel = format!("cf/{n}");
            trajectories.push(svg::read_columns(&ws.read(&rel, "generate")?, &["z0", "z1"]).map_err(|message| CliError::Report { path: ws.path(&rel), message })?);
        }
    }
    let mut written = vec!["plots/data.svg"];
    ws.write("plots/data.svg", svg::scatter(&train, &trajectories, stamp.as_deref()).as_bytes())?;
    if ws.exists(BARRIER_RESULTS) {
        let cols = svg::read_columns(&ws.read(BARRIER_RESULTS, "probe-barrier")?, &["pair_src", "pair_dst", "t_min"])
            .map_err(|message| CliError::Report { path: ws.path(BARRIER_RESULTS), message })?;
        ws.write("plots/barrier.svg", svg::barrier_boxes(&cols, stamp.as_deref()).as_bytes())?;
        written.push("plots/barrier.svg");
    }
    if ws.exists(SELF_CORRECT_REPORT) {
        let r = read_json(ws, SELF_CORRECT_REPORT)?;
        let curves: Vec<Vec<f64>> = r["trials"]
            .as_array()
            .into_iter()
            .flatten()
            .map(|t| t["training"]["epochs"].as_array().into_iter().flatten().filter_map(|e| num(&e["total"])).collect())
            .collect();
        ws.write("plots/self_correct.svg", svg::lines(&curves, "epoch", "total loss", stamp.as_deref()).as_bytes())?;
        written.push("plots/self_correct.svg");
    }
    if ws.exists(ABLATION_REPORT) {
        let r = read_json(ws, ABLATION_REPORT)?;
        let k = ws.num_classes;
        let mut w = vec![Vec::new(); k];
        let mut wo = vec![Vec::new(); k];
        for row in r["runs"].as_array().into_iter().flatten().flat_map(|run| run["rows"].as_array().cloned().unwrap_or_default()) {
            let (Some(c), Some(v)) = (row["class"].as_u64(), num(&row["mmd2"])) else { continue };
            if (c as usize) < k {
                let side = if row["variant"] == "Refined" { &mut w } else { &mut wo };
                side[c as usize].push(v);
            }
        }
        ws.write("plots/ablation.svg", svg::paired_bars(&w, &wo, "MMD²", stamp.as_deref()).as_bytes())?;
        written.push("plots/ablation.svg");
    }
    Ok(format!("wrote {}", written.join(", ")))
}
