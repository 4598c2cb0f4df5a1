//! Experiment configuration: a sectioned TOML file, `--section.key=value`
//! overrides, range checks and the hash stamped into every artifact.

use std::path::Path;

use dca_core::ablation::AblationConfig;
use dca_core::barrier::{IterationMode, ProbeConfig};
use dca_core::classifier::{ClassifierNetConfig, ClassifierTrainConfig};
use dca_core::diffusion::{ScheduleSpec, ScoreNetConfig, ScoreTrainConfig};
use dca_core::nn::Activation;
use dca_core::sde::SdeConfig;
use dca_core::selfcorrect::{AlignSpace, CfConfig, LossOptions, SelfCorrectConfig};
use dca_core::synthdata::GradeChain;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Not part of the config hash.
    pub output_dir: String,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub score: ScoreConfig,
    pub classifier: ClassifierConfig,
    pub sde: SdeSection,
    pub barrier: BarrierSection,
    pub generate: GenerateSection,
    pub self_correct: SelfCorrectSection,
    pub ablation: AblationSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: "out".into(),
            data: DataConfig::default(),
            schedule: ScheduleConfig::default(),
            score: ScoreConfig::default(),
            classifier: ClassifierConfig::default(),
            sde: SdeSection::default(),
            barrier: BarrierSection::default(),
            generate: GenerateSection::default(),
            self_correct: SelfCorrectSection::default(),
            ablation: AblationSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub generator: String,
    pub classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    pub n_val_per_class: usize,
    pub n_test_per_class: usize,
    pub spread: f64,
    pub spacing: f64,
    /// Bend between consecutive chain segments; the generator's rule when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub turn: Option<f64>,
    pub spacing_multipliers: Vec<f64>,
    pub spread_multipliers: Vec<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            generator: "grade_chain".into(),
            classes: 5,
            dim: 2,
            n_per_class: 1000,
            n_val_per_class: 200,
            n_test_per_class: 300,
            spread: 0.5,
            spacing: 8.0,
            turn: None,
            spacing_multipliers: Vec::new(),
            spread_multipliers: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        let s = ScheduleSpec::default();
        Self { timesteps: s.timesteps, beta_start: s.beta_start, beta_end: s.beta_end }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub embed_width: usize,
    pub iterations: usize,
    pub lr: f64,
    pub lr_floor: f64,
    pub batch: usize,
    pub ema_decay: f64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        let net = ScoreNetConfig::default();
        let t = ScoreTrainConfig::default();
        Self {
            hidden: net.hidden,
            activation: net.activation,
            embed_width: net.embed_width,
            iterations: t.iterations,
            lr: t.lr,
            lr_floor: t.lr_floor,
            batch: t.batch,
            ema_decay: t.ema_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub weight_decay: f64,
    pub input_noise: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        let net = ClassifierNetConfig::default();
        let t = ClassifierTrainConfig::default();
        Self {
            hidden: net.hidden,
            activation: net.activation,
            epochs: t.epochs,
            lr: t.lr,
            batch: t.batch,
            weight_decay: t.weight_decay,
            input_noise: t.input_noise,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdeSection {
    pub n_steps: usize,
    pub lambda: f64,
    pub kappa: f64,
    pub t_score: usize,
    pub refine_steps: usize,
    pub every: usize,
    pub t_sde_scale: f64,
}

impl Default for SdeSection {
    fn default() -> Self {
        let s = SdeConfig::default();
        let cf = CfConfig::default();
        Self {
            n_steps: s.n_steps,
            lambda: s.lambda,
            kappa: s.kappa,
            t_score: s.t_score,
            refine_steps: cf.refine_steps,
            every: cf.every,
            t_sde_scale: cf.t_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BarrierSection {
    pub t_max: f64,
    pub iterations: usize,
    pub n_per_pair: usize,
    /// Count `iterations` as predicate evaluations instead of bisection rounds.
    pub count_evaluations: bool,
}

impl Default for BarrierSection {
    fn default() -> Self {
        let p = ProbeConfig::default();
        Self { t_max: p.t_max, iterations: p.iterations, n_per_pair: p.n_per_pair, count_evaluations: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    /// Only every `source_stride`-th train point seeds counterfactuals.
    pub source_stride: usize,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self { source_stride: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfCorrectSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub trials: usize,
    /// Epochs for the deliberately undertrained baseline `C`; 0 starts `C`
    /// as a copy of `C*` instead.
    pub baseline_epochs: usize,
    pub soft_labels: bool,
    pub align: AlignSpace,
}

impl Default for SelfCorrectSection {
    fn default() -> Self {
        let s = SelfCorrectConfig::default();
        Self {
            epochs: s.epochs,
            lr: s.lr,
            batch: s.batch,
            trials: 3,
            baseline_epochs: 2,
            soft_labels: s.loss.soft_labels,
            align: s.loss.align,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub n_per_direction: usize,
    pub seeds: usize,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self { n_per_direction: AblationConfig::default().n_per_direction, seeds: 3 }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn parse_err(text: &str, e: &toml::de::Error) -> CliError {
    CliError::Config { line: e.span().map(|s| line_of(text, s.start)), message: e.message().to_string() }
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn override_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), CliError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| CliError::Usage(format!("bad override key {key:?}")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config { line: None, message: format!("{p} is not a section") })?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Parses config text, applies `key=value` overrides, then range-checks.
    pub fn from_str_with(text: &str, overrides: &[(String, String)]) -> Result<Self, CliError> {
        // The file alone first, so its errors carry line numbers.
        let from_file: Self = toml::from_str(text).map_err(|e| parse_err(text, &e))?;
        let cfg = if overrides.is_empty() {
            from_file
        } else {
            let mut table: toml::Table = text.parse().map_err(|e| parse_err(text, &e))?;
            for (k, v) in overrides {
                set_path(&mut table, k, override_value(v))?;
            }
            toml::Value::Table(table)
                .try_into()
                .map_err(|e: toml::de::Error| CliError::Config { line: None, message: format!("override: {}", e.message()) })?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Missing path means all defaults.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::Config { line: None, message: format!("{}: {e}", p.display()) })?,
            None => String::new(),
        };
        Self::from_str_with(&text, overrides)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let range = |key: &str, msg: String| Err(CliError::Config { line: None, message: format!("{key}: {msg}") });
        let pos = |key: &str, v: f64| if v > 0.0 && v.is_finite() { Ok(()) } else { range(key, format!("{v} must be positive")) };
        let at_least = |key: &str, v: usize, min: usize| if v >= min { Ok(()) } else { range(key, format!("{v} must be ≥ {min}")) };
        let d = &self.data;
        if d.generator != "grade_chain" {
            return range("data.generator", format!("unknown generator {:?}", d.generator));
        }
        at_least("data.classes", d.classes, 2)?;
        at_least("data.dim", d.dim, 2)?;
        at_least("data.n_per_class", d.n_per_class, 1)?;
        at_least("data.n_val_per_class", d.n_val_per_class, 1)?;
        at_least("data.n_test_per_class", d.n_test_per_class, 1)?;
        pos("data.spread", d.spread)?;
        pos("data.spacing", d.spacing)?;
        self.chain().validate().or_else(|e| range("data", e.to_string()))?;

        at_least("schedule.timesteps", self.schedule.timesteps, 1)?;
        let (b0, b1) = (self.schedule.beta_start, self.schedule.beta_end);
        if !(0.0 < b0 && b0 <= b1 && b1 < 1.0) {
            return range("schedule", format!("need 0 < beta_start ≤ beta_end < 1, got {b0}, {b1}"));
        }

        at_least("score.iterations", self.score.iterations, 1)?;
        at_least("score.batch", self.score.batch, 1)?;
        at_least("score.embed_width", self.score.embed_width, 2)?;
        pos("score.lr", self.score.lr)?;
        if !(0.0..=1.0).contains(&self.score.lr_floor) {
            return range("score.lr_floor", format!("{} outside [0, 1]", self.score.lr_floor));
        }
        if !(0.0..1.0).contains(&self.score.ema_decay) {
            return range("score.ema_decay", format!("{} outside [0, 1)", self.score.ema_decay));
        }

        let c = &self.classifier;
        at_least("classifier.batch", c.batch, 1)?;
        pos("classifier.lr", c.lr)?;
        if !(c.weight_decay >= 0.0 && c.weight_decay.is_finite()) {
            return range("classifier.weight_decay", format!("{} must be ≥ 0", c.weight_decay));
        }
        if !(c.input_noise >= 0.0 && c.input_noise.is_finite()) {
            return range("classifier.input_noise", format!("{} must be ≥ 0", c.input_noise));
        }

        let s = &self.sde;
        if !(0.0..=1.0).contains(&s.lambda) {
            return range("sde.lambda", format!("{} outside [0, 1]", s.lambda));
        }
        if !(s.kappa >= 0.0 && s.kappa.is_finite()) {
            return range("sde.kappa", format!("{} must be ≥ 0", s.kappa));
        }
        at_least("sde.n_steps", s.n_steps, 1)?;
        if s.t_score < 1 || s.t_score > self.schedule.timesteps {
            return range("sde.t_score", format!("{} outside 1..={}", s.t_score, self.schedule.timesteps));
        }
        if s.refine_steps > self.schedule.timesteps {
            return range("sde.refine_steps", format!("{} exceeds schedule.timesteps", s.refine_steps));
        }
        if s.every < 1 || s.n_steps % s.every != 0 {
            return range("sde.every", format!("{} must divide sde.n_steps = {}", s.every, s.n_steps));
        }
        pos("sde.t_sde_scale", s.t_sde_scale)?;

        pos("barrier.t_max", self.barrier.t_max)?;
        at_least("barrier.iterations", self.barrier.iterations, 1)?;
        at_least("barrier.n_per_pair", self.barrier.n_per_pair, 1)?;
        at_least("generate.source_stride", self.generate.source_stride, 1)?;

        let sc = &self.self_correct;
        pos("self_correct.lr", sc.lr)?;
        at_least("self_correct.batch", sc.batch, 1)?;
        at_least("self_correct.trials", sc.trials, 1)?;
        at_least("ablation.n_per_direction", self.ablation.n_per_direction, 1)?;
        at_least("ablation.seeds", self.ablation.seeds, 1)?;
        Ok(())
    }

    /// SHA-256 over the canonical JSON form, output directory excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir.clear();
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn chain(&self) -> GradeChain {
        let d = &self.data;
        let mut g = GradeChain::new(d.classes, d.dim, d.spread)
            .with_spacing(d.spacing)
            .with_spacing_multipliers(d.spacing_multipliers.clone())
            .with_spread_multipliers(d.spread_multipliers.clone());
        if let Some(t) = d.turn {
            g = g.with_turn(t);
        }
        g
    }

    pub fn schedule_spec(&self) -> ScheduleSpec {
        ScheduleSpec { timesteps: self.schedule.timesteps, beta_start: self.schedule.beta_start, beta_end: self.schedule.beta_end }
    }

    pub fn score_net(&self) -> ScoreNetConfig {
        ScoreNetConfig { hidden: self.score.hidden.clone(), activation: self.score.activation, embed_width: self.score.embed_width }
    }

    pub fn score_train(&self, seed: u64) -> ScoreTrainConfig {
        let s = &self.score;
        ScoreTrainConfig { iterations: s.iterations, lr: s.lr, lr_floor: s.lr_floor, batch: s.batch, ema_decay: s.ema_decay, seed }
    }

    pub fn classifier_net(&self) -> ClassifierNetConfig {
        ClassifierNetConfig { hidden: self.classifier.hidden.clone(), activation: self.classifier.activation }
    }

    pub fn classifier_train(&self, epochs: usize, seed: u64) -> ClassifierTrainConfig {
        let c = &self.classifier;
        ClassifierTrainConfig { epochs, lr: c.lr, batch: c.batch, weight_decay: c.weight_decay, input_noise: c.input_noise, seed }
    }

    /// Base SDE settings; horizon and seed are set per trajectory.
    pub fn sde_base(&self) -> SdeConfig {
        SdeConfig { n_steps: self.sde.n_steps, lambda: self.sde.lambda, kappa: self.sde.kappa, t_score: self.sde.t_score, ..SdeConfig::default() }
    }

    pub fn probe(&self) -> ProbeConfig {
        ProbeConfig {
            t_max: self.barrier.t_max,
            iterations: self.barrier.iterations,
            mode: if self.barrier.count_evaluations { IterationMode::Evaluations } else { IterationMode::Rounds },
            n_per_pair: self.barrier.n_per_pair,
        }
    }

    pub fn cf(&self) -> CfConfig {
        CfConfig {
            sde: self.sde_base(),
            every: self.sde.every,
            refine_steps: self.sde.refine_steps,
            t_scale: self.sde.t_sde_scale,
            source_stride: self.generate.source_stride,
        }
    }

    pub fn self_correct_cfg(&self) -> SelfCorrectConfig {
        let s = &self.self_correct;
        SelfCorrectConfig { epochs: s.epochs, lr: s.lr, batch: s.batch, loss: LossOptions { soft_labels: s.soft_labels, align: s.align } }
    }

    pub fn ablation_cfg(&self) -> AblationConfig {
        AblationConfig {
            sde: self.sde_base(),
            t_scale: self.sde.t_sde_scale,
            refine_steps: self.sde.refine_steps,
            n_per_direction: self.ablation.n_per_direction,
        }
    }
}
