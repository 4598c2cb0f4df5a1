//! Config-driven runner for the counterfactual pipeline. Every subcommand
//! reads and writes artifacts under one output directory; see `dca --help`.

pub mod commands;
pub mod config;
pub mod error;
pub mod svg;
pub mod workspace;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands::Single;
use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::workspace::{Workspace, RESOLVED_CONFIG};

#[derive(Debug, Parser)]
#[command(name = "dca", version, about = "Diffusion-guided counterfactuals on synthetic ordinal data")]
#[command(after_help = "Any config key can be overridden as --section.key=value, e.g. --sde.kappa=2.0")]
pub struct Cli {
    /// TOML experiment config; omitted means all defaults.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Master seed (overrides `seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Omit timestamps from SVG output.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Run the barrier bisection for 100 iterations.
    #[arg(long, global = true)]
    pub paper_fidelity: bool,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Let `evaluate` combine artifacts from different configs.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample train/val/test splits of the grade chain.
    GenData,
    /// Train the noise-prediction network.
    TrainScore,
    /// Train and freeze the reference classifier C*.
    TrainClassifier,
    /// Counterfactuals for the whole train split, or for one test input.
    Generate {
        /// Test-split index of a single input.
        #[arg(long)]
        input: Option<usize>,
        /// Adjacent target class (single input only).
        #[arg(long, requires = "input")]
        target: Option<usize>,
        /// SDE horizon; defaults to t_sde_scale times the probed mean T_min.
        #[arg(long, requires = "input")]
        horizon: Option<f64>,
    },
    /// Measure the minimum SDE horizon for every adjacent direction.
    ProbeBarrier,
    /// Fine-tune C against C* with the counterfactual set.
    SelfCorrect,
    /// Collect every available report into one metrics file.
    Evaluate,
    /// Compare SDE endpoints with and without refinement.
    AblateRefinement,
    /// Render SVG charts of whatever artifacts exist.
    Plot,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainScore => "train-score",
            Command::TrainClassifier => "train-classifier",
            Command::Generate { .. } => "generate",
            Command::ProbeBarrier => "probe-barrier",
            Command::SelfCorrect => "self-correct",
            Command::Evaluate => "evaluate",
            Command::AblateRefinement => "ablate-refinement",
            Command::Plot => "plot",
        }
    }
}

/// Splits `--section.key=value` overrides from the arguments clap parses.
/// A dotted flag without `=` takes the next argument as its value.
pub fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), CliError> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if !key.contains('.') {
            rest.push(a);
            continue;
        }
        let value = match value {
            Some(v) => v,
            None => it.next().ok_or_else(|| CliError::Usage(format!("--{key} needs a value")))?,
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

/// Resolves the config for `cli`, echoes it into the output directory and
/// runs the subcommand on a pool of `--jobs` threads.
pub fn run(cli: Cli, overrides: &[(String, String)]) -> Result<String, CliError> {
    let mut all = overrides.to_vec();
    if let Some(s) = cli.seed {
        all.push(("seed".into(), s.to_string()));
    }
    if let Some(o) = &cli.out {
        all.push(("output_dir".into(), format!("{:?}", o.display().to_string())));
    }
    if cli.paper_fidelity {
        all.push(("barrier.iterations".into(), "100".into()));
    }
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &all)?;
    let ws = Workspace::new(&cfg.output_dir, cfg.hash(), cfg.data.classes, cfg.data.dim);
    ws.write(RESOLVED_CONFIG, format!("# config_hash={}\n{}", ws.hash, cfg.to_toml()).as_bytes())?;

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(CliError::Usage("--jobs must be ≥ 1".into()));
        }
        pool = pool.num_threads(j);
    }
    let pool = pool.build().map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    let name = cli.command.name();
    let out = pool.install(|| match cli.command {
        Command::GenData => commands::gen_data(&cfg, &ws),
        Command::TrainScore => commands::train_score_cmd(&cfg, &ws),
        Command::TrainClassifier => commands::train_classifier_cmd(&cfg, &ws),
        Command::Generate { input, target, horizon } => {
            commands::generate(&cfg, &ws, input.map(|input| Single { input, target, horizon }))
        }
        Command::ProbeBarrier => commands::probe_barrier(&cfg, &ws),
        Command::SelfCorrect => commands::self_correct_cmd(&cfg, &ws),
        Command::Evaluate => commands::evaluate(&cfg, &ws, cli.force),
        Command::AblateRefinement => commands::ablate(&cfg, &ws),
        Command::Plot => commands::plot(&ws, cli.deterministic),
    })?;
    Ok(format!("{name}: {out}"))
}

/// Full argument vector in, exit code out; errors go to stderr as JSON.
pub fn main_with_args(args: Vec<String>) -> i32 {
    let result = split_overrides(args).and_then(|(rest, overrides)| match Cli::try_parse_from(rest) {
        Ok(cli) => run(cli, &overrides),
        Err(e) if !e.use_stderr() => {
            // --help and --version.
            print!("{e}");
            Ok(String::new())
        }
        Err(e) => Err(CliError::Usage(e.to_string().trim().to_string())),
    });
    match result {
        Ok(msg) => {
            if !msg.is_empty() {
                println!("{msg}");
            }
            0
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}
