//! Trains a score model on the 5-class chain and reports its cosine
//! agreement with the analytic score at the guidance timestep.
//!
//! `cargo run --release -p dca-core --example score_fidelity -- [iterations] [lr] [seed]`

use std::time::Instant;

use dca_core::diffusion::{train_score, NoiseSchedule, ScheduleSpec, ScoreNetConfig, ScoreTrainConfig};
use dca_core::synthdata::{GradeChain, Split};
use dca_core::vector::cosine;

fn main() -> dca_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let iterations = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(20_000);
    let lr = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let seed = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0);
    let t_score = 20;
    let chain = GradeChain::new(5, 2, 0.5);
    let (train, oracle) = chain.build(1000, seed)?;
    let held = chain.sample(&oracle, 400, Split::Test, seed)?;
    let schedule = NoiseSchedule::from_spec(ScheduleSpec::default())?;
    let start = Instant::now();
    let cfg = ScoreTrainConfig { iterations, lr, seed, ..Default::default() };
    let trained = train_score(&train, &schedule, &ScoreNetConfig::default(), &cfg)?;
    let secs = start.elapsed().as_secs_f64();
    let noised = oracle.noised(schedule.alpha_bar(t_score));
    let mut dens: Vec<(f64, &Vec<f64>)> =
        held.points.iter().map(|p| Ok((oracle.log_density(&p.z)?, &p.z))).collect::<dca_core::Result<_>>()?;
    dens.sort_by(|a, b| a.0.total_cmp(&b.0));
    let keep = &dens[dens.len() / 10..];
    let mut total = 0.0;
    for (_, z) in keep {
        total += cosine(&trained.model.score_at(z, t_score)?, &noised.score(z)?);
    }
    let tail = &trained.losses[trained.losses.len().saturating_sub(500)..];
    println!(
        "iterations={iterations} lr={lr} train_secs={secs:.1} final_loss={:.4} mean_cosine={:.4} n={}",
        tail.iter().sum::<f64>() / tail.len() as f64,
        total / keep.len() as f64,
        keep.len()
    );
    Ok(())
}
