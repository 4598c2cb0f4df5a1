//! One pass over the whole method on the default 5-class chain, printing
//! the quantities the acceptance suite checks. Trained models are cached
//! under the directory given as the first argument.
//!
//! `cargo run --release -p dca-core --example desk_run -- /tmp/dca-cache`

use std::fs;
use std::path::Path;
use std::time::Instant;

use dca_core::ablation::{refinement_ablation, AblationConfig, Variant};
use dca_core::barrier::{adjacent_pairs, probe_all, select_inputs, ProbeConfig};
use dca_core::classifier::{train_classifier, Classifier, ClassifierNetConfig, ClassifierTrainConfig};
use dca_core::diffusion::{train_score, NoiseSchedule, ScheduleSpec, ScoreModel, ScoreNetConfig, ScoreTrainConfig};
use dca_core::metrics::{adjacent_pair_accuracy, t_test_ind};
use dca_core::sde::{integrate, SdeConfig};
use dca_core::selfcorrect::{build_cf_dataset, self_correct, CfConfig, SelfCorrectConfig};
use dca_core::synthdata::{Codec, GradeChain, Split};
use dca_core::{rng, Result};

fn cached<T>(path: &Path, make: impl FnOnce() -> Result<T>, save: impl Fn(&T) -> Result<Vec<u8>>, load: impl Fn(&[u8]) -> Result<T>) -> Result<T> {
    if let Ok(bytes) = fs::read(path) {
        return load(&bytes);
    }
    let v = make()?;
    fs::write(path, save(&v)?)?;
    Ok(v)
}

fn main() -> Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "/tmp/dca-cache".into());
    fs::create_dir_all(&dir)?;
    let dir = Path::new(&dir);
    let chain = GradeChain::new(5, 2, 0.5);
    let (train, oracle) = chain.build(1000, 0)?;
    let test = chain.sample(&oracle, 300, Split::Test, 0)?;
    let schedule = NoiseSchedule::from_spec(ScheduleSpec::default())?;
    let codec = Codec::identity(2);
    let t0 = Instant::now();
    let model = cached(
        &dir.join("score.dca"),
        || Ok(train_score(&train, &schedule, &ScoreNetConfig::default(), &ScoreTrainConfig::default())?.model),
        |m: &ScoreModel| m.to_checkpoint(None),
        |b| Ok(ScoreModel::from_checkpoint(b)?.0),
    )?;
    let net_cfg = ClassifierNetConfig::default();
    let c_star = cached(
        &dir.join("classifier.dca"),
        || train_classifier(&train, None, &net_cfg, &ClassifierTrainConfig::default()),
        |c: &Classifier| c.to_checkpoint(None),
        |b| Ok(Classifier::from_checkpoint(b)?.0),
    )?
    .freeze();
    println!("models ready {:.1}s, C* adjacent acc {:.4}", t0.elapsed().as_secs_f64(), adjacent_pair_accuracy(&c_star, &test)?);

    let base = SdeConfig::default();
    let pairs = adjacent_pairs(5);
    let t0 = Instant::now();
    let (_, stats) = probe_all(&test, &pairs, &model, &c_star, &codec, &base, &ProbeConfig::default(), 1)?;
    println!("probe {:.1}s", t0.elapsed().as_secs_f64());
    for p in &stats.pairs {
        println!("  {}->{} n={} fail={} mean={:.3} sd={:.3}", p.y, p.y_prime, p.count, p.failures, p.mean, p.std);
    }

    let t0 = Instant::now();
    for (pi, &(y, yp)) in pairs.iter().enumerate() {
        let Some(m) = stats.mean_for(y, yp) else { continue };
        let inputs = select_inputs(&test, &c_star, &codec, y, 200, 2, pi)?;
        let mut ok = 0;
        for (id, z) in &inputs {
            let cfg = base.with_horizon(2.0 * m).with_seed(rng::derive_seed(3, "cross", *id as u64));
            if integrate(&model, &c_star, &codec, z, y, yp, &cfg)?.last().probs[yp] > 0.5 {
                ok += 1;
            }
        }
        println!("  cross {y}->{yp}: {ok}/{}", inputs.len());
    }
    println!("crossing {:.1}s", t0.elapsed().as_secs_f64());

    let t0 = Instant::now();
    let report = refinement_ablation(&test, &train, &model, &c_star, &codec, &stats, &AblationConfig::default(), 5)?;
    for class in 0..5 {
        let (w, wo) = (report.row(class, Variant::Refined).unwrap(), report.row(class, Variant::Unrefined).unwrap());
        println!(
            "  ablate class {class}: mmd w/ {:.5} w/o {:.5} | 1nn w/ {:.4} w/o {:.4} | n {} {}",
            w.mmd2, wo.mmd2, w.knn1, wo.knn1, w.n, wo.n
        );
    }
    println!("ablation {:.1}s", t0.elapsed().as_secs_f64());

    // Self-correction of a baseline trained for only a few epochs.
    let cf_cfg = CfConfig { source_stride: 10, ..Default::default() };
    let (mut base_acc, mut tuned_acc) = (Vec::new(), Vec::new());
    for trial in 0..3u64 {
        let t0 = Instant::now();
        let weak = train_classifier(&train, None, &net_cfg, &ClassifierTrainConfig { epochs: 5, seed: 10 + trial, ..Default::default() })?;
        let cf = build_cf_dataset(&train, &model, &c_star, &codec, &stats, &cf_cfg, 30 + trial)?;
        let (tuned, rep) = self_correct(&weak, &c_star, &train, &cf.samples, &SelfCorrectConfig::default(), 40 + trial)?;
        let (b, t) = (adjacent_pair_accuracy(&weak, &test)?, adjacent_pair_accuracy(&tuned, &test)?);
        base_acc.push(b);
        tuned_acc.push(t);
        println!(
            "  trial {trial}: cf={} base {b:.4} tuned {t:.4} ({:.1}s) checksum ok {}",
            cf.samples.len(),
            t0.elapsed().as_secs_f64(),
            rep.c_star_checksum == c_star.checksum()
        );
    }
    let tt = t_test_ind(&tuned_acc, &base_acc)?;
    println!("  t {:.3} p {:.4}", tt.t, tt.p);
    Ok(())
}
