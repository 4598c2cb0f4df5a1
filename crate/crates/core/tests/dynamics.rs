//! Behaviour of the guided SDE, the barrier probe and the counterfactual
//! builder on small trained models. Each chain trains once per test binary.

use std::sync::OnceLock;

use dca_core::barrier::{probe_all, BarrierStats, ProbeConfig};
use dca_core::classifier::{train_classifier, Classifier, ClassifierNetConfig, ClassifierTrainConfig};
use dca_core::diffusion::{refine_with, train_score, GaussianNoise, NoiseSchedule, ScheduleSpec, ScoreModel, ScoreNetConfig, ScoreTrainConfig};
use dca_core::rng;
use dca_core::sde::{integrate, SdeConfig};
use dca_core::selfcorrect::{build_cf_dataset, CfConfig};
use dca_core::synthdata::{Codec, Dataset, GmmOracle, GradeChain, Split};
use dca_core::vector::dist;

struct Trained {
    train: Dataset,
    test: Dataset,
    oracle: GmmOracle,
    model: ScoreModel,
    c_star: Classifier,
}

fn trained(chain: &GradeChain, seed: u64) -> Trained {
    let (train, oracle) = chain.build(500, seed).unwrap();
    let test = chain.sample(&oracle, 100, Split::Test, seed).unwrap();
    let schedule = NoiseSchedule::from_spec(ScheduleSpec::default()).unwrap();
    // Shorter training leaves the learned score visibly lopsided.
    let cfg = ScoreTrainConfig { seed, ..Default::default() };
    let model = train_score(&train, &schedule, &ScoreNetConfig::default(), &cfg).unwrap().model;
    let c_star = train_classifier(&train, None, &ClassifierNetConfig::default(), &ClassifierTrainConfig { seed, ..Default::default() })
        .unwrap()
        .freeze();
    Trained { train, test, oracle, model, c_star }
}

fn pair_chain() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| trained(&GradeChain::new(2, 2, 0.5), 41))
}

fn probe(t: &Trained, pairs: &[(usize, usize)], n: usize, seed: u64) -> BarrierStats {
    let cfg = ProbeConfig { n_per_pair: n, ..Default::default() };
    probe_all(&t.test, pairs, &t.model, &t.c_star, &Codec::identity(2), &SdeConfig::default(), &cfg, seed).unwrap().1
}

#[test]
fn symmetric_pair_has_matching_barriers() {
    let s = probe(pair_chain(), &[(0, 1), (1, 0)], 30, 5);
    let (a, b) = (s.get(0, 1).unwrap(), s.get(1, 0).unwrap());
    assert!(a.count >= 20 && b.count >= 20);
    let se = (a.std.powi(2) / a.count as f64 + b.std.powi(2) / b.count as f64).sqrt();
    assert!((a.mean - b.mean).abs() <= 2.0 * se, "0->1 {:.3} vs 1->0 {:.3}, pooled se {se:.3}", a.mean, b.mean);
}

#[test]
fn entering_a_tight_class_is_harder_than_leaving_it() {
    let t = trained(&GradeChain::new(3, 2, 0.5).with_spread_multipliers(vec![1.0, 3.0, 0.5]), 43);
    let s = probe(&t, &[(1, 2), (2, 1)], 20, 6);
    let (up, down) = (s.mean_for(1, 2).unwrap(), s.mean_for(2, 1).unwrap());
    assert!(up > down, "1->2 {up:.3} vs 2->1 {down:.3}");
}

#[test]
fn manifold_drive_keeps_samples_in_dense_regions() {
    let t = pair_chain();
    let codec = Codec::identity(2);
    let cfg = SdeConfig { lambda: 0.0, t_sde: 2.0, n_steps: 400, ..Default::default() };
    let (mut start, mut end) = (0.0, 0.0);
    for (i, p) in t.test.points.iter().enumerate() {
        let traj = integrate(&t.model, &t.c_star, &codec, &p.z, p.label, 1 - p.label, &cfg.with_seed(i as u64)).unwrap();
        start += t.oracle.log_density(&p.z).unwrap();
        end += t.oracle.log_density(&traj.last().z).unwrap();
    }
    let n = t.test.len() as f64;
    assert_eq!(n, 200.0);
    assert!(end / n >= start / n - 0.5, "mean log density {:.3} -> {:.3}", start / n, end / n);
}

#[test]
fn boundary_drive_raises_the_target_probability() {
    let t = pair_chain();
    let codec = Codec::identity(2);
    let cfg = SdeConfig { t_sde: ProbeConfig::default().t_max, ..Default::default() };
    let mut raised = 0;
    for (i, p) in t.test.points.iter().enumerate() {
        let yp = 1 - p.label;
        let traj = integrate(&t.model, &t.c_star, &codec, &p.z, p.label, yp, &cfg.with_seed(100 + i as u64)).unwrap();
        raised += usize::from(traj.last().probs[yp] > traj.states[0].probs[yp]);
    }
    assert!(raised as f64 >= 0.95 * t.test.len() as f64, "{raised} of {}", t.test.len());
}

#[test]
fn longer_refinement_moves_points_further() {
    let t = pair_chain();
    let steps = [1usize, 2, 5, 10, 20, 50, 100, 200];
    let sources: Vec<&Vec<f64>> = t.test.points.iter().step_by(40).map(|p| &p.z).collect();
    let mean_disp: Vec<f64> = steps
        .iter()
        .map(|&k| {
            let mut total = 0.0;
            for seed in 0..100u64 {
                let mut noise = GaussianNoise(rng::stream(seed, "refine-disp", k as u64));
                for z in &sources {
                    total += dist(z, &refine_with(&t.model, &t.model.schedule, z, k, &mut noise).unwrap());
                }
            }
            total / (100 * sources.len()) as f64
        })
        .collect();
    // Spearman correlation of step count against mean displacement.
    let mut order: Vec<usize> = (0..steps.len()).collect();
    order.sort_by(|&a, &b| mean_disp[a].total_cmp(&mean_disp[b]));
    let mut rank = vec![0.0; steps.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r as f64;
    }
    let n = steps.len() as f64;
    let d2: f64 = rank.iter().enumerate().map(|(i, &r)| (r - i as f64).powi(2)).sum();
    let rho = 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
    assert!(rho > 0.0, "rank correlation {rho}, displacements {mean_disp:?}");
}

#[test]
fn endpoints_mostly_reach_the_target() {
    let t = pair_chain();
    let codec = Codec::identity(2);
    let stats = probe(t, &[(0, 1), (1, 0)], 10, 7);
    let cfg = CfConfig { source_stride: 10, ..Default::default() };
    let set = build_cf_dataset(&t.train, &t.model, &t.c_star, &codec, &stats, &cfg, 8).unwrap();
    let ends: Vec<_> = set.samples.iter().filter(|s| s.step == cfg.sde.n_steps).collect();
    // One direction per source with two classes.
    assert_eq!(ends.len(), t.train.len() / 10);
    let hit = ends.iter().filter(|s| s.y_prime == s.target).count();
    assert!(hit as f64 >= 0.8 * ends.len() as f64, "{hit} of {}", ends.len());
}
