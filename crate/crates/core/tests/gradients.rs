//! Reverse-mode gradients against central finite differences, for every
//! network shape the pipeline builds.

use std::time::Instant;

use dca_core::classifier::{Classifier, ClassifierNetConfig, TrainingMeta};
use dca_core::diffusion::ScoreNetConfig;
use dca_core::nn::{Activation, Mlp};
use dca_core::rng;
use dca_core::synthdata::Codec;
use dca_core::vector::dot;
use rand::Rng;

const H: f64 = 1e-4;
const TOL: f64 = 1e-3;

/// Relative error with a floor on the denominator, so that gradients which
/// are zero up to roundoff are compared absolutely.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

fn check_pair(net: &Mlp, x: &[f64], t: Option<usize>, cot: &[f64]) -> f64 {
    let f = |net: &Mlp, x: &[f64]| dot(&net.forward(x, t).unwrap(), cot);
    let g = net.backward(x, t, cot).unwrap();
    let mut worst = 0.0f64;

    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + H;
        let up = f(net, &xp);
        xp[i] = x[i] - H;
        let down = f(net, &xp);
        xp[i] = x[i];
        worst = worst.max(rel_err((up - down) / (2.0 * H), g.input[i]));
    }

    let mut probe = net.clone();
    for i in 0..net.num_params() {
        let p = net.params()[i];
        probe.params_mut()[i] = p + H;
        let up = f(&probe, x);
        probe.params_mut()[i] = p - H;
        let down = f(&probe, x);
        probe.params_mut()[i] = p;
        worst = worst.max(rel_err((up - down) / (2.0 * H), g.params[i]));
    }
    worst
}

#[test]
fn hundred_random_networks_match_finite_differences() {
    let start = Instant::now();
    let score = ScoreNetConfig::default();
    let deep = ClassifierNetConfig { hidden: vec![32, 32], activation: Activation::Silu };
    let mut worst = 0.0f64;
    for case in 0..100u64 {
        let mut r = rng::stream(17, "fd-case", case);
        let dim = 2 + (case % 3) as usize;
        let (net, t) = match case % 4 {
            0 => (
                Mlp::new(dim, &score.hidden, dim, score.activation, Some(score.embed_width), case).unwrap(),
                Some(r.random_range(1..=1000)),
            ),
            1 => (Mlp::new(dim, &deep.hidden, 5, deep.activation, None, case).unwrap(), None),
            2 => (Mlp::new(dim, &[], 5, Activation::Silu, None, case).unwrap(), None),
            _ => (Mlp::new(dim, &[16], 3, Activation::Silu, None, case).unwrap(), None),
        };
        let x: Vec<f64> = (0..dim).map(|_| 3.0 * rng::normal(&mut r)).collect();
        let cot = rng::normal_vec(&mut r, net.output_dim());
        let e = check_pair(&net, &x, t, &cot);
        assert!(e < TOL, "case {case}: max relative error {e:e}");
        worst = worst.max(e);
    }
    eprintln!("worst relative error {worst:e} in {:.1}s", start.elapsed().as_secs_f64());
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn boundary_gradient_matches_log_ratio_differences() {
    for case in 0..20u64 {
        let net = Mlp::new(2, &[32, 32], 5, Activation::Silu, None, 100 + case).unwrap();
        let c = Classifier::new(net, 5, TrainingMeta { seed: 0, epochs: 0, val_accuracy: None }).unwrap().freeze();
        let mut r = rng::stream(18, "fd-boundary", case);
        let z = rng::normal_vec(&mut r, 2);
        let (y, yp) = ((case % 4) as usize, (case % 4 + 1) as usize);
        let codec = Codec::identity(2);
        let g = c.boundary_grad(&codec, &z, y, yp).unwrap();
        let ratio = |z: &[f64]| {
            let p = c.class_probs(z).unwrap();
            p[yp].ln() - p[y].ln()
        };
        for i in 0..2 {
            let mut a = z.clone();
            let mut b = z.clone();
            a[i] += H;
            b[i] -= H;
            let fd = (ratio(&a) - ratio(&b)) / (2.0 * H);
            assert!(rel_err(fd, g[i]) < TOL, "case {case} coord {i}: {fd} vs {}", g[i]);
        }
        let back = c.boundary_grad(&codec, &z, yp, y).unwrap();
        for (u, v) in g.iter().zip(&back) {
            assert!((u + v).abs() <= 1e-12 * u.abs().max(1.0));
        }
    }
}
