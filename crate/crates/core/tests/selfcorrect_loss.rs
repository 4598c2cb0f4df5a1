use dca_core::classifier::{Classifier, TrainingMeta};
use dca_core::nn::{Activation, Mlp};
use dca_core::rng;
use dca_core::selfcorrect::{total_loss, AlignSpace, CounterfactualSample, LossOptions, UncertaintyWeights};
use dca_core::synthdata::LabeledPoint;
use proptest::prelude::*;

fn classifier(seed: u64) -> Classifier {
    let net = Mlp::new(2, &[8], 3, Activation::Silu, None, seed).unwrap();
    Classifier::new(net, 3, TrainingMeta { seed, epochs: 0, val_accuracy: None }).unwrap()
}

fn batch(seed: u64) -> (Vec<LabeledPoint>, Vec<CounterfactualSample>) {
    let mut r = rng::stream(seed, "loss-batch", 0);
    let orig = (0..6).map(|i| LabeledPoint { z: rng::normal_vec(&mut r, 2), label: i % 3 }).collect();
    let cf = (0..4)
        .map(|i| {
            let x = rng::normal_vec(&mut r, 2);
            CounterfactualSample {
                source_id: i,
                step: 100,
                y: i % 3,
                target: (i + 1) % 3,
                y_prime: (i + 1) % 3,
                t_used: 1.0,
                seed: 0,
                z_prime: x.clone(),
                x_prime: x,
            }
        })
        .collect();
    (orig, cf)
}

fn eval(c: &Classifier, c_star: &Classifier, seed: u64, w: UncertaintyWeights, opts: LossOptions) -> dca_core::selfcorrect::LossOutput {
    let (orig, cf) = batch(seed);
    let o: Vec<&LabeledPoint> = orig.iter().collect();
    let s: Vec<&CounterfactualSample> = cf.iter().collect();
    total_loss(c, c_star, &o, &s, &w, &opts).unwrap()
}

#[test]
fn alignment_vanishes_for_a_copy_of_the_reference() {
    let c_star = classifier(1).freeze();
    let c = c_star.thawed_copy();
    for align in [AlignSpace::Probs, AlignSpace::Logits] {
        let out = eval(&c, &c_star, 3, UncertaintyWeights::default(), LossOptions { soft_labels: false, align });
        assert_eq!(out.l_align, 0.0);
        assert!(out.l_ce > 0.0);
    }
}

#[test]
fn stationary_sigmas_zero_the_sigma_gradients() {
    let c_star = classifier(1).freeze();
    let c = classifier(2);
    let opts = LossOptions::default();
    let base = eval(&c, &c_star, 4, UncertaintyWeights::default(), opts);
    let w = UncertaintyWeights::stationary(base.l_ce, base.l_align);
    let out = eval(&c, &c_star, 4, w, opts);
    assert!(out.grad_log_sigma_ce.abs() < 1e-10);
    assert!(out.grad_log_sigma_align.abs() < 1e-10);
    // σ² = 2L exactly at that point.
    assert!(((2.0 * w.log_sigma_ce).exp() - 2.0 * base.l_ce).abs() < 1e-12);
}

#[test]
fn loss_gradients_match_finite_differences() {
    let c_star = classifier(1).freeze();
    let h = 1e-5;
    for (k, opts) in [
        LossOptions { soft_labels: false, align: AlignSpace::Probs },
        LossOptions { soft_labels: true, align: AlignSpace::Probs },
        LossOptions { soft_labels: false, align: AlignSpace::Logits },
    ]
    .into_iter()
    .enumerate()
    {
        let c = classifier(10 + k as u64);
        let w = UncertaintyWeights { log_sigma_ce: 0.3, log_sigma_align: -0.2 };
        let out = eval(&c, &c_star, 5, w, opts);
        let mut probe = c.clone();
        for i in 0..c.net().num_params() {
            let p = c.net().params()[i];
            probe.params_mut().unwrap()[i] = p + h;
            let up = eval(&probe, &c_star, 5, w, opts).total;
            probe.params_mut().unwrap()[i] = p - h;
            let down = eval(&probe, &c_star, 5, w, opts).total;
            probe.params_mut().unwrap()[i] = p;
            let fd = (up - down) / (2.0 * h);
            let g = out.grad_params[i];
            assert!((fd - g).abs() <= 1e-6 * g.abs().max(1.0), "param {i}: {fd} vs {g}");
        }
        for (da, db, g) in [(h, 0.0, out.grad_log_sigma_ce), (0.0, h, out.grad_log_sigma_align)] {
            let plus = UncertaintyWeights { log_sigma_ce: w.log_sigma_ce + da, log_sigma_align: w.log_sigma_align + db };
            let minus = UncertaintyWeights { log_sigma_ce: w.log_sigma_ce - da, log_sigma_align: w.log_sigma_align - db };
            let fd = (eval(&c, &c_star, 5, plus, opts).total - eval(&c, &c_star, 5, minus, opts).total) / (2.0 * h);
            assert!((fd - g).abs() < 1e-6);
        }
    }
}

proptest! {
    #[test]
    fn stationary_point_for_any_positive_losses(l_ce in 1e-6f64..50.0, l_al in 1e-6f64..50.0) {
        let w = UncertaintyWeights::stationary(l_ce, l_al);
        prop_assert!((1.0 - 2.0 * (-2.0 * w.log_sigma_ce).exp() * l_ce).abs() < 1e-10);
        prop_assert!((1.0 - 2.0 * (-2.0 * w.log_sigma_align).exp() * l_al).abs() < 1e-10);
    }
}
