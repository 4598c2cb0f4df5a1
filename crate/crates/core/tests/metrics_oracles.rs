use dca_core::metrics::{image_metrics, knn_dist, mmd2_rbf, t_test_ind, Bandwidth};
use dca_core::rng;
use proptest::prelude::*;

fn cloud(seed: u64, n: usize, d: usize, shift: f64) -> Vec<Vec<f64>> {
    let mut r = rng::stream(seed, "metric-cloud", 0);
    (0..n).map(|_| (0..d).map(|_| rng::normal(&mut r) + shift).collect()).collect()
}

fn brute_mmd2(x: &[Vec<f64>], y: &[Vec<f64>], sigma: f64) -> f64 {
    let k = |a: &[f64], b: &[f64]| {
        let mut s = 0.0;
        for i in 0..a.len() {
            s += (a[i] - b[i]) * (a[i] - b[i]);
        }
        (-s / (2.0 * sigma * sigma)).exp()
    };
    let mut xx = 0.0;
    for a in x {
        for b in x {
            xx += k(a, b);
        }
    }
    let mut yy = 0.0;
    for a in y {
        for b in y {
            yy += k(a, b);
        }
    }
    let mut xy = 0.0;
    for a in x {
        for b in y {
            xy += k(a, b);
        }
    }
    let (n, m) = (x.len() as f64, y.len() as f64);
    xx / (n * n) + yy / (m * m) - 2.0 * xy / (n * m)
}

fn brute_knn(g: &[Vec<f64>], r: &[Vec<f64>], k: usize) -> f64 {
    let mut total = 0.0;
    for a in g {
        let mut ds: Vec<f64> = r
            .iter()
            .map(|b| a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt())
            .collect();
        // Insertion sort, deliberately unlike the library's selection.
        for i in 1..ds.len() {
            let mut j = i;
            while j > 0 && ds[j - 1] > ds[j] {
                ds.swap(j - 1, j);
                j -= 1;
            }
        }
        total += ds[k - 1];
    }
    total / g.len() as f64
}

#[test]
fn mmd_matches_double_loop() {
    for (seed, shift, sigma) in [(1, 0.0, 1.0), (2, 0.7, 0.5), (3, 2.0, 3.0)] {
        let x = cloud(seed, 50, 3, 0.0);
        let y = cloud(seed + 100, 50, 3, shift);
        let got = mmd2_rbf(&x, &y, Bandwidth::Fixed(sigma)).unwrap();
        let want = brute_mmd2(&x, &y, sigma);
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }
}

#[test]
fn mmd_of_a_set_with_itself_is_exactly_zero() {
    let x = cloud(4, 50, 2, 0.0);
    assert_eq!(mmd2_rbf(&x, &x, Bandwidth::Fixed(1.3)).unwrap(), 0.0);
    assert_eq!(mmd2_rbf(&x, &x, Bandwidth::Median).unwrap(), 0.0);
}

#[test]
fn knn_matches_brute_force() {
    let g = cloud(5, 50, 2, 0.3);
    let r = cloud(6, 50, 2, 0.0);
    for k in [1, 2, 5] {
        let got = knn_dist(&g, &r, k).unwrap();
        let want = brute_knn(&g, &r, k);
        assert!((got - want).abs() < 1e-10);
    }
}

#[test]
fn identical_images() {
    let a: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin().abs()).collect();
    let m = image_metrics(&a, &a, 1.0).unwrap();
    assert_eq!(m.psnr, f64::INFINITY);
    assert_eq!(m.ssim, 1.0);
    assert_eq!(m.rmse, 0.0);
}

#[test]
fn psnr_closed_form() {
    let m = image_metrics(&[0.0, 0.0, 0.0, 0.0], &[0.0, 0.0, 0.0, 1.0], 1.0).unwrap();
    assert!((m.rmse - 0.5).abs() < 1e-15);
    assert!((m.psnr - 10.0 * 4f64.log10()).abs() < 1e-12);
}

#[test]
fn welch_matches_reference_values() {
    // Reference values from an independent statistics package.
    let r = t_test_ind(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 4.0, 6.0, 8.0, 10.0]).unwrap();
    assert!((r.t + 1.8973665961010275).abs() < 1e-12);
    assert!((r.df - 5.882352941176471).abs() < 1e-12);
    assert!((r.p - 0.10753119493062718).abs() < 1e-9);

    let r = t_test_ind(&[0.1, 0.5, 0.3, 0.9, 1.1, 0.7], &[1.2, 1.5, 0.9, 2.0]).unwrap();
    assert!((r.t + 2.858358404041985).abs() < 1e-12);
    assert!((r.p - 0.031872066043619904).abs() < 1e-9);
}

#[test]
fn welch_on_identical_samples() {
    let a = [0.81, 0.79, 0.84, 0.80];
    let r = t_test_ind(&a, &a).unwrap();
    assert_eq!(r.t, 0.0);
    assert_eq!(r.p, 1.0);
}

fn points(n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2), 1..n)
}

proptest! {
    #[test]
    fn mmd_is_symmetric_and_nonnegative(x in points(12), y in points(12), s in 0.1f64..5.0) {
        let a = mmd2_rbf(&x, &y, Bandwidth::Fixed(s)).unwrap();
        let b = mmd2_rbf(&y, &x, Bandwidth::Fixed(s)).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!(a > -1e-12);
    }

    #[test]
    fn knn_grows_with_k(g in points(8), r in points(12)) {
        let mut prev = 0.0;
        for k in 1..=r.len() {
            let d = knn_dist(&g, &r, k).unwrap();
            prop_assert!(d >= prev);
            prev = d;
        }
    }

    #[test]
    fn welch_p_is_a_probability(a in prop::collection::vec(-3.0f64..3.0, 2..10), b in prop::collection::vec(-3.0f64..3.0, 2..10)) {
        let r = t_test_ind(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.p));
        let swapped = t_test_ind(&b, &a).unwrap();
        prop_assert!(r.t == -swapped.t || (r.t.is_nan() && swapped.t.is_nan()));
    }
}
