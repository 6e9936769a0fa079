use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use regimenas_core::nas::acquisition::*;
use regimenas_core::nas::gp::*;

fn oracle_kernel(a: &[f64], b: &[f64], ls: &[f64], var: f64) -> f64 {
    let mut r2 = 0.0;
    for k in 0..a.len() {
        r2 += ((a[k] - b[k]) / ls[k]).powi(2);
    }
    let r = r2.sqrt();
    let s = 5f64.sqrt() * r;
    var * (1.0 + s + s * s / 3.0) * (-s).exp()
}

/// Posterior by a dense LU solve of the full system in raw score units.
fn oracle_posterior(x: &[Vec<f64>], y: &[f64], h: &GpHyper, q: &[f64]) -> (f64, f64) {
    let n = x.len();
    let mean = y.iter().sum::<f64>() / n as f64;
    let mut std = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    if std <= 1e-12 {
        std = 1.0;
    }
    let scale = std * std;
    let k = DMatrix::from_fn(n, n, |i, j| {
        scale * oracle_kernel(&x[i], &x[j], &h.lengthscales, h.variance) + if i == j { scale * h.noise } else { 0.0 }
    });
    let ks = DVector::from_fn(n, |i, _| scale * oracle_kernel(&x[i], q, &h.lengthscales, h.variance));
    let centred = DVector::from_fn(n, |i, _| y[i] - mean);
    let lu = k.lu();
    let alpha = lu.solve(&centred).unwrap();
    let w = lu.solve(&ks).unwrap();
    let var = scale * h.variance - ks.dot(&w);
    (mean + ks.dot(&alpha), var.max(0.0))
}

fn design(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
    let y = x
        .iter()
        .map(|r| r.iter().enumerate().map(|(k, v)| (v * (k + 1) as f64).sin()).sum::<f64>() * 3.0 - 1.0)
        .collect();
    (x, y)
}

#[test]
fn kernel_hand_value() {
    // r = 1: (1 + √5 + 5/3)·e^{−√5}
    let want = (1.0 + 5f64.sqrt() + 5.0 / 3.0) * (-(5f64.sqrt())).exp();
    let got = matern52(&[0.0, 0.0], &[0.6, 0.8], &[1.0, 1.0], 1.0).unwrap();
    assert!((got - want).abs() < 1e-15);
    assert!((matern52(&[0.0], &[2.0], &[2.0], 3.0).unwrap() - 3.0 * want).abs() < 1e-14);
    assert!(matern52(&[0.0], &[1.0, 2.0], &[1.0], 1.0).is_err());
    assert!(matern52(&[0.0], &[1.0], &[0.0], 1.0).is_err());
}

#[test]
fn posterior_matches_dense_solve() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for set in 0..50 {
        let n = rng.random_range(2..=40);
        let d = rng.random_range(1..=12);
        let (x, y) = design(&mut rng, n, d);
        let hyper = GpHyper {
            lengthscales: (0..d).map(|_| rng.random_range(0.3..2.0)).collect(),
            variance: rng.random_range(0.5..2.0),
            noise: rng.random_range(1e-4..1e-1),
        };
        let gp = GpSurrogate::with_hyper(x.clone(), y.clone(), hyper.clone()).unwrap();
        assert_eq!(gp.jitter, 0.0);
        for _ in 0..5 {
            let q: Vec<f64> = (0..d).map(|_| rng.random_range(-0.2..1.2)).collect();
            let (mu, sd) = gp.predict(&q).unwrap();
            let (mu_o, var_o) = oracle_posterior(&x, &y, &hyper, &q);
            assert!((mu - mu_o).abs() <= 1e-8 * mu_o.abs().max(1.0), "set {set}: {mu} vs {mu_o}");
            assert!((sd * sd - var_o).abs() <= 1e-8 * var_o.max(1.0), "set {set}: {} vs {var_o}", sd * sd);
        }
    }
}

#[test]
fn observed_points_are_reproduced_within_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (x, y) = design(&mut rng, 15, 3);
    let noise = 1e-6;
    let gp = GpSurrogate::with_hyper(x.clone(), y.clone(), GpHyper::isotropic(3, 0.7, 1.0, noise)).unwrap();
    for (xi, yi) in x.iter().zip(&y) {
        let (mu, sd) = gp.predict(xi).unwrap();
        assert!((mu - yi).abs() < 1e-3 * gp.y_std, "{mu} vs {yi}");
        assert!(sd * sd <= gp.y_std * gp.y_std * (noise + gp.jitter) + 1e-9);
    }
}

#[test]
fn far_queries_revert_to_the_prior() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (x, y) = design(&mut rng, 10, 2);
    let gp = GpSurrogate::with_hyper(x, y, GpHyper::isotropic(2, 0.3, 1.5, 1e-3)).unwrap();
    let (mu, sd) = gp.predict(&[50.0, -50.0]).unwrap();
    assert!((mu - gp.y_mean).abs() < 1e-12);
    assert!((sd - gp.y_std * 1.5f64.sqrt()).abs() < 1e-12);
}

#[test]
fn conditioning_matches_refitting() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut x, mut y) = design(&mut rng, 12, 4);
    let h = GpHyper::isotropic(4, 0.8, 1.0, 1e-3);
    let gp = GpSurrogate::with_hyper(x.clone(), y.clone(), h.clone()).unwrap();
    let extra = vec![0.5; 4];
    let next = gp.condition_on(extra.clone(), 0.7).unwrap();
    x.push(extra);
    y.push(0.7);
    let direct = GpSurrogate::with_hyper(x, y, h).unwrap();
    let q = [0.1, 0.9, 0.4, 0.3];
    assert_eq!(next.predict(&q).unwrap(), direct.predict(&q).unwrap());
}

#[test]
fn fitted_hyperparameters_do_not_lower_the_likelihood() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (x, y) = design(&mut rng, 25, 3);
    let fitted = GpSurrogate::fit(x.clone(), y.clone()).unwrap();
    for start in [0.5, 1.5, 0.2] {
        let fixed = GpSurrogate::with_hyper(x.clone(), y.clone(), GpHyper::isotropic(3, start, 1.0, 1e-2)).unwrap();
        assert!(fitted.log_marginal_likelihood() >= fixed.log_marginal_likelihood() - 1e-9);
    }
    let (xs, ys) = (x.clone(), fitted.y.iter().map(|v| (v - fitted.y_mean) / fitted.y_std).collect::<Vec<_>>());
    let again = log_marginal_likelihood(&xs, &ys, &fitted.hyper).unwrap();
    assert!((again - fitted.log_marginal_likelihood()).abs() < 1e-9);
}

#[test]
fn malformed_observations_are_rejected() {
    let h = GpHyper::isotropic(2, 1.0, 1.0, 1e-3);
    assert!(GpSurrogate::with_hyper(vec![], vec![], h.clone()).is_err());
    assert!(GpSurrogate::with_hyper(vec![vec![0.0]], vec![1.0], h.clone()).is_err());
    assert!(GpSurrogate::with_hyper(vec![vec![0.0, 0.0]], vec![f64::NAN], h.clone()).is_err());
    let gp = GpSurrogate::with_hyper(vec![vec![0.0, 0.0]], vec![1.0], h).unwrap();
    assert!(gp.predict(&[0.0]).is_err());
}

#[test]
fn expected_improvement_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let samples = 1_000_000;
    for _ in 0..10 {
        let mu: f64 = rng.random_range(-1.0..1.0);
        let sigma: f64 = rng.random_range(0.2..1.5);
        let best = mu + sigma * rng.random_range(-1.5..1.5);
        let xi = DEFAULT_XI;
        let mut acc = 0.0;
        for _ in 0..samples {
            let z: f64 = StandardNormal.sample(&mut rng);
            acc += (mu + sigma * z - best - xi).max(0.0);
        }
        let mc = acc / samples as f64;
        let ei = expected_improvement(mu, sigma, best, xi);
        assert!((ei - mc).abs() <= 0.01 * mc, "EI {ei} vs MC {mc}");
    }
}

#[test]
fn ucb_with_zero_beta_is_the_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (x, y) = design(&mut rng, 8, 2);
    let gp = GpSurrogate::with_hyper(x, y, GpHyper::isotropic(2, 0.5, 1.0, 1e-3)).unwrap();
    for _ in 0..20 {
        let q = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
        let (mu, sd) = gp.predict(&q).unwrap();
        assert_eq!(acquisition_ucb(&gp, &q, 0.0).unwrap(), mu);
        assert_eq!(acquisition_ucb(&gp, &q, 2.0).unwrap(), mu + 2.0 * sd);
        assert_eq!(acquisition_ei(&gp, &q, 0.3, 0.0).unwrap(), expected_improvement(mu, sd, 0.3, 0.0));
    }
}

#[test]
fn adaptive_beta_values() {
    assert_eq!(adaptive_beta(2.0, 1.0, 0.0).unwrap(), 2.0);
    assert_eq!(adaptive_beta(2.0, 1.0, 1.0).unwrap(), 4.0);
    assert_eq!(adaptive_beta(2.0, 0.5, 0.5).unwrap(), 2.5);
    assert!(adaptive_beta(2.0, 1.0, 1.5).is_err());
    assert!(adaptive_beta(-1.0, 1.0, 0.5).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn ei_is_non_negative_and_monotone_in_mean(mu in -5.0f64..5.0, sigma in 0.0f64..3.0, best in -5.0f64..5.0, d in 0.0f64..1.0) {
        let a = expected_improvement(mu, sigma, best, DEFAULT_XI);
        let b = expected_improvement(mu + d, sigma, best, DEFAULT_XI);
        prop_assert!(a >= 0.0);
        prop_assert!(b >= a - 1e-12);
        prop_assert!(a >= (mu - best - DEFAULT_XI).max(0.0) - 1e-12);
    }

    #[test]
    fn posterior_variance_is_bounded_by_the_prior(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y) = design(&mut rng, 6, 2);
        let gp = GpSurrogate::with_hyper(x, y, GpHyper::isotropic(2, 0.4, 1.2, 1e-3)).unwrap();
        let q = [rng.random_range(-1.0..2.0), rng.random_range(-1.0..2.0)];
        let (_, sd) = gp.predict(&q).unwrap();
        prop_assert!(sd >= 0.0 && sd * sd <= gp.y_std * gp.y_std * 1.2 + 1e-12);
    }
}
