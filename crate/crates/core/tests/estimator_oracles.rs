use fedmix_core::estimators::{
    em_fit, em_weight_step, evaluate_theorem1_bound, exact_mse, moment_estimate, sample_log_likelihood,
};
use fedmix_core::mixture::{forward_noise, mean_at_time, sample_data, MixtureParams};
use fedmix_core::rng;
use ndarray::{array, Array1, Array2};

fn noisy_sample(params: &MixtureParams, t: f64, n: usize, seed: u64) -> Array2<f64> {
    let mut r = rng::stream(seed, &[]);
    let x0 = sample_data(params, n, &mut r).unwrap().x;
    forward_noise(x0.view(), t, &mut r).0
}

#[test]
fn em_never_decreases_likelihood() {
    let params = MixtureParams::new(array![1.0, 0.5], 0.25).unwrap();
    let t = 0.4;
    let x = noisy_sample(&params, t, 500, 3);
    let mu_t = mean_at_time(&params, t);
    let mut w = 0.9;
    let mut prev = f64::NEG_INFINITY;
    for _ in 0..200 {
        let p = MixtureParams::new(mu_t.clone(), w).unwrap();
        let ll = sample_log_likelihood(&p, x.view());
        assert!(ll >= prev - 1e-9, "{ll} < {prev}");
        prev = ll;
        w = em_weight_step(&p, x.view());
    }
}

#[test]
fn em_limit_matches_grid_search_mle() {
    let params = MixtureParams::new(array![4.0], 0.7).unwrap();
    let t = 0.1;
    let x = noisy_sample(&params, t, 1_000, 8);
    let mu_t = mean_at_time(&params, t);
    let fit = em_fit(mu_t.view(), x.view(), 0.5).unwrap();
    assert!(fit.converged);

    let ll = |w: f64| sample_log_likelihood(&MixtureParams::new(mu_t.clone(), w).unwrap(), x.view());
    // coarse grid, then two refinements around the best point
    let (mut lo, mut hi) = (1e-3, 1.0 - 1e-3);
    let mut best = 0.5;
    for _ in 0..3 {
        let grid: Vec<f64> = (0..=1000).map(|i| lo + (hi - lo) * i as f64 / 1000.0).collect();
        best = grid.iter().cloned().max_by(|a, b| ll(*a).total_cmp(&ll(*b))).unwrap();
        let step = (hi - lo) / 1000.0;
        lo = (best - 2.0 * step).max(1e-6);
        hi = (best + 2.0 * step).min(1.0 - 1e-6);
    }
    assert!((fit.w - best).abs() < 1e-4, "EM {} vs grid {}", fit.w, best);
}

#[test]
fn moment_estimator_monte_carlo_matches_exact_mse() {
    let params = MixtureParams::new(array![4.0], 0.7).unwrap();
    let r = evaluate_theorem1_bound(&params, 0.1, 1_000, 10_000, 21).unwrap();
    let se_mean = (r.exact_mse / r.trials as f64).sqrt();
    assert!((r.mean_w_hat - 0.7).abs() < 3.0 * se_mean, "{}", r.mean_w_hat);
    assert!((r.empirical_mse / r.exact_mse - 1.0).abs() < 0.1);
}

#[test]
fn separation_term_vanishes_for_distant_components() {
    let params = MixtureParams::new(array![1e3 * 0.1f64.exp()], 0.5).unwrap();
    let n = 200;
    let r = evaluate_theorem1_bound(&params, 0.1, n, 10_000, 4).unwrap();
    assert!((r.empirical_mse / (0.25 / n as f64) - 1.0).abs() < 0.1, "{}", r.empirical_mse);
}

#[test]
fn mse_scales_inversely_with_n() {
    let params = MixtureParams::new(array![4.0], 0.7).unwrap();
    let reports: Vec<_> = [100, 1_000, 10_000]
        .iter()
        .enumerate()
        .map(|(i, &n)| evaluate_theorem1_bound(&params, 0.1, n, 10_000, 40 + i as u64).unwrap())
        .collect();
    for r in &reports {
        // at d = 1 the bound is the expected MSE itself
        assert!(r.empirical_mse <= r.theorem_bound + 3.0 * r.mse_std_error);
    }
    for w in reports.windows(2) {
        let ratio = w[0].empirical_mse / w[1].empirical_mse;
        assert!((ratio / 10.0 - 1.0).abs() < 0.2, "ratio {ratio}");
    }
}

#[test]
fn moment_estimate_is_closed_form() {
    let mu_t: Array1<f64> = array![2.0, -1.0];
    let x = array![[1.0, 0.0], [3.0, -2.0], [-0.5, 0.25]];
    let mean = x.mean_axis(ndarray::Axis(0)).unwrap();
    let expect = 0.5 * (1.0 + mu_t.dot(&mean) / mu_t.dot(&mu_t));
    let got = moment_estimate(mu_t.view(), x.view(), 0.1).unwrap().w_hat;
    assert!((got - expect).abs() < 1e-15);
    assert!(exact_mse(0.5, 1.0, 1) == 0.5);
}
