use fedmix_core::mixture::{sample_data, true_score, DiffusionSchedule, MixtureParams};
use fedmix_core::rng;
use fedmix_core::score::{
    ddpm_loss, grad_logit_terms, loss_and_grad, predict_score, weight_to_logit, Minibatch, ScoreParams,
};
use fedmix_core::stats::mean_and_se;
use ndarray::{array, Array1, Array2};

fn population_batch(params: &MixtureParams, n: usize, t: f64, seed: u64) -> Minibatch {
    let mut r = rng::stream(seed, &[]);
    let x0 = sample_data(params, n, &mut r).unwrap().x;
    Minibatch::at_time(x0, t, &mut r)
}

#[test]
fn logit_gradient_vanishes_in_expectation_at_truth() {
    let params = MixtureParams::new(array![1.5, 1.0], 0.7).unwrap();
    let batch = population_batch(&params, 1_000_000, 0.3, 1);
    let terms = grad_logit_terms(&ScoreParams::from_truth(&params), &batch, &DiffusionSchedule::default()).unwrap();
    let (m, se) = mean_and_se(&terms);
    assert!(m.abs() < 3.0 * se, "mean {m}, se {se}");
}

#[test]
fn logit_profile_is_unimodal_with_minimum_at_truth() {
    let w = 0.7;
    let params = MixtureParams::new(array![2.0], w).unwrap();
    let schedule = DiffusionSchedule::default();
    let batch = population_batch(&params, 200_000, 0.5, 2);
    let grid: Vec<f64> = (0..41).map(|i| -3.0 + 0.15 * i as f64).collect();
    let losses: Vec<f64> = grid
        .iter()
        .map(|&b| ddpm_loss(&ScoreParams::new(params.mu().clone(), b), &batch, &schedule).unwrap())
        .collect();
    let argmin = (0..41).min_by(|&i, &j| losses[i].total_cmp(&losses[j])).unwrap();
    assert!(losses[..=argmin].windows(2).all(|p| p[0] >= p[1]));
    assert!(losses[argmin..].windows(2).all(|p| p[0] <= p[1]));
    assert!((grid[argmin] - weight_to_logit(w)).abs() <= 0.15, "{} vs {}", grid[argmin], weight_to_logit(w));
}

#[test]
fn population_loss_is_minimised_by_truth() {
    let params = MixtureParams::new(array![2.0], 0.7).unwrap();
    let schedule = DiffusionSchedule::default();
    let mut r = rng::stream(3, &[]);
    let x0 = sample_data(&params, 1_000_000, &mut r).unwrap().x;
    let batch = Minibatch::draw(x0, &schedule, &mut r);
    let at_truth = ddpm_loss(&ScoreParams::from_truth(&params), &batch, &schedule).unwrap();
    for dm in [-0.3, -0.1, 0.1, 0.3] {
        for db in [-0.3, -0.1, 0.0, 0.1, 0.3] {
            let p = ScoreParams::new(array![2.0 + dm], weight_to_logit(0.7) + db);
            assert!(ddpm_loss(&p, &batch, &schedule).unwrap() > at_truth, "dm {dm} db {db}");
        }
    }
}

#[test]
fn mean_gradient_descent_recovers_truth() {
    let params = MixtureParams::new(array![2.0, -1.0, 0.5], 0.7).unwrap();
    let schedule = DiffusionSchedule::default();
    let mut p = ScoreParams::new(params.mu() * 0.9, weight_to_logit(0.7));
    let mut tail: Vec<Array1<f64>> = Vec::new();
    for k in 0..1500u64 {
        let mut r = rng::stream(4, &[k]);
        let x0 = sample_data(&params, 4096, &mut r).unwrap().x;
        let batch = Minibatch::draw(x0, &schedule, &mut r);
        let g = loss_and_grad(&p, &batch, &schedule).unwrap();
        p.mu_hat = &p.mu_hat - &(g.grad_mu * 0.1);
        if k >= 1000 {
            tail.push(p.mu_hat.clone());
        }
    }
    for j in 0..3 {
        let v: Vec<f64> = tail.iter().map(|m| m[j]).collect();
        let (m, _) = mean_and_se(&v);
        assert!((m - params.mu()[j]).abs() < 0.02, "coordinate {j}: {m}");
    }
}

#[test]
fn predicted_score_matches_true_score() {
    let params = MixtureParams::new(array![4.0], 0.7).unwrap();
    let p = ScoreParams::from_truth(&params);
    let x = array![1.0];
    let a = predict_score(&p, 0.1, x.view());
    let b = true_score(&params, 0.1, x.view());
    assert!((a[0] - b[0]).abs() < 1e-12);
}

#[test]
fn loss_is_exact_on_a_hand_built_batch() {
    let p = ScoreParams::new(array![1.0, 2.0], 0.25);
    let x0 = Array2::from_shape_vec((2, 2), vec![0.5, -1.0, 2.0, 0.0]).unwrap();
    let z = Array2::from_shape_vec((2, 2), vec![0.1, 0.2, -0.3, 0.4]).unwrap();
    let t = vec![0.2, 1.0];
    let batch = Minibatch::new(x0, t.clone(), z.clone()).unwrap();
    let mut expect = 0.0;
    for i in 0..2 {
        let s = predict_score(&p, t[i], batch.xt.row(i));
        let beta = (1.0 - (-2.0 * t[i]).exp()).sqrt();
        let r = &s + &(&z.row(i) / beta);
        expect += r.dot(&r);
    }
    expect /= 2.0;
    let got = ddpm_loss(&p, &batch, &DiffusionSchedule::default()).unwrap();
    assert!((got - expect).abs() < 1e-12 * expect.max(1.0), "{got} vs {expect}");
}
