use fedmix_core::mixture::{sample_data, MixtureParams};
use fedmix_core::personalization::{finetune_new_client, FinetuneConfig};
use fedmix_core::rng;
use fedmix_core::sampler::{cluster_fraction, reverse_sample, SamplerConfig};
use fedmix_core::score::ScoreParams;
use fedmix_core::stats::mean_and_se;
use ndarray::array;

#[test]
fn gaussian_target_is_reproduced() {
    let target = MixtureParams::new(array![2.0], 1.0).unwrap();
    let cfg = SamplerConfig { n_steps: 1000, ..Default::default() };
    let out = reverse_sample(&target, &cfg, 10_000, 5).unwrap();
    let v = out.column(0).to_vec();
    let (mean, se) = mean_and_se(&v);
    // the chain stops at t_end, where the target mean is 2 e^{-t_end}
    let expect = 2.0 * (-cfg.t_end).exp();
    assert!((mean - expect).abs() < 3.0 * se, "mean {mean} se {se}");
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    assert!((var - 1.0).abs() < 0.1, "var {var}");
}

#[test]
fn fine_tuned_client_generates_its_own_cluster_balance() {
    let w_new = 0.3;
    let truth = MixtureParams::new(array![4.0], w_new).unwrap();
    let data = sample_data(&truth, 1_000, &mut rng::stream(6, &[])).unwrap().x;
    let cfg = FinetuneConfig {
        iterations: 1_000,
        lr: 0.05,
        batch: 50,
        schedule: Default::default(),
        seed: 7,
    };
    let tuned = finetune_new_client(truth.mu().view(), data.view(), &cfg).unwrap();
    let est = ScoreParams::new(truth.mu().clone(), tuned.final_logit());
    let samples = reverse_sample(&est, &SamplerConfig::default(), 10_000, 8).unwrap();
    let frac = cluster_fraction(samples.view(), truth.mu().view()).unwrap();
    assert!((frac - w_new).abs() < 0.05, "{frac}");
}

#[test]
fn symmetric_new_client_stays_balanced() {
    let truth = MixtureParams::new(array![1.0, 1.0, 1.0, 1.0], 0.5).unwrap();
    let weights: Vec<f64> = (0..20u64)
        .map(|s| {
            let data = sample_data(&truth, 100, &mut rng::stream(30, &[s])).unwrap().x;
            let cfg = FinetuneConfig {
                iterations: 300,
                lr: 0.05,
                batch: 20,
                schedule: Default::default(),
                seed: s,
            };
            finetune_new_client(truth.mu().view(), data.view(), &cfg).unwrap().final_weight()
        })
        .collect();
    let (m, se) = mean_and_se(&weights);
    assert!((m - 0.5).abs() < 3.0 * se, "{m} +- {se}");
}
