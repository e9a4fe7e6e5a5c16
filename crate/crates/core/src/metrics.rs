//! Score-estimation error between the true and an estimated score, and the
//! study of how it scales with the number of clients and samples.
//!
//! Both scores share the `-x` term, so the error reduces to
//! `E |tanh(u) mu_t - tanh(u_hat) mu_hat_t|^2` over `X_t ~ q_t`.

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::federated::{run_pretraining, FedConfig, TruthSpec};
use crate::mixture::{alpha, forward_noise, sample_data, MixtureParams};
use crate::personalization::{finetune_new_client, FinetuneConfig};
use crate::rng::{self, tag};
use crate::score::ScoreParams;
use crate::stats::{log_log_slope, median};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreErrorEstimate {
    pub value: f64,
    pub std_error: f64,
    pub mc_samples: usize,
    pub t_grid: Vec<f64>,
}

/// `count` points log-spaced on `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

/// 16 log-spaced times on `[0.05, 3]`.
pub fn default_time_grid() -> Vec<f64> {
    log_grid(0.05, 3.0, 16)
}

/// Monte-Carlo estimate of the score error averaged uniformly over `t_grid`.
/// Grid point `i` draws its `X_t` from stream `(seed, i)`.
pub fn score_error(
    truth: &MixtureParams,
    est: &ScoreParams,
    t_grid: &[f64],
    mc_samples: usize,
    seed: u64,
) -> Result<ScoreErrorEstimate> {
    if t_grid.is_empty() || t_grid.iter().any(|&t| !(t > 0.0)) {
        return Err(invalid("score error needs a non-empty grid of positive times"));
    }
    if mc_samples == 0 {
        return Err(invalid("score error needs at least one sample"));
    }
    if est.dim() != truth.dim() {
        return Err(invalid("estimated and true parameters differ in dimension"));
    }
    let b_true = truth.log_odds_half();
    let per_t: Vec<(f64, f64)> = t_grid
        .par_iter()
        .enumerate()
        .map(|(i, &t)| {
            let mut r = rng::stream(seed, &[i as u64]);
            let x0 = sample_data(truth, mc_samples, &mut r)?.x;
            let (xt, _) = forward_noise(x0.view(), t, &mut r);
            let a = alpha(t);
            let mu_t: Array1<f64> = truth.mu() * a;
            let mh_t: Array1<f64> = &est.mu_hat * a;
            let vals: Vec<f64> = xt
                .rows()
                .into_iter()
                .map(|x| {
                    let th = (mu_t.dot(&x) + b_true).tanh();
                    let th_hat = (mh_t.dot(&x) + est.logit).tanh();
                    mu_t.iter()
                        .zip(mh_t.iter())
                        .map(|(m, mh)| (th * m - th_hat * mh).powi(2))
                        .sum()
                })
                .collect();
            let (mean, se) = crate::stats::mean_and_se(&vals);
            Ok((mean, se))
        })
        .collect::<Result<_>>()?;
    let k = t_grid.len() as f64;
    let value = per_t.iter().map(|p| p.0).sum::<f64>() / k;
    let var = per_t.iter().map(|p| p.1 * p.1).sum::<f64>() / (k * k);
    Ok(ScoreErrorEstimate {
        value,
        std_error: var.sqrt(),
        mc_samples,
        t_grid: t_grid.to_vec(),
    })
}

/// Settings for the `(m, n)` scaling study. `base` supplies everything
/// except the client count, sample size and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingStudyConfig {
    pub clients: Vec<usize>,
    pub samples: Vec<usize>,
    pub seeds: Vec<u64>,
    pub truth: TruthSpec,
    pub base: FedConfig,
    /// Use the whole local dataset as the minibatch in both phases.
    pub full_batch: bool,
    pub finetune_iterations: usize,
    pub finetune_lr: f64,
    /// True weight of the held-out clients that are fine-tuned.
    pub new_client_weight: f64,
    pub new_clients: usize,
    pub mc_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub m: usize,
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    pub l_est: f64,
    pub std_error: f64,
}

impl ScalingRow {
    pub const CSV_HEADER: &'static str = "m,n,d,seed,L_est,std_error";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.m, self.n, self.d, self.seed, self.l_est, self.std_error
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingSummary {
    pub rows: Vec<ScalingRow>,
    /// `(m, n, median L_est)` per cell.
    pub medians: Vec<(usize, usize, f64)>,
    /// Log-log slope in `n`, one entry per `m`.
    pub slopes_in_n: Vec<(usize, f64)>,
    /// Log-log slope in `m`, one entry per `n`.
    pub slopes_in_m: Vec<(usize, f64)>,
}

/// One cell: pre-train `m` clients with `n` samples, fine-tune
/// `new_clients` held-out clients on `n` samples each against the frozen
/// backbone, and average their score errors.
pub fn scaling_cell(cfg: &ScalingStudyConfig, m: usize, n: usize, seed: u64) -> Result<ScalingRow> {
    let mut fed = cfg.base.clone();
    fed.clients = m;
    fed.samples_per_client = n;
    fed.seed = seed;
    if cfg.full_batch {
        fed.batch = n;
    }
    if let crate::federated::WeightsSpec::Explicit { .. } = fed.weights {
        return Err(invalid("scaling study needs generated weights"));
    }
    let out = run_pretraining(fed.clone(), cfg.truth)?;
    let truth = MixtureParams::new(out.true_mean.clone(), cfg.new_client_weight)?;
    let grid = default_time_grid();
    let mut values = Vec::with_capacity(cfg.new_clients);
    let mut var = 0.0;
    for k in 0..cfg.new_clients {
        let mut r = rng::stream(seed, &[tag::NEW_CLIENT, k as u64]);
        let data = sample_data(&truth, n, &mut r)?.x;
        let ft = FinetuneConfig {
            iterations: cfg.finetune_iterations,
            lr: cfg.finetune_lr,
            batch: if cfg.full_batch { n } else { fed.batch.min(n) },
            schedule: fed.schedule,
            seed: rng::mix(seed, &[tag::FINETUNE, k as u64]),
        };
        let tuned = finetune_new_client(out.backbone.view(), data.view(), &ft)?;
        let est = ScoreParams::new(out.backbone.clone(), tuned.final_logit());
        let e = score_error(
            &truth,
            &est,
            &grid,
            cfg.mc_samples,
            rng::mix(seed, &[tag::SCORE_ERROR, k as u64]),
        )?;
        values.push(e.value);
        var += e.std_error * e.std_error;
    }
    let c = cfg.new_clients as f64;
    Ok(ScalingRow {
        m,
        n,
        d: cfg.truth.dim,
        seed,
        l_est: values.iter().sum::<f64>() / c,
        std_error: var.sqrt() / c,
    })
}

pub fn theorem2_scaling_study(cfg: &ScalingStudyConfig) -> Result<ScalingSummary> {
    if cfg.clients.len() < 3 || cfg.samples.len() < 3 || cfg.seeds.len() < 5 {
        return Err(invalid("scaling study needs a 3x3 (m, n) grid and >= 5 seeds"));
    }
    if cfg.new_clients == 0 {
        return Err(invalid("scaling study needs at least one held-out client"));
    }
    let cells: Vec<(usize, usize, u64)> = cfg
        .clients
        .iter()
        .flat_map(|&m| {
            cfg.samples
                .iter()
                .flat_map(move |&n| cfg.seeds.iter().map(move |&s| (m, n, s)))
        })
        .collect();
    let rows = cells
        .par_iter()
        .map(|&(m, n, s)| scaling_cell(cfg, m, n, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarise(rows, &cfg.clients, &cfg.samples))
}

pub fn summarise(rows: Vec<ScalingRow>, ms: &[usize], ns: &[usize]) -> ScalingSummary {
    let cell_median = |m: usize, n: usize| {
        let v: Vec<f64> = rows
            .iter()
            .filter(|r| r.m == m && r.n == n)
            .map(|r| r.l_est)
            .collect();
        median(&v)
    };
    let mut medians = Vec::new();
    for &m in ms {
        for &n in ns {
            medians.push((m, n, cell_median(m, n)));
        }
    }
    let nx: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    let mx: Vec<f64> = ms.iter().map(|&m| m as f64).collect();
    let slopes_in_n = ms
        .iter()
        .map(|&m| {
            let y: Vec<f64> = ns.iter().map(|&n| cell_median(m, n)).collect();
            (m, log_log_slope(&nx, &y))
        })
        .collect();
    let slopes_in_m = ns
        .iter()
        .map(|&n| {
            let y: Vec<f64> = ms.iter().map(|&m| cell_median(m, n)).collect();
            (n, log_log_slope(&mx, &y))
        })
        .collect();
    ScalingSummary {
        rows,
        medians,
        slopes_in_n,
        slopes_in_m,
    }
}
