//! Mixing-weight estimators with a known mean: the first-moment estimator,
//! EM, and a Monte-Carlo evaluator of the estimator's mean squared error.
//!
//! From `E[X_t] = (2w - 1) mu_t` the moment estimator is
//! `w_hat = 0.5 (1 + mu_t . mean(X_t) / |mu_t|^2)`. Its exact MSE is
//! `w(1-w)/n + 1/(4 |mu_t|^2 n)`; the looser `w(1-w)/n + d/(4 |mu_t|^2 n)`
//! bounds it for every `d >= 1`.

use ndarray::{ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mixture::{
    column_mean, log_density_at_time, mean_at_time, sample_data, MixtureParams,
};
use crate::rng::{self, tag};

/// Below this `|mu_t|^2` the estimator is undefined.
pub const MIN_MEAN_NORM_SQ: f64 = 1e-12;

pub const EM_TOLERANCE: f64 = 1e-10;
pub const EM_MAX_ITERATIONS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightEstimate {
    pub w_hat: f64,
    pub clipped: bool,
    pub n_used: usize,
    pub t_used: f64,
}

/// `t` is carried through for reporting only.
pub fn moment_estimate(mu_t: ArrayView1<f64>, xt: ArrayView2<f64>, t: f64) -> Result<WeightEstimate> {
    if xt.nrows() == 0 {
        return Err(invalid("moment estimate needs at least one sample"));
    }
    if xt.ncols() != mu_t.len() {
        return Err(Error::DimensionMismatch {
            expected: mu_t.len(),
            got: xt.ncols(),
        });
    }
    let norm_sq = mu_t.dot(&mu_t);
    if norm_sq < MIN_MEAN_NORM_SQ {
        return Err(Error::DegenerateMean(norm_sq));
    }
    let raw = 0.5 * (1.0 + mu_t.dot(&column_mean(xt)) / norm_sq);
    Ok(WeightEstimate {
        w_hat: raw.clamp(0.0, 1.0),
        clipped: !(0.0..=1.0).contains(&raw),
        n_used: xt.nrows(),
        t_used: t,
    })
}

fn logistic(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Posterior probability of the `+mu_t` component per row, evaluated as
/// `sigmoid(2 mu_t . x + ln(w / (1 - w)))`. `params_at_t` already carries
/// the time-`t` mean.
pub fn em_responsibilities(params_at_t: &MixtureParams, x: ArrayView2<f64>) -> Vec<f64> {
    let mu = params_at_t.mu();
    let shift = 2.0 * params_at_t.log_odds_half();
    x.rows()
        .into_iter()
        .map(|row| logistic(2.0 * mu.dot(&row) + shift))
        .collect()
}

/// M-step: the average responsibility.
pub fn em_weight_step(params_at_t: &MixtureParams, x: ArrayView2<f64>) -> f64 {
    let r = em_responsibilities(params_at_t, x);
    r.iter().sum::<f64>() / r.len().max(1) as f64
}

/// Sum of `ln q(x_i)` under `params_at_t`.
pub fn sample_log_likelihood(params_at_t: &MixtureParams, x: ArrayView2<f64>) -> f64 {
    x.rows()
        .into_iter()
        .map(|row| log_density_at_time(params_at_t, 0.0, row))
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmFit {
    pub w: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Log-likelihood before the first step and after each step.
    pub log_likelihood: Vec<f64>,
}

/// Iterate the weight-only EM map from `w0` until successive weights differ
/// by less than [`EM_TOLERANCE`] or [`EM_MAX_ITERATIONS`] steps.
pub fn em_fit(mu_t: ArrayView1<f64>, x: ArrayView2<f64>, w0: f64) -> Result<EmFit> {
    if !(w0 > 0.0 && w0 < 1.0) {
        return Err(invalid(format!("EM start {w0} outside (0, 1)")));
    }
    let mut params = MixtureParams::new(mu_t.to_owned(), w0)?;
    let mut trace = vec![sample_log_likelihood(&params, x)];
    for it in 1..=EM_MAX_ITERATIONS {
        let next = em_weight_step(&params, x);
        let delta = (next - params.weight()).abs();
        params = params.with_weight(next)?;
        trace.push(sample_log_likelihood(&params, x));
        if delta < EM_TOLERANCE {
            return Ok(EmFit {
                w: next,
                iterations: it,
                converged: true,
                log_likelihood: trace,
            });
        }
    }
    Ok(EmFit {
        w: params.weight(),
        iterations: EM_MAX_ITERATIONS,
        converged: false,
        log_likelihood: trace,
    })
}

/// `w(1-w)/n + dim/(4 |mu_t|^2 n)`.
pub fn theorem_bound(w: f64, mu_t_norm_sq: f64, dim: usize, n: usize) -> f64 {
    (w * (1.0 - w) + dim as f64 / (4.0 * mu_t_norm_sq)) / n as f64
}

/// `w(1-w)/n + 1/(4 |mu_t|^2 n)`, the exact variance of the unclipped estimator.
pub fn exact_mse(w: f64, mu_t_norm_sq: f64, n: usize) -> f64 {
    theorem_bound(w, mu_t_norm_sq, 1, n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub d: usize,
    pub n: usize,
    pub w: f64,
    pub t: f64,
    pub mu_t_norm_sq: f64,
    pub trials: usize,
    pub empirical_mse: f64,
    /// Standard error of `empirical_mse` across trials.
    pub mse_std_error: f64,
    pub mean_w_hat: f64,
    pub clipped_trials: usize,
    pub theorem_bound: f64,
    pub exact_mse: f64,
}

impl BoundReport {
    pub const CSV_HEADER: &'static str =
        "d,n,w,t,mu_t_norm_sq,trials,empirical_mse,mse_std_error,mean_w_hat,clipped_trials,theorem_bound,exact_mse";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.d,
            self.n,
            self.w,
            self.t,
            self.mu_t_norm_sq,
            self.trials,
            self.empirical_mse,
            self.mse_std_error,
            self.mean_w_hat,
            self.clipped_trials,
            self.theorem_bound,
            self.exact_mse
        )
    }

    /// `empirical_mse / exact_mse`.
    pub fn ratio_to_exact(&self) -> f64 {
        self.empirical_mse / self.exact_mse
    }
}

/// Monte-Carlo MSE of [`moment_estimate`] over `trials` fresh datasets of
/// size `n` at time `t`. Trial `i` uses stream `(seed, TRIAL, i)`.
///
/// Noising `X_0` gives `e^{-t} y mu + (e^{-t} eps + beta_t z)` whose noise
/// part is exactly standard normal, so each `X_t` is drawn from the time-`t`
/// mixture directly at half the cost.
pub fn evaluate_theorem1_bound(
    params: &MixtureParams,
    t: f64,
    n: usize,
    trials: usize,
    seed: u64,
) -> Result<BoundReport> {
    if trials < 100 {
        return Err(invalid(format!("need at least 100 trials, got {trials}")));
    }
    if n == 0 {
        return Err(invalid("n must be >= 1"));
    }
    let mu_t = mean_at_time(params, t);
    let norm_sq = mu_t.dot(&mu_t);
    let at_t = params.at_time(t);
    let estimates: Vec<WeightEstimate> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, &[tag::TRIAL, i as u64]);
            let xt = sample_data(&at_t, n, &mut r)?.x;
            moment_estimate(mu_t.view(), xt.view(), t)
        })
        .collect::<Result<_>>()?;

    let w = params.weight();
    let sq: Vec<f64> = estimates.iter().map(|e| (e.w_hat - w).powi(2)).collect();
    let (mse, se) = crate::stats::mean_and_se(&sq);
    let mean_w_hat = estimates.iter().map(|e| e.w_hat).sum::<f64>() / trials as f64;
    Ok(BoundReport {
        d: params.dim(),
        n,
        w,
        t,
        mu_t_norm_sq: norm_sq,
        trials,
        empirical_mse: mse,
        mse_std_error: se,
        mean_w_hat,
        clipped_trials: estimates.iter().filter(|e| e.clipped).count(),
        theorem_bound: theorem_bound(w, norm_sq, params.dim(), n),
        exact_mse: exact_mse(w, norm_sq, n),
    })
}
