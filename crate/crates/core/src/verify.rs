//! End-to-end checks of the theory at desk scale.
//!
//! Each check runs with fixed seeds and pinned tolerances and reports the
//! numbers it compared. [`run_suite`] aggregates them into one report whose
//! `passed` flag drives the CLI exit status.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::Result;
use crate::estimators::{em_fit, evaluate_theorem1_bound, exact_mse, moment_estimate, BoundReport};
use crate::federated::{
    run_isolated, run_pretraining, run_pretraining_with, Execution, FedConfig, Federation, NoObserver,
    ServerMessage, ServerObserver, TruthSpec, WeightsSpec,
};
use crate::metrics::{theorem2_scaling_study, ScalingStudyConfig, ScalingSummary};
use crate::mixture::{
    alpha, forward_noise, log_density_at_time, mean_at_time, sample_data, true_score, DiffusionSchedule,
    MixtureParams,
};
use crate::optim::{OptimState, OptimizerKind, StepSizes};
use crate::personalization::{finetune_new_client, robustness_sweep, FinetuneConfig, SweepRow, SweepSpec};
use crate::rng;
use crate::sampler::{cluster_fraction, reverse_sample, SamplerConfig};
use crate::score::{loss_and_grad, Minibatch, ScoreParams};
use crate::stats::{ks_two_sample, mean_and_se, median};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckId {
    SyntheticRecovery,
    WeightMseBound,
    DimensionFree,
    FixedPointTriangle,
    GradientExactness,
    ScoreCorrectness,
    FederatedBenefit,
    NewClientPersonalization,
    FinetuneRobustness,
    GenerationFidelity,
    ScoreErrorScaling,
    DeterminismPrivacy,
}

impl CheckId {
    pub const ALL: [CheckId; 12] = [
        CheckId::SyntheticRecovery,
        CheckId::WeightMseBound,
        CheckId::DimensionFree,
        CheckId::FixedPointTriangle,
        CheckId::GradientExactness,
        CheckId::ScoreCorrectness,
        CheckId::FederatedBenefit,
        CheckId::NewClientPersonalization,
        CheckId::FinetuneRobustness,
        CheckId::GenerationFidelity,
        CheckId::ScoreErrorScaling,
        CheckId::DeterminismPrivacy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckId::SyntheticRecovery => "synthetic_recovery",
            CheckId::WeightMseBound => "weight_mse_bound",
            CheckId::DimensionFree => "dimension_free",
            CheckId::FixedPointTriangle => "fixed_point_triangle",
            CheckId::GradientExactness => "gradient_exactness",
            CheckId::ScoreCorrectness => "score_correctness",
            CheckId::FederatedBenefit => "federated_benefit",
            CheckId::NewClientPersonalization => "new_client_personalization",
            CheckId::FinetuneRobustness => "finetune_robustness",
            CheckId::GenerationFidelity => "generation_fidelity",
            CheckId::ScoreErrorScaling => "score_error_scaling",
            CheckId::DeterminismPrivacy => "determinism_privacy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub check: CheckId,
    pub passed: bool,
    pub elapsed_secs: f64,
    pub details: BTreeMap<String, Value>,
}

impl CheckResult {
    pub fn summary_line(&self) -> String {
        format!(
            "[{}] {} ({:.1}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.check.name(),
            self.elapsed_secs
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn from_checks(checks: Vec<CheckResult>) -> Self {
        Self {
            passed: checks.iter().all(|c| c.passed),
            checks,
        }
    }

    /// 0 when every check passed, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        i32::from(!self.passed)
    }
}

struct Details(BTreeMap<String, Value>);

impl Details {
    fn new() -> Self {
        Self(BTreeMap::new())
    }

    fn put(&mut self, key: &str, value: impl Serialize) {
        self.0.insert(key.to_string(), json!(value));
    }
}

fn finish(check: CheckId, start: Instant, passed: bool, details: Details) -> CheckResult {
    CheckResult {
        check,
        passed,
        elapsed_secs: start.elapsed().as_secs_f64(),
        details: details.0,
    }
}

/// Signature of an analytic `(grad_mu, grad_logit)` implementation, so a
/// faulty one can be substituted.
pub type GradientFn = dyn Fn(&ScoreParams, &Minibatch, &DiffusionSchedule) -> Result<(Array1<f64>, f64)> + Sync;

pub fn analytic_gradient(p: &ScoreParams, b: &Minibatch, s: &DiffusionSchedule) -> Result<(Array1<f64>, f64)> {
    let g = loss_and_grad(p, b, s)?;
    Ok((g.grad_mu, g.grad_logit))
}

/// Relative error with an absolute floor on the denominator.
fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Denominator floor for gradient and score comparisons: central
/// differences of O(10) losses carry ~1e-10 absolute rounding error.
pub const FD_FLOOR: f64 = 1e-3;

// ---------------------------------------------------------------------------

pub const SYNTHETIC_SEEDS: u64 = 10;

/// Single client, d = 1, mu = 4, w = 0.7, n = 1000, Adam, 5000 steps.
pub fn synthetic_fed_config(seed: u64) -> FedConfig {
    FedConfig {
        clients: 1,
        samples_per_client: 1000,
        iterations: 5000,
        sync_every: 5000,
        lr_mu: 1e-2,
        lr_logit: 1e-2,
        batch: 128,
        optimizer: OptimizerKind::Adam,
        schedule: DiffusionSchedule::default(),
        seed,
        weights: WeightsSpec::Explicit { values: vec![0.7] },
        init_std: 0.1f64.sqrt(),
        score_error_samples: 0,
    }
}

pub fn check_synthetic_recovery(seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let truth = TruthSpec { dim: 1, mean_norm: 4.0 };
    let runs = (0..SYNTHETIC_SEEDS)
        .into_par_iter()
        .map(|s| {
            let out = run_pretraining(synthetic_fed_config(rng::mix(seed, &[s])), truth)?;
            let (mut mu, mut w) = (out.backbone[0], crate::score::logit_to_weight(out.embeddings[0]));
            if mu < 0.0 {
                mu = -mu;
                w = 1.0 - w;
            }
            Ok((mu, w))
        })
        .collect::<Result<Vec<_>>>()?;
    let hits = runs
        .iter()
        .filter(|(mu, w)| (3.8..=4.3).contains(mu) && (0.64..=0.76).contains(w))
        .count();
    let elapsed = start.elapsed().as_secs_f64();
    let mut d = Details::new();
    d.put("estimates_mu_w", &runs);
    d.put("hits", hits);
    d.put("required_hits", 9);
    d.put("runtime_limit_secs", 60);
    Ok(finish(
        CheckId::SyntheticRecovery,
        start,
        hits >= 9 && elapsed < 60.0,
        d,
    ))
}

// ---------------------------------------------------------------------------

pub const BOUND_DIMS: [usize; 3] = [1, 8, 64];
pub const BOUND_SAMPLES: [usize; 3] = [100, 1_000, 10_000];
pub const BOUND_TRIALS: usize = 10_000;

pub fn check_weight_mse_bound(seed: u64) -> Result<(CheckResult, Vec<BoundReport>)> {
    let start = Instant::now();
    let mut reports = Vec::new();
    for (i, &d) in BOUND_DIMS.iter().enumerate() {
        let params = MixtureParams::isotropic(d, 4.0, 0.7)?;
        for (j, &n) in BOUND_SAMPLES.iter().enumerate() {
            let s = rng::mix(seed, &[i as u64, j as u64]);
            reports.push(evaluate_theorem1_bound(&params, 0.1, n, BOUND_TRIALS, s)?);
        }
    }
    // The bound is on the expected MSE and is attained exactly at d = 1, so
    // an estimate is only evidence against it beyond its Monte-Carlo noise.
    let below = reports.iter().all(|r| r.empirical_mse <= r.theorem_bound + 3.0 * r.mse_std_error);
    let below_literal = reports.iter().all(|r| r.empirical_mse <= r.theorem_bound);
    let within = reports.iter().all(|r| (0.8..=1.2).contains(&r.ratio_to_exact()));
    let mut det = Details::new();
    det.put(
        "cells",
        reports
            .iter()
            .map(|r| json!({"d": r.d, "n": r.n, "empirical_mse": r.empirical_mse,
                "mse_std_error": r.mse_std_error, "theorem_bound": r.theorem_bound, "exact_mse": r.exact_mse,
                "ratio_to_exact": r.ratio_to_exact()}))
            .collect::<Vec<_>>(),
    );
    det.put("all_below_bound_within_3se", below);
    det.put("all_below_bound_point_estimate", below_literal);
    det.put("all_within_20pct_of_exact", within);
    let elapsed = start.elapsed().as_secs_f64();
    det.put("runtime_limit_secs", 300);
    Ok((
        finish(CheckId::WeightMseBound, start, below && within && elapsed < 300.0, det),
        reports,
    ))
}

pub fn check_dimension_free(seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let n = 1_000;
    let mut mses = Vec::new();
    for (i, &d) in BOUND_DIMS.iter().enumerate() {
        let params = MixtureParams::isotropic(d, 4.0, 0.7)?;
        let r = evaluate_theorem1_bound(&params, 0.1, n, BOUND_TRIALS, rng::mix(seed, &[100, i as u64]))?;
        mses.push(r.empirical_mse);
    }
    let lo = mses.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = mses.iter().cloned().fold(0.0, f64::max);
    let spread = (hi - lo) / lo;
    let mut det = Details::new();
    det.put("dims", BOUND_DIMS);
    det.put("empirical_mse", &mses);
    det.put("relative_spread", spread);
    det.put("limit", 0.25);
    Ok(finish(CheckId::DimensionFree, start, spread < 0.25, det))
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TriangleInstance {
    pub d: usize,
    pub n: usize,
    pub w: f64,
    pub t: f64,
    pub mean_norm: f64,
    pub em: f64,
    pub moment: f64,
    pub ddpm: f64,
    pub ddpm_mc_se: f64,
    pub tolerance: f64,
}

/// Range of `|mu_t|` for random instances. Far beyond it almost no sample
/// sits near the decision boundary, and the fixed-`t` DDPM stationary point
/// fluctuates well above `n^{-1/2}`.
pub const TRIANGLE_MEAN_T_NORM: (f64, f64) = (0.75, 2.5);

/// Logit-only Adam on the DDPM loss at a fixed time with the
/// true mean, full batch, fresh noise every step. Returns the tail-averaged
/// weight and its batch-means standard error.
pub fn ddpm_weight_limit(mu: &Array1<f64>, x0: &Array2<f64>, t: f64, steps: usize, lr: f64, seed: u64) -> Result<(f64, f64)> {
    let schedule = DiffusionSchedule::new(t.min(DiffusionSchedule::default().t_min), t.max(1.0) + 1.0)?;
    let mut p = ScoreParams::new(mu.clone(), 0.0);
    let mut opt = OptimState::new(OptimizerKind::Adam, mu.len());
    let eta = StepSizes { mu: 0.0, logit: lr };
    let burn = steps / 2;
    let mut tail = Vec::with_capacity(steps - burn);
    for k in 0..steps {
        let mut r = rng::stream(seed, &[k as u64]);
        let batch = Minibatch::at_time(x0.clone(), t, &mut r);
        let g = loss_and_grad(&p, &batch, &schedule)?;
        opt.apply(&mut p, &g, eta);
        if k >= burn {
            tail.push(p.weight());
        }
    }
    let blocks = 10;
    let size = tail.len() / blocks;
    let block_means: Vec<f64> = (0..blocks)
        .map(|b| tail[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64)
        .collect();
    Ok(mean_and_se(&block_means))
}

pub fn triangle_instance(seed: u64) -> Result<TriangleInstance> {
    let mut r = rng::stream(seed, &[]);
    let d = r.random_range(1..=8usize);
    let n = r.random_range(200..=2000usize);
    let w = r.random_range(0.2..0.8);
    let t = r.random_range(0.05..1.0);
    let mean_t_norm = r.random_range(TRIANGLE_MEAN_T_NORM.0..TRIANGLE_MEAN_T_NORM.1);
    let mean_norm = mean_t_norm / alpha(t);
    let params = MixtureParams::isotropic(d, mean_norm, w)?;
    let x0 = sample_data(&params, n, &mut r)?.x;
    let (xt, _) = forward_noise(x0.view(), t, &mut r);
    let mu_t = mean_at_time(&params, t);
    let em = em_fit(mu_t.view(), xt.view(), 0.5)?.w;
    let moment = moment_estimate(mu_t.view(), xt.view(), t)?.w_hat;
    let (ddpm, se) = ddpm_weight_limit(params.mu(), &x0, t, 3000, 0.02, rng::mix(seed, &[1]))?;
    Ok(TriangleInstance {
        d,
        n,
        w,
        t,
        mean_norm,
        em,
        moment,
        ddpm,
        ddpm_mc_se: se,
        tolerance: 3.0 * (se + 1.0 / (n as f64).sqrt()),
    })
}

pub fn check_fixed_point_triangle(seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let instances = (0..20u64)
        .into_par_iter()
        .map(|i| triangle_instance(rng::mix(seed, &[200, i])))
        .collect::<Result<Vec<_>>>()?;
    let agree = |a: f64, b: f64, tol: f64| (a - b).abs() <= tol;
    let ok = instances.iter().all(|t| {
        agree(t.em, t.moment, t.tolerance) && agree(t.em, t.ddpm, t.tolerance) && agree(t.moment, t.ddpm, t.tolerance)
    });
    let worst = instances
        .iter()
        .map(|t| {
            let gap = (t.em - t.moment).abs().max((t.em - t.ddpm).abs()).max((t.moment - t.ddpm).abs());
            gap / t.tolerance
        })
        .fold(0.0, f64::max);
    let elapsed = start.elapsed().as_secs_f64();
    let mut det = Details::new();
    det.put("instances", &instances);
    det.put("worst_gap_over_tolerance", worst);
    det.put("runtime_limit_secs", 120);
    Ok(finish(CheckId::FixedPointTriangle, start, ok && elapsed < 120.0, det))
}

// ---------------------------------------------------------------------------

fn random_gradient_case(seed: u64) -> Result<(ScoreParams, Minibatch)> {
    let mut r = rng::stream(seed, &[]);
    let d = r.random_range(1..=16usize);
    let b = r.random_range(1..=32usize);
    let truth = MixtureParams::new(
        (0..d).map(|_| r.random_range(-2.0..2.0)).collect(),
        r.random_range(0.05..0.95),
    )?;
    let p = ScoreParams::new(
        (0..d).map(|_| r.random_range(-2.0..2.0)).collect(),
        r.random_range(-2.0..2.0),
    );
    let x0 = sample_data(&truth, b, &mut r)?.x;
    Ok((p, Minibatch::draw(x0, &DiffusionSchedule::default(), &mut r)))
}

/// Central differences of the loss in every coordinate of `mu_hat` and in
/// the logit.
pub fn finite_difference_gradient(p: &ScoreParams, b: &Minibatch, s: &DiffusionSchedule, h: f64) -> Result<(Array1<f64>, f64)> {
    let loss = |q: &ScoreParams| crate::score::ddpm_loss(q, b, s);
    let mut gm = Array1::zeros(p.dim());
    for k in 0..p.dim() {
        let mut plus = p.clone();
        plus.mu_hat[k] += h;
        let mut minus = p.clone();
        minus.mu_hat[k] -= h;
        gm[k] = (loss(&plus)? - loss(&minus)?) / (2.0 * h);
    }
    let mut plus = p.clone();
    plus.logit += h;
    let mut minus = p.clone();
    minus.logit -= h;
    let gl = (loss(&plus)? - loss(&minus)?) / (2.0 * h);
    Ok((gm, gl))
}

pub fn check_gradient_exactness_with(seed: u64, gradient: &GradientFn) -> Result<CheckResult> {
    let start = Instant::now();
    let s = DiffusionSchedule::default();
    let mut worst_mu: f64 = 0.0;
    let mut worst_logit: f64 = 0.0;
    for i in 0..100u64 {
        let (p, b) = random_gradient_case(rng::mix(seed, &[300, i]))?;
        let (gm, gl) = gradient(&p, &b, &s)?;
        let (fm, fl) = finite_difference_gradient(&p, &b, &s, 1e-6)?;
        for (a, f) in gm.iter().zip(fm.iter()) {
            worst_mu = worst_mu.max(rel_err(*a, *f, FD_FLOOR));
        }
        worst_logit = worst_logit.max(rel_err(gl, fl, FD_FLOOR));
    }
    let elapsed = start.elapsed().as_secs_f64();
    let mut det = Details::new();
    det.put("configurations", 100);
    det.put("max_rel_err_grad_mu", worst_mu);
    det.put("max_rel_err_grad_logit", worst_logit);
    det.put("limit", 1e-5);
    det.put("denominator_floor", FD_FLOOR);
    let ok = worst_mu < 1e-5 && worst_logit < 1e-5 && elapsed < 30.0;
    Ok(finish(CheckId::GradientExactness, start, ok, det))
}

pub fn check_gradient_exactness(seed: u64) -> Result<CheckResult> {
    check_gradient_exactness_with(seed, &analytic_gradient)
}

pub fn check_score_correctness(seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let h = 1e-5;
    for i in 0..100u64 {
        let mut r = rng::stream(seed, &[400, i]);
        let d = [1usize, 2, 8][r.random_range(0..3)];
        let params = MixtureParams::new(
            (0..d).map(|_| r.random_range(-3.0..3.0)).collect(),
            r.random_range(0.05..0.95),
        )?;
        let t = r.random_range(0.01..3.0);
        let x: Array1<f64> = (0..d).map(|_| r.random_range(-4.0..4.0)).collect();
        let s = true_score(&params, t, x.view());
        for k in 0..d {
            let mut xp = x.clone();
            xp[k] += h;
            let mut xm = x.clone();
            xm[k] -= h;
            let fd = (log_density_at_time(&params, t, xp.view()) - log_density_at_time(&params, t, xm.view())) / (2.0 * h);
            worst = worst.max(rel_err(s[k], fd, FD_FLOOR));
        }
    }
    let mut det = Details::new();
    det.put("configurations", 100);
    det.put("max_rel_err", worst);
    det.put("limit", 1e-5);
    det.put("denominator_floor", FD_FLOOR);
    Ok(finish(CheckId::ScoreCorrectness, start, worst < 1e-5, det))
}

// ---------------------------------------------------------------------------

/// m = 20, n = 200, d = 8, K = 4000, synchronising every 50 steps.
pub fn federated_benefit_config(seed: u64) -> FedConfig {
    FedConfig {
        clients: 20,
        samples_per_client: 200,
        iterations: 4000,
        sync_every: 50,
        lr_mu: 1e-2,
        lr_logit: 1e-2,
        batch: 32,
        optimizer: OptimizerKind::Sgd,
        schedule: DiffusionSchedule::default(),
        seed,
        weights: WeightsSpec::Uniform { lo: 0.2, hi: 0.8 },
        init_std: 0.1f64.sqrt(),
        score_error_samples: 0,
    }
}

pub const FEDERATED_TRUTH: TruthSpec = TruthSpec { dim: 8, mean_norm: 4.0 };

pub fn check_federated_benefit(seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let mut fed_errors = Vec::new();
    let mut best_single = Vec::new();
    let mut weight_mse = Vec::new();
    for s in 0..10u64 {
        let cfg = federated_benefit_config(rng::mix(seed, &[500, s]));
        let out = run_pretraining(cfg.clone(), FEDERATED_TRUTH)?;
        let last = out.records.last().expect("at least the initial record");
        fed_errors.push(last.mean_error);
        weight_mse.push(last.weight_mse);
        let iso = run_isolated(cfg, FEDERATED_TRUTH)?;
        best_single.push(iso.iter().map(|o| o.mean_error).fold(f64::INFINITY, f64::min));
    }
    let (mf, mb) = (median(&fed_errors), median(&best_single));
    let elapsed = start.elapsed().as_secs_f64();
    let mut det = Details::new();
    det.put("federated_mean_error", &fed_errors);
    det.put("best_single_client_mean_error", &best_single);
    det.put("median_federated", mf);
    det.put("median_best_single", mb);
    det.put("final_weight_mse", &weight_mse);
    det.put("runtime_limit_secs", 600);
    Ok(finish(CheckId::FederatedBenefit, start, mf < mb && elapsed < 600.0, det))
}

// ---------------------------------------------------------------------------

pub const NEW_CLIENT_WEIGHT: f64 = 0.8;

pub fn new_client_finetune_config(seed: u64) -> FinetuneConfig {
    FinetuneConfig {
        iterations: 500,
        lr: 0.05,
        batch: 20,
        schedule: DiffusionSchedule::default(),
        seed,
    }
}

pub fn check_new_client_personalization(seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let params = MixtureParams::isotropic(8, 4.0, NEW_CLIENT_WEIGHT)?;
    let n = 100;
    let mu_t = mean_at_time(&params, 0.1);
    let limit = 5.0 * exact_mse(NEW_CLIENT_WEIGHT, mu_t.dot(&mu_t), n);
    let mut sq_errors = Vec::new();
    let mut unchanged = true;
    for s in 0..10u64 {
        let mut r = rng::stream(seed, &[600, s]);
        let data = sample_data(&params, n, &mut r)?.x;
        let backbone = params.mu().clone();
        let before: Vec<u64> = backbone.iter().map(|v| v.to_bits()).collect();
        let out = finetune_new_client(backbone.view(), data.view(), &new_client_finetune_config(rng::mix(seed, &[601, s])))?;
        unchanged &= backbone.iter().map(|v| v.to_bits()).eq(before);
        sq_errors.push((out.final_weight() - NEW_CLIENT_WEIGHT).powi(2));
    }
    let hits = sq_errors.iter().filter(|&&e| e <= limit).count();
    let mut det = Details::new();
    det.put("squared_errors", &sq_errors);
    det.put("limit", limit);
    det.put("hits", hits);
    det.put("required_hits", 8);
    det.put("backbone_unchanged", unchanged);
    Ok(finish(CheckId::NewClientPersonalization, start, hits >= 8 && unchanged, det))
}

// ---------------------------------------------------------------------------

pub const SWEEP_EPOCHS: [usize; 8] = [1, 2, 5, 10, 20, 50, 100, 200];
pub const SWEEP_LRS: [f64; 3] = [0.01, 0.03, 0.1];
/// Outside the pre-training weight range [0.2, 0.8].
pub const SWEEP_WEIGHT: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobustnessOutcome {
    pub rows: Vec<SweepRow>,
    pub best_epochs: usize,
    pub best_lr: f64,
    pub best_error: f64,
    pub long_error: f64,
    pub max_drift: f64,
}

/// Sweep over `SWEEP_EPOCHS x SWEEP_LRS` with one dataset per seed, then
/// evaluate the best cell's learning rate at ten times its epoch count.
pub fn robustness_study(seed: u64, seeds: usize) -> Result<RobustnessOutcome> {
    let params = MixtureParams::isotropic(8, 4.0, SWEEP_WEIGHT)?;
    let n = 100;
    let datasets: Vec<(u64, Array2<f64>)> = (0..seeds as u64)
        .map(|s| {
            let mut r = rng::stream(seed, &[700, s]);
            Ok((s, sample_data(&params, n, &mut r)?.x))
        })
        .collect::<Result<_>>()?;
    let run = |epochs: &[usize], lrs: &[f64]| -> Result<Vec<SweepRow>> {
        let mut rows = Vec::new();
        for (s, data) in &datasets {
            let spec = SweepSpec {
                epochs,
                lrs,
                seeds: &[*s],
                batch: 20,
                schedule: DiffusionSchedule::default(),
                w_new: SWEEP_WEIGHT,
            };
            rows.extend(robustness_sweep(params.mu().view(), data.view(), &spec)?);
        }
        Ok(rows)
    };
    let rows = run(&SWEEP_EPOCHS, &SWEEP_LRS)?;
    let cell_median = |rows: &[SweepRow], e: usize, lr: f64| {
        let v: Vec<f64> = rows
            .iter()
            .filter(|r| r.epochs == e && r.lr == lr)
            .map(|r| r.weight_error)
            .collect();
        median(&v)
    };
    let mut best = (SWEEP_EPOCHS[0], SWEEP_LRS[0], f64::INFINITY);
    for &e in &SWEEP_EPOCHS {
        for &lr in &SWEEP_LRS {
            let m = cell_median(&rows, e, lr);
            if m < best.2 {
                best = (e, lr, m);
            }
        }
    }
    let long_epochs = 10 * best.0;
    let long_rows = if SWEEP_EPOCHS.contains(&long_epochs) {
        rows.clone()
    } else {
        run(&[long_epochs], &[best.1])?
    };
    let long_error = cell_median(&long_rows, long_epochs, best.1);
    let max_drift = rows
        .iter()
        .chain(long_rows.iter())
        .map(|r| r.backbone_drift)
        .fold(0.0, f64::max);
    let mut all = rows;
    if !SWEEP_EPOCHS.contains(&long_epochs) {
        all.extend(long_rows);
    }
    Ok(RobustnessOutcome {
        rows: all,
        best_epochs: best.0,
        best_lr: best.1,
        best_error: best.2,
        long_error,
        max_drift,
    })
}

pub fn check_finetune_robustness(seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let out = robustness_study(seed, 10)?;
    let ok = out.long_error <= 2.0 * out.best_error && out.max_drift == 0.0;
    let mut det = Details::new();
    det.put("best_epochs", out.best_epochs);
    det.put("best_lr", out.best_lr);
    det.put("best_median_error", out.best_error);
    det.put("ten_x_epochs_median_error", out.long_error);
    det.put("ratio", out.long_error / out.best_error);
    det.put("max_backbone_drift", out.max_drift);
    Ok(finish(CheckId::FinetuneRobustness, start, ok, det))
}

// ---------------------------------------------------------------------------

pub fn check_generation_fidelity(seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let params = MixtureParams::new(ndarray::array![4.0], 0.7)?;
    let n = 10_000;
    let s500 = reverse_sample(&params, &SamplerConfig { n_steps: 500, ..Default::default() }, n, rng::mix(seed, &[800]))?;
    let frac = cluster_fraction(s500.view(), params.mu().view())?;
    let s1000 = reverse_sample(&params, &SamplerConfig { n_steps: 1000, ..Default::default() }, n, rng::mix(seed, &[801]))?;
    let direct = sample_data(&params, n, &mut rng::stream(seed, &[802]))?.x;
    let ks = ks_two_sample(&s1000.column(0).to_vec(), &direct.column(0).to_vec());
    let ok = (frac - 0.7).abs() <= 0.02 && ks.p_value > 1e-3;
    let mut det = Details::new();
    det.put("cluster_fraction_500_steps", frac);
    det.put("ks_statistic_1000_steps", ks.statistic);
    det.put("ks_p_value_1000_steps", ks.p_value);
    Ok(finish(CheckId::GenerationFidelity, start, ok, det))
}

// ---------------------------------------------------------------------------

/// d = 4, |mu| = 2, m in {2, 8, 32}, n in {50, 200, 800}, full-batch
/// gradient descent in both phases.
pub fn scaling_study_config(seed: u64) -> ScalingStudyConfig {
    ScalingStudyConfig {
        clients: vec![2, 8, 32],
        samples: vec![50, 200, 800],
        seeds: (0..5).map(|s| rng::mix(seed, &[900, s])).collect(),
        truth: TruthSpec { dim: 4, mean_norm: 2.0 },
        base: FedConfig {
            clients: 1,
            samples_per_client: 1,
            iterations: 2000,
            sync_every: 10,
            lr_mu: 0.05,
            lr_logit: 0.05,
            batch: 1,
            optimizer: OptimizerKind::Sgd,
            schedule: DiffusionSchedule::default(),
            seed: 0,
            weights: WeightsSpec::Uniform { lo: 0.2, hi: 0.8 },
            init_std: 0.1f64.sqrt(),
            score_error_samples: 0,
        },
        full_batch: true,
        finetune_iterations: 500,
        finetune_lr: 0.1,
        new_client_weight: 0.7,
        new_clients: 4,
        mc_samples: 4000,
    }
}

pub fn check_score_error_scaling(seed: u64) -> Result<(CheckResult, ScalingSummary)> {
    let start = Instant::now();
    let summary = theorem2_scaling_study(&scaling_study_config(seed))?;
    let n_ok = summary.slopes_in_n.iter().all(|(_, s)| (-1.4..=-0.6).contains(s));
    let m_ok = summary.slopes_in_m.iter().all(|(_, s)| *s <= -0.3);
    let elapsed = start.elapsed().as_secs_f64();
    let mut det = Details::new();
    det.put("slopes_in_n", &summary.slopes_in_n);
    det.put("slopes_in_m", &summary.slopes_in_m);
    det.put("median_l_est", &summary.medians);
    det.put("runtime_limit_secs", 1200);
    Ok((
        finish(CheckId::ScoreErrorScaling, start, n_ok && m_ok && elapsed < 1200.0, det),
        summary,
    ))
}

// ---------------------------------------------------------------------------

/// Records every number the server sees, and the JSON form of every message.
#[derive(Default)]
pub struct RecordingObserver {
    pub values: Vec<u64>,
    pub json: Vec<String>,
}

impl ServerObserver for RecordingObserver {
    fn observe(&mut self, message: &ServerMessage<'_>) {
        let backbone = match message {
            ServerMessage::Upload { backbone, .. } | ServerMessage::Broadcast { backbone, .. } => backbone.to_vec(),
            ServerMessage::Snapshot(s) => s.backbone.to_vec(),
        };
        self.values.extend(backbone.iter().map(|v| v.to_bits()));
        self.json.push(serde_json::to_string(message).expect("messages serialise"));
    }
}

pub fn determinism_config(seed: u64) -> FedConfig {
    FedConfig {
        clients: 6,
        samples_per_client: 64,
        iterations: 200,
        sync_every: 20,
        lr_mu: 1e-2,
        lr_logit: 1e-2,
        batch: 16,
        optimizer: OptimizerKind::Adam,
        schedule: DiffusionSchedule::default(),
        seed,
        weights: WeightsSpec::Uniform { lo: 0.2, hi: 0.8 },
        init_std: 0.1f64.sqrt(),
        score_error_samples: 0,
    }
}

/// Sentinel logits are distinctive decimals that no backbone coordinate
/// will hit by accident.
pub const SENTINEL_LOGITS: [f64; 6] = [
    0.123_456_789_012_345_6,
    -0.234_567_890_123_456_7,
    0.345_678_901_234_567_8,
    -0.456_789_012_345_678_9,
    0.567_890_123_456_789,
    -0.678_901_234_567_890_1,
];

pub fn check_determinism_privacy(seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let truth = TruthSpec { dim: 3, mean_norm: 3.0 };
    let cfg = determinism_config(rng::mix(seed, &[1000]));
    let seq = run_pretraining_with(cfg.clone(), truth, Execution::Sequential, &mut NoObserver)?;
    let par = run_pretraining_with(cfg.clone(), truth, Execution::Parallel, &mut NoObserver)?;
    let bitwise = seq.records.len() == par.records.len()
        && seq.records.iter().zip(&par.records).all(|(a, b)| {
            a.round == b.round
                && a.mean_error.to_bits() == b.mean_error.to_bits()
                && a.weight_mse.to_bits() == b.weight_mse.to_bits()
                && a.train_loss.map(f64::to_bits) == b.train_loss.map(f64::to_bits)
        })
        && seq.backbone.iter().zip(par.backbone.iter()).all(|(a, b)| a.to_bits() == b.to_bits());

    let mut fed = Federation::init_population(cfg, truth)?;
    fed.set_embeddings(&SENTINEL_LOGITS)?;
    let mut observer = RecordingObserver::default();
    let mut held: Vec<u64> = fed.embeddings().iter().map(|v| v.to_bits()).collect();
    observer.observe(&ServerMessage::Snapshot(fed.server()));
    while fed.server().round < fed.config().rounds() {
        fed.step_round(&mut observer)?;
        held.extend(fed.embeddings().iter().map(|v| v.to_bits()));
    }
    let leaked_values = held.iter().filter(|b| observer.values.contains(b)).count();
    let leaked_text = SENTINEL_LOGITS
        .iter()
        .filter(|s| observer.json.iter().any(|j| j.contains(&s.to_string())))
        .count();
    let mut det = Details::new();
    det.put("bitwise_identical_traces", bitwise);
    det.put("server_messages", observer.json.len());
    det.put("embedding_values_checked", held.len());
    det.put("leaked_embedding_values", leaked_values);
    det.put("leaked_sentinel_strings", leaked_text);
    Ok(finish(
        CheckId::DeterminismPrivacy,
        start,
        bitwise && leaked_values == 0 && leaked_text == 0,
        det,
    ))
}

// ---------------------------------------------------------------------------

/// Extra artefacts produced alongside the report.
#[derive(Debug, Default)]
pub struct SuiteArtifacts {
    pub bound_reports: Vec<BoundReport>,
    pub scaling: Option<ScalingSummary>,
}

pub fn run_check(id: CheckId, seed: u64, artifacts: &mut SuiteArtifacts) -> Result<CheckResult> {
    match id {
        CheckId::SyntheticRecovery => check_synthetic_recovery(seed),
        CheckId::WeightMseBound => {
            let (c, r) = check_weight_mse_bound(seed)?;
            artifacts.bound_reports = r;
            Ok(c)
        }
        CheckId::DimensionFree => check_dimension_free(seed),
        CheckId::FixedPointTriangle => check_fixed_point_triangle(seed),
        CheckId::GradientExactness => check_gradient_exactness(seed),
        CheckId::ScoreCorrectness => check_score_correctness(seed),
        CheckId::FederatedBenefit => check_federated_benefit(seed),
        CheckId::NewClientPersonalization => check_new_client_personalization(seed),
        CheckId::FinetuneRobustness => check_finetune_robustness(seed),
        CheckId::GenerationFidelity => check_generation_fidelity(seed),
        CheckId::ScoreErrorScaling => {
            let (c, s) = check_score_error_scaling(seed)?;
            artifacts.scaling = Some(s);
            Ok(c)
        }
        CheckId::DeterminismPrivacy => check_determinism_privacy(seed),
    }
}

/// Run `checks` in order. An empty list passes trivially.
pub fn run_suite(checks: &[CheckId], seed: u64) -> Result<(VerifyReport, SuiteArtifacts)> {
    let mut artifacts = SuiteArtifacts::default();
    let results = checks
        .iter()
        .map(|&id| run_check(id, seed, &mut artifacts))
        .collect::<Result<Vec<_>>>()?;
    Ok((VerifyReport::from_checks(results), artifacts))
}
