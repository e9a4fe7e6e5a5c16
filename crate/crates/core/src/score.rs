//! One-layer conditional score model and the DDPM objective.
//!
//! The model is `s(t, x) = tanh(m_t . x + b) m_t - x` with `m_t = e^{-t} mu_hat`.
//! `mu_hat` is the shared backbone, `b` the client's embedding. For one row
//! with residual `r = s(t, x_t) + z / beta_t` the per-row loss is `|r|^2` and
//!
//! ```text
//! d/db      |r|^2 = 2 sech^2(u) (m_t . r)
//! d/dmu_hat |r|^2 = 2 e^{-t} [ tanh(u) r + sech^2(u) (m_t . r) x_t ]
//! ```

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mixture::{alpha, beta, standard_normal_matrix, DiffusionSchedule, MixtureParams};

/// Bound on `|b|`. At `|b| = 10`, `w` is within `2e-9` of 0 or 1 and tanh is
/// saturated to machine precision.
pub const LOGIT_CLAMP: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreParams {
    pub mu_hat: Array1<f64>,
    /// `b = 0.5 ln(w / (1 - w))`.
    pub logit: f64,
}

impl ScoreParams {
    pub fn new(mu_hat: Array1<f64>, logit: f64) -> Self {
        Self {
            mu_hat,
            logit: logit.clamp(-LOGIT_CLAMP, LOGIT_CLAMP),
        }
    }

    pub fn from_weight(mu_hat: Array1<f64>, w: f64) -> Self {
        Self::new(mu_hat, weight_to_logit(w))
    }

    /// The exact score of `params` expressed in this parametrisation.
    pub fn from_truth(params: &MixtureParams) -> Self {
        Self::new(params.mu().clone(), params.log_odds_half())
    }

    pub fn weight(&self) -> f64 {
        logit_to_weight(self.logit)
    }

    pub fn dim(&self) -> usize {
        self.mu_hat.len()
    }

    pub fn clamp_logit(&mut self) {
        self.logit = self.logit.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    }

    pub fn is_finite(&self) -> bool {
        self.logit.is_finite() && self.mu_hat.iter().all(|v| v.is_finite())
    }

    /// `(mu_hat, b) -> (-mu_hat, -b)`, the same score up to label swap.
    pub fn flipped(&self) -> Self {
        Self {
            mu_hat: -&self.mu_hat,
            logit: -self.logit,
        }
    }
}

/// `w = sigmoid(2 b)`.
pub fn logit_to_weight(b: f64) -> f64 {
    0.5 * (1.0 + b.tanh())
}

pub fn weight_to_logit(w: f64) -> f64 {
    let w = w.clamp(1e-300, 1.0);
    (0.5 * (w.ln() - (1.0 - w).ln())).clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
}

/// Noised minibatch. Row `i` satisfies `xt_i = e^{-t_i} x0_i + beta_{t_i} z_i`.
#[derive(Debug, Clone)]
pub struct Minibatch {
    pub x0: Array2<f64>,
    pub t: Vec<f64>,
    pub z: Array2<f64>,
    pub xt: Array2<f64>,
}

impl Minibatch {
    /// Build from explicit clean rows, times and noise.
    pub fn new(x0: Array2<f64>, t: Vec<f64>, z: Array2<f64>) -> Result<Self> {
        if t.len() != x0.nrows() {
            return Err(Error::DimensionMismatch {
                expected: x0.nrows(),
                got: t.len(),
            });
        }
        if z.dim() != x0.dim() {
            return Err(invalid("noise and clean rows differ in shape"));
        }
        let mut xt = x0.clone();
        for ((mut row, zr), &ti) in xt.rows_mut().into_iter().zip(z.rows()).zip(&t) {
            let (a, b) = (alpha(ti), beta(ti));
            row.zip_mut_with(&zr, |x, &zi| *x = a * *x + b * zi);
        }
        Ok(Self { x0, t, z, xt })
    }

    /// Fresh timesteps and noise for the given clean rows.
    pub fn draw<R: Rng + ?Sized>(
        x0: Array2<f64>,
        schedule: &DiffusionSchedule,
        rng: &mut R,
    ) -> Self {
        let t = sample_timesteps(schedule, x0.nrows(), rng);
        let z = standard_normal_matrix(x0.nrows(), x0.ncols(), rng);
        Self::new(x0, t, z).expect("shapes agree by construction")
    }

    /// Every row at the same time `t`.
    pub fn at_time<R: Rng + ?Sized>(x0: Array2<f64>, t: f64, rng: &mut R) -> Self {
        let n = x0.nrows();
        let z = standard_normal_matrix(n, x0.ncols(), rng);
        Self::new(x0, vec![t; n], z).expect("shapes agree by construction")
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

pub fn predict_score(p: &ScoreParams, t: f64, x: ArrayView1<f64>) -> Array1<f64> {
    let m = &p.mu_hat * alpha(t);
    let u = m.dot(&x) + p.logit;
    &m * u.tanh() - &x
}

/// Loss and both gradients from one pass over the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad_mu: Array1<f64>,
    pub grad_logit: f64,
}

fn check_batch(p: &ScoreParams, batch: &Minibatch, schedule: &DiffusionSchedule) -> Result<()> {
    if batch.is_empty() {
        return Err(invalid("empty minibatch"));
    }
    if batch.xt.ncols() != p.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            got: batch.xt.ncols(),
        });
    }
    if let Some(&t) = batch.t.iter().find(|&&t| !(t >= schedule.t_min)) {
        return Err(Error::TimestepBelowCutoff {
            t,
            t_min: schedule.t_min,
        });
    }
    Ok(())
}

/// Mean over rows of `|s(t_i, xt_i) + z_i / beta_{t_i}|^2` plus the analytic
/// gradients. Rows are accumulated in index order.
pub fn loss_and_grad(
    p: &ScoreParams,
    batch: &Minibatch,
    schedule: &DiffusionSchedule,
) -> Result<LossGrad> {
    check_batch(p, batch, schedule)?;
    Ok(accumulate(p, batch.xt.view(), batch.z.view(), &batch.t))
}

fn accumulate(p: &ScoreParams, xt: ArrayView2<f64>, z: ArrayView2<f64>, ts: &[f64]) -> LossGrad {
    let d = p.dim();
    let mut loss = 0.0;
    let mut grad_logit = 0.0;
    let mut grad_mu = Array1::<f64>::zeros(d);
    let mut m = vec![0.0; d];
    let mut r = vec![0.0; d];
    for ((x, zr), &t) in xt.rows().into_iter().zip(z.rows()).zip(ts) {
        let a = alpha(t);
        let inv_b = 1.0 / beta(t);
        let mut u = p.logit;
        for k in 0..d {
            m[k] = a * p.mu_hat[k];
            u += m[k] * x[k];
        }
        let th = u.tanh();
        let sech2 = 1.0 - th * th;
        let mut m_dot_r = 0.0;
        let mut sq = 0.0;
        for k in 0..d {
            r[k] = th * m[k] - x[k] + zr[k] * inv_b;
            m_dot_r += m[k] * r[k];
            sq += r[k] * r[k];
        }
        loss += sq;
        grad_logit += 2.0 * sech2 * m_dot_r;
        for k in 0..d {
            grad_mu[k] += 2.0 * a * (th * r[k] + sech2 * m_dot_r * x[k]);
        }
    }
    let n = ts.len() as f64;
    grad_mu /= n;
    LossGrad {
        loss: loss / n,
        grad_mu,
        grad_logit: grad_logit / n,
    }
}

pub fn ddpm_loss(p: &ScoreParams, batch: &Minibatch, schedule: &DiffusionSchedule) -> Result<f64> {
    loss_and_grad(p, batch, schedule).map(|g| g.loss)
}

pub fn grad_logit(p: &ScoreParams, batch: &Minibatch, schedule: &DiffusionSchedule) -> Result<f64> {
    loss_and_grad(p, batch, schedule).map(|g| g.grad_logit)
}

pub fn grad_mu(
    p: &ScoreParams,
    batch: &Minibatch,
    schedule: &DiffusionSchedule,
) -> Result<Array1<f64>> {
    loss_and_grad(p, batch, schedule).map(|g| g.grad_mu)
}

/// Per-row logit-gradient contributions; their spread gives the Monte-Carlo
/// standard error of [`grad_logit`].
pub fn grad_logit_terms(
    p: &ScoreParams,
    batch: &Minibatch,
    schedule: &DiffusionSchedule,
) -> Result<Vec<f64>> {
    check_batch(p, batch, schedule)?;
    let out = batch
        .xt
        .rows()
        .into_iter()
        .zip(batch.z.rows())
        .zip(&batch.t)
        .map(|((x, z), &t)| {
            let a = alpha(t);
            let m = &p.mu_hat * a;
            let th = (m.dot(&x) + p.logit).tanh();
            let r = &m * th - &x + &(&z / beta(t));
            2.0 * (1.0 - th * th) * m.dot(&r)
        })
        .collect();
    Ok(out)
}

pub fn sample_timesteps<R: Rng + ?Sized>(
    schedule: &DiffusionSchedule,
    b: usize,
    rng: &mut R,
) -> Vec<f64> {
    let span = schedule.t_max - schedule.t_min;
    (0..b)
        .map(|_| schedule.t_min + span * rng.random::<f64>())
        .collect()
}
