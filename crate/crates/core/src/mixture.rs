//! Ground-truth symmetric two-component mixture and its OU forward process.
//!
//! `q_0 = w N(mu, I) + (1 - w) N(-mu, I)`. Under the forward SDE
//! `dX = -X dt + sqrt(2) dW` the marginal stays a mixture of the same shape
//! with the mean contracted to `mu_t = e^{-t} mu`, which is what makes the
//! score available in closed form.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Weights outside `[WEIGHT_FLOOR, 1 - WEIGHT_FLOOR]` are clamped before
/// forming the score's log-odds.
pub const WEIGHT_FLOOR: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Shared mean and mixing weight of the `+mu` component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    mu: Array1<f64>,
    w: f64,
}

impl MixtureParams {
    /// `w` may sit on the closed interval so the degenerate single-Gaussian
    /// cases can be represented; score evaluation clamps it.
    pub fn new(mu: Array1<f64>, w: f64) -> Result<Self> {
        if mu.is_empty() {
            return Err(invalid("mean must have dimension >= 1"));
        }
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(invalid("mean must be finite"));
        }
        if !(0.0..=1.0).contains(&w) {
            return Err(invalid(format!("mixing weight {w} outside [0, 1]")));
        }
        Ok(Self { mu, w })
    }

    /// Mean `norm / sqrt(d) * (1, ..., 1)`.
    pub fn isotropic(dim: usize, norm: f64, w: f64) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("mean must have dimension >= 1"));
        }
        Self::new(Array1::from_elem(dim, norm / (dim as f64).sqrt()), w)
    }

    pub fn mu(&self) -> &Array1<f64> {
        &self.mu
    }

    pub fn weight(&self) -> f64 {
        self.w
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn with_weight(&self, w: f64) -> Result<Self> {
        Self::new(self.mu.clone(), w)
    }

    /// True when score evaluation has to clamp the weight.
    pub fn weight_clamped(&self) -> bool {
        self.w < WEIGHT_FLOOR || self.w > 1.0 - WEIGHT_FLOOR
    }

    /// `0.5 * ln(w / (1 - w))` on the clamped weight.
    pub fn log_odds_half(&self) -> f64 {
        let w = self.w.clamp(WEIGHT_FLOOR, 1.0 - WEIGHT_FLOOR);
        0.5 * (w.ln() - (1.0 - w).ln())
    }

    /// The label-swapped parametrisation `(-mu, 1 - w)` of the same law.
    pub fn flipped(&self) -> Self {
        Self {
            mu: -&self.mu,
            w: 1.0 - self.w,
        }
    }

    /// Parameters of the time-`t` marginal: same weight, mean `e^{-t} mu`.
    pub fn at_time(&self, t: f64) -> Self {
        Self {
            mu: mean_at_time(self, t),
            w: self.w,
        }
    }
}

/// Forward-process schedule with unit drift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSchedule {
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self {
            t_min: 1e-2,
            t_max: 5.0,
        }
    }
}

impl DiffusionSchedule {
    pub fn new(t_min: f64, t_max: f64) -> Result<Self> {
        let s = Self { t_min, t_max };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_min > 0.0 && self.t_min < self.t_max && self.t_max.is_finite()) {
            return Err(invalid(format!(
                "schedule needs 0 < t_min < t_max, got t_min={} t_max={}",
                self.t_min, self.t_max
            )));
        }
        Ok(())
    }

    /// Drift constant of the forward SDE. Fixed.
    pub fn drift(&self) -> f64 {
        1.0
    }
}

/// Signal coefficient `e^{-t}`.
pub fn alpha(t: f64) -> f64 {
    (-t).exp()
}

/// Noise coefficient `sqrt(1 - e^{-2t})`.
pub fn beta(t: f64) -> f64 {
    (-(-2.0 * t).exp_m1()).sqrt()
}

/// Rows of a sample together with the component each row came from
/// (`+1` for `+mu`, `-1` for `-mu`).
#[derive(Debug, Clone)]
pub struct LabeledSamples {
    pub x: Array2<f64>,
    pub labels: Vec<i8>,
}

impl LabeledSamples {
    pub fn positive_fraction(&self) -> f64 {
        let pos = self.labels.iter().filter(|&&l| l > 0).count();
        pos as f64 / self.labels.len().max(1) as f64
    }
}

pub fn sample_data<R: Rng + ?Sized>(
    params: &MixtureParams,
    n: usize,
    rng: &mut R,
) -> Result<LabeledSamples> {
    if n == 0 {
        return Err(invalid("sample size must be >= 1"));
    }
    let d = params.dim();
    let mut x = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    for mut row in x.rows_mut() {
        let sign = if rng.random::<f64>() < params.w { 1.0 } else { -1.0 };
        labels.push(sign as i8);
        for (v, &m) in row.iter_mut().zip(params.mu.iter()) {
            let z: f64 = rng.sample(StandardNormal);
            *v = sign * m + z;
        }
    }
    Ok(LabeledSamples { x, labels })
}

pub fn mean_at_time(params: &MixtureParams, t: f64) -> Array1<f64> {
    &params.mu * alpha(t)
}

/// `X_t = e^{-t} X_0 + beta_t Z` with one `t` for every row. Returns the
/// noised rows and the exact noise draw.
pub fn forward_noise<R: Rng + ?Sized>(
    x0: ArrayView2<f64>,
    t: f64,
    rng: &mut R,
) -> (Array2<f64>, Array2<f64>) {
    let z = standard_normal_matrix(x0.nrows(), x0.ncols(), rng);
    let (a, b) = (alpha(t), beta(t));
    let mut xt = x0.to_owned();
    if t != 0.0 {
        xt.zip_mut_with(&z, |x, &zi| *x = a * *x + b * zi);
    }
    (xt, z)
}

pub(crate) fn standard_normal_matrix<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let hi = a.max(b);
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + ((a - hi).exp() + (b - hi).exp()).ln()
}

/// `ln q_t(x)` in log-sum-exp form.
pub fn log_density_at_time(params: &MixtureParams, t: f64, x: ArrayView1<f64>) -> f64 {
    let a = alpha(t);
    let d = params.dim() as f64;
    let (mut plus, mut minus) = (0.0, 0.0);
    for (&xi, &mi) in x.iter().zip(params.mu.iter()) {
        let m = a * mi;
        plus += (xi - m) * (xi - m);
        minus += (xi + m) * (xi + m);
    }
    let base = -0.5 * d * LN_2PI;
    let lp = params.w.ln() - 0.5 * plus;
    let lm = (1.0 - params.w).ln() - 0.5 * minus;
    base + log_add_exp(lp, lm)
}

/// Exact score `tanh(mu_t . x + b) mu_t - x` with `b = 0.5 ln(w / (1 - w))`.
pub fn true_score(params: &MixtureParams, t: f64, x: ArrayView1<f64>) -> Array1<f64> {
    let mu_t = mean_at_time(params, t);
    let u = mu_t.dot(&x) + params.log_odds_half();
    &mu_t * u.tanh() - &x
}

/// Sample mean of each column.
pub fn column_mean(x: ArrayView2<f64>) -> Array1<f64> {
    x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(x.ncols()))
}
