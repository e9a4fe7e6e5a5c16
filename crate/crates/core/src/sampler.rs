//! Reverse-time SDE sampling with Euler-Maruyama.
//!
//! For the forward process `dX = -X dt + sqrt(2) dW` the reverse process,
//! run from `t_start` down to `t_end`, is
//! `dY = [Y + 2 s(t, Y)] dh + sqrt(2) dW` with `h` the elapsed reverse time.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mixture::{true_score, MixtureParams};
use crate::rng::{self, tag};
use crate::score::{predict_score, ScoreParams};

/// Anything that can evaluate a score at `(t, x)`.
pub trait ScoreFn: Sync {
    fn dim(&self) -> usize;
    fn score(&self, t: f64, x: ArrayView1<f64>) -> Array1<f64>;
}

impl ScoreFn for MixtureParams {
    fn dim(&self) -> usize {
        MixtureParams::dim(self)
    }

    fn score(&self, t: f64, x: ArrayView1<f64>) -> Array1<f64> {
        true_score(self, t, x)
    }
}

impl ScoreFn for ScoreParams {
    fn dim(&self) -> usize {
        ScoreParams::dim(self)
    }

    fn score(&self, t: f64, x: ArrayView1<f64>) -> Array1<f64> {
        predict_score(self, t, x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub t_start: f64,
    pub t_end: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: 500,
            t_start: 5.0,
            t_end: 1e-3,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(invalid("sampler needs n_steps >= 1"));
        }
        if !(self.t_start > self.t_end && self.t_end > 0.0 && self.t_start.is_finite()) {
            return Err(invalid(format!(
                "sampler needs t_start > t_end > 0, got {} and {}",
                self.t_start, self.t_end
            )));
        }
        Ok(())
    }
}

/// Draw `n` samples. Trajectory `i` starts from `N(0, I)` drawn from stream
/// `(seed, SAMPLER, i)`; step `k` evaluates the score at
/// `t_start - k h`, so the last evaluation is at `t_end + h`.
pub fn reverse_sample<S: ScoreFn + ?Sized>(
    score: &S,
    cfg: &SamplerConfig,
    n: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    cfg.validate()?;
    let d = score.dim();
    let h = (cfg.t_start - cfg.t_end) / cfg.n_steps as f64;
    let noise_scale = (2.0 * h).sqrt();
    let rows: Vec<Array1<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, &[tag::SAMPLER, i as u64]);
            let mut y: Array1<f64> = (0..d).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
            for k in 0..cfg.n_steps {
                let t = cfg.t_start - k as f64 * h;
                let s = score.score(t, y.view());
                for (yi, si) in y.iter_mut().zip(s.iter()) {
                    let xi: f64 = r.sample(StandardNormal);
                    *yi += h * (*yi + 2.0 * si) + noise_scale * xi;
                }
                if y.iter().any(|v| !v.is_finite()) {
                    return Err(Error::SamplerDiverged { step: k });
                }
            }
            Ok(y)
        })
        .collect::<Result<_>>()?;
    let mut out = Array2::zeros((n, d));
    for (mut dst, src) in out.rows_mut().into_iter().zip(rows) {
        dst.assign(&src);
    }
    Ok(out)
}

/// Fraction of rows with `mu . x > 0`.
pub fn cluster_fraction(samples: ArrayView2<f64>, mu: ArrayView1<f64>) -> Result<f64> {
    if mu.dot(&mu) <= 0.0 {
        return Err(invalid("cluster fraction needs a non-zero mean"));
    }
    if samples.nrows() == 0 {
        return Err(invalid("no samples"));
    }
    let pos = samples.rows().into_iter().filter(|r| mu.dot(r) > 0.0).count();
    Ok(pos as f64 / samples.nrows() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::sample_data;
    use ndarray::array;

    #[test]
    fn config_validation() {
        assert!(SamplerConfig { n_steps: 0, ..Default::default() }.validate().is_err());
        assert!(SamplerConfig { t_end: 6.0, ..Default::default() }.validate().is_err());
        assert!(SamplerConfig { t_end: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn zero_length_integration_returns_initial_noise() {
        let p = MixtureParams::new(array![4.0], 0.7).unwrap();
        let cfg = SamplerConfig {
            n_steps: 10,
            t_start: 1.0 + 1e-9,
            t_end: 1.0,
        };
        let out = reverse_sample(&p, &cfg, 200, 9).unwrap();
        for (i, row) in out.rows().into_iter().enumerate() {
            let mut r = rng::stream(9, &[tag::SAMPLER, i as u64]);
            let y0: f64 = r.sample(StandardNormal);
            assert!((row[0] - y0).abs() < 1e-3);
        }
    }

    #[test]
    fn output_is_deterministic() {
        let p = ScoreParams::new(array![1.0, -2.0], 0.3);
        let cfg = SamplerConfig { n_steps: 20, ..Default::default() };
        assert_eq!(
            reverse_sample(&p, &cfg, 16, 4).unwrap(),
            reverse_sample(&p, &cfg, 16, 4).unwrap()
        );
    }

    #[test]
    fn cluster_fraction_basics() {
        let mu = array![1.0, 2.0];
        let s = array![[1.0, 2.0], [-1.0, -2.0]];
        assert_eq!(cluster_fraction(s.view(), mu.view()).unwrap(), 0.5);
        let s = array![[1.0, 2.0], [1.0, 2.0]];
        assert_eq!(cluster_fraction(s.view(), mu.view()).unwrap(), 1.0);
        assert!(cluster_fraction(s.view(), array![0.0, 0.0].view()).is_err());
    }

    #[test]
    fn cluster_fraction_of_direct_samples() {
        let p = MixtureParams::new(array![4.0], 0.7).unwrap();
        let s = sample_data(&p, 10_000, &mut rng::stream(12, &[])).unwrap();
        let f = cluster_fraction(s.x.view(), p.mu().view()).unwrap();
        assert!((f - 0.7).abs() < 0.02, "{f}");
    }
}
