//! New-client adaptation with a frozen backbone: only the logit is trained.

use ndarray::{Array1, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::federated::{ClientState, LocalTraining};
use crate::mixture::DiffusionSchedule;
use crate::optim::{OptimizerKind, StepSizes};
use crate::rng::{self, tag};
use crate::score::{logit_to_weight, ScoreParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub iterations: usize,
    pub lr: f64,
    pub batch: usize,
    #[serde(default)]
    pub schedule: DiffusionSchedule,
    pub seed: u64,
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("fine-tuning lr must be >= 0, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(invalid("batch must be >= 1"));
        }
        self.schedule.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOutcome {
    /// Logit before the first step and after each step.
    pub logits: Vec<f64>,
    /// Minibatch loss at each step.
    pub losses: Vec<f64>,
}

impl FinetuneOutcome {
    pub fn final_logit(&self) -> f64 {
        *self.logits.last().expect("trajectory holds the initial logit")
    }

    pub fn final_weight(&self) -> f64 {
        logit_to_weight(self.final_logit())
    }
}

/// Start the embedding at zero (`w = 1/2`) and take `cfg.iterations`
/// gradient steps on it alone. Step `k` uses stream `(seed, FINETUNE, k)`.
pub fn finetune_new_client(
    backbone: ArrayView1<f64>,
    data: ArrayView2<f64>,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if data.ncols() != backbone.len() {
        return Err(Error::DimensionMismatch {
            expected: backbone.len(),
            got: data.ncols(),
        });
    }
    if cfg.batch > data.nrows() {
        return Err(invalid(format!(
            "batch {} exceeds the {} local samples",
            cfg.batch,
            data.nrows()
        )));
    }
    let frozen: Array1<f64> = backbone.to_owned();
    let mut client = ClientState::new(
        0,
        data.to_owned(),
        ScoreParams::new(frozen.clone(), 0.0),
        OptimizerKind::Sgd,
    );
    let training = LocalTraining {
        batch: cfg.batch,
        schedule: cfg.schedule,
        eta: StepSizes { mu: 0.0, logit: cfg.lr },
    };
    let mut logits = Vec::with_capacity(cfg.iterations + 1);
    let mut losses = Vec::with_capacity(cfg.iterations);
    logits.push(client.params.logit);
    for k in 0..cfg.iterations {
        let mut r = rng::stream(cfg.seed, &[tag::FINETUNE, k as u64]);
        losses.push(client.local_step(&training, &mut r)?.loss);
        logits.push(client.params.logit);
    }
    assert!(
        client.params.mu_hat.iter().zip(frozen.iter()).all(|(a, b)| a.to_bits() == b.to_bits()),
        "fine-tuning modified the backbone"
    );
    Ok(FinetuneOutcome { logits, losses })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub weight_error: f64,
    pub backbone_drift: f64,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str = "epochs,lr,seed,weight_error,backbone_drift";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epochs, self.lr, self.seed, self.weight_error, self.backbone_drift
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec<'a> {
    pub epochs: &'a [usize],
    pub lrs: &'a [f64],
    pub seeds: &'a [u64],
    pub batch: usize,
    pub schedule: DiffusionSchedule,
    /// True mixing weight of the new client.
    pub w_new: f64,
}

/// One fine-tuning run per `(epochs, lr, seed)` on the same data. An epoch is
/// `floor(n / batch)` steps. Rows come back in grid order.
pub fn robustness_sweep(
    backbone: ArrayView1<f64>,
    data: ArrayView2<f64>,
    spec: &SweepSpec<'_>,
) -> Result<Vec<SweepRow>> {
    if spec.epochs.is_empty() || spec.lrs.is_empty() || spec.seeds.is_empty() {
        return Err(invalid("sweep grids must be non-empty"));
    }
    if spec.batch == 0 || spec.batch > data.nrows() {
        return Err(invalid("sweep batch must lie in [1, n]"));
    }
    let steps_per_epoch = data.nrows() / spec.batch;
    let cells: Vec<(usize, f64, u64)> = spec
        .epochs
        .iter()
        .flat_map(|&e| spec.lrs.iter().flat_map(move |&lr| spec.seeds.iter().map(move |&s| (e, lr, s))))
        .collect();
    let before = backbone.to_owned();
    let rows = cells
        .par_iter()
        .map(|&(epochs, lr, seed)| {
            let cfg = FinetuneConfig {
                iterations: epochs * steps_per_epoch,
                lr,
                batch: spec.batch,
                schedule: spec.schedule,
                seed: rng::mix(seed, &[tag::FINETUNE]),
            };
            let out = finetune_new_client(backbone, data, &cfg)?;
            Ok(SweepRow {
                epochs,
                lr,
                seed,
                weight_error: (out.final_weight() - spec.w_new).abs(),
                backbone_drift: 0.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let drift = backbone
        .iter()
        .zip(before.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(rows
        .into_iter()
        .map(|r| SweepRow {
            backbone_drift: drift,
            ..r
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::{sample_data, MixtureParams};
    use ndarray::array;

    fn cfg(iterations: usize) -> FinetuneConfig {
        FinetuneConfig {
            iterations,
            lr: 0.05,
            batch: 20,
            schedule: DiffusionSchedule::default(),
            seed: 3,
        }
    }

    fn data(w: f64, n: usize, seed: u64) -> (MixtureParams, ndarray::Array2<f64>) {
        let p = MixtureParams::isotropic(2, 3.0, w).unwrap();
        let x = sample_data(&p, n, &mut rng::stream(seed, &[])).unwrap().x;
        (p, x)
    }

    #[test]
    fn zero_iterations_keeps_uninformative_embedding() {
        let (p, x) = data(0.8, 50, 1);
        let out = finetune_new_client(p.mu().view(), x.view(), &cfg(0)).unwrap();
        assert_eq!(out.logits, vec![0.0]);
        assert_eq!(out.final_weight(), 0.5);
        assert!(out.losses.is_empty());
    }

    #[test]
    fn trajectories_are_deterministic() {
        let (p, x) = data(0.8, 50, 2);
        let a = finetune_new_client(p.mu().view(), x.view(), &cfg(40)).unwrap();
        let b = finetune_new_client(p.mu().view(), x.view(), &cfg(40)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.logits.len(), 41);
        assert!(a.final_weight() > 0.5);
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let (_, x) = data(0.8, 50, 2);
        assert!(finetune_new_client(array![1.0].view(), x.view(), &cfg(1)).is_err());
        let mut c = cfg(1);
        c.batch = 51;
        assert!(finetune_new_client(array![1.0, 1.0].view(), x.view(), &c).is_err());
        c.batch = 10;
        c.lr = -1.0;
        assert!(finetune_new_client(array![1.0, 1.0].view(), x.view(), &c).is_err());
    }

    #[test]
    fn sweep_zero_lr_row_equals_untrained_error() {
        let (p, x) = data(0.9, 40, 4);
        let spec = SweepSpec {
            epochs: &[0, 1, 5],
            lrs: &[0.0, 0.1],
            seeds: &[1, 2],
            batch: 10,
            schedule: DiffusionSchedule::default(),
            w_new: 0.9,
        };
        let rows = robustness_sweep(p.mu().view(), x.view(), &spec).unwrap();
        assert_eq!(rows.len(), 12);
        for r in &rows {
            assert_eq!(r.backbone_drift, 0.0);
            if r.lr == 0.0 || r.epochs == 0 {
                assert!((r.weight_error - 0.4).abs() < 1e-15);
            }
        }
        assert!(robustness_sweep(p.mu().view(), x.view(), &SweepSpec { lrs: &[], ..spec }).is_err());
    }
}
