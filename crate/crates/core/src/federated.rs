//! Deterministic simulation of collaborative pre-training.
//!
//! `m` clients each hold a private dataset, a replica of the shared mean
//! (the backbone) and a private logit (the embedding). Each round every
//! client runs `sync_every` local gradient steps on its DDPM loss, uploads
//! only its backbone replica, and the server broadcasts the plain average.
//!
//! Every random draw is keyed by `(seed, client_id, round, step)` and uploads
//! are reduced in ascending client order, so sequential and parallel
//! execution produce the same bits.

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::metrics;
use crate::mixture::{sample_data, DiffusionSchedule, LabeledSamples, MixtureParams};
use crate::optim::{OptimState, OptimizerKind, StepSizes};
use crate::rng::{self, tag};
use crate::score::{loss_and_grad, LossGrad, Minibatch, ScoreParams};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// How the true per-client mixing weights are generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightsSpec {
    Explicit { values: Vec<f64> },
    Uniform { lo: f64, hi: f64 },
}

/// The shared true mean: `norm / sqrt(dim) * (1, ..., 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthSpec {
    pub dim: usize,
    pub mean_norm: f64,
}

impl TruthSpec {
    pub fn mean(&self) -> Result<Array1<f64>> {
        if self.dim == 0 || !self.mean_norm.is_finite() {
            return Err(invalid("truth needs dim >= 1 and a finite mean norm"));
        }
        Ok(MixtureParams::isotropic(self.dim, self.mean_norm, 0.5)?.mu().clone())
    }
}

fn default_init_std() -> f64 {
    0.1f64.sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedConfig {
    /// Number of clients `m`.
    pub clients: usize,
    /// Samples per client `n`.
    pub samples_per_client: usize,
    /// Total local iterations `K`.
    pub iterations: usize,
    /// Local iterations between synchronisations.
    pub sync_every: usize,
    pub lr_mu: f64,
    pub lr_logit: f64,
    pub batch: usize,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub schedule: DiffusionSchedule,
    pub seed: u64,
    pub weights: WeightsSpec,
    /// Standard deviation of the random backbone initialisation.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    /// Monte-Carlo samples per grid time for the per-round score error;
    /// zero disables it.
    #[serde(default)]
    pub score_error_samples: usize,
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients < 1 {
            return Err(invalid("need at least one client"));
        }
        if self.batch < 1 || self.batch > self.samples_per_client {
            return Err(invalid(format!(
                "batch {} must lie in [1, samples_per_client = {}]",
                self.batch, self.samples_per_client
            )));
        }
        if self.sync_every < 1 || !self.iterations.is_multiple_of(self.sync_every) {
            return Err(invalid(format!(
                "sync_every = {} must be >= 1 and divide iterations = {}",
                self.sync_every, self.iterations
            )));
        }
        for (name, v) in [("lr_mu", self.lr_mu), ("lr_logit", self.lr_logit)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(invalid("init_std must be non-negative"));
        }
        self.schedule.validate()?;
        match &self.weights {
            WeightsSpec::Explicit { values } => {
                if values.len() != self.clients {
                    return Err(invalid(format!(
                        "{} explicit weights for {} clients",
                        values.len(),
                        self.clients
                    )));
                }
                if values.iter().any(|w| !(*w > 0.0 && *w < 1.0)) {
                    return Err(invalid("explicit weights must lie in (0, 1)"));
                }
            }
            WeightsSpec::Uniform { lo, hi } => {
                if !(*lo > 0.0 && lo <= hi && *hi < 1.0) {
                    return Err(invalid("uniform weights need 0 < lo <= hi < 1"));
                }
            }
        }
        Ok(())
    }

    pub fn rounds(&self) -> usize {
        self.iterations / self.sync_every
    }

    pub fn step_sizes(&self) -> StepSizes {
        StepSizes {
            mu: self.lr_mu,
            logit: self.lr_logit,
        }
    }

    pub fn true_weights(&self) -> Vec<f64> {
        match &self.weights {
            WeightsSpec::Explicit { values } => values.clone(),
            WeightsSpec::Uniform { lo, hi } => {
                let mut r = rng::stream(self.seed, &[tag::WEIGHTS]);
                (0..self.clients)
                    .map(|_| lo + (hi - lo) * r.random::<f64>())
                    .collect()
            }
        }
    }
}

/// Settings for one local gradient step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTraining {
    pub batch: usize,
    pub schedule: DiffusionSchedule,
    pub eta: StepSizes,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    client_id: usize,
    data: Array2<f64>,
    pub params: ScoreParams,
    optim: OptimState,
    order: Vec<usize>,
    cursor: usize,
}

impl ClientState {
    pub fn new(client_id: usize, data: Array2<f64>, params: ScoreParams, optimizer: OptimizerKind) -> Self {
        let n = data.nrows();
        let d = params.dim();
        Self {
            client_id,
            data,
            params,
            optim: OptimState::new(optimizer, d),
            order: (0..n).collect(),
            // Forces a shuffle before the first batch.
            cursor: n,
        }
    }

    pub fn client_id(&self) -> usize {
        self.client_id
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    /// Row indices of the next minibatch, without replacement; a new
    /// permutation starts whenever fewer than `batch` rows remain.
    fn next_batch<R: Rng + ?Sized>(&mut self, batch: usize, rng: &mut R) -> Vec<usize> {
        if self.cursor + batch > self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let idx = self.order[self.cursor..self.cursor + batch].to_vec();
        self.cursor += batch;
        idx
    }

    /// One gradient step on a fresh minibatch (new rows, timesteps and noise).
    pub fn local_step<R: Rng + ?Sized>(&mut self, training: &LocalTraining, rng: &mut R) -> Result<LossGrad> {
        let idx = self.next_batch(training.batch, rng);
        let x0 = self.data.select(ndarray::Axis(0), &idx);
        let batch = Minibatch::draw(x0, &training.schedule, rng);
        let g = loss_and_grad(&self.params, &batch, &training.schedule)?;
        self.optim.apply(&mut self.params, &g, training.eta);
        Ok(g)
    }

    fn snapshot(&self) -> ClientSnapshot {
        ClientSnapshot {
            client_id: self.client_id,
            params: self.params.clone(),
            optim: self.optim.clone(),
            order: self.order.clone(),
            cursor: self.cursor,
        }
    }
}

/// Everything the server holds. It has no field that could carry an embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub round: usize,
    pub backbone: Array1<f64>,
}

/// Traffic seen by the server.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage<'a> {
    Upload {
        client_id: usize,
        round: usize,
        backbone: ArrayView1<'a, f64>,
    },
    Broadcast {
        round: usize,
        backbone: ArrayView1<'a, f64>,
    },
    Snapshot(&'a ServerState),
}

pub trait ServerObserver {
    fn observe(&mut self, message: &ServerMessage<'_>);
}

/// Discards everything.
pub struct NoObserver;

impl ServerObserver for NoObserver {
    fn observe(&mut self, _: &ServerMessage<'_>) {}
}

/// Coordinatewise mean, summed in the given order (ascending client id).
pub fn aggregate(replicas: &[ArrayView1<f64>]) -> Result<Array1<f64>> {
    let first = replicas.first().ok_or_else(|| invalid("no replicas to aggregate"))?;
    let mut sum = first.to_owned();
    for r in &replicas[1..] {
        if r.len() != sum.len() {
            return Err(Error::DimensionMismatch {
                expected: sum.len(),
                got: r.len(),
            });
        }
        sum += r;
    }
    sum /= replicas.len() as f64;
    Ok(sum)
}

/// `min(|est - mu|, |est + mu|)`.
pub fn flip_adjusted_mean_error(est: ArrayView1<f64>, mu: ArrayView1<f64>) -> f64 {
    let (minus, plus) = mean_errors(est, mu);
    minus.min(plus)
}

fn mean_errors(est: ArrayView1<f64>, mu: ArrayView1<f64>) -> (f64, f64) {
    let minus = (&est - &mu).mapv(|v| v * v).sum().sqrt();
    let plus = (&est + &mu).mapv(|v| v * v).sum().sqrt();
    (minus, plus)
}

/// True when `est` is closer to `-mu` than to `mu`; weights must then be
/// compared as `1 - w_hat`.
pub fn is_flipped(est: ArrayView1<f64>, mu: ArrayView1<f64>) -> bool {
    let (minus, plus) = mean_errors(est, mu);
    plus < minus
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub round: usize,
    pub mean_error: f64,
    pub weight_mse: f64,
    pub train_loss: Option<f64>,
    pub score_error: Option<f64>,
}

impl RunRecord {
    pub const CSV_HEADER: &'static str = "round,mean_error,weight_mse,train_loss,score_error";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{}",
            self.round,
            self.mean_error,
            self.weight_mse,
            opt(self.train_loss),
            opt(self.score_error)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSnapshot {
    pub client_id: usize,
    pub params: ScoreParams,
    optim: OptimState,
    order: Vec<usize>,
    cursor: usize,
}

/// Full simulation state. Client data is regenerated from the seed on restore.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: FedConfig,
    pub truth: TruthSpec,
    pub server: ServerState,
    pub clients: Vec<ClientSnapshot>,
    pub records: Vec<RunRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

pub struct Federation {
    config: FedConfig,
    truth: TruthSpec,
    mu: Array1<f64>,
    true_weights: Vec<f64>,
    server: ServerState,
    clients: Vec<ClientState>,
    records: Vec<RunRecord>,
    execution: Execution,
}

/// The local dataset of `client`, with component labels. Pre-training draws
/// exactly these rows.
pub fn client_dataset(config: &FedConfig, mu: &Array1<f64>, w: f64, client: usize) -> Result<LabeledSamples> {
    let params = MixtureParams::new(mu.clone(), w)?;
    let mut r = rng::stream(config.seed, &[tag::DATA, client as u64]);
    sample_data(&params, config.samples_per_client, &mut r)
}

fn client_data(config: &FedConfig, mu: &Array1<f64>, w: f64, client: usize) -> Result<Array2<f64>> {
    Ok(client_dataset(config, mu, w, client)?.x)
}

impl Federation {
    /// Draw every client's data and true weight, initialise the backbone
    /// from `N(0, init_std^2 I)` and every embedding to zero.
    pub fn init_population(config: FedConfig, truth: TruthSpec) -> Result<Self> {
        config.validate()?;
        let mu = truth.mean()?;
        let true_weights = config.true_weights();
        let mut r = rng::stream(config.seed, &[tag::INIT]);
        let backbone: Array1<f64> = (0..truth.dim)
            .map(|_| config.init_std * r.sample::<f64, _>(StandardNormal))
            .collect();
        let clients = true_weights
            .iter()
            .enumerate()
            .map(|(j, &w)| {
                let data = client_data(&config, &mu, w, j)?;
                Ok(ClientState::new(
                    j,
                    data,
                    ScoreParams::new(backbone.clone(), 0.0),
                    config.optimizer,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut fed = Self {
            config,
            truth,
            mu,
            true_weights,
            server: ServerState { round: 0, backbone },
            clients,
            records: Vec::new(),
            execution: Execution::default(),
        };
        let rec = fed.record(None)?;
        fed.records.push(rec);
        Ok(fed)
    }

    pub fn restore(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(invalid(format!(
                "checkpoint format {} unsupported",
                ckpt.format_version
            )));
        }
        ckpt.config.validate()?;
        let mu = ckpt.truth.mean()?;
        let true_weights = ckpt.config.true_weights();
        if ckpt.clients.len() != true_weights.len() {
            return Err(invalid("checkpoint client count does not match its config"));
        }
        let clients = ckpt
            .clients
            .into_iter()
            .zip(&true_weights)
            .map(|(s, &w)| {
                let data = client_data(&ckpt.config, &mu, w, s.client_id)?;
                Ok(ClientState {
                    client_id: s.client_id,
                    data,
                    params: s.params,
                    optim: s.optim,
                    order: s.order,
                    cursor: s.cursor,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: ckpt.config,
            truth: ckpt.truth,
            mu,
            true_weights,
            server: ckpt.server,
            clients,
            records: ckpt.records,
            execution: Execution::default(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.config.clone(),
            truth: self.truth,
            server: self.server.clone(),
            clients: self.clients.iter().map(ClientState::snapshot).collect(),
            records: self.records.clone(),
        }
    }

    pub fn with_execution(mut self, execution: Execution) -> Self {
        self.execution = execution;
        self
    }

    /// Raise the iteration budget of a restored run.
    pub fn extend_iterations(&mut self, iterations: usize) -> Result<()> {
        let mut cfg = self.config.clone();
        cfg.iterations = iterations;
        cfg.validate()?;
        if cfg.rounds() < self.server.round {
            return Err(invalid("cannot shrink below completed rounds"));
        }
        self.config = cfg;
        Ok(())
    }

    pub fn config(&self) -> &FedConfig {
        &self.config
    }

    pub fn true_mean(&self) -> &Array1<f64> {
        &self.mu
    }

    pub fn true_weights(&self) -> &[f64] {
        &self.true_weights
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn records(&self) -> &[RunRecord] {
        &self.records
    }

    pub fn embeddings(&self) -> Vec<f64> {
        self.clients.iter().map(|c| c.params.logit).collect()
    }

    /// Overwrite every client's logit, e.g. with sentinel values.
    pub fn set_embeddings(&mut self, logits: &[f64]) -> Result<()> {
        if logits.len() != self.clients.len() {
            return Err(Error::DimensionMismatch {
                expected: self.clients.len(),
                got: logits.len(),
            });
        }
        for (c, &b) in self.clients.iter_mut().zip(logits) {
            c.params.logit = b;
            c.params.clamp_logit();
        }
        Ok(())
    }

    fn training(&self) -> LocalTraining {
        LocalTraining {
            batch: self.config.batch,
            schedule: self.config.schedule,
            eta: self.config.step_sizes(),
        }
    }

    fn record(&self, train_loss: Option<f64>) -> Result<RunRecord> {
        let backbone = self.server.backbone.view();
        let flipped = is_flipped(backbone, self.mu.view());
        let m = self.clients.len() as f64;
        let weight_mse = self
            .clients
            .iter()
            .zip(&self.true_weights)
            .map(|(c, &w)| {
                let w_hat = c.params.weight();
                let w_hat = if flipped { 1.0 - w_hat } else { w_hat };
                (w_hat - w).powi(2)
            })
            .sum::<f64>()
            / m;
        let score_error = if self.config.score_error_samples > 0 {
            let grid = metrics::default_time_grid();
            let mut total = 0.0;
            for (c, &w) in self.clients.iter().zip(&self.true_weights) {
                let truth = MixtureParams::new(self.mu.clone(), w)?;
                let est = ScoreParams::new(self.server.backbone.clone(), c.params.logit);
                let seed = rng::mix(
                    self.config.seed,
                    &[tag::SCORE_ERROR, self.server.round as u64, c.client_id as u64],
                );
                total += metrics::score_error(&truth, &est, &grid, self.config.score_error_samples, seed)?
                    .value;
            }
            Some(total / m)
        } else {
            None
        };
        Ok(RunRecord {
            round: self.server.round,
            mean_error: flip_adjusted_mean_error(backbone, self.mu.view()),
            weight_mse,
            train_loss,
            score_error,
        })
    }

    fn local_phase(&mut self, round: usize) -> Result<Vec<f64>> {
        let training = self.training();
        let seed = self.config.seed;
        let steps = self.config.sync_every;
        let run = |c: &mut ClientState| -> Result<f64> {
            let mut loss = 0.0;
            for s in 0..steps {
                let mut r = rng::stream(seed, &[tag::STEP, c.client_id as u64, round as u64, s as u64]);
                loss += c.local_step(&training, &mut r)?.loss;
            }
            Ok(loss / steps as f64)
        };
        match self.execution {
            Execution::Sequential => self.clients.iter_mut().map(run).collect(),
            Execution::Parallel => self.clients.par_iter_mut().map(run).collect(),
        }
    }

    /// One synchronisation round: local steps, uploads, average, broadcast.
    pub fn step_round(&mut self, observer: &mut dyn ServerObserver) -> Result<()> {
        let round = self.server.round;
        let losses = self.local_phase(round)?;
        if self.clients.iter().any(|c| !c.params.is_finite()) {
            return Err(Error::NonFinite { round: round + 1 });
        }
        for c in &self.clients {
            observer.observe(&ServerMessage::Upload {
                client_id: c.client_id,
                round,
                backbone: c.params.mu_hat.view(),
            });
        }
        let uploads: Vec<ArrayView1<f64>> = self.clients.iter().map(|c| c.params.mu_hat.view()).collect();
        self.server.backbone = aggregate(&uploads)?;
        self.server.round += 1;
        observer.observe(&ServerMessage::Broadcast {
            round: self.server.round,
            backbone: self.server.backbone.view(),
        });
        for c in &mut self.clients {
            c.params.mu_hat.assign(&self.server.backbone);
        }
        observer.observe(&ServerMessage::Snapshot(&self.server));
        let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let rec = self.record(Some(mean_loss))?;
        self.records.push(rec);
        Ok(())
    }

    /// Run every remaining round of the configured budget.
    pub fn run(&mut self, observer: &mut dyn ServerObserver) -> Result<()> {
        observer.observe(&ServerMessage::Snapshot(&self.server));
        while self.server.round < self.config.rounds() {
            self.step_round(observer)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutcome {
    pub backbone: Array1<f64>,
    pub embeddings: Vec<f64>,
    pub records: Vec<RunRecord>,
    pub true_mean: Array1<f64>,
    pub true_weights: Vec<f64>,
}

pub fn run_pretraining(config: FedConfig, truth: TruthSpec) -> Result<PretrainOutcome> {
    run_pretraining_with(config, truth, Execution::Parallel, &mut NoObserver)
}

pub fn run_pretraining_with(
    config: FedConfig,
    truth: TruthSpec,
    execution: Execution,
    observer: &mut dyn ServerObserver,
) -> Result<PretrainOutcome> {
    let mut fed = Federation::init_population(config, truth)?.with_execution(execution);
    fed.run(observer)?;
    Ok(PretrainOutcome {
        backbone: fed.server.backbone.clone(),
        embeddings: fed.embeddings(),
        records: fed.records,
        true_mean: fed.mu,
        true_weights: fed.true_weights,
    })
}

/// Final parameters of one client trained alone.
#[derive(Debug, Clone, PartialEq)]
pub struct IsolatedOutcome {
    pub client_id: usize,
    pub params: ScoreParams,
    pub mean_error: f64,
}

/// Train every client on its own data with the same initialisation and
/// step keys as the federated run, but without synchronisation.
pub fn run_isolated(config: FedConfig, truth: TruthSpec) -> Result<Vec<IsolatedOutcome>> {
    let fed = Federation::init_population(config, truth)?;
    let training = fed.training();
    let (seed, rounds, steps) = (fed.config.seed, fed.config.rounds(), fed.config.sync_every);
    let mu = fed.mu.clone();
    fed.clients
        .into_par_iter()
        .map(|mut c| {
            for round in 0..rounds {
                for s in 0..steps {
                    let mut r = rng::stream(seed, &[tag::STEP, c.client_id as u64, round as u64, s as u64]);
                    c.local_step(&training, &mut r)?;
                }
                if !c.params.is_finite() {
                    return Err(Error::NonFinite { round: round + 1 });
                }
            }
            Ok(IsolatedOutcome {
                client_id: c.client_id,
                mean_error: flip_adjusted_mean_error(c.params.mu_hat.view(), mu.view()),
                params: c.params,
            })
        })
        .collect()
}
