//! Flat TOML configs, one schema per subcommand. Unknown keys are errors.

use std::fs;
use std::path::{Path, PathBuf};

use fedmix_core::federated::{FedConfig, TruthSpec, WeightsSpec};
use fedmix_core::mixture::DiffusionSchedule;
use fedmix_core::optim::OptimizerKind;
use fedmix_core::personalization::FinetuneConfig;
use fedmix_core::sampler::SamplerConfig;
use fedmix_core::verify::CheckId;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

fn default_t_min() -> f64 {
    DiffusionSchedule::default().t_min
}
fn default_t_max() -> f64 {
    DiffusionSchedule::default().t_max
}
fn default_init_std() -> f64 {
    0.1f64.sqrt()
}
fn default_lo() -> f64 {
    0.2
}
fn default_hi() -> f64 {
    0.8
}

/// Shared by `gen-data` and `pretrain`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub dim: usize,
    pub mean_norm: f64,
    pub clients: usize,
    pub samples_per_client: usize,
    pub iterations: usize,
    pub sync_every: usize,
    pub lr_mu: f64,
    pub lr_logit: f64,
    pub batch: usize,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_t_min")]
    pub t_min: f64,
    #[serde(default = "default_t_max")]
    pub t_max: f64,
    #[serde(default)]
    pub seed: u64,
    /// Explicit per-client weights; overrides `weights_lo` / `weights_hi`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default = "default_lo")]
    pub weights_lo: f64,
    #[serde(default = "default_hi")]
    pub weights_hi: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    #[serde(default)]
    pub score_error_samples: usize,
    /// Checkpoint (`params.json`) to continue from; `iterations` is the new total.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resume_from: Option<PathBuf>,
}

impl PretrainConfig {
    pub fn truth(&self) -> TruthSpec {
        TruthSpec {
            dim: self.dim,
            mean_norm: self.mean_norm,
        }
    }

    pub fn fed_config(&self) -> Result<FedConfig, CliError> {
        let cfg = FedConfig {
            clients: self.clients,
            samples_per_client: self.samples_per_client,
            iterations: self.iterations,
            sync_every: self.sync_every,
            lr_mu: self.lr_mu,
            lr_logit: self.lr_logit,
            batch: self.batch,
            optimizer: self.optimizer,
            schedule: DiffusionSchedule::new(self.t_min, self.t_max).map_err(CliError::config)?,
            seed: self.seed,
            weights: match &self.weights {
                Some(values) => WeightsSpec::Explicit { values: values.clone() },
                None => WeightsSpec::Uniform {
                    lo: self.weights_lo,
                    hi: self.weights_hi,
                },
            },
            init_std: self.init_std,
            score_error_samples: self.score_error_samples,
        };
        cfg.validate().map_err(CliError::config)?;
        self.truth().mean().map_err(CliError::config)?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneFileConfig {
    /// `params.json` written by `pretrain`.
    pub params: PathBuf,
    /// Local data as written by `gen-data`; when absent, `samples` rows are
    /// drawn from the checkpoint's true mean with weight `w_new`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_new: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    pub iterations: usize,
    pub lr: f64,
    pub batch: usize,
    #[serde(default = "default_t_min")]
    pub t_min: f64,
    #[serde(default = "default_t_max")]
    pub t_max: f64,
    #[serde(default)]
    pub seed: u64,
}

impl FinetuneFileConfig {
    pub fn finetune(&self) -> Result<FinetuneConfig, CliError> {
        let cfg = FinetuneConfig {
            iterations: self.iterations,
            lr: self.lr,
            batch: self.batch,
            schedule: DiffusionSchedule::new(self.t_min, self.t_max).map_err(CliError::config)?,
            seed: self.seed,
        };
        cfg.validate().map_err(CliError::config)?;
        match (&self.data, self.w_new, self.samples) {
            (Some(_), None, None) | (None, Some(_), Some(_)) => Ok(cfg),
            _ => Err(CliError::Usage(
                "finetune needs either `data`, or both `w_new` and `samples`".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    pub n_samples: usize,
    #[serde(default = "default_n_steps")]
    pub n_steps: usize,
    #[serde(default = "default_t_start")]
    pub t_start: f64,
    #[serde(default = "default_t_end")]
    pub t_end: f64,
    #[serde(default)]
    pub seed: u64,
    /// True score with mean `mu` and weight `w` ...
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w: Option<f64>,
    /// ... or an estimated score (`score.json` from `finetune`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<PathBuf>,
}

fn default_n_steps() -> usize {
    SamplerConfig::default().n_steps
}
fn default_t_start() -> f64 {
    SamplerConfig::default().t_start
}
fn default_t_end() -> f64 {
    SamplerConfig::default().t_end
}

impl SampleConfig {
    pub fn sampler(&self) -> Result<SamplerConfig, CliError> {
        let cfg = SamplerConfig {
            n_steps: self.n_steps,
            t_start: self.t_start,
            t_end: self.t_end,
        };
        cfg.validate().map_err(CliError::config)?;
        if self.n_samples == 0 {
            return Err(CliError::Usage("n_samples must be >= 1".into()));
        }
        match (&self.mu, self.w, &self.score) {
            (Some(_), Some(_), None) | (None, None, Some(_)) => Ok(cfg),
            _ => Err(CliError::Usage("sample needs either `mu` and `w`, or `score`".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    /// Checks to run, by name; all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checks: Option<Vec<CheckId>>,
    #[serde(default = "default_verify_seed")]
    pub seed: u64,
}

pub fn default_verify_seed() -> u64 {
    20240601
}

impl VerifyConfig {
    pub fn check_list(&self) -> Vec<CheckId> {
        self.checks.clone().unwrap_or_else(|| CheckId::ALL.to_vec())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SweepConfig {
    /// Fine-tuning error over an epochs x learning-rate grid.
    Robustness(RobustnessSweep),
    /// Moment-estimator MSE over a (d, n) grid.
    Bound(BoundSweep),
    /// Score error over an (m, n) grid.
    Scaling(ScalingSweep),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustnessSweep {
    pub dim: usize,
    pub mean_norm: f64,
    pub w_new: f64,
    pub samples: usize,
    pub batch: usize,
    pub epochs: Vec<usize>,
    pub lrs: Vec<f64>,
    pub seeds: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundSweep {
    pub dims: Vec<usize>,
    pub samples: Vec<usize>,
    pub w: f64,
    pub t: f64,
    pub mean_norm: f64,
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingSweep {
    pub dim: usize,
    pub mean_norm: f64,
    pub clients: Vec<usize>,
    pub samples: Vec<usize>,
    pub seeds: usize,
    pub iterations: usize,
    pub sync_every: usize,
    pub lr: f64,
    pub finetune_iterations: usize,
    pub finetune_lr: f64,
    pub new_client_weight: f64,
    pub new_clients: usize,
    pub mc_samples: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SweepConfig {
    pub fn seed_mut(&mut self) -> &mut u64 {
        match self {
            SweepConfig::Robustness(c) => &mut c.seed,
            SweepConfig::Bound(c) => &mut c.seed,
            SweepConfig::Scaling(c) => &mut c.seed,
        }
    }

    /// Internally tagged enums cannot reject unknown keys themselves, so the
    /// `kind` key is split off and the rest parsed strictly.
    fn from_table(mut table: toml::Table) -> Result<Self, CliError> {
        let kind = table
            .remove("kind")
            .and_then(|v| v.as_str().map(str::to_owned))
            .ok_or_else(|| CliError::Usage("sweep config needs `kind` = robustness | bound | scaling".into()))?;
        let rest = toml::Value::Table(table);
        let parsed = match kind.as_str() {
            "robustness" => rest.try_into().map(SweepConfig::Robustness),
            "bound" => rest.try_into().map(SweepConfig::Bound),
            "scaling" => rest.try_into().map(SweepConfig::Scaling),
            other => return Err(CliError::Usage(format!("unknown sweep kind `{other}`"))),
        };
        parsed.map_err(|e| CliError::Usage(format!("sweep config: {e}")))
    }
}

/// Something with a seed that `--seed` can override.
pub trait Seeded {
    fn seed_mut(&mut self) -> &mut u64;
}

macro_rules! seeded {
    ($($t:ty),*) => {$(
        impl Seeded for $t {
            fn seed_mut(&mut self) -> &mut u64 {
                &mut self.seed
            }
        }
    )*};
}
seeded!(PretrainConfig, FinetuneFileConfig, SampleConfig, VerifyConfig);

impl Seeded for SweepConfig {
    fn seed_mut(&mut self) -> &mut u64 {
        SweepConfig::seed_mut(self)
    }
}

/// Read a TOML config, or the config echoed in a previous run's
/// `manifest.json`.
fn read_value(path: &Path) -> Result<toml::Table, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "json") {
        let manifest: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let config = manifest
            .get("config")
            .ok_or_else(|| CliError::Usage(format!("{}: no `config` in manifest", path.display())))?;
        return serde_json::from_value(config.clone())
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())));
    }
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    toml::Value::Table(read_value(path)?)
        .try_into()
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

pub fn load_sweep(path: &Path) -> Result<SweepConfig, CliError> {
    SweepConfig::from_table(read_value(path)?)
}

pub fn load_verify(path: Option<&Path>) -> Result<VerifyConfig, CliError> {
    match path {
        Some(p) => load(p),
        None => Ok(VerifyConfig {
            checks: None,
            seed: default_verify_seed(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(text: &str) -> toml::Table {
        toml::from_str(text).unwrap()
    }

    #[test]
    fn sweep_kind_selects_schema() {
        let text = "kind = \"bound\"\ndims = [1]\nsamples = [10]\nw = 0.5\nt = 0.1\nmean_norm = 2.0\ntrials = 5\n";
        assert!(matches!(SweepConfig::from_table(table(text)), Ok(SweepConfig::Bound(_))));
        assert!(SweepConfig::from_table(table("dims = [1]")).is_err());
        assert!(SweepConfig::from_table(table("kind = \"other\"")).is_err());
        let extra = format!("{text}epochs = [1]\n");
        assert!(SweepConfig::from_table(table(&extra)).is_err());
    }

    #[test]
    fn sample_needs_exactly_one_score_source() {
        let base = "n_samples = 4\n";
        let parse = |s: &str| -> SampleConfig { toml::from_str(s).unwrap() };
        assert!(parse(base).sampler().is_err());
        assert!(parse(&format!("{base}mu = [1.0]\nw = 0.5\n")).sampler().is_ok());
        assert!(parse(&format!("{base}mu = [1.0]\n")).sampler().is_err());
    }

    #[test]
    fn verify_defaults_to_every_check() {
        let v = load_verify(None).unwrap();
        assert_eq!(v.check_list().len(), CheckId::ALL.len());
        let v: VerifyConfig = toml::from_str("checks = []").unwrap();
        assert!(v.check_list().is_empty());
    }
}
