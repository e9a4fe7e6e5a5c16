use std::path::PathBuf;

use fedmix_core::estimators::{evaluate_theorem1_bound, BoundReport};
use fedmix_core::federated::{client_dataset, Checkpoint, Federation, NoObserver, RunRecord};
use fedmix_core::io::{read_samples_csv, samples_csv, table_csv, write_json, write_text};
use fedmix_core::metrics::{theorem2_scaling_study, ScalingRow, ScalingStudyConfig};
use fedmix_core::mixture::{sample_data, DiffusionSchedule, MixtureParams};
use fedmix_core::optim::OptimizerKind;
use fedmix_core::personalization::{finetune_new_client, robustness_sweep, SweepRow, SweepSpec};
use fedmix_core::rng::{self, tag};
use fedmix_core::sampler::{cluster_fraction, reverse_sample};
use fedmix_core::score::{logit_to_weight, ScoreParams};
use fedmix_core::verify::run_suite;
use fedmix_core::federated::{FedConfig, TruthSpec, WeightsSpec};
use ndarray::Array1;
use serde_json::json;

use crate::config::{self, Seeded, SweepConfig};
use crate::output::{run_dir, write_manifest};
use crate::{CliError, CommonArgs};

fn init_threads(threads: Option<usize>) -> Result<(), CliError> {
    if let Some(k) = threads {
        if k == 0 {
            return Err(CliError::Usage("--threads must be >= 1".into()));
        }
        // A second call within one process (tests) keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
    }
    Ok(())
}

fn require_config(args: &CommonArgs) -> Result<&std::path::Path, CliError> {
    args.config
        .as_deref()
        .ok_or_else(|| CliError::Usage("--config is required".into()))
}

fn apply_seed<T: Seeded>(cfg: &mut T, args: &CommonArgs) -> u64 {
    if let Some(s) = args.seed {
        *cfg.seed_mut() = s;
    }
    *cfg.seed_mut()
}

fn read_checkpoint(path: &std::path::Path) -> Result<Checkpoint, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

pub fn gen_data(args: &CommonArgs) -> Result<PathBuf, CliError> {
    init_threads(args.threads)?;
    let mut cfg: config::PretrainConfig = config::load(require_config(args)?)?;
    let seed = apply_seed(&mut cfg, args);
    let fed = cfg.fed_config()?;
    let mu = cfg.truth().mean()?;
    let weights = fed.true_weights();
    let dir = run_dir(args.out.as_deref(), "gen-data", seed)?;
    let mut files = Vec::new();
    for (j, &w) in weights.iter().enumerate() {
        let s = client_dataset(&fed, &mu, w, j)?;
        let name = format!("client_{j:03}.csv");
        write_text(&dir.join(&name), &samples_csv(s.x.view(), &s.labels))?;
        files.push(name);
    }
    write_manifest(&dir, "gen-data", seed, &cfg, &json!({
        "true_mean": mu.to_vec(),
        "weights": weights,
        "files": files,
    }))?;
    Ok(dir)
}

pub fn pretrain(args: &CommonArgs) -> Result<PathBuf, CliError> {
    init_threads(args.threads)?;
    let mut cfg: config::PretrainConfig = config::load(require_config(args)?)?;
    let seed = apply_seed(&mut cfg, args);
    let fed_cfg = cfg.fed_config()?;
    let mut fed = match &cfg.resume_from {
        Some(path) => {
            let ckpt = read_checkpoint(path)?;
            let mut saved = ckpt.config.clone();
            saved.iterations = fed_cfg.iterations;
            if saved != fed_cfg || ckpt.truth != cfg.truth() {
                return Err(CliError::Usage(format!(
                    "{} was produced by a different config; only `iterations` may change on resume",
                    path.display()
                )));
            }
            let mut fed = Federation::restore(ckpt).map_err(CliError::config)?;
            fed.extend_iterations(fed_cfg.iterations).map_err(CliError::config)?;
            fed
        }
        None => Federation::init_population(fed_cfg, cfg.truth())?,
    };
    fed.run(&mut NoObserver)?;
    let dir = run_dir(args.out.as_deref(), "pretrain", seed)?;
    write_text(
        &dir.join("metrics.csv"),
        &table_csv(RunRecord::CSV_HEADER, fed.records().iter().map(RunRecord::csv_row)),
    )?;
    write_json(&dir.join("params.json"), &fed.checkpoint())?;
    let last = fed.records().last().expect("initial record");
    write_manifest(&dir, "pretrain", seed, &cfg, &json!({
        "rounds": fed.server().round,
        "final_mean_error": last.mean_error,
        "final_weight_mse": last.weight_mse,
        "files": ["metrics.csv", "params.json"],
    }))?;
    Ok(dir)
}

pub fn finetune(args: &CommonArgs) -> Result<PathBuf, CliError> {
    init_threads(args.threads)?;
    let mut cfg: config::FinetuneFileConfig = config::load(require_config(args)?)?;
    let seed = apply_seed(&mut cfg, args);
    let ft = cfg.finetune()?;
    let ckpt = read_checkpoint(&cfg.params)?;
    let backbone = ckpt.server.backbone.clone();
    let data = match (&cfg.data, cfg.w_new, cfg.samples) {
        (Some(path), _, _) => read_samples_csv(path).map_err(CliError::config)?.0,
        (None, Some(w), Some(n)) => {
            let truth = MixtureParams::new(ckpt.truth.mean()?, w).map_err(CliError::config)?;
            sample_data(&truth, n, &mut rng::stream(seed, &[tag::NEW_CLIENT])).map_err(CliError::config)?.x
        }
        _ => unreachable!("checked by FinetuneFileConfig::finetune"),
    };
    let out = finetune_new_client(backbone.view(), data.view(), &ft)?;
    let dir = run_dir(args.out.as_deref(), "finetune", seed)?;
    let rows = out.logits.iter().enumerate().map(|(k, &b)| {
        let loss = if k == 0 { String::new() } else { out.losses[k - 1].to_string() };
        format!("{k},{b},{},{loss}", logit_to_weight(b))
    });
    write_text(&dir.join("trajectory.csv"), &table_csv("step,logit,weight,loss", rows))?;
    write_json(&dir.join("score.json"), &ScoreParams::new(backbone, out.final_logit()))?;
    write_manifest(&dir, "finetune", seed, &cfg, &json!({
        "final_logit": out.final_logit(),
        "final_weight": out.final_weight(),
        "files": ["trajectory.csv", "score.json"],
    }))?;
    Ok(dir)
}

pub fn sample(args: &CommonArgs) -> Result<PathBuf, CliError> {
    init_threads(args.threads)?;
    let mut cfg: config::SampleConfig = config::load(require_config(args)?)?;
    let seed = apply_seed(&mut cfg, args);
    let sampler = cfg.sampler()?;
    let (samples, direction): (_, Array1<f64>) = match (&cfg.mu, cfg.w, &cfg.score) {
        (Some(mu), Some(w), None) => {
            let truth = MixtureParams::new(Array1::from(mu.clone()), w).map_err(CliError::config)?;
            (reverse_sample(&truth, &sampler, cfg.n_samples, seed)?, truth.mu().clone())
        }
        (None, None, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
            let p: ScoreParams =
                serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            (reverse_sample(&p, &sampler, cfg.n_samples, seed)?, p.mu_hat.clone())
        }
        _ => unreachable!("checked by SampleConfig::sampler"),
    };
    let dir = run_dir(args.out.as_deref(), "sample", seed)?;
    write_text(&dir.join("samples.csv"), &samples_csv(samples.view(), &[]))?;
    let fraction = cluster_fraction(samples.view(), direction.view()).ok();
    write_manifest(&dir, "sample", seed, &cfg, &json!({
        "cluster_fraction": fraction,
        "files": ["samples.csv"],
    }))?;
    Ok(dir)
}

pub fn verify(args: &CommonArgs) -> Result<PathBuf, CliError> {
    init_threads(args.threads)?;
    let mut cfg = config::load_verify(args.config.as_deref())?;
    let seed = apply_seed(&mut cfg, args);
    let (report, artifacts) = run_suite(&cfg.check_list(), seed)?;
    let dir = run_dir(args.out.as_deref(), "verify", seed)?;
    write_json(&dir.join("report.json"), &report)?;
    let mut files = vec!["report.json"];
    if !artifacts.bound_reports.is_empty() {
        write_text(
            &dir.join("bound.csv"),
            &table_csv(BoundReport::CSV_HEADER, artifacts.bound_reports.iter().map(BoundReport::csv_row)),
        )?;
        files.push("bound.csv");
    }
    if let Some(s) = &artifacts.scaling {
        write_text(&dir.join("scaling.csv"), &table_csv(ScalingRow::CSV_HEADER, s.rows.iter().map(ScalingRow::csv_row)))?;
        files.push("scaling.csv");
    }
    write_manifest(&dir, "verify", seed, &cfg, &json!({ "passed": report.passed, "files": files }))?;
    for c in &report.checks {
        eprintln!("{}", c.summary_line());
    }
    if report.passed {
        Ok(dir)
    } else {
        eprintln!("report: {}", dir.join("report.json").display());
        Err(CliError::ChecksFailed)
    }
}

pub fn sweep(args: &CommonArgs) -> Result<PathBuf, CliError> {
    init_threads(args.threads)?;
    let mut cfg = config::load_sweep(require_config(args)?)?;
    let seed = apply_seed(&mut cfg, args);
    let dir;
    let summary;
    match &cfg {
        SweepConfig::Robustness(c) => {
            let params = MixtureParams::isotropic(c.dim, c.mean_norm, c.w_new).map_err(CliError::config)?;
            let mut rows = Vec::new();
            for s in 0..c.seeds as u64 {
                let data = sample_data(&params, c.samples, &mut rng::stream(seed, &[s])).map_err(CliError::config)?.x;
                let spec = SweepSpec {
                    epochs: &c.epochs,
                    lrs: &c.lrs,
                    seeds: &[s],
                    batch: c.batch,
                    schedule: DiffusionSchedule::default(),
                    w_new: c.w_new,
                };
                rows.extend(robustness_sweep(params.mu().view(), data.view(), &spec)?);
            }
            dir = run_dir(args.out.as_deref(), "sweep", seed)?;
            write_text(&dir.join("sweep.csv"), &table_csv(SweepRow::CSV_HEADER, rows.iter().map(SweepRow::csv_row)))?;
            summary = json!({ "rows": rows.len(), "files": ["sweep.csv"] });
        }
        SweepConfig::Bound(c) => {
            let mut reports = Vec::new();
            for (i, &d) in c.dims.iter().enumerate() {
                let params = MixtureParams::isotropic(d, c.mean_norm, c.w).map_err(CliError::config)?;
                for (j, &n) in c.samples.iter().enumerate() {
                    let s = rng::mix(seed, &[i as u64, j as u64]);
                    reports.push(evaluate_theorem1_bound(&params, c.t, n, c.trials, s)?);
                }
            }
            dir = run_dir(args.out.as_deref(), "sweep", seed)?;
            write_text(&dir.join("bound.csv"), &table_csv(BoundReport::CSV_HEADER, reports.iter().map(BoundReport::csv_row)))?;
            summary = json!({ "rows": reports.len(), "files": ["bound.csv"] });
        }
        SweepConfig::Scaling(c) => {
            let study = ScalingStudyConfig {
                clients: c.clients.clone(),
                samples: c.samples.clone(),
                seeds: (0..c.seeds as u64).map(|s| rng::mix(seed, &[s])).collect(),
                truth: TruthSpec { dim: c.dim, mean_norm: c.mean_norm },
                base: FedConfig {
                    clients: 1,
                    samples_per_client: 1,
                    iterations: c.iterations,
                    sync_every: c.sync_every,
                    lr_mu: c.lr,
                    lr_logit: c.lr,
                    batch: 1,
                    optimizer: OptimizerKind::Sgd,
                    schedule: DiffusionSchedule::default(),
                    seed: 0,
                    weights: WeightsSpec::Uniform { lo: 0.2, hi: 0.8 },
                    init_std: 0.1f64.sqrt(),
                    score_error_samples: 0,
                },
                full_batch: true,
                finetune_iterations: c.finetune_iterations,
                finetune_lr: c.finetune_lr,
                new_client_weight: c.new_client_weight,
                new_clients: c.new_clients,
                mc_samples: c.mc_samples,
            };
            let s = theorem2_scaling_study(&study)?;
            dir = run_dir(args.out.as_deref(), "sweep", seed)?;
            write_text(&dir.join("scaling.csv"), &table_csv(ScalingRow::CSV_HEADER, s.rows.iter().map(ScalingRow::csv_row)))?;
            summary = json!({
                "slopes_in_n": s.slopes_in_n,
                "slopes_in_m": s.slopes_in_m,
                "files": ["scaling.csv"],
            });
        }
    }
    write_manifest(&dir, "sweep", seed, &cfg, &summary)?;
    Ok(dir)
}
