use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fedmix_core::federated::{FedConfig, WeightsSpec};
use tempfile::TempDir;

fn fedmix(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedmix"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

const SMALL: &str = r#"
dim = 3
mean_norm = 3.0
clients = 4
samples_per_client = 50
iterations = 100
sync_every = 10
lr_mu = 0.05
lr_logit = 0.05
batch = 10
optimizer = "sgd"
seed = 9
"#;

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn gen_data_writes_one_file_per_client_and_reruns_identically() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.toml", SMALL);
    let c = cfg.to_str().unwrap();
    ok(&fedmix(&["gen-data", "--config", c, "--out", "a"], tmp.path()));
    ok(&fedmix(&["gen-data", "--config", c, "--out", "b"], tmp.path()));
    let mut names: Vec<String> = fs::read_dir(tmp.path().join("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["client_000.csv", "client_001.csv", "client_002.csv", "client_003.csv", "manifest.json"]);
    for n in &names {
        assert_eq!(fs::read(tmp.path().join("a").join(n)).unwrap(), fs::read(tmp.path().join("b").join(n)).unwrap(), "{n}");
    }
    assert_eq!(header(&tmp.path().join("a/client_000.csv")), "x0,x1,x2,label");

    // weights in the manifest are exactly the configured population's
    let m = manifest(&tmp.path().join("a"));
    let weights: Vec<f64> = serde_json::from_value(m["outputs"]["weights"].clone()).unwrap();
    let fed = FedConfig {
        clients: 4,
        samples_per_client: 50,
        iterations: 100,
        sync_every: 10,
        lr_mu: 0.05,
        lr_logit: 0.05,
        batch: 10,
        optimizer: Default::default(),
        schedule: Default::default(),
        seed: 9,
        weights: WeightsSpec::Uniform { lo: 0.2, hi: 0.8 },
        init_std: 0.1f64.sqrt(),
        score_error_samples: 0,
    };
    assert_eq!(weights, fed.true_weights());
    assert_eq!(m["seed"], 9);
    assert_eq!(m["format_version"], 1);
}

#[test]
fn explicit_weights_round_trip() {
    let tmp = TempDir::new().unwrap();
    let given = [0.1, 0.35, 0.6, 0.95];
    let cfg = write(tmp.path(), "c.toml", &format!("{SMALL}\nweights = {given:?}\n"));
    ok(&fedmix(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", "a"], tmp.path()));
    let m = manifest(&tmp.path().join("a"));
    let weights: Vec<f64> = serde_json::from_value(m["outputs"]["weights"].clone()).unwrap();
    assert_eq!(weights, given);
    for (j, &w) in given.iter().enumerate() {
        let text = fs::read_to_string(tmp.path().join(format!("a/client_{j:03}.csv"))).unwrap();
        let labels: Vec<f64> = text.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
        assert_eq!(labels.len(), 50);
        let frac = labels.iter().filter(|&&l| l > 0.0).count() as f64 / 50.0;
        assert!((frac - w).abs() < 4.0 * (w * (1.0 - w) / 50.0).sqrt() + 1e-9, "client {j}: {frac} vs {w}");
    }
}

#[test]
fn pretrain_metrics_have_one_row_per_round() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.toml", SMALL);
    ok(&fedmix(&["pretrain", "--config", cfg.to_str().unwrap(), "--out", "p"], tmp.path()));
    let metrics = fs::read_to_string(tmp.path().join("p/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), "round,mean_error,weight_mse,train_loss,score_error");
    assert_eq!(metrics.lines().count(), 1 + 100 / 10 + 1);

    let zero = write(tmp.path(), "z.toml", &SMALL.replace("iterations = 100", "iterations = 0"));
    ok(&fedmix(&["pretrain", "--config", zero.to_str().unwrap(), "--out", "z"], tmp.path()));
    let metrics = fs::read_to_string(tmp.path().join("z/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    assert!(metrics.lines().nth(1).unwrap().starts_with("0,"));
}

#[test]
fn resumed_pretraining_matches_an_uninterrupted_run() {
    let tmp = TempDir::new().unwrap();
    let half = write(tmp.path(), "h.toml", &SMALL.replace("iterations = 100", "iterations = 50"));
    let full = write(tmp.path(), "f.toml", SMALL);
    ok(&fedmix(&["pretrain", "--config", half.to_str().unwrap(), "--out", "h"], tmp.path()));
    ok(&fedmix(&["pretrain", "--config", full.to_str().unwrap(), "--out", "f"], tmp.path()));
    let resume = write(tmp.path(), "r.toml", &format!("{SMALL}\nresume_from = \"h/params.json\"\n"));
    ok(&fedmix(&["pretrain", "--config", resume.to_str().unwrap(), "--out", "r"], tmp.path()));
    for f in ["params.json", "metrics.csv"] {
        assert_eq!(fs::read(tmp.path().join("f").join(f)).unwrap(), fs::read(tmp.path().join("r").join(f)).unwrap(), "{f}");
    }
    // any other change is refused
    let bad = write(
        tmp.path(),
        "b.toml",
        &format!("{}\nresume_from = \"h/params.json\"\n", SMALL.replace("lr_mu = 0.05", "lr_mu = 0.06")),
    );
    assert_eq!(fedmix(&["pretrain", "--config", bad.to_str().unwrap(), "--out", "b"], tmp.path()).status.code(), Some(2));
}

#[test]
fn manifest_reruns_the_command() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.toml", SMALL);
    ok(&fedmix(&["pretrain", "--config", cfg.to_str().unwrap(), "--seed", "4", "--out", "a"], tmp.path()));
    ok(&fedmix(&["pretrain", "--config", "a/manifest.json", "--out", "b"], tmp.path()));
    for f in ["params.json", "metrics.csv", "manifest.json"] {
        assert_eq!(fs::read(tmp.path().join("a").join(f)).unwrap(), fs::read(tmp.path().join("b").join(f)).unwrap(), "{f}");
    }
    assert_eq!(manifest(&tmp.path().join("b"))["seed"], 4);
}

#[test]
fn finetune_and_sample_outputs() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.toml", SMALL);
    ok(&fedmix(&["pretrain", "--config", cfg.to_str().unwrap(), "--out", "p"], tmp.path()));
    let ft = write(
        tmp.path(),
        "ft.toml",
        "params = \"p/params.json\"\nw_new = 0.6\nsamples = 40\niterations = 30\nlr = 0.05\nbatch = 10\n",
    );
    ok(&fedmix(&["finetune", "--config", ft.to_str().unwrap(), "--out", "f"], tmp.path()));
    let traj = fs::read_to_string(tmp.path().join("f/trajectory.csv")).unwrap();
    assert_eq!(traj.lines().next().unwrap(), "step,logit,weight,loss");
    assert_eq!(traj.lines().count(), 1 + 31);
    assert!(traj.lines().nth(1).unwrap().starts_with("0,0,0.5,"));

    let s = write(tmp.path(), "s.toml", "n_samples = 50\nn_steps = 20\nscore = \"f/score.json\"\n");
    ok(&fedmix(&["sample", "--config", s.to_str().unwrap(), "--out", "s", "--threads", "1"], tmp.path()));
    let samples = fs::read_to_string(tmp.path().join("s/samples.csv")).unwrap();
    assert_eq!(samples.lines().next().unwrap(), "x0,x1,x2");
    assert_eq!(samples.lines().count(), 51);

    let both = write(tmp.path(), "bad.toml", "n_samples = 5\nmu = [1.0]\nw = 0.5\nscore = \"f/score.json\"\n");
    assert_eq!(fedmix(&["sample", "--config", both.to_str().unwrap(), "--out", "x"], tmp.path()).status.code(), Some(2));
}

#[test]
fn sweep_table_headers() {
    let tmp = TempDir::new().unwrap();
    let r = write(
        tmp.path(),
        "r.toml",
        "kind = \"robustness\"\ndim = 2\nmean_norm = 3.0\nw_new = 0.7\nsamples = 40\nbatch = 10\nepochs = [1, 2]\nlrs = [0.0, 0.1]\nseeds = 2\n",
    );
    ok(&fedmix(&["sweep", "--config", r.to_str().unwrap(), "--out", "r"], tmp.path()));
    let t = fs::read_to_string(tmp.path().join("r/sweep.csv")).unwrap();
    assert_eq!(t.lines().next().unwrap(), "epochs,lr,seed,weight_error,backbone_drift");
    assert_eq!(t.lines().count(), 1 + 2 * 2 * 2);

    let b = write(
        tmp.path(),
        "b.toml",
        "kind = \"bound\"\ndims = [1, 2]\nsamples = [50]\nw = 0.7\nt = 0.1\nmean_norm = 4.0\ntrials = 200\n",
    );
    ok(&fedmix(&["sweep", "--config", b.to_str().unwrap(), "--out", "b"], tmp.path()));
    assert_eq!(
        header(&tmp.path().join("b/bound.csv")),
        fedmix_core::estimators::BoundReport::CSV_HEADER
    );
    let unknown = write(tmp.path(), "u.toml", "kind = \"bound\"\ndims = [1]\ntypo = 1\n");
    assert_eq!(fedmix(&["sweep", "--config", unknown.to_str().unwrap(), "--out", "u"], tmp.path()).status.code(), Some(2));
}

#[test]
fn verify_exit_status() {
    let tmp = TempDir::new().unwrap();
    let empty = write(tmp.path(), "e.toml", "checks = []\n");
    let out = fedmix(&["verify", "--config", empty.to_str().unwrap(), "--out", "e"], tmp.path());
    assert_eq!(out.status.code(), Some(0));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("e/report.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);

    let quick = write(tmp.path(), "q.toml", "checks = [\"gradient_exactness\", \"score_correctness\"]\n");
    assert_eq!(fedmix(&["verify", "--config", quick.to_str().unwrap(), "--out", "q"], tmp.path()).status.code(), Some(0));

    let typo = write(tmp.path(), "t.toml", "checks = [\"no_such_check\"]\n");
    assert_eq!(fedmix(&["verify", "--config", typo.to_str().unwrap(), "--out", "t"], tmp.path()).status.code(), Some(2));
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(fedmix(&["pretrain", "--out", "x"], tmp.path()).status.code(), Some(2));
    assert_eq!(fedmix(&["no-such-command"], tmp.path()).status.code(), Some(2));
    let bad = write(tmp.path(), "b.toml", &format!("{SMALL}\nunknown_key = 1\n"));
    let out = fedmix(&["pretrain", "--config", bad.to_str().unwrap(), "--out", "x"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown_key"));
    let invalid = write(tmp.path(), "i.toml", &SMALL.replace("batch = 10", "batch = 500"));
    assert_eq!(fedmix(&["pretrain", "--config", invalid.to_str().unwrap(), "--out", "x"], tmp.path()).status.code(), Some(2));
}
