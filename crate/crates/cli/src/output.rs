use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use crate::CliError;

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

/// `--out` if given, else `runs/<command>-<timestamp>-seed<seed>`.
pub fn run_dir(out: Option<&Path>, command: &str, seed: u64) -> Result<PathBuf, CliError> {
    let dir = match out {
        Some(p) => p.to_path_buf(),
        None => {
            let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
            PathBuf::from("runs").join(format!("{command}-{stamp}-seed{seed}"))
        }
    };
    fs::create_dir_all(&dir)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

/// Everything needed to re-run the command; no timestamps so reruns are
/// byte-identical.
pub fn write_manifest<C: Serialize, E: Serialize>(
    dir: &Path,
    command: &str,
    seed: u64,
    config: &C,
    extra: &E,
) -> Result<(), CliError> {
    let manifest = json!({
        "command": command,
        "format_version": MANIFEST_FORMAT_VERSION,
        "code_version": env!("CARGO_PKG_VERSION"),
        "seed": seed,
        "config": config,
        "outputs": extra,
    });
    fedmix_core::io::write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(())
}
