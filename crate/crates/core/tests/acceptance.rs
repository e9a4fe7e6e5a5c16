//! Runs every end-to-end check and prints one PASS/FAIL line each.

use std::process::ExitCode;

use fedmix_core::verify::{run_check, CheckId, SuiteArtifacts};

const SEED: u64 = 20240601;

fn main() -> ExitCode {
    let mut artifacts = SuiteArtifacts::default();
    let mut failed = 0;
    for (i, id) in CheckId::ALL.iter().enumerate() {
        match run_check(*id, SEED, &mut artifacts) {
            Ok(result) => {
                println!("criterion {:>2}: {}", i + 1, result.summary_line());
                for (k, v) in &result.details {
                    let s = v.to_string();
                    if s.len() <= 200 {
                        println!("      {k} = {s}");
                    }
                }
                if !result.passed {
                    failed += 1;
                }
            }
            Err(e) => {
                println!("criterion {:>2}: [FAIL] {} (error: {e})", i + 1, id.name());
                failed += 1;
            }
        }
    }
    println!("acceptance: {} passed, {} failed", CheckId::ALL.len() - failed, failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
