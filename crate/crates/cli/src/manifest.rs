//! Run manifests: one JSON line per run appended to `run-manifest.jsonl`
//! in the output directory. Reruns and resumes append, never overwrite.

use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use volseg_core::model::ModelConfig;

use crate::CliError;

fn append_line(out_dir: &Path, line: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", out_dir.display())))?;
    let path = out_dir.join("run-manifest.jsonl");
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| CliError::Data(format!("cannot open {}: {e}", path.display())))?;
    writeln!(file, "{line}").map_err(|e| CliError::Data(e.to_string()))
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn append_run_manifest(
    out_dir: &Path,
    subcommand: &str,
    seed: u64,
    config: &ModelConfig,
) -> Result<(), CliError> {
    let args: Vec<String> = std::env::args().collect();
    let record = serde_json::json!({
        "timestamp_unix": unix_now(),
        "subcommand": subcommand,
        "seed": seed,
        "argv": args,
        "config": config.to_key_values(),
    });
    append_line(out_dir, &record.to_string())
}

pub fn append_phantom_manifest(
    out_dir: &Path,
    seed: u64,
    count: usize,
    extent: usize,
) -> Result<(), CliError> {
    let args: Vec<String> = std::env::args().collect();
    let record = serde_json::json!({
        "timestamp_unix": unix_now(),
        "subcommand": "phantom",
        "seed": seed,
        "count": count,
        "extent": extent,
        "argv": args,
    });
    append_line(out_dir, &record.to_string())
}
