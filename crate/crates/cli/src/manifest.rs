use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use femtoformer::checkpoint::write_atomic;
use serde::Serialize;

/// Everything needed to rerun a command: its argv, seed, configuration
/// snapshot, and the vocabulary and checkpoint it was paired with.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub vocab_hash: String,
    pub checkpoint: Option<PathBuf>,
    pub started_unix: f64,
    pub finished_unix: f64,
}

pub fn now_unix() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    output.with_file_name(name)
}

impl RunManifest {
    pub fn write_beside(&self, output: &Path) -> anyhow::Result<()> {
        let path = manifest_path(output);
        let json = serde_json::to_vec_pretty(self)?;
        write_atomic(&path, &json).with_context(|| format!("writing {}", path.display()))
    }
}
