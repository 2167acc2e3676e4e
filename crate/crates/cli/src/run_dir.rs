use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

/// Environment variable naming the default run-directory root.
pub const RUN_ROOT_ENV: &str = "FMCH_RUN_ROOT";

pub fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

/// `explicit`, or `<root>/<name>` when absent.
pub fn resolve(explicit: Option<PathBuf>, name: &str) -> PathBuf {
    explicit.unwrap_or_else(|| run_root().join(name))
}

pub fn unix_seconds() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

#[derive(Debug, Serialize)]
pub struct Provenance {
    pub artifact: &'static str,
    pub version: &'static str,
    pub command: Vec<String>,
    pub config_hash: Option<String>,
    pub seeds: Vec<u64>,
    pub started_unix: f64,
    pub finished_unix: f64,
}

impl Provenance {
    pub fn start(config_hash: Option<String>, seeds: Vec<u64>) -> Self {
        let now = unix_seconds();
        Self {
            artifact: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: std::env::args().collect(),
            config_hash,
            seeds,
            started_unix: now,
            finished_unix: now,
        }
    }

    pub fn finish(mut self, dir: &Path) -> std::io::Result<()> {
        self.finished_unix = unix_seconds();
        let json = serde_json::to_string_pretty(&self).expect("provenance serializes");
        std::fs::write(dir.join("provenance.json"), json)
    }
}
