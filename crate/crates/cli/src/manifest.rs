use std::fs;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Result;
use serde::Serialize;
use serde_json::Value;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Serialize)]
struct Versions {
    spreadflow: &'static str,
    cli: &'static str,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    seed: Option<u64>,
    config: &'a Value,
    versions: Versions,
    started_unix: u64,
    wall_time_secs: f64,
    outputs: Vec<String>,
}

/// Wall clock for one command; `finish` writes the manifest.
pub struct Timer {
    started: Instant,
    started_unix: u64,
}

impl Timer {
    pub fn start() -> Self {
        Self {
            started: Instant::now(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    pub fn finish(self, dir: &Path, command: &str, seed: Option<u64>, config: &Value) -> Result<()> {
        let mut outputs: Vec<String> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n != MANIFEST_FILE)
            .collect();
        outputs.sort();
        let m = Manifest {
            command,
            seed,
            config,
            versions: Versions {
                spreadflow: spreadflow::VERSION,
                cli: env!("CARGO_PKG_VERSION"),
            },
            started_unix: self.started_unix,
            wall_time_secs: self.started.elapsed().as_secs_f64(),
            outputs,
        };
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&m)? + "\n")?;
        Ok(())
    }
}

