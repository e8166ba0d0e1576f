//! Output directory handling and the run manifest.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

#[derive(Serialize)]
pub struct Manifest {
    pub subcommand: String,
    pub argv: Vec<String>,
    pub settings: BTreeMap<String, String>,
    pub seed: u64,
    pub version: String,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub outputs: Vec<String>,
    pub exit_code: i32,
}

pub fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

pub fn version() -> String {
    match option_env!("GALITE_GIT_REV") {
        Some(rev) => format!("galite {} ({rev})", env!("CARGO_PKG_VERSION")),
        None => format!("galite {}", env!("CARGO_PKG_VERSION")),
    }
}

/// Files produced by one command. Without a directory, data files are
/// written to stdout in order.
pub struct Outputs {
    dir: Option<PathBuf>,
    files: Vec<(String, String)>,
}

impl Outputs {
    pub fn new(dir: Option<PathBuf>) -> Self {
        Self { dir, files: Vec::new() }
    }

    pub fn has_dir(&self) -> bool {
        self.dir.is_some()
    }

    pub fn add(&mut self, name: impl Into<String>, contents: String) {
        self.files.push((name.into(), contents));
    }

    /// Writes everything plus `manifest.json`.
    pub fn finish(self, mut manifest: Manifest) -> std::io::Result<()> {
        let Some(dir) = self.dir else {
            use std::io::Write as _;
            let mut out = std::io::stdout().lock();
            for (_, contents) in &self.files {
                out.write_all(contents.as_bytes())?;
            }
            return Ok(());
        };
        std::fs::create_dir_all(&dir)?;
        for (name, contents) in &self.files {
            std::fs::write(dir.join(name), contents)?;
            manifest.outputs.push(name.clone());
        }
        manifest.finished_unix_ms = now_ms();
        let json = serde_json::to_string_pretty(&manifest).map_err(std::io::Error::other)?;
        std::fs::write(dir.join("manifest.json"), json + "\n")
    }
}
