//! One `manifest.json` per output directory: the config that produced it,
//! the tool version, input hashes and phase timings.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize)]
pub struct Phase {
    pub name: String,
    pub seconds: f64,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config: RunConfig,
    pub config_file: Option<String>,
    /// sha256 of every input, keyed by path (or `bundled:<name>`).
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub phases: Vec<Phase>,
    pub threads: usize,
}

impl Manifest {
    pub fn new(command: &str, config: RunConfig, config_file: Option<String>) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            config,
            config_file,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            phases: Vec::new(),
            threads: rayon::current_num_threads(),
        }
    }

    pub fn input(&mut self, key: impl Into<String>, bytes: &[u8]) {
        self.inputs.insert(key.into(), sha256_hex(bytes));
    }

    /// Records the time elapsed since `start` under `name`.
    pub fn record(&mut self, name: &str, start: Instant) {
        self.phases.push(Phase {
            name: name.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
    }

    /// Writes `contents` into `dir` and lists it as an output.
    pub fn write(&mut self, dir: &Path, name: &str, contents: &[u8]) -> anyhow::Result<()> {
        fs::write(dir.join(name), contents)?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    pub fn finish(self, dir: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(&self)?;
        fs::write(dir.join("manifest.json"), text + "\n")?;
        Ok(())
    }
}
