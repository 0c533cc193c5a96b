use std::fs;
use std::path::{Path, PathBuf};

use disspec_core::lindblad::fmt15;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::CliError;

fn hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn num(x: f64) -> String {
    fmt15(x)
}

pub fn opt(x: Option<f64>) -> String {
    x.map(fmt15).unwrap_or_default()
}

pub struct OutputDir {
    dir: PathBuf,
    files: Vec<(String, String, usize)>,
}

impl OutputDir {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir)?;
        Ok(OutputDir { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        fs::write(self.dir.join(name), bytes)?;
        self.files.push((name.to_string(), hex(bytes), bytes.len()));
        log::info!("wrote {name}");
        Ok(())
    }

    pub fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        let io = |e: csv::Error| CliError::Io(std::io::Error::other(e));
        w.write_record(header).map_err(io)?;
        for r in rows {
            w.write_record(r).map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Io(std::io::Error::other(e.to_string())))?;
        self.put(name, &bytes)
    }

    pub fn json(&mut self, name: &str, value: &serde_json::Value) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.into()))?;
        text.push('\n');
        self.put(name, text.as_bytes())
    }

    /// manifest.json: hash of the effective config, version, wall time and
    /// the hash of every file written.
    pub fn write_manifest(&mut self, cfg: &ExperimentConfig, wall: f64) -> Result<(), CliError> {
        let effective = toml::to_string(cfg).map_err(|e| CliError::Config(e.to_string()))?;
        let files: Vec<_> = self.files.iter().map(|(n, h, b)| json!({"name": n, "sha256": h, "bytes": b})).collect();
        let manifest = json!({
            "experiment": cfg.experiment.name(),
            "version": env!("CARGO_PKG_VERSION"),
            "config_sha256": hex(effective.as_bytes()),
            "config": effective,
            "wall_time_s": wall,
            "files": files,
        });
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Io(e.into()))?;
        text.push('\n');
        fs::write(self.dir.join("manifest.json"), text)?;
        Ok(())
    }
}
