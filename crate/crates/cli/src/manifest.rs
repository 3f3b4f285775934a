use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

/// Written once per run as `<command>.manifest.json` in the output directory.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments that reproduce this run.
    pub argv: Vec<String>,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub version: String,
    pub outputs: Vec<PathBuf>,
    pub wall_time_s: f64,
}

impl RunManifest {
    pub fn new(command: &str, argv: Vec<String>, seed: u64) -> Self {
        Self {
            command: command.into(),
            argv,
            config: BTreeMap::new(),
            seed,
            version: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).into(),
            outputs: Vec::new(),
            wall_time_s: 0.0,
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.config.insert(key.into(), value.to_string());
    }

    /// Records every INI entry under `section.key`.
    pub fn set_ini(&mut self, ini: &foldscale::config::Ini) {
        for (k, v) in ini.entries() {
            self.config.insert(k, v.to_string());
        }
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("{}.manifest.json", self.command));
        let json = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(&path, json + "\n")?;
        Ok(path)
    }
}
