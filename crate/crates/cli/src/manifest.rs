use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct InputRecord {
    pub arg: String,
    pub path: String,
    pub sha256: String,
}

/// Everything in here is a function of the config, inputs and seed.
/// Wall-clock times go to `timestamps.json` next to it.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub name: String,
    pub seed: u64,
    pub seed_source: String,
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<InputRecord>,
    pub outputs: Vec<String>,
    pub results: serde_json::Value,
}

pub struct Run {
    pub dir: PathBuf,
    pub manifest: Manifest,
    started: u64,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Run {
    pub fn new(dir: PathBuf, manifest: Manifest) -> Result<Self> {
        std::fs::create_dir_all(&dir).with_context(|| format!("creating run directory {}", dir.display()))?;
        Ok(Run {
            dir,
            manifest,
            started: now(),
        })
    }

    pub fn input(&mut self, arg: &str, path: &str, bytes: &[u8]) {
        self.manifest.inputs.push(InputRecord {
            arg: arg.into(),
            path: path.into(),
            sha256: sha256_hex(bytes),
        });
    }

    pub fn out_path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    /// Writes `bytes` to `file` inside the run directory and lists it.
    pub fn write(&mut self, file: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.out_path(file);
        std::fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))?;
        self.record(file);
        Ok(p)
    }

    pub fn record(&mut self, file: &str) {
        if !self.manifest.outputs.iter().any(|o| o == file) {
            self.manifest.outputs.push(file.into());
        }
    }

    pub fn result(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).expect("result serializes");
        if let serde_json::Value::Object(m) = &mut self.manifest.results {
            m.insert(key.into(), v);
        }
    }

    pub fn finish(self) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        let p = self.dir.join("manifest.json");
        std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
        let t = serde_json::json!({ "started_unix": self.started, "finished_unix": now() });
        std::fs::write(self.dir.join("timestamps.json"), format!("{t}\n"))?;
        Ok(self.dir)
    }
}

pub fn write_error_record(dir: &Path, kind: &str, message: &str) {
    let rec = serde_json::json!({ "error": kind, "message": message });
    if std::fs::create_dir_all(dir).is_ok() {
        let _ = std::fs::write(dir.join("error.json"), format!("{rec}\n"));
    }
}
