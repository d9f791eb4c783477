//! Config merging and run manifests.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use robometa::{Error, Result};

/// Merges explicit flags over an optional flat JSON config. A run manifest is
/// also accepted as config, in which case its resolved config is used.
pub fn resolve<T: Serialize + DeserializeOwned>(flags: &T, config: Option<&Path>) -> Result<(T, Value)> {
    let mut merged = match config {
        None => Map::new(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            let v: Value =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            let v = match v {
                Value::Object(mut o) if o.contains_key("subcommand") && o.contains_key("config") => {
                    o.remove("config").expect("checked")
                }
                other => other,
            };
            match v {
                Value::Object(o) => o,
                _ => return Err(Error::Config(format!("{} is not a JSON object", p.display()))),
            }
        }
    };
    if let Value::Object(f) = serde_json::to_value(flags)? {
        for (k, v) in f {
            if !v.is_null() {
                merged.insert(k, v);
            }
        }
    }
    merged.retain(|_, v| !v.is_null());
    let value = Value::Object(merged);
    let resolved = serde_json::from_value(value.clone()).map_err(|e| Error::Config(format!("config: {e}")))?;
    Ok((resolved, value))
}

pub fn required<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| Error::Config(format!("--{flag} is required")))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

impl Artifact {
    pub fn of(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Ok(Artifact {
            path: path.to_path_buf(),
            sha256: format!("{:x}", Sha256::digest(&bytes)),
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub tool_version: String,
    pub wall_clock_s: f64,
}

pub struct Run {
    subcommand: &'static str,
    config: Value,
    seed: Option<u64>,
    started: Instant,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Run {
    pub fn start(subcommand: &'static str, config: Value, seed: Option<u64>) -> Self {
        Run {
            subcommand,
            config,
            seed,
            started: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Writes the manifest to `path` after fingerprinting every artifact.
    pub fn finish(self, path: &Path) -> Result<()> {
        let collect = |v: &[PathBuf]| v.iter().map(|p| Artifact::of(p)).collect::<Result<Vec<_>>>();
        let m = RunManifest {
            subcommand: self.subcommand.to_string(),
            config: self.config,
            seed: self.seed,
            inputs: collect(&self.inputs)?,
            outputs: collect(&self.outputs)?,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_clock_s: self.started.elapsed().as_secs_f64(),
        };
        fs::write(path, serde_json::to_vec_pretty(&m)?)?;
        Ok(())
    }
}

/// `<file>.run.json` for single-file outputs.
pub fn beside(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".run.json");
    PathBuf::from(name)
}

pub const DIR_MANIFEST: &str = "run_manifest.json";
