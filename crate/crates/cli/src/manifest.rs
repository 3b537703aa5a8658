//! Run manifests, artifact fingerprints and config loading shared by commands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use disambig_core::fingerprint::sha256_hex;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMING_FILE: &str = "timing.json";
pub const SEED_ENV: &str = "DISAMBIG_SEED";

/// Everything needed to reproduce one run. Wall-clock time lives in the
/// timing sidecar so identical runs produce identical manifests.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: &'static str,
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    /// Paths relative to the manifest's directory.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub fingerprints: BTreeMap<String, String>,
}

pub struct Run {
    manifest: RunManifest,
    out_dir: PathBuf,
    started: Instant,
}

impl Run {
    pub fn start(command: &str, out_dir: &Path) -> Result<Run, CliError> {
        std::fs::create_dir_all(out_dir).map_err(|e| CliError::runtime(format!("creating {}: {e}", out_dir.display())))?;
        Ok(Run {
            manifest: RunManifest {
                command: command.to_owned(),
                version: env!("CARGO_PKG_VERSION"),
                config: Value::Null,
                seeds: BTreeMap::new(),
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                fingerprints: BTreeMap::new(),
            },
            out_dir: out_dir.to_path_buf(),
            started: Instant::now(),
        })
    }

    pub fn config(&mut self, config: &impl Serialize) {
        self.manifest.config = serde_json::to_value(config).expect("config serializes");
    }

    pub fn seed(&mut self, name: &str, seed: u64) {
        self.manifest.seeds.insert(name.to_owned(), seed);
    }

    pub fn input(&mut self, name: &str, path: &Path) -> Result<(), CliError> {
        let fp = artifact_fingerprint(path).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
        self.manifest.fingerprints.insert(format!("input:{name}"), fp);
        self.manifest.inputs.insert(name.to_owned(), self.relative(path));
        Ok(())
    }

    pub fn output(&mut self, name: &str, path: &Path) {
        self.manifest.outputs.insert(name.to_owned(), self.relative(path));
    }

    fn relative(&self, path: &Path) -> String {
        let abs = |p: &Path| std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
        let rel = pathdiff::diff_paths(abs(path), abs(&self.out_dir)).unwrap_or_else(|| path.to_path_buf());
        rel.to_string_lossy().replace('\\', "/")
    }

    /// Fingerprints the outputs, then writes the manifest and timing sidecar.
    pub fn finish(mut self) -> Result<(), CliError> {
        for (name, rel) in self.manifest.outputs.clone() {
            let fp = artifact_fingerprint(&self.out_dir.join(&rel)).map_err(|e| CliError::runtime(format!("{rel}: {e}")))?;
            self.manifest.fingerprints.insert(format!("output:{name}"), fp);
        }
        let mut text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        text.push('\n');
        write(&self.out_dir.join(MANIFEST_FILE), &text)?;
        let timing = serde_json::json!({
            "command": self.manifest.command,
            "wall_clock_seconds": self.started.elapsed().as_secs_f64(),
        });
        write(&self.out_dir.join(TIMING_FILE), &format!("{timing:#}\n"))
    }
}

pub fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::runtime(format!("writing {}: {e}", path.display())))
}

/// SHA-256 of a file, or of the sorted `name:digest` lines of a directory's
/// files (manifests and timing sidecars excluded).
pub fn artifact_fingerprint(path: &Path) -> std::io::Result<String> {
    if path.is_dir() {
        let mut entries: Vec<(String, PathBuf)> = std::fs::read_dir(path)?
            .map(|e| e.map(|e| (e.file_name().to_string_lossy().into_owned(), e.path())))
            .collect::<Result<_, _>>()?;
        entries.sort();
        let mut lines = String::new();
        for (name, p) in entries {
            if name == MANIFEST_FILE || name == TIMING_FILE {
                continue;
            }
            lines.push_str(&format!("{name}:{}\n", artifact_fingerprint(&p)?));
        }
        Ok(sha256_hex(lines.as_bytes()))
    } else {
        Ok(sha256_hex(&std::fs::read(path)?))
    }
}

/// Reads a manifest written beside `path` (the file's directory, or `path` itself).
pub fn read_manifest(path: &Path) -> Option<Value> {
    let dir = if path.is_dir() { path } else { path.parent()? };
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE)).ok()?;
    serde_json::from_str(&text).ok()
}

/// A command config: defaults, overlaid by the `--config` JSON object.
pub struct Loaded<T> {
    pub value: T,
    raw: Value,
}

impl<T: DeserializeOwned + Serialize + Default> Loaded<T> {
    pub fn from(path: Option<&Path>, default: T) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Loaded { value: default, raw: Value::Null });
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::validation(format!("reading config {}: {e}", path.display())))?;
        let raw: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::validation(format!("config {}: {e}", path.display())))?;
        if !raw.is_object() {
            return Err(CliError::validation(format!("config {} must be a JSON object", path.display())));
        }
        let mut merged = serde_json::to_value(&default).expect("config serializes");
        overlay(&mut merged, &raw);
        let value = serde_json::from_value(merged)
            .map_err(|e| CliError::validation(format!("config {}: {e}", path.display())))?;
        Ok(Loaded { value, raw })
    }

    /// Seed precedence: flag, then the config file, then `DISAMBIG_SEED`, then the default.
    pub fn seed(&self, flag: Option<u64>, pointer: &str, current: u64) -> Result<u64, CliError> {
        if let Some(s) = flag {
            return Ok(s);
        }
        if self.raw.pointer(pointer).is_some() {
            return Ok(current);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v.trim().parse().map_err(|_| CliError::validation(format!("{SEED_ENV}={v} is not an unsigned integer"))),
            Err(_) => Ok(current),
        }
    }
}

fn overlay(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => overlay(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}
