//! Reading and writing pipeline files. Every write goes through a temporary
//! file in the destination directory followed by a rename.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context as _, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use boxcast::synthgen::{read_jsonl, write_jsonl, SceneRecord};

use crate::pipeline::PredictionRecord;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("cannot write into {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("invalid JSON in {}", path.display()))
}

pub fn read_scenes(path: &Path) -> Result<Vec<SceneRecord>> {
    let f = File::open(path).with_context(|| format!("cannot read {}", path.display()))?;
    let scenes = read_jsonl(BufReader::new(f)).with_context(|| format!("invalid dataset {}", path.display()))?;
    if scenes.is_empty() {
        bail!("dataset {} is empty", path.display());
    }
    Ok(scenes)
}

pub fn write_scenes(path: &Path, scenes: &[SceneRecord]) -> Result<()> {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, scenes)?;
    write_atomic(path, &buf)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let f = File::open(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord = serde_json::from_str(&line)
            .with_context(|| format!("{}: line {}", path.display(), i + 1))?;
        rec.validate()
            .with_context(|| format!("{}: line {}", path.display(), i + 1))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_predictions(path: &Path, preds: &[PredictionRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for p in preds {
        serde_json::to_writer(&mut buf, p)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    write_atomic(path, &w.into_inner()?)
}

/// `out` with `suffix` appended to its file name.
pub fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    out.with_file_name(name)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub wall_ms: f64,
}

/// Record of one command run, written next to its primary output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub workers: usize,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub tool_version: String,
    pub timings: Timings,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            command: command.to_string(),
            args: std::env::args().collect(),
            config,
            seed: None,
            workers: 1,
            inputs: Vec::new(),
            outputs: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            timings: Timings { wall_ms: 0.0 },
        }
    }

    /// Writes the manifest as `<primary output>.manifest.json`.
    pub fn finish(mut self, elapsed: Duration) -> Result<PathBuf> {
        self.timings.wall_ms = elapsed.as_secs_f64() * 1e3;
        let primary = self.outputs.first().cloned().unwrap_or_else(|| PathBuf::from(&self.command));
        let path = sibling(&primary, ".manifest.json");
        write_json(&path, &self)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sibling_appends_suffix() {
        assert_eq!(sibling(Path::new("a/b.jsonl"), ".manifest.json"), PathBuf::from("a/b.jsonl.manifest.json"));
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
