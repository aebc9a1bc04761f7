//! Per-run bookkeeping: every file written, per-stage wall time and
//! network-evaluation counts.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ddlab_core::io::atomic_write;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliResult;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Hash of the config the stage ran with.
    pub config_hash: String,
    pub wall_time_s: f64,
    /// Network evaluations per chain, by arm.
    pub evals: BTreeMap<String, u64>,
    pub files: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub seed_offsets: BTreeMap<String, u64>,
    pub stages: BTreeMap<String, StageRecord>,
    pub files: BTreeSet<String>,
}

impl RunManifest {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            version: format!("ddlab {}", env!("CARGO_PKG_VERSION")),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            seed_offsets: cfg.seed_table(),
            stages: BTreeMap::new(),
            files: BTreeSet::new(),
        }
    }

    /// The manifest already in `dir`, re-stamped with `cfg`, or a fresh
    /// one. Stages keep the hash of the config they ran with.
    pub fn open(dir: &Path, cfg: &RunConfig) -> Self {
        let fresh = Self::new(cfg);
        match std::fs::read(dir.join(MANIFEST_FILE))
            .ok()
            .and_then(|b| serde_json::from_slice::<RunManifest>(&b).ok())
        {
            Some(m) => Self {
                stages: m.stages,
                files: m.files,
                ..fresh
            },
            None => fresh,
        }
    }
}

/// Writes artifacts under the run directory and remembers them.
pub struct Stage {
    name: String,
    root: PathBuf,
    started: Instant,
    record: StageRecord,
}

impl Stage {
    pub fn begin(name: &str, root: &Path) -> Self {
        Self {
            name: name.to_string(),
            root: root.to_path_buf(),
            started: Instant::now(),
            record: StageRecord::default(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let p = self.path(rel);
        atomic_write(&p, bytes)?;
        self.record_file(rel);
        Ok(p)
    }

    /// Registers a file some other routine wrote.
    pub fn record_file(&mut self, rel: &str) {
        if !self.record.files.iter().any(|f| f == rel) {
            self.record.files.push(rel.to_string());
        }
    }

    pub fn evals(&mut self, arm: &str, n: u32) {
        self.record.evals.insert(arm.to_string(), n as u64);
    }

    pub fn files(&self) -> &[String] {
        &self.record.files
    }

    /// Stores the stage in the manifest and rewrites it.
    pub fn finish(mut self, cfg: &RunConfig) -> CliResult<StageRecord> {
        self.record.wall_time_s = self.started.elapsed().as_secs_f64();
        self.record.config_hash = cfg.hash();
        let mut m = RunManifest::open(&self.root, cfg);
        m.files.extend(self.record.files.iter().cloned());
        m.files.insert(MANIFEST_FILE.to_string());
        m.stages.insert(self.name.clone(), self.record.clone());
        let mut text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        text.push('\n');
        atomic_write(&self.root.join(MANIFEST_FILE), text.as_bytes())?;
        Ok(self.record)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_lists_written_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::gmm_ring_default();
        let mut s = Stage::begin("a", dir.path());
        s.write("x/one.csv", b"h\n").unwrap();
        s.evals("arm", 4);
        s.finish(&cfg).unwrap();
        let mut s = Stage::begin("b", dir.path());
        s.write("two.csv", b"h\n").unwrap();
        s.finish(&cfg).unwrap();
        let m = RunManifest::open(dir.path(), &cfg);
        let files: Vec<&str> = m.files.iter().map(|s| s.as_str()).collect();
        assert_eq!(files, ["manifest.json", "two.csv", "x/one.csv"]);
        assert_eq!(m.stages["a"].evals["arm"], 4);
        assert_eq!(m.config_hash, cfg.hash());
    }

    #[test]
    fn stages_keep_their_config_hash() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::gmm_ring_default();
        let mut s = Stage::begin("a", dir.path());
        s.write("one.csv", b"h\n").unwrap();
        s.finish(&cfg).unwrap();
        let mut other = cfg.clone();
        other.seed = 7;
        Stage::begin("b", dir.path()).finish(&other).unwrap();
        let m = RunManifest::open(dir.path(), &other);
        assert_eq!(m.config_hash, other.hash());
        assert_eq!(m.stages["a"].config_hash, cfg.hash());
        assert_eq!(m.stages["b"].config_hash, other.hash());
        assert!(m.files.contains("one.csv"));
    }
}
