//! Run directory layout, per-stage manifests and the verdict log.
//!
//! Every stage writes `manifest.json` into its output directory recording the
//! seed, a hash of its configuration, the sha256 of each input and of each
//! output. A stage whose manifest matches the current inputs and whose
//! outputs still hash as recorded is skipped.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::synth::{read_json, write_json};

pub const MANIFEST: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_bytes(&bytes))
}

/// Hash of a directory: sha256 over sorted `name\0sha256\n` lines of its
/// regular files (not recursive).
pub fn sha256_dir(dir: &Path) -> Result<String> {
    let mut entries = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let e = e.map_err(|e| Error::io(dir, e))?;
        let path = e.path();
        if path.is_file() {
            entries.push((e.file_name().to_string_lossy().into_owned(), path));
        }
    }
    entries.sort();
    let mut h = Sha256::new();
    for (name, path) in entries {
        h.update(name.as_bytes());
        h.update([0]);
        h.update(sha256_file(&path)?.as_bytes());
        h.update(b"\n");
    }
    Ok(hex::encode(h.finalize()))
}

/// File or directory hash.
pub fn sha256_path(path: &Path) -> Result<String> {
    if path.is_dir() {
        sha256_dir(path)
    } else {
        sha256_file(path)
    }
}

pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let bytes = serde_json::to_vec(config).map_err(|e| Error::format("config", e.to_string()))?;
    Ok(sha256_bytes(&bytes))
}

/// Writes through a temporary sibling and renames, so readers never observe
/// a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.{}.tmp", std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub stage: String,
    pub seed: u64,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    /// Output file name (relative to the manifest's directory) to sha256.
    pub outputs: BTreeMap<String, String>,
}

/// Identity of one stage execution: everything that determines its outputs.
#[derive(Debug, Clone)]
pub struct Stage {
    pub name: String,
    pub seed: u64,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    UpToDate,
}

impl Stage {
    pub fn new<T: Serialize>(name: &str, seed: u64, config: &T) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            seed,
            config_hash: config_hash(config)?,
            inputs: BTreeMap::new(),
        })
    }

    /// Records the hash of an input file or directory.
    pub fn input(mut self, name: &str, path: &Path) -> Result<Self> {
        self.inputs.insert(name.to_string(), sha256_path(path)?);
        Ok(self)
    }

    fn is_current(&self, dir: &Path) -> bool {
        let Ok(m) = read_json::<Manifest>(&dir.join(MANIFEST), "manifest") else {
            return false;
        };
        m.version == MANIFEST_VERSION
            && m.stage == self.name
            && m.seed == self.seed
            && m.config_hash == self.config_hash
            && m.inputs == self.inputs
            && m
                .outputs
                .iter()
                .all(|(name, hash)| sha256_file(&dir.join(name)).is_ok_and(|h| &h == hash))
    }

    /// Runs `f` unless the manifest in `dir` shows identical inputs and
    /// intact outputs. `f` returns the output file names it wrote, relative
    /// to `dir`.
    pub fn run(&self, dir: &Path, f: impl FnOnce() -> Result<Vec<String>>) -> Result<Outcome> {
        if self.is_current(dir) {
            log::debug!("{}: up to date in {}", self.name, dir.display());
            return Ok(Outcome::UpToDate);
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let written = f()?;
        let mut outputs = BTreeMap::new();
        for name in written {
            let h = sha256_file(&dir.join(&name))?;
            outputs.insert(name, h);
        }
        let m = Manifest {
            version: MANIFEST_VERSION,
            stage: self.name.clone(),
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            inputs: self.inputs.clone(),
            outputs,
        };
        write_json(&dir.join(MANIFEST), &m)?;
        Ok(Outcome::Ran)
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    read_json(&dir.join(MANIFEST), "manifest")
}

/// Canonical text form of q used in file names and cache keys.
pub fn q_label(q: f64) -> String {
    format!("q{q}")
}

/// Validates an ε quantile.
pub fn check_q(q: f64) -> Result<f64> {
    if q > 0.0 && q < 1.0 {
        Ok(q)
    } else {
        Err(Error::invalid("q", format!("{q} outside (0, 1)")))
    }
}

/// Conventional layout of a run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn sim(&self) -> PathBuf {
        self.root.join("sim")
    }
    pub fn logs(&self) -> PathBuf {
        self.sim().join("logs")
    }
    pub fn world(&self) -> PathBuf {
        self.sim().join("world.toml")
    }
    pub fn profiles(&self) -> PathBuf {
        self.sim().join("profiles.json")
    }
    pub fn access(&self) -> PathBuf {
        self.sim().join("access.json")
    }
    pub fn prep(&self) -> PathBuf {
        self.root.join("prep")
    }
    pub fn model(&self) -> PathBuf {
        self.root.join("model")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.model().join("model.ckpt")
    }
    pub fn reps_dir(&self) -> PathBuf {
        self.root.join("reps")
    }
    pub fn reps(&self) -> PathBuf {
        self.reps_dir().join("reps.bin")
    }
    pub fn clusters(&self, q: f64) -> PathBuf {
        self.root.join("clusters").join(q_label(q))
    }
    pub fn metrics(&self, q: f64) -> PathBuf {
        self.root.join("metrics").join(q_label(q))
    }
    pub fn heatmaps(&self, q: f64) -> PathBuf {
        self.root.join("heatmaps").join(q_label(q))
    }
    pub fn projection(&self) -> PathBuf {
        self.root.join("projection.json")
    }
    pub fn verdicts(&self) -> PathBuf {
        self.root.join("verdicts.jsonl")
    }

    /// Run root containing a stage directory or artifact, found by walking
    /// up to the first ancestor with a `sim` or `prep` subdirectory.
    pub fn containing(path: &Path) -> Option<Self> {
        path.ancestors()
            .skip(1)
            .find(|a| a.join("sim").is_dir() || a.join("prep").is_dir())
            .map(Self::new)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Ban,
    Clear,
    Undecided,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub q: f64,
    pub cluster: i64,
    pub decision: Decision,
    #[serde(default)]
    pub note: String,
    /// Unix seconds.
    pub timestamp: u64,
}

/// Appends one verdict as a JSON line. Callers serialize writers.
pub fn append_verdict(path: &Path, v: &Verdict) -> Result<()> {
    let mut line = serde_json::to_string(v).map_err(|e| Error::format("verdict", e.to_string()))?;
    line.push('\n');
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    f.sync_data().map_err(|e| Error::io(path, e))
}

/// Full history in append order; a missing log is empty.
pub fn read_verdicts(path: &Path) -> Result<Vec<Verdict>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::format("verdict log", format!("line {}: {e}", i + 1)))
        })
        .collect()
}

/// Latest verdict per cluster for one q.
pub fn current_verdicts(history: &[Verdict], q: f64) -> BTreeMap<i64, Verdict> {
    let mut out = BTreeMap::new();
    for v in history.iter().filter(|v| v.q == q) {
        out.insert(v.cluster, v.clone());
    }
    out
}
