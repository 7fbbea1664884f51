//! Stage records, content digests and the on-disk window store.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{hex, PipelineConfig, Stage};
use crate::autodiff::checkpoint::{decode_f64, encode_f64};
use crate::error::{Error, Result};
use crate::signal::{WindowKey, WindowPair};

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// `rel` with forward slashes, for stable keys across platforms.
pub(crate) fn rel_key(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Collects the files a stage writes, with digests keyed relative to the
/// run's output root.
pub(crate) struct Outputs<'a> {
    root: &'a Path,
    pub files: BTreeMap<String, String>,
}

impl<'a> Outputs<'a> {
    pub fn new(root: &'a Path) -> Self {
        Self {
            root,
            files: BTreeMap::new(),
        }
    }

    pub fn write(&mut self, path: &Path, contents: &[u8]) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, contents).map_err(|e| Error::io(path, e))?;
        self.files.insert(rel_key(self.root, path), hex(&Sha256::digest(contents)));
        Ok(())
    }

    /// Registers a file written by another routine.
    pub fn track(&mut self, path: &Path) -> Result<()> {
        self.files.insert(rel_key(self.root, path), file_digest(path)?);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub config_hash: String,
    pub seed: u64,
    /// Digests of the prerequisite outputs this stage consumed.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub warnings: Vec<String>,
    pub wall_clock_s: f64,
}

impl StageRecord {
    pub fn path(out: &Path, stage: Stage) -> PathBuf {
        out.join("stages").join(format!("{}.json", stage.name()))
    }

    pub fn load(out: &Path, stage: Stage) -> Result<Option<Self>> {
        let path = Self::path(out, stage);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map(Some).map_err(|e| Error::parse(&path, e))
    }

    pub fn save(&self, out: &Path) -> Result<()> {
        let path = Self::path(out, self.stage);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string_pretty(self).expect("record serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Re-hashes every recorded output; a mismatch is a stale-input error.
    pub fn verify(&self, out: &Path) -> Result<()> {
        for (rel, expected) in &self.outputs {
            let path = out.join(rel);
            let found = if path.exists() { file_digest(&path)? } else { "missing".to_string() };
            if &found != expected {
                return Err(Error::StaleInput {
                    path,
                    expected: expected.clone(),
                    found,
                });
            }
        }
        Ok(())
    }
}

/// Loads and verifies the records of `stage`'s prerequisites and returns the
/// digests they vouch for.
pub(crate) fn check_prerequisites(cfg: &PipelineConfig, stage: Stage) -> Result<BTreeMap<String, String>> {
    let mut inputs = BTreeMap::new();
    for &pre in stage.prerequisites(cfg.paths.input_dir.is_some()) {
        let rec = StageRecord::load(cfg.out(), pre)?.ok_or_else(|| Error::StageOrder {
            stage: stage.name(),
            prerequisite: pre.name(),
            detail: format!("no record at {}", StageRecord::path(cfg.out(), pre).display()),
        })?;
        rec.verify(cfg.out())?;
        // A prerequisite rerun after its own inputs changed is stale too.
        for &up in pre.prerequisites(cfg.paths.input_dir.is_some()) {
            if let Some(up_rec) = StageRecord::load(cfg.out(), up)? {
                for (rel, digest) in &rec.inputs {
                    if let Some(now) = up_rec.outputs.get(rel) {
                        if now != digest {
                            return Err(Error::StaleInput {
                                path: cfg.out().join(rel),
                                expected: digest.clone(),
                                found: now.clone(),
                            });
                        }
                    }
                }
            }
        }
        inputs.extend(rec.outputs);
    }
    Ok(inputs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: Stage,
    pub wall_clock_s: f64,
}

/// Provenance of a whole run, written next to (not into) the report bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    pub stages: Vec<StageTiming>,
    /// Every emitted file with its SHA-256.
    pub files: BTreeMap<String, String>,
}

impl RunRecord {
    pub fn path(out: &Path) -> PathBuf {
        out.join("run_record.json")
    }

    pub fn load(out: &Path) -> Result<Self> {
        let path = Self::path(out);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(&path, e))
    }
}

#[derive(Serialize, Deserialize)]
struct StoredWindow {
    session_id: String,
    trial_id: String,
    window_index: usize,
    start_sample: usize,
    eeg: String,
    target: String,
}

/// Windows of one (subject, task) unit in chronological order.
#[derive(Serialize, Deserialize)]
struct StoredUnit {
    subject_id: String,
    task: crate::signal::TaskKind,
    channels: usize,
    windows: Vec<StoredWindow>,
}

pub(crate) fn encode_windows(subject: &str, task: crate::signal::TaskKind, channels: usize, ws: &[WindowPair]) -> String {
    let unit = StoredUnit {
        subject_id: subject.to_string(),
        task,
        channels,
        windows: ws
            .iter()
            .map(|w| StoredWindow {
                session_id: w.key.session_id.clone(),
                trial_id: w.key.trial_id.clone(),
                window_index: w.window_index,
                start_sample: w.start_sample,
                eeg: encode_f64(&w.eeg),
                target: encode_f64(&w.target),
            })
            .collect(),
    };
    serde_json::to_string(&unit).expect("windows serialize") + "\n"
}

pub(crate) fn load_windows(path: &Path) -> Result<Vec<WindowPair>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let unit: StoredUnit = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
    unit.windows
        .into_iter()
        .map(|w| {
            let eeg = decode_f64(&w.eeg)?;
            let target = decode_f64(&w.target)?;
            if eeg.len() != unit.channels * target.len() {
                return Err(Error::parse(path, "window EEG and target lengths disagree"));
            }
            Ok(WindowPair {
                eeg,
                channels: unit.channels,
                target,
                key: WindowKey {
                    subject_id: unit.subject_id.clone(),
                    session_id: w.session_id,
                    trial_id: w.trial_id,
                    task: unit.task,
                },
                window_index: w.window_index,
                start_sample: w.start_sample,
            })
        })
        .collect()
}
