//! Run-directory layout and binary checkpoint format.
//!
//! ```text
//! out/<run_id>/
//!   config.json     — the RunConfig, verbatim
//!   arms.json       — which models the run trained (loss, task lanes, file)
//!   model-arm0.ckpt — checkpoint per arm (single-task variants have one per task)
//!   losses.csv      — per-epoch, per-task loss breakdown
//!   metrics.csv     — per-η, per-task accuracy (written by evaluate)
//!   curves.svg      — accuracy vs η
//!   gs_selection.json — grid-search candidates and winner (gs runs only)
//! ```
//!
//! Checkpoints are a flat named-buffer format: magic `MTCK`, version u16,
//! entry count u32 (big-endian), then per entry: name length u16 + UTF-8
//! name, dim count u8, dims u32 each, and the f64 little-endian values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mtvib_core::multitask::LossSpec;

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};

pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(cfg: &RunConfig) -> Result<RunDir> {
        let root = cfg.run_dir();
        fs::create_dir_all(&root).map_err(|e| HarnessError::io(&root, e))?;
        Ok(RunDir { root })
    }

    pub fn open(root: impl Into<PathBuf>) -> RunDir {
        RunDir { root: root.into() }
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn arms_path(&self) -> PathBuf {
        self.root.join("arms.json")
    }

    pub fn checkpoint_path(&self, arm: usize) -> PathBuf {
        self.root.join(format!("model-arm{arm}.ckpt"))
    }

    pub fn losses_path(&self) -> PathBuf {
        self.root.join("losses.csv")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn curves_path(&self) -> PathBuf {
        self.root.join("curves.svg")
    }

    pub fn gs_selection_path(&self) -> PathBuf {
        self.root.join("gs_selection.json")
    }

    pub fn write_config(&self, cfg: &RunConfig) -> Result<()> {
        write_json(&self.config_path(), cfg)
    }

    pub fn read_config(&self) -> Result<RunConfig> {
        read_json(&self.config_path())
    }

    pub fn write_text(&self, path: &Path, text: &str) -> Result<()> {
        fs::write(path, text).map_err(|e| HarnessError::io(path, e))
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| HarnessError::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::json(path, e))
}

// ---- arms manifest -----------------------------------------------------

/// Serializable mirror of [`LossSpec`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossSpecCfg {
    PlainCe,
    Vib { beta: f64 },
    Gs { weights: Vec<f64> },
    Uwl,
    Mtvib { beta: f64 },
}

impl LossSpecCfg {
    pub fn from_spec(spec: &LossSpec) -> LossSpecCfg {
        match spec {
            LossSpec::PlainCe => LossSpecCfg::PlainCe,
            LossSpec::Vib { beta } => LossSpecCfg::Vib { beta: *beta },
            LossSpec::Gs { weights } => LossSpecCfg::Gs { weights: weights.clone() },
            LossSpec::Uwl => LossSpecCfg::Uwl,
            LossSpec::Mtvib { beta } => LossSpecCfg::Mtvib { beta: *beta },
        }
    }

    pub fn to_spec(&self) -> LossSpec {
        match self {
            LossSpecCfg::PlainCe => LossSpec::PlainCe,
            LossSpecCfg::Vib { beta } => LossSpec::Vib { beta: *beta },
            LossSpecCfg::Gs { weights } => LossSpec::Gs { weights: weights.clone() },
            LossSpecCfg::Uwl => LossSpec::Uwl,
            LossSpecCfg::Mtvib { beta } => LossSpec::Mtvib { beta: *beta },
        }
    }
}

/// One trained model of a run: joint variants have a single arm over all
/// tasks, single-task variants one arm per task.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ArmManifest {
    pub loss: LossSpecCfg,
    /// Dataset label lanes this arm's heads serve, in head order.
    pub task_lanes: Vec<usize>,
    pub checkpoint: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ArmsManifest {
    pub arms: Vec<ArmManifest>,
}

// ---- checkpoint binary format -------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"MTCK";
const CKPT_VERSION: u16 = 1;

pub type StateEntries = Vec<(String, Vec<usize>, Vec<f64>)>;

pub fn checkpoint_bytes(entries: &StateEntries) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_be_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_be_bytes());
    for (name, shape, values) in entries {
        out.extend_from_slice(&(name.len() as u16).to_be_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        for &v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<StateEntries> {
    let bad = |msg: String| HarnessError::Report(format!("checkpoint: {msg}"));
    let mut at = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if at + n > bytes.len() {
            return Err(bad(format!("truncated at byte {at} (wanted {n} more)")));
        }
        let s = &bytes[at..at + n];
        at += n;
        Ok(s)
    };

    let magic = take(4)?;
    if magic != CKPT_MAGIC {
        return Err(bad(format!("magic {magic:?}, expected \"MTCK\"")));
    }
    let version = u16::from_be_bytes(take(2)?.try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(bad(format!("version {version}, this build reads {CKPT_VERSION}")));
    }
    let count = u32::from_be_bytes(take(4)?.try_into().unwrap()) as usize;

    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_be_bytes(take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(name_len)?.to_vec())
            .map_err(|e| bad(format!("entry name not UTF-8: {e}")))?;
        let ndims = take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(u32::from_be_bytes(take(4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(numel * 8)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, shape, values));
    }
    if at != bytes.len() {
        return Err(bad(format!("{} trailing bytes after {count} entries", bytes.len() - at)));
    }
    Ok(entries)
}

pub fn write_checkpoint(path: &Path, entries: &StateEntries) -> Result<()> {
    fs::write(path, checkpoint_bytes(entries)).map_err(|e| HarnessError::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<StateEntries> {
    let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    parse_checkpoint(&bytes)
}
