//! Run configuration: every flag of the CLI, serialized verbatim into the
//! run directory as `config.json` — the single source of truth for a run.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use mtvib_core::data::Source;
use mtvib_core::models::{InputKind, Preset as CorePreset, Variant as CoreVariant};

use crate::error::{HarnessError, Result};

/// Trained variant. `gs` and `uwl` train the MTL architecture under their
/// respective weighting schemes; `stl`/`stvib` train one model per task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Stl,
    Mtl,
    Stvib,
    Mtvib,
    Gs,
    Uwl,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Stl => "stl",
            Variant::Mtl => "mtl",
            Variant::Stvib => "stvib",
            Variant::Mtvib => "mtvib",
            Variant::Gs => "gs",
            Variant::Uwl => "uwl",
        }
    }

    /// The architecture family backing this training variant.
    pub fn architecture(self) -> CoreVariant {
        match self {
            Variant::Stl => CoreVariant::Stl,
            Variant::Stvib => CoreVariant::Stvib,
            Variant::Mtvib => CoreVariant::Mtvib,
            Variant::Mtl | Variant::Gs | Variant::Uwl => CoreVariant::Mtl,
        }
    }

    pub fn is_vib(self) -> bool {
        matches!(self, Variant::Stvib | Variant::Mtvib)
    }

    pub fn is_single_task(self) -> bool {
        matches!(self, Variant::Stl | Variant::Stvib)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Desk,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        }
    }

    pub fn core(self) -> CorePreset {
        match self {
            Preset::Paper => CorePreset::Paper,
            Preset::Desk => CorePreset::Desk,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DatasetArg {
    Mnist,
    Fashion,
}

impl DatasetArg {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetArg::Mnist => "mnist",
            DatasetArg::Fashion => "fashion",
        }
    }

    pub fn source(self) -> Source {
        match self {
            DatasetArg::Mnist => Source::Mnist,
            DatasetArg::Fashion => Source::Fashion,
        }
    }
}

/// Everything a run needs, mirrored one-to-one by the CLI flags.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    pub variant: Variant,
    pub preset: Preset,
    pub dataset: DatasetArg,
    pub tasks: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta: f64,
    /// Latent width override; `None` takes the preset's width.
    pub latent_dim: Option<usize>,
    pub seed: u64,
    pub etas: Vec<f64>,
    pub n_train: usize,
    pub n_test: usize,
    /// Latent samples averaged at evaluation; 0 = deterministic z = μ.
    pub sample_eval: usize,
    /// Task-1 weights for the GS grid (two-task runs only); `None` takes
    /// the full canonical grid.
    pub gs_w1: Option<Vec<f64>>,
    /// Epochs spent on each GS grid candidate before the winner is
    /// retrained in full.
    pub gs_select_epochs: usize,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl RunConfig {
    /// Preset defaults for a (variant, dataset) pair. Paper scale: 200
    /// epochs, batch 200, lr 1e-4, β=1e-3, d=256, 120k/10k pairs. Desk
    /// scale: 10 epochs, d=32, 10k/2k pairs, same batch/lr/β.
    pub fn preset_defaults(variant: Variant, preset: Preset, dataset: DatasetArg) -> RunConfig {
        let (epochs, latent, n_train, n_test) = match preset {
            Preset::Paper => (200, 256, 120_000, 10_000),
            Preset::Desk => (10, 32, 10_000, 2_000),
        };
        RunConfig {
            variant,
            preset,
            dataset,
            tasks: 2,
            epochs,
            batch: 200,
            lr: 1e-4,
            beta: 1e-3,
            latent_dim: Some(latent),
            seed: 1,
            etas: mtvib_core::attack::STANDARD_ETAS.to_vec(),
            n_train,
            n_test,
            sample_eval: 0,
            gs_w1: None,
            gs_select_epochs: 2,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks < 1 {
            return Err(HarnessError::Config("tasks must be ≥ 1".into()));
        }
        if self.epochs < 1 {
            return Err(HarnessError::Config("epochs must be ≥ 1".into()));
        }
        if self.batch < 2 {
            return Err(HarnessError::Config(
                "batch must be ≥ 2 (batch statistics need more than one row)".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(HarnessError::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.beta >= 0.0) {
            return Err(HarnessError::Config(format!("beta must be ≥ 0, got {}", self.beta)));
        }
        if self.etas.is_empty() || self.etas.iter().any(|&e| !(e >= 0.0)) {
            return Err(HarnessError::Config("etas must be a non-empty list of values ≥ 0".into()));
        }
        if self.latent_dim == Some(0) {
            return Err(HarnessError::Config("latent-dim must be ≥ 1".into()));
        }
        if let Some(ws) = &self.gs_w1 {
            if self.tasks != 2 {
                return Err(HarnessError::Config("--gs-w1 applies to two-task runs only".into()));
            }
            if ws.is_empty() || ws.iter().any(|&w| !(0.0..=1.0).contains(&w)) {
                return Err(HarnessError::Config("gs-w1 entries must lie in [0, 1]".into()));
            }
        }
        if self.gs_select_epochs < 1 {
            return Err(HarnessError::Config("gs-select-epochs must be ≥ 1".into()));
        }
        if self.sample_eval > 64 {
            return Err(HarnessError::Config("sample-eval beyond 64 draws is unsupported".into()));
        }
        Ok(())
    }

    /// Input geometry: the overlay experiments are 36×36 throughout.
    pub fn input_kind(&self) -> InputKind {
        InputKind::Overlay36
    }

    /// Latent width in effect (override or preset default).
    pub fn latent(&self) -> usize {
        self.latent_dim.unwrap_or(match self.preset {
            Preset::Paper => 256,
            Preset::Desk => 32,
        })
    }

    /// Deterministic run identifier — no timestamps, so identical configs
    /// land in the same directory and reproduce byte-identical artifacts.
    pub fn run_id(&self) -> String {
        format!(
            "{}-{}-{}-k{}-s{}-e{}-b{}",
            self.variant.as_str(),
            self.dataset.as_str(),
            self.preset.as_str(),
            self.tasks,
            self.seed,
            self.epochs,
            beta_tag(self.beta),
        )
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(self.run_id())
    }

    /// The effective β: zero for non-VIB variants (they have no rate term).
    pub fn effective_beta(&self) -> f64 {
        if self.variant.is_vib() {
            self.beta
        } else {
            0.0
        }
    }
}

/// Filesystem-safe β tag: "1e-3" style, "0" for zero.
fn beta_tag(beta: f64) -> String {
    if beta == 0.0 {
        "0".to_string()
    } else {
        format!("{beta:e}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_id_is_deterministic_and_beta_tagged() {
        let mut cfg = RunConfig::preset_defaults(Variant::Mtvib, Preset::Desk, DatasetArg::Mnist);
        cfg.seed = 3;
        assert_eq!(cfg.run_id(), "mtvib-mnist-desk-k2-s3-e10-b1e-3");
        cfg.beta = 1e-2;
        assert_eq!(cfg.run_id(), "mtvib-mnist-desk-k2-s3-e10-b1e-2");
        cfg.beta = 0.0;
        assert_eq!(cfg.run_id(), "mtvib-mnist-desk-k2-s3-e10-b0");
    }

    #[test]
    fn config_json_round_trips() {
        let cfg = RunConfig::preset_defaults(Variant::Gs, Preset::Desk, DatasetArg::Fashion);
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn paper_defaults_match_the_published_settings() {
        let cfg = RunConfig::preset_defaults(Variant::Mtvib, Preset::Paper, DatasetArg::Mnist);
        assert_eq!(cfg.epochs, 200);
        assert_eq!(cfg.batch, 200);
        assert_eq!(cfg.lr, 1e-4);
        assert_eq!(cfg.beta, 1e-3);
        assert_eq!(cfg.latent(), 256);
        assert_eq!((cfg.n_train, cfg.n_test), (120_000, 10_000));
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let mut cfg = RunConfig::preset_defaults(Variant::Mtl, Preset::Desk, DatasetArg::Mnist);
        cfg.batch = 1;
        assert!(cfg.validate().is_err());
    }
}
