//! Resolved run specifications. Every command materializes all defaults
//! into a [`RunSpec`], writes it to the output directory as
//! `manifest.json`, and executes from the resolved spec alone — re-running
//! a manifest reproduces the run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use gmae_core::graph::{parse_jsonl_graphs, parse_tu_dataset, GraphDataset};
use gmae_core::model::GmaeConfig;
use gmae_core::train::{FinetuneConfig, TrainConfig};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Tu,
    Jsonl,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub folds: usize,
    pub repeats: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            folds: 10,
            repeats: 5,
        }
    }
}

/// A fully explicit run description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSpec {
    pub command: String,
    pub format: Option<DataFormat>,
    pub data: Option<PathBuf>,
    pub name: Option<String>,
    pub gmae: GmaeConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalSpec,
    pub ckpt: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub ratios: Vec<f64>,
    pub depths: Vec<usize>,
    pub sizes: Vec<usize>,
    pub out: PathBuf,
    pub seed: u64,
    pub jobs: usize,
}

impl RunSpec {
    /// Flag-level validation with messages that name the offending flag.
    pub fn validate(&self) -> Result<(), CliError> {
        if !(self.gmae.mask_ratio > 0.0 && self.gmae.mask_ratio < 1.0) {
            return Err(CliError::config(format!(
                "--mask-ratio must lie strictly between 0 and 1, got {}",
                self.gmae.mask_ratio
            )));
        }
        if self.gmae.hidden == 0
            || self.gmae.heads == 0
            || !self.gmae.hidden.is_multiple_of(self.gmae.heads)
        {
            return Err(CliError::config(format!(
                "--hidden ({}) must be a positive multiple of --heads ({})",
                self.gmae.hidden, self.gmae.heads
            )));
        }
        if self.gmae.enc_layers == 0 || self.gmae.dec_layers == 0 {
            return Err(CliError::config(
                "--enc-layers and --dec-layers must be at least 1".into(),
            ));
        }
        if !(self.train.end_lr > 0.0 && self.train.end_lr <= self.train.peak_lr) {
            return Err(CliError::config(format!(
                "--end-lr ({}) must be positive and no larger than --peak-lr ({})",
                self.train.end_lr, self.train.peak_lr
            )));
        }
        if self.train.batch_size == 0 {
            return Err(CliError::config("--batch-size must be at least 1".into()));
        }
        if self.train.max_epochs == 0 {
            return Err(CliError::config("--epochs must be at least 1".into()));
        }
        if self.eval.folds < 2 {
            return Err(CliError::config("--folds must be at least 2".into()));
        }
        if self.eval.repeats == 0 {
            return Err(CliError::config("--repeats must be at least 1".into()));
        }
        if self.jobs == 0 {
            return Err(CliError::config("--jobs must be at least 1".into()));
        }
        for &r in &self.ratios {
            if !(r > 0.0 && r < 1.0) {
                return Err(CliError::config(format!(
                    "--ratios entries must lie strictly between 0 and 1, got {r}"
                )));
            }
        }
        for &d in &self.depths {
            if d == 0 {
                return Err(CliError::config(
                    "--depths entries must be at least 1".into(),
                ));
            }
        }
        for &n in &self.sizes {
            if n < 2 {
                return Err(CliError::config(
                    "--sizes entries must be at least 2".into(),
                ));
            }
        }
        Ok(())
    }

    /// Writes `manifest.json` into the output directory.
    pub fn write_manifest(&self) -> Result<PathBuf, CliError> {
        std::fs::create_dir_all(&self.out)
            .map_err(|e| CliError::data(format!("cannot create {}: {e}", self.out.display())))?;
        let path = self.out.join("manifest.json");
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::runtime(format!("manifest serialization failed: {e}")))?;
        std::fs::write(&path, json + "\n")
            .map_err(|e| CliError::data(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }

    pub fn read_manifest(path: &Path) -> Result<RunSpec, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::data(format!("manifest parse failed: {e}")))
    }

    /// Loads the dataset this spec points at.
    pub fn load_dataset(&self) -> Result<GraphDataset, CliError> {
        let format = self
            .format
            .ok_or_else(|| CliError::config("--format is required".into()))?;
        let data = self
            .data
            .as_ref()
            .ok_or_else(|| CliError::config("--data is required".into()))?;
        let dataset = match format {
            DataFormat::Tu => {
                let name = self
                    .name
                    .as_ref()
                    .ok_or_else(|| CliError::config("--name is required for --format tu".into()))?;
                parse_tu_dataset(data, name)?
            }
            DataFormat::Jsonl => parse_jsonl_graphs(data)?,
        };
        if dataset.stats.self_loops_dropped > 0 || dataset.stats.duplicate_edges_dropped > 0 {
            eprintln!(
                "note: dropped {} self-loops and {} duplicate undirected edges during parsing",
                dataset.stats.self_loops_dropped, dataset.stats.duplicate_edges_dropped
            );
        }
        Ok(dataset)
    }
}
