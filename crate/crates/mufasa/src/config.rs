//! Operator-facing run configuration: one TOML file plus flag overrides.
//!
//! Every field is validated before a command does any work, and unknown
//! keys are rejected at parse time. The top-level `seed` drives every
//! seeded stage (generation, the cf oracle, training).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::split::SplitSpec;
use crate::data::synthetic::SyntheticConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::train::{PipelineConfig, TrainConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; copied into every seeded stage when the config resolves.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Item file; defaults to `<out_dir>/items.jsonl`.
    pub data_items: Option<PathBuf>,
    /// Interaction file; defaults to `<out_dir>/interactions.jsonl`.
    pub data_interactions: Option<PathBuf>,
    /// Checkpoint path; defaults to `<out_dir>/checkpoint.json`.
    pub checkpoint: Option<PathBuf>,
    pub variant: Variant,
    pub synthetic: SyntheticConfig,
    /// Epochs of the matrix-factorization oracle during data generation.
    pub cf_epochs: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub eval_ks: Vec<usize>,
    /// Sequence lengths swept by the cost benchmark.
    pub bench_lengths: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            out_dir: PathBuf::from("runs/default"),
            data_items: None,
            data_interactions: None,
            checkpoint: None,
            variant: Variant::Full,
            synthetic: SyntheticConfig::default(),
            cf_epochs: 10,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            split: SplitSpec::default(),
            eval_ks: vec![5, 10, 20, 50, 100],
            bench_lengths: vec![40, 80, 160, 320],
        }
    }
}

/// Flag-level overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub data_items: Option<PathBuf>,
    pub data_interactions: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub variant: Option<Variant>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    Error::Io(std::io::Error::new(
                        e.kind(),
                        format!("config `{}`: {e}", p.display()),
                    ))
                })?;
                toml::from_str(&text).map_err(|e| Error::Config(format!(
                    "config `{}`: {e}",
                    p.display()
                )))?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &overrides.out_dir {
            cfg.out_dir = out.clone();
        }
        if let Some(p) = &overrides.data_items {
            cfg.data_items = Some(p.clone());
        }
        if let Some(p) = &overrides.data_interactions {
            cfg.data_interactions = Some(p.clone());
        }
        if let Some(p) = &overrides.checkpoint {
            cfg.checkpoint = Some(p.clone());
        }
        if let Some(v) = overrides.variant {
            cfg.variant = v;
        }
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Propagate the master seed into the per-stage seeds.
    fn resolve(&mut self) {
        self.synthetic.seed = self.seed;
        self.train.seed = self.seed;
        if self.synthetic.dim != self.model.dim {
            self.synthetic.dim = self.model.dim;
        }
        if self.synthetic.modalities != self.model.modalities {
            self.synthetic.modalities = self.model.modalities;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.eval_ks.is_empty() || self.eval_ks.iter().any(|k| *k == 0) {
            return Err(Error::Config(
                "eval_ks must be a non-empty list of positive ranks".to_string(),
            ));
        }
        if self.bench_lengths.is_empty() || self.bench_lengths.iter().any(|l| *l < 2) {
            return Err(Error::Config(
                "bench_lengths must be a non-empty list of lengths >= 2".to_string(),
            ));
        }
        if self.cf_epochs == 0 {
            return Err(Error::Config("cf_epochs must be >= 1".to_string()));
        }
        Ok(())
    }

    pub fn items_path(&self) -> PathBuf {
        self.data_items
            .clone()
            .unwrap_or_else(|| self.out_dir.join("items.jsonl"))
    }

    pub fn interactions_path(&self) -> PathBuf {
        self.data_interactions
            .clone()
            .unwrap_or_else(|| self.out_dir.join("interactions.jsonl"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("checkpoint.json"))
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            model: self.model.clone(),
            train: self.train.clone(),
            split: self.split.clone(),
            eval_ks: self.eval_ks.clone(),
        }
    }
}
