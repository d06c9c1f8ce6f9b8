//! Model assembly: the fusion network plus the attention layer under one
//! parameter set, with ablation variants and checkpointing.

use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Catalog;
use crate::error::{Error, Result};
use crate::mfl::{FusionNetwork, MflConfig};
use crate::params::ParamSet;
use crate::sal::{self, SalConfig, SalParams};
use crate::tensor::Tensor;

/// Which parts of the architecture are active. The ablations mirror the
/// model's two headline components plus a dense-attention control.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Fusion network + all three attention heads.
    Full,
    /// Fusion replaced by the unweighted mean of the modality rows; no
    /// fusion losses are trained.
    NoMfl,
    /// Attention replaced by mean pooling of the sequence; the contrastive
    /// objective (and item scoring projection) remain.
    NoSal,
    /// The three heads replaced by one dense single-query attention over
    /// all items with a single projection triple.
    FullAttention,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoMfl,
        Variant::NoSal,
        Variant::FullAttention,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoMfl => "no-mfl",
            Variant::NoSal => "no-sal",
            Variant::FullAttention => "full-attention",
        }
    }

    pub fn uses_mfl(&self) -> bool {
        !matches!(self, Variant::NoMfl)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "no-mfl" | "no_mfl" => Ok(Variant::NoMfl),
            "no-sal" | "no_sal" => Ok(Variant::NoSal),
            "full-attention" | "full_attention" => Ok(Variant::FullAttention),
            other => Err(Error::Config(format!(
                "unknown variant `{other}` (expected full, no-mfl, no-sal, full-attention)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub modalities: usize,
    pub mfl: MflConfig,
    pub sal: SalConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 32,
            modalities: 4,
            mfl: MflConfig::default(),
            sal: SalConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.modalities == 0 {
            return Err(Error::Config("dim and modalities must be >= 1".to_string()));
        }
        self.mfl.validate()?;
        self.sal.validate()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    pub cfg: ModelConfig,
    pub variant: Variant,
    pub params: ParamSet,
    pub init_seed: u64,
}

impl Model {
    /// Seeded initialization of exactly the parameters the variant uses.
    pub fn init(cfg: ModelConfig, variant: Variant, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let d = cfg.dim;
        if variant.uses_mfl() {
            FusionNetwork::new(cfg.modalities, d).init_params(&mut params, &mut rng);
        }
        match variant {
            Variant::Full | Variant::NoMfl => {
                SalParams::new(d).init_params(&mut params, &mut rng);
            }
            Variant::NoSal => {
                let s = (1.0 / d as f64).sqrt();
                params.insert("sal.item.w", Tensor::randn(vec![d, d], s, &mut rng));
            }
            Variant::FullAttention => {
                let s = (1.0 / d as f64).sqrt();
                for name in ["wq", "wk", "wv"] {
                    params.insert(
                        &format!("sal.full.{name}"),
                        Tensor::randn(vec![d, d], s, &mut rng),
                    );
                }
                params.insert("sal.item.w", Tensor::randn(vec![d, d], s, &mut rng));
            }
        }
        Ok(Model {
            cfg,
            variant,
            params,
            init_seed: seed,
        })
    }

    pub fn fusion_network(&self) -> FusionNetwork {
        FusionNetwork::new(self.cfg.modalities, self.cfg.dim)
    }

    /// Fused embedding of one catalog item under the variant's fusion rule.
    pub fn fused_item(&self, catalog: &Catalog, idx: usize) -> Result<Tensor> {
        if self.variant.uses_mfl() {
            self.fusion_network()
                .forward_plain(&self.params, &catalog.flat_modalities(idx))
        } else {
            let bundle = catalog.bundle(idx)?;
            bundle.features.mean_rows()
        }
    }

    /// Fused embeddings for the whole catalog, index-aligned.
    pub fn fused_item_table(&self, catalog: &Catalog) -> Result<Vec<Tensor>> {
        (0..catalog.len())
            .map(|i| self.fused_item(catalog, i))
            .collect()
    }

    /// The user embedding for a sequence of fused item rows `[L, d]`.
    pub fn user_embedding(&self, seq: &Tensor) -> Result<Tensor> {
        match self.variant {
            Variant::Full | Variant::NoMfl => {
                Ok(sal::forward_user(&self.params, seq, &self.cfg.sal)?.user_emb)
            }
            Variant::NoSal => seq.mean_rows(),
            Variant::FullAttention => {
                let query = seq.gather_rows(&[seq.rows() - 1])?;
                let (_, out) = sal::dense_single_query(
                    &query,
                    seq,
                    self.params.value("sal.full.wq")?,
                    self.params.value("sal.full.wk")?,
                    self.params.value("sal.full.wv")?,
                )?;
                Ok(out)
            }
        }
    }

    /// Cosine of the user embedding against the scoring projection of a
    /// fused item embedding.
    pub fn score(&self, user_emb: &Tensor, item_fused: &Tensor) -> Result<f64> {
        sal::score(&self.params, user_emb, item_fused)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serialize checkpoint: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("checkpoint `{}`: {e}", path.display()),
            ))
        })?;
        let model: Model = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })?;
        model.cfg.validate()?;
        Ok(model)
    }
}

/// Hex SHA-256 of a value's canonical JSON; used to stamp reports and
/// manifests with the exact configuration that produced them.
pub fn config_fingerprint<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
