//! Synthetic corpus with planted interest structure.
//!
//! Genres are near-orthogonal unit prototypes. An item's modality rows are
//! noisy copies of its genre prototype, with noise growing across the
//! modality index, except the last row(s), which are noisy copies of a
//! *different* genre's prototype — a planted cross-modal conflict (think
//! misleading audio under a cooking video). Unweighted averaging mixes the
//! conflict in; a trained fusion can learn to suppress it. User sequences
//! are concatenated same-genre runs drawn from small per-run focus sets,
//! so interest blocks exist by construction and the final item is
//! predictable from the most recent run.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{orthonormal_rows, randn_scalar};

use super::{Catalog, ItemRecord, UserRecord};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_genres: usize,
    pub dim: usize,
    pub modalities: usize,
    pub items_per_genre: usize,
    pub num_users: usize,
    /// Consecutive same-genre interactions per run, inclusive bounds.
    pub run_len_min: usize,
    pub run_len_max: usize,
    /// Each run draws its interactions from this many items of its genre
    /// (a per-run focus set: users binge a few items per session, so the
    /// recent run predicts the next item beyond its genre alone). 0 draws
    /// uniformly from the whole genre.
    pub run_focus_items: usize,
    /// Total sequence length bounds, inclusive.
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    /// Base noise std; modality row `m` gets `(m + 1)` times this.
    pub modality_noise_std: f64,
    pub title_noise_std: f64,
    /// How many trailing modality rows anchor to a wrong genre's prototype
    /// instead of the item's own (the planted cross-modal conflict).
    pub conflict_modalities: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_genres: 8,
            dim: 32,
            modalities: 4,
            items_per_genre: 80,
            num_users: 2000,
            run_len_min: 3,
            run_len_max: 10,
            run_focus_items: 3,
            seq_len_min: 40,
            seq_len_max: 200,
            modality_noise_std: 0.25,
            title_noise_std: 0.1,
            conflict_modalities: 1,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_genres < 2 {
            return Err(Error::Config("need at least 2 genres".to_string()));
        }
        if self.num_genres > self.dim {
            return Err(Error::Config(format!(
                "cannot orthogonalize {} genre prototypes in dimension {}",
                self.num_genres, self.dim
            )));
        }
        if self.run_len_min < 1 || self.run_len_min > self.run_len_max {
            return Err(Error::Config("invalid run-length bounds".to_string()));
        }
        if self.seq_len_min < 2 || self.seq_len_min > self.seq_len_max {
            return Err(Error::Config("invalid sequence-length bounds".to_string()));
        }
        if self.modality_noise_std < 0.0 || self.title_noise_std < 0.0 {
            return Err(Error::Config("noise stds must be >= 0".to_string()));
        }
        if self.items_per_genre < 1 || self.num_users < 1 || self.modalities < 1 {
            return Err(Error::Config("counts must be >= 1".to_string()));
        }
        if self.conflict_modalities >= self.modalities {
            return Err(Error::Config(
                "at least one modality must anchor to the item's own genre".to_string(),
            ));
        }
        Ok(())
    }
}

fn noisy_copy(proto: &[f64], std: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    proto.iter().map(|v| v + std * randn_scalar(rng)).collect()
}

/// Deterministically generate a catalog (cf embeddings left zero; run the
/// cf oracle to fill them) and user sequences.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<(Catalog, Vec<UserRecord>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let prototypes = orthonormal_rows(cfg.num_genres, cfg.dim, &mut rng)?;

    let mut items = Vec::with_capacity(cfg.num_genres * cfg.items_per_genre);
    let faithful = cfg.modalities - cfg.conflict_modalities;
    for g in 0..cfg.num_genres {
        let proto = prototypes.row_slice(g);
        for i in 0..cfg.items_per_genre {
            let modalities: Vec<Vec<f64>> = (0..cfg.modalities)
                .map(|m| {
                    let anchor = if m < faithful {
                        proto
                    } else {
                        // Conflicting modality: some other genre's prototype.
                        let other = (g + 1 + rng.gen_range(0..cfg.num_genres - 1)) % cfg.num_genres;
                        prototypes.row_slice(other)
                    };
                    noisy_copy(anchor, cfg.modality_noise_std * (m + 1) as f64, &mut rng)
                })
                .collect();
            let title_emb = noisy_copy(proto, cfg.title_noise_std, &mut rng);
            let title_token_count = rng.gen_range(4..=12);
            items.push(ItemRecord {
                item_id: format!("g{g:02}_i{i:04}"),
                modalities,
                title_emb,
                cf_emb: vec![0.0; cfg.dim],
                title_token_count,
                genre_label: Some(g),
            });
        }
    }
    let catalog = Catalog::new(items)?;

    let focus = match cfg.run_focus_items {
        0 => cfg.items_per_genre,
        f => f.min(cfg.items_per_genre),
    };
    let mut users = Vec::with_capacity(cfg.num_users);
    for u in 0..cfg.num_users {
        let target_len = rng.gen_range(cfg.seq_len_min..=cfg.seq_len_max);
        let mut item_ids = Vec::with_capacity(target_len);
        while item_ids.len() < target_len {
            let genre = rng.gen_range(0..cfg.num_genres);
            let run = rng.gen_range(cfg.run_len_min..=cfg.run_len_max);
            // The run's focus set: a few distinct items of its genre.
            let mut pool: Vec<usize> = (0..cfg.items_per_genre).collect();
            for s in 0..focus {
                let j = rng.gen_range(s..pool.len());
                pool.swap(s, j);
            }
            let pool = &pool[..focus];
            for _ in 0..run {
                if item_ids.len() == target_len {
                    break;
                }
                let pick = pool[rng.gen_range(0..focus)];
                item_ids.push(format!("g{genre:02}_i{pick:04}"));
            }
        }
        let timestamps = (0..target_len as i64).collect();
        users.push(UserRecord {
            user_id: format!("u{u:05}"),
            items: item_ids,
            timestamps,
        });
    }

    Ok((catalog, users))
}
