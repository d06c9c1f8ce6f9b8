//! Matrix-factorization oracle for collaborative-filtering embeddings.
//!
//! Implicit-feedback logistic factorization over observed (user, item)
//! pairs with uniformly sampled unobserved negatives. The trained item
//! factors become each item's cf anchor; items with no interactions get a
//! zero vector and a cold-start flag.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::randn_scalar;

use super::{resolve_items, Catalog, UserRecord};

/// Negatives sampled per observed pair.
const NEGATIVES_PER_POSITIVE: usize = 4;
const LEARNING_RATE: f64 = 0.05;
const L2_REG: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CfOracleOutput {
    /// Item factors, one row per catalog item.
    pub item_factors: Vec<Vec<f64>>,
    /// User factors, aligned with the input user order.
    pub user_factors: Vec<Vec<f64>>,
    /// Items that never appeared in an interaction.
    pub cold_items: Vec<bool>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Train the factorization and return per-item cf embeddings of dimension
/// `rank`. Deterministic in (inputs, seed).
pub fn cf_oracle(
    users: &[UserRecord],
    catalog: &Catalog,
    rank: usize,
    epochs: usize,
    seed: u64,
) -> Result<CfOracleOutput> {
    let n_items = catalog.len();
    let mut positives: Vec<(usize, usize)> = Vec::new();
    let mut observed: HashSet<(usize, usize)> = HashSet::new();
    for (u, user) in users.iter().enumerate() {
        for idx in resolve_items(catalog, user)? {
            positives.push((u, idx));
            observed.insert((u, idx));
        }
    }
    if positives.is_empty() {
        return Err(Error::EmptySample(
            "cf oracle needs at least one interaction".to_string(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..rank).map(|_| 0.1 * randn_scalar(rng)).collect()
    };
    let mut user_factors: Vec<Vec<f64>> = (0..users.len()).map(|_| init(&mut rng)).collect();
    let mut item_factors: Vec<Vec<f64>> = (0..n_items).map(|_| init(&mut rng)).collect();

    let mut order: Vec<usize> = (0..positives.len()).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for &pi in &order {
            let (u, i) = positives[pi];
            sgd_update(&mut user_factors[u], &mut item_factors[i], 1.0);
            for _ in 0..NEGATIVES_PER_POSITIVE {
                let mut j = rng.gen_range(0..n_items);
                let mut tries = 0;
                while observed.contains(&(u, j)) && tries < 8 {
                    j = rng.gen_range(0..n_items);
                    tries += 1;
                }
                sgd_update(&mut user_factors[u], &mut item_factors[j], 0.0);
            }
        }
    }

    let mut cold_items = vec![true; n_items];
    for &(_, i) in &positives {
        cold_items[i] = false;
    }
    for (i, cold) in cold_items.iter().enumerate() {
        if *cold {
            item_factors[i] = vec![0.0; rank];
            log::warn!("item `{}` has no interactions; cold-start zero cf", catalog.item(i).item_id);
        }
    }

    Ok(CfOracleOutput {
        item_factors,
        user_factors,
        cold_items,
    })
}

fn sgd_update(p: &mut [f64], q: &mut [f64], label: f64) {
    let score: f64 = p.iter().zip(q.iter()).map(|(a, b)| a * b).sum();
    let err = sigmoid(score) - label;
    for k in 0..p.len() {
        let (pk, qk) = (p[k], q[k]);
        p[k] -= LEARNING_RATE * (err * qk + L2_REG * pk);
        q[k] -= LEARNING_RATE * (err * pk + L2_REG * qk);
    }
}

/// Write oracle factors into the catalog's cf embeddings.
pub fn apply_cf_embeddings(catalog: &mut Catalog, output: &CfOracleOutput) {
    for (i, factors) in output.item_factors.iter().enumerate() {
        catalog.set_cf_emb(i, factors.clone());
    }
}
