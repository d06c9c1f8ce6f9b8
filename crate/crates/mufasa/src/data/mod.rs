//! Corpus types, synthetic generation, the collaborative-filtering oracle,
//! file I/O, and train/test split protocols.

pub mod cf;
pub mod io;
pub mod split;
pub mod synthetic;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mfl::ModalityBundle;
use crate::tensor::Tensor;

/// One catalog item: a stack of modality vectors plus its title and
/// collaborative-filtering anchors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: String,
    /// `M` rows of dimension `d`, fixed modality order across the catalog.
    pub modalities: Vec<Vec<f64>>,
    pub title_emb: Vec<f64>,
    pub cf_emb: Vec<f64>,
    pub title_token_count: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub genre_label: Option<usize>,
}

/// A user's chronologically ordered interactions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: String,
    pub items: Vec<String>,
    pub timestamps: Vec<i64>,
}

/// Validated item set with an id index.
#[derive(Debug, Clone)]
pub struct Catalog {
    items: Vec<ItemRecord>,
    index: HashMap<String, usize>,
    dim: usize,
    modalities: usize,
}

impl Catalog {
    pub fn new(items: Vec<ItemRecord>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::EmptySample("catalog has no items".to_string()));
        }
        let dim = items[0].title_emb.len();
        let modalities = items[0].modalities.len();
        let mut index = HashMap::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            if item.modalities.len() != modalities {
                return Err(Error::DimensionMismatch {
                    context: format!("modality count of item `{}`", item.item_id),
                    left: vec![modalities],
                    right: vec![item.modalities.len()],
                });
            }
            for row in &item.modalities {
                if row.len() != dim {
                    return Err(Error::DimensionMismatch {
                        context: format!("modality row of item `{}`", item.item_id),
                        left: vec![dim],
                        right: vec![row.len()],
                    });
                }
            }
            if item.title_emb.len() != dim || item.cf_emb.len() != dim {
                return Err(Error::DimensionMismatch {
                    context: format!("anchor vectors of item `{}`", item.item_id),
                    left: vec![dim],
                    right: vec![item.title_emb.len(), item.cf_emb.len()],
                });
            }
            let all = item
                .modalities
                .iter()
                .flatten()
                .chain(&item.title_emb)
                .chain(&item.cf_emb);
            if all.into_iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("item `{}`", item.item_id)));
            }
            if index.insert(item.item_id.clone(), i).is_some() {
                return Err(Error::Config(format!(
                    "duplicate item id `{}`",
                    item.item_id
                )));
            }
        }
        Ok(Catalog {
            items,
            index,
            dim,
            modalities,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn modalities(&self) -> usize {
        self.modalities
    }

    pub fn items(&self) -> &[ItemRecord] {
        &self.items
    }

    pub fn item(&self, idx: usize) -> &ItemRecord {
        &self.items[idx]
    }

    pub fn index_of(&self, item_id: &str) -> Option<usize> {
        self.index.get(item_id).copied()
    }

    pub fn set_cf_emb(&mut self, idx: usize, cf: Vec<f64>) {
        self.items[idx].cf_emb = cf;
    }

    pub fn bundle(&self, idx: usize) -> Result<ModalityBundle> {
        let item = &self.items[idx];
        ModalityBundle::new(item.item_id.clone(), Tensor::from_rows(&item.modalities)?)
    }

    pub fn title_tensor(&self, idx: usize) -> Tensor {
        Tensor::row(self.items[idx].title_emb.clone())
    }

    pub fn cf_tensor(&self, idx: usize) -> Tensor {
        Tensor::row(self.items[idx].cf_emb.clone())
    }

    /// Flattened `[1, M*d]` modality input of one item.
    pub fn flat_modalities(&self, idx: usize) -> Tensor {
        let item = &self.items[idx];
        let mut data = Vec::with_capacity(self.modalities * self.dim);
        for row in &item.modalities {
            data.extend_from_slice(row);
        }
        Tensor::new(vec![1, self.modalities * self.dim], data).expect("validated at construction")
    }
}

/// Resolve a user's item ids to catalog indices.
pub fn resolve_items(catalog: &Catalog, user: &UserRecord) -> Result<Vec<usize>> {
    user.items
        .iter()
        .map(|id| {
            catalog.index_of(id).ok_or_else(|| Error::UnknownItem {
                item_id: id.clone(),
                path: "<memory>".to_string(),
                line: 0,
            })
        })
        .collect()
}
