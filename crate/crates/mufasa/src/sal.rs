//! Sparse-attention alignment layer.
//!
//! Builds a user embedding from a chronological sequence of fused item
//! embeddings with three attention heads at different granularities, all
//! queried by the most recent item:
//!
//! * window attention over the most recent interactions (short-term),
//! * block attention over aggregated interest blocks (long-term),
//! * selective attention over the items of the most-attended blocks (core).
//!
//! A learned gate mixes the three into one vector. Training is in-batch
//! contrastive: a user and their next item are the positive pair, other
//! users' items the negatives.
//!
//! The window head slices the key rows instead of scoring the whole
//! sequence under a mask; the two formulations produce identical outputs
//! (see [`window_attention_masked`] and the tests that pin them together)
//! but slicing lets the instrumented score-pair counts reflect the sparse
//! access pattern.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Lease, ParamSet};
use crate::tape::{in_batch_infonce, Tape, Var};
use crate::tensor::{softmax_slice, Tensor};

/// A user's chronologically ordered sequence of item embeddings `[L, d]`.
/// The final row is the current item and queries all three heads.
#[derive(Debug, Clone)]
pub struct InteractionSequence {
    pub user_id: String,
    pub embeddings: Tensor,
}

impl InteractionSequence {
    pub fn new(user_id: impl Into<String>, embeddings: Tensor) -> Result<Self> {
        if embeddings.rank() != 2 || embeddings.rows() == 0 {
            return Err(Error::DimensionMismatch {
                context: "interaction sequence expects a non-empty [L, d] matrix".to_string(),
                left: embeddings.shape().to_vec(),
                right: vec![],
            });
        }
        embeddings.check_finite("interaction sequence")?;
        Ok(InteractionSequence {
            user_id: user_id.into(),
            embeddings,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// How block rows are reduced to one block embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregator {
    /// Mean of the rows followed by a learned d×d map (default).
    MeanLinear,
    /// Plain mean pooling.
    MeanPool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SalConfig {
    /// Items per interest block.
    pub block_size: usize,
    /// Number of most-attended blocks granted item-level attention.
    pub top_k: usize,
    /// Temperature of the user–item contrastive objective.
    pub tau: f64,
    /// Include the querying item itself among the window keys. Off by
    /// default: the current item attending to itself is a trivially
    /// perfect key, so the short-term head is more predictive without it.
    pub include_current_in_window: bool,
    /// Fixed window size instead of the length-based protocol.
    pub window_override: Option<usize>,
    pub aggregator: Aggregator,
}

impl Default for SalConfig {
    fn default() -> Self {
        SalConfig {
            block_size: 8,
            top_k: 2,
            tau: 0.07,
            include_current_in_window: false,
            window_override: None,
            aggregator: Aggregator::MeanLinear,
        }
    }
}

impl SalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_size < 1 {
            return Err(Error::Config("block_size must be >= 1".to_string()));
        }
        if self.top_k < 1 {
            return Err(Error::Config("top_k must be >= 1".to_string()));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config("tau must be > 0".to_string()));
        }
        Ok(())
    }

    pub fn window_size_for(&self, len: usize) -> usize {
        match self.window_override {
            Some(w) => w.min(len),
            None => window_size_for(len),
        }
    }
}

/// Length-adaptive window size: 8 for long sequences (> 30), 4 otherwise,
/// clamped to the sequence length.
pub fn window_size_for(len: usize) -> usize {
    let base = if len > 30 { 8 } else { 4 };
    base.min(len)
}

/// 0-based key rows of the window head for a sequence of length `len`.
/// Excludes the querying row unless `include_current` is set.
pub fn window_range(len: usize, w: usize, include_current: bool) -> Range<usize> {
    let lo = (len - 1).saturating_sub(w);
    if include_current {
        lo..len
    } else {
        lo..(len - 1)
    }
}

/// Additive `[1, len]` window mask: 0 inside the window, -inf outside.
pub fn window_mask(len: usize, w: usize, include_current: bool) -> Tensor {
    let range = window_range(len, w, include_current);
    let mut data = vec![f64::NEG_INFINITY; len];
    for j in range {
        data[j] = 0.0;
    }
    Tensor::new(vec![1, len], data).expect("mask shape is consistent")
}

/// Consecutive, non-overlapping index ranges of `block_size` items; the
/// final block keeps whatever remains (it holds the newest interactions).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPartition {
    pub blocks: Vec<Range<usize>>,
}

impl BlockPartition {
    pub fn count(&self) -> usize {
        self.blocks.len()
    }
}

pub fn partition_blocks(len: usize, block_size: usize) -> Result<BlockPartition> {
    if block_size < 1 {
        return Err(Error::Config("block size must be >= 1".to_string()));
    }
    let mut blocks = Vec::with_capacity(len.div_ceil(block_size));
    let mut start = 0;
    while start < len {
        let end = (start + block_size).min(len);
        blocks.push(start..end);
        start = end;
    }
    Ok(BlockPartition { blocks })
}

/// Indices of the `k` largest weights, ties broken toward the lower
/// (older) index; returned in ascending order. `k` larger than the number
/// of blocks is clamped with a warning.
pub fn top_k_blocks(weights: &[f64], k: usize) -> Vec<usize> {
    let b = weights.len();
    let k = if k > b {
        log::warn!("top_k {k} exceeds block count {b}; clamping");
        b
    } else {
        k
    };
    let mut order: Vec<usize> = (0..b).collect();
    order.sort_by(|&i, &j| {
        weights[j]
            .partial_cmp(&weights[i])
            .expect("attention weights are finite")
            .then(i.cmp(&j))
    });
    let mut selected: Vec<usize> = order.into_iter().take(k).collect();
    selected.sort_unstable();
    selected
}

// ── parameters ───────────────────────────────────────────────────────

/// The layer's learnable pieces: three projection triples, the block
/// aggregator map, the gate map `[3d, 3]`, and the item scoring map.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SalParams {
    pub dim: usize,
}

pub struct HeadVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

pub struct SalVars {
    pub window: HeadVars,
    pub block: HeadVars,
    pub select: HeadVars,
    pub aggregator: Var,
    pub gate: Var,
}

const HEAD_PREFIXES: [&str; 3] = ["sal.win", "sal.blk", "sal.sel"];

impl SalParams {
    pub fn new(dim: usize) -> Self {
        SalParams { dim }
    }

    pub fn param_names() -> Vec<String> {
        let mut names: Vec<String> = HEAD_PREFIXES
            .iter()
            .flat_map(|p| ["wq", "wk", "wv"].map(|s| format!("{p}.{s}")))
            .collect();
        names.push("sal.agg.w".to_string());
        names.push("sal.gate.w".to_string());
        names.push("sal.item.w".to_string());
        names
    }

    pub fn init_params<R: Rng>(&self, params: &mut ParamSet, rng: &mut R) {
        let d = self.dim;
        let s = (1.0 / d as f64).sqrt();
        for prefix in HEAD_PREFIXES {
            for name in ["wq", "wk", "wv"] {
                params.insert(&format!("{prefix}.{name}"), Tensor::randn(vec![d, d], s, rng));
            }
        }
        params.insert("sal.agg.w", Tensor::randn(vec![d, d], s, rng));
        params.insert("sal.gate.w", Tensor::zeros(vec![3 * d, 3]));
        params.insert("sal.item.w", Tensor::randn(vec![d, d], s, rng));
    }

    pub fn lease(&self, tape: &mut Tape, lease: &mut Lease, params: &ParamSet) -> Result<SalVars> {
        let head = |lease: &mut Lease, tape: &mut Tape, prefix: &str| -> Result<HeadVars> {
            Ok(HeadVars {
                wq: lease.take(tape, params, &format!("{prefix}.wq"))?,
                wk: lease.take(tape, params, &format!("{prefix}.wk"))?,
                wv: lease.take(tape, params, &format!("{prefix}.wv"))?,
            })
        };
        Ok(SalVars {
            window: head(lease, tape, "sal.win")?,
            block: head(lease, tape, "sal.blk")?,
            select: head(lease, tape, "sal.sel")?,
            aggregator: lease.take(tape, params, "sal.agg.w")?,
            gate: lease.take(tape, params, "sal.gate.w")?,
        })
    }
}

// ── plain (inference) forward ────────────────────────────────────────

/// Score-pair counts observed during one forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub window_pairs: usize,
    pub block_pairs: usize,
    pub select_pairs: usize,
}

impl CostBreakdown {
    pub fn sparse_total(&self) -> usize {
        self.window_pairs + self.block_pairs + self.select_pairs
    }
}

/// The three interest vectors plus the selection evidence behind them.
#[derive(Debug, Clone)]
pub struct InterestVectors {
    /// `None` when the sequence has no history before the current item.
    pub z_short: Option<Tensor>,
    pub z_long: Tensor,
    pub z_core: Tensor,
    pub block_weights: Vec<f64>,
    pub selected: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SalOutput {
    pub user_emb: Tensor,
    pub interest: InterestVectors,
    pub gate_weights: Vec<f64>,
    pub cost: CostBreakdown,
}

struct HeadValues<'p> {
    wq: &'p Tensor,
    wk: &'p Tensor,
    wv: &'p Tensor,
}

fn head_values<'p>(params: &'p ParamSet, prefix: &str) -> Result<HeadValues<'p>> {
    Ok(HeadValues {
        wq: params.value(&format!("{prefix}.wq"))?,
        wk: params.value(&format!("{prefix}.wk"))?,
        wv: params.value(&format!("{prefix}.wv"))?,
    })
}

/// Single-query scaled dot-product attention over `keys` rows; the simple
/// dense formulation used directly by the full-attention ablation variant
/// and as the oracle the sparse heads are checked against.
pub fn dense_single_query(
    query: &Tensor,
    keys: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
) -> Result<(Vec<f64>, Tensor)> {
    if keys.rows() == 0 {
        return Err(Error::EmptySample("attention over zero keys".to_string()));
    }
    let d = query.cols();
    let q = query.matmul(wq)?;
    let k = keys.matmul(wk)?;
    let scores = q.matmul(&k.transpose()?)?.scale(1.0 / (d as f64).sqrt());
    let weights = softmax_slice(scores.data());
    let v = keys.matmul(wv)?;
    let mut out = vec![0.0; d];
    for (i, w) in weights.iter().enumerate() {
        for (j, o) in out.iter_mut().enumerate() {
            *o += w * v.at(i, j);
        }
    }
    Ok((weights, Tensor::new(vec![1, d], out)?))
}

/// Reference window head: scores over the whole sequence plus the additive
/// window mask. Equivalent to the sliced path used by [`forward_user`];
/// kept as the formulation the tests compare against.
pub fn window_attention_masked(
    params: &ParamSet,
    seq: &Tensor,
    w: usize,
    include_current: bool,
) -> Result<Tensor> {
    let len = seq.rows();
    let d = seq.cols();
    let head = head_values(params, "sal.win")?;
    let query = seq.gather_rows(&[len - 1])?;
    let q = query.matmul(head.wq)?;
    let k = seq.matmul(head.wk)?;
    let scores = q.matmul(&k.transpose()?)?.scale(1.0 / (d as f64).sqrt());
    let mask = window_mask(len, w, include_current);

    let mut tape = Tape::new();
    let sv = tape.leaf(scores, false);
    let alpha = tape.masked_softmax_rows(sv, &mask)?;
    let alpha = tape.value(alpha);

    let v = seq.matmul(head.wv)?;
    let mut out = vec![0.0; d];
    for i in 0..len {
        let a = alpha.at(0, i);
        if a == 0.0 {
            continue;
        }
        for (j, o) in out.iter_mut().enumerate() {
            *o += a * v.at(i, j);
        }
    }
    Tensor::new(vec![1, d], out)
}

/// Aggregate one block's rows into a single embedding.
pub fn aggregate_block(
    rows: &Tensor,
    aggregator_map: &Tensor,
    mode: Aggregator,
) -> Result<Tensor> {
    if rows.rows() == 0 {
        return Err(Error::EmptySample("empty interest block".to_string()));
    }
    let mean = rows.mean_rows()?;
    match mode {
        Aggregator::MeanPool => Ok(mean),
        Aggregator::MeanLinear => mean.matmul(aggregator_map),
    }
}

/// Items of the selected blocks, ascending block order then chronological.
pub fn gather_core_items(
    seq: &Tensor,
    partition: &BlockPartition,
    selected: &[usize],
) -> Result<Tensor> {
    let mut idx = Vec::new();
    for &b in selected {
        idx.extend(partition.blocks[b].clone());
    }
    seq.gather_rows(&idx)
}

/// Full forward pass of the layer for one user, with cost instrumentation.
pub fn forward_user(params: &ParamSet, seq: &Tensor, cfg: &SalConfig) -> Result<SalOutput> {
    let len = seq.rows();
    if len == 0 {
        return Err(Error::EmptySample("empty interaction sequence".to_string()));
    }
    let query = seq.gather_rows(&[len - 1])?;
    let mut cost = CostBreakdown::default();

    // Short-term window head.
    let w = cfg.window_size_for(len);
    let wrange = window_range(len, w, cfg.include_current_in_window);
    let z_short = if wrange.is_empty() {
        None
    } else {
        let rows: Vec<usize> = wrange.clone().collect();
        let keys = seq.gather_rows(&rows)?;
        let head = head_values(params, "sal.win")?;
        let (_, out) = dense_single_query(&query, &keys, head.wq, head.wk, head.wv)?;
        cost.window_pairs = rows.len();
        Some(out)
    };

    // Long-term block head.
    let partition = partition_blocks(len, cfg.block_size)?;
    let agg_map = params.value("sal.agg.w")?;
    let mut block_rows = Vec::with_capacity(partition.count());
    for range in &partition.blocks {
        let rows: Vec<usize> = range.clone().collect();
        let block = seq.gather_rows(&rows)?;
        block_rows.push(
            aggregate_block(&block, agg_map, cfg.aggregator)?
                .into_data(),
        );
    }
    let block_matrix = Tensor::from_rows(&block_rows)?;
    let head = head_values(params, "sal.blk")?;
    let (block_weights, z_long) =
        dense_single_query(&query, &block_matrix, head.wq, head.wk, head.wv)?;
    cost.block_pairs = partition.count();

    // Core selective head over the most-attended blocks.
    let selected = top_k_blocks(&block_weights, cfg.top_k);
    let core_items = gather_core_items(seq, &partition, &selected)?;
    if core_items.rows() == 0 {
        return Err(Error::EmptySample("no items in selected blocks".to_string()));
    }
    let head = head_values(params, "sal.sel")?;
    let (_, z_core) = dense_single_query(&query, &core_items, head.wq, head.wk, head.wv)?;
    cost.select_pairs = core_items.rows();

    let (gate_weights, user_emb) = gate_fuse(params, z_short.as_ref(), &z_long, &z_core)?;

    Ok(SalOutput {
        user_emb,
        interest: InterestVectors {
            z_short,
            z_long,
            z_core,
            block_weights,
            selected,
        },
        gate_weights,
        cost,
    })
}

/// Convex combination of head outputs under the given gate logits. A
/// skipped window head is masked to -inf so the softmax renormalizes
/// over the remaining two heads.
fn mix_heads(
    logits: &[f64; 3],
    z_short: Option<&Tensor>,
    z_long: &Tensor,
    z_core: &Tensor,
) -> Result<(Vec<f64>, Tensor)> {
    let d = z_long.cols();
    let mut masked = *logits;
    if z_short.is_none() {
        masked[0] = f64::NEG_INFINITY;
    }
    let weights = softmax_slice(&masked);
    let zeros = Tensor::zeros(vec![1, d]);
    let heads = [z_short.unwrap_or(&zeros), z_long, z_core];
    let mut user = vec![0.0; d];
    for (w, h) in weights.iter().zip(heads) {
        if *w == 0.0 {
            continue;
        }
        for (u, v) in user.iter_mut().zip(h.data()) {
            *u += w * v;
        }
    }
    Ok((weights, Tensor::new(vec![1, d], user)?))
}

/// Gate the three interest vectors into the final user embedding: logits
/// come from a learned map over the concatenated heads, weights from a
/// softmax over the logits. Returns the weights for inspection.
pub fn gate_fuse(
    params: &ParamSet,
    z_short: Option<&Tensor>,
    z_long: &Tensor,
    z_core: &Tensor,
) -> Result<(Vec<f64>, Tensor)> {
    let d = z_long.cols();
    let zeros = Tensor::zeros(vec![1, d]);
    let zs = z_short.unwrap_or(&zeros);
    let mut cat = Vec::with_capacity(3 * d);
    cat.extend_from_slice(zs.data());
    cat.extend_from_slice(z_long.data());
    cat.extend_from_slice(z_core.data());
    let cat = Tensor::new(vec![1, 3 * d], cat)?;
    let logits = cat.matmul(params.value("sal.gate.w")?)?;
    let logits = [logits.data()[0], logits.data()[1], logits.data()[2]];
    mix_heads(&logits, z_short, z_long, z_core)
}

/// Cosine score of a user embedding against the scoring projection of a
/// fused item embedding.
pub fn score(params: &ParamSet, user_emb: &Tensor, item_emb: &Tensor) -> Result<f64> {
    let proj = item_emb.matmul(params.value("sal.item.w")?)?;
    crate::tensor::cosine(user_emb.data(), proj.data())
}

// ── taped (training) forward ─────────────────────────────────────────

pub struct SalForward {
    pub user: Var,
    pub selected: Vec<usize>,
    pub block_weights: Vec<f64>,
    pub cost: CostBreakdown,
}

fn taped_single_query(
    tape: &mut Tape,
    query: Var,
    keys: Var,
    head: &HeadVars,
    d: usize,
) -> Result<(Var, Var)> {
    let q = tape.matmul(query, head.wq)?;
    let k = tape.matmul(keys, head.wk)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let alpha = tape.softmax_rows(scores)?;
    let v = tape.matmul(keys, head.wv)?;
    let out = tape.matmul(alpha, v)?;
    Ok((alpha, out))
}

/// Differentiable forward pass; mirrors [`forward_user`] node for node
/// (the two are pinned together by tests).
pub fn forward_user_taped(
    tape: &mut Tape,
    vars: &SalVars,
    seq: Var,
    cfg: &SalConfig,
) -> Result<SalForward> {
    let len = tape.value(seq).rows();
    let d = tape.value(seq).cols();
    if len == 0 {
        return Err(Error::EmptySample("empty interaction sequence".to_string()));
    }
    let query = tape.gather_rows(seq, &[len - 1])?;
    let mut cost = CostBreakdown::default();

    let w = cfg.window_size_for(len);
    let wrange = window_range(len, w, cfg.include_current_in_window);
    let z_short = if wrange.is_empty() {
        None
    } else {
        let rows: Vec<usize> = wrange.clone().collect();
        let keys = tape.gather_rows(seq, &rows)?;
        cost.window_pairs = rows.len();
        Some(taped_single_query(tape, query, keys, &vars.window, d)?.1)
    };

    let partition = partition_blocks(len, cfg.block_size)?;
    let mut block_vars = Vec::with_capacity(partition.count());
    for range in &partition.blocks {
        let rows: Vec<usize> = range.clone().collect();
        let block = tape.gather_rows(seq, &rows)?;
        let mean = tape.mean_rows(block)?;
        let b = match cfg.aggregator {
            Aggregator::MeanPool => mean,
            Aggregator::MeanLinear => tape.matmul(mean, vars.aggregator)?,
        };
        block_vars.push(b);
    }
    let block_matrix = tape.concat_rows(&block_vars)?;
    let (alpha, z_long) = taped_single_query(tape, query, block_matrix, &vars.block, d)?;
    cost.block_pairs = partition.count();
    let block_weights = tape.value(alpha).data().to_vec();

    let selected = top_k_blocks(&block_weights, cfg.top_k);
    let mut core_idx = Vec::new();
    for &b in &selected {
        core_idx.extend(partition.blocks[b].clone());
    }
    let core_items = tape.gather_rows(seq, &core_idx)?;
    let (_, z_core) = taped_single_query(tape, query, core_items, &vars.select, d)?;
    cost.select_pairs = core_idx.len();

    let zero_row = tape.constant(Tensor::zeros(vec![1, d]));
    let zs = z_short.unwrap_or(zero_row);
    let stacked = tape.concat_rows(&[zs, z_long, z_core])?;
    let cat = tape.reshape(stacked, vec![1, 3 * d])?;
    let logits = tape.matmul(cat, vars.gate)?;
    let mut mask = vec![0.0; 3];
    if cost.window_pairs == 0 {
        mask[0] = f64::NEG_INFINITY;
    }
    let mask = Tensor::new(vec![1, 3], mask)?;
    let weights = tape.masked_softmax_rows(logits, &mask)?;
    let user = tape.matmul(weights, stacked)?;

    Ok(SalForward {
        user,
        selected,
        block_weights,
        cost,
    })
}

/// In-batch user–item contrastive objective: each user's next item is the
/// positive, the other users' items are negatives.
pub fn sal_contrastive_loss(tape: &mut Tape, users: Var, targets: Var, tau: f64) -> Result<Var> {
    let n = tape.value(users).rows();
    if n < 2 {
        return Err(Error::InsufficientNegatives(format!(
            "user-item contrastive loss needs a batch of >= 2, got {n}"
        )));
    }
    in_batch_infonce(tape, users, targets, tau)
}

// ── cost accounting ──────────────────────────────────────────────────

/// Run one instrumented forward pass over a random length-`len` sequence
/// and report (dense score pairs, sparse score pairs, breakdown). Dense
/// cost is what a single-query full-attention pass over all items scores.
pub fn attention_cost(
    dim: usize,
    len: usize,
    cfg: &SalConfig,
    seed: u64,
) -> Result<(usize, usize, CostBreakdown)> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    SalParams::new(dim).init_params(&mut params, &mut rng);
    let seq = Tensor::randn(vec![len, dim], 1.0, &mut rng);
    let out = forward_user(&params, &seq, cfg)?;
    Ok((len, out.cost.sparse_total(), out.cost))
}
