//! Two-stage training: the fusion objective over items first, then the
//! user–item contrastive objective over sequences, with the fusion weights
//! frozen (default) or fine-tuned through the second stage.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::split::{split, Split, SplitSpec, TrainSeq};
use crate::data::{Catalog, UserRecord};
use crate::error::{Error, Result};
use crate::mfl::mfl_batch_loss;
use crate::model::{Model, ModelConfig, Variant};
use crate::params::{Lease, Optimizer, OptimizerKind};
use crate::sal::{forward_user_taped, sal_contrastive_loss, SalParams};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs_mfl: usize,
    pub epochs_sal: usize,
    pub optimizer: OptimizerKind,
    /// Let gradients of the second stage flow into the fusion weights.
    pub finetune_mfl: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 0.3,
            epochs_mfl: 20,
            epochs_sal: 30,
            optimizer: OptimizerKind::Sgd,
            finetune_mfl: false,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch_size must be >= 2 (in-batch negatives)".to_string(),
            ));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be > 0".to_string()));
        }
        Ok(())
    }
}

/// One loss curve point: per stage, per epoch, per component.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossRecord {
    pub stage: String,
    pub epoch: usize,
    pub component: String,
    pub value: f64,
}

/// Everything `train` + `evaluate` need for one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub eval_ks: Vec<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            split: SplitSpec::default(),
            eval_ks: vec![5, 10, 20, 50, 100],
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.eval_ks.is_empty() || self.eval_ks.iter().any(|k| *k == 0) {
            return Err(Error::Config("eval_ks must be non-empty positive".to_string()));
        }
        Ok(())
    }
}

/// Split, initialize, and train one variant end to end.
pub fn train_pipeline(
    catalog: &Catalog,
    users: &[UserRecord],
    pcfg: &PipelineConfig,
    variant: Variant,
) -> Result<(Model, Vec<LossRecord>, Split)> {
    pcfg.validate()?;
    let parts = split(users, catalog, &pcfg.split)?;
    let mut model = Model::init(pcfg.model.clone(), variant, pcfg.train.seed)?;
    let curves = train(&mut model, catalog, &parts.train, &pcfg.train)?;
    Ok((model, curves, parts))
}

/// Run both stages against pre-split training sequences.
pub fn train(
    model: &mut Model,
    catalog: &Catalog,
    train_seqs: &[TrainSeq],
    tc: &TrainConfig,
) -> Result<Vec<LossRecord>> {
    tc.validate()?;
    let mut curves = Vec::new();
    if model.variant.uses_mfl() && tc.epochs_mfl > 0 {
        train_mfl_stage(model, catalog, tc, &mut curves)?;
    }
    if tc.epochs_sal > 0 {
        train_sal_stage(model, catalog, train_seqs, tc, &mut curves)?;
    }
    Ok(curves)
}

fn train_mfl_stage(
    model: &mut Model,
    catalog: &Catalog,
    tc: &TrainConfig,
    curves: &mut Vec<LossRecord>,
) -> Result<()> {
    let net = model.fusion_network();
    let cfg = model.cfg.mfl.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0xA11C_E5ED);
    let mut opt = Optimizer::new(tc.optimizer, tc.learning_rate)?;

    let admitted: Vec<bool> = catalog
        .items()
        .iter()
        .map(|it| {
            crate::mfl::title_admitted(
                &Tensor::row(it.title_emb.clone()),
                it.title_token_count,
                cfg.min_title_tokens,
            )
        })
        .collect();

    let mut order: Vec<usize> = (0..catalog.len()).collect();
    for epoch in 0..tc.epochs_mfl {
        order.shuffle(&mut rng);
        let mut sums: std::collections::BTreeMap<&str, (f64, usize)> = Default::default();
        for chunk in order.chunks(tc.batch_size) {
            let x = stack_rows(chunk.iter().map(|&i| catalog.flat_modalities(i)))?;
            let titles = stack_rows(chunk.iter().map(|&i| catalog.title_tensor(i)))?;
            let cf = stack_rows(chunk.iter().map(|&i| catalog.cf_tensor(i)))?;
            let batch_admitted: Vec<bool> = chunk.iter().map(|&i| admitted[i]).collect();

            let mut tape = Tape::new();
            let mut lease = Lease::new();
            let vars = net.lease(&mut tape, &mut lease, &model.params)?;
            let (total, vals) = mfl_batch_loss(
                &mut tape,
                &net,
                &vars,
                &x,
                &titles,
                &cf,
                &batch_admitted,
                &cfg,
                &mut rng,
            )?;
            let grads = tape.backward(total)?;
            model.params.zero_grads();
            lease.accumulate(&grads, &mut model.params)?;
            opt.step_named(&mut model.params, &lease.names())?;

            let mut put = |name: &'static str, v: Option<f64>| {
                if let Some(v) = v {
                    let e = sums.entry(name).or_insert((0.0, 0));
                    e.0 += v;
                    e.1 += 1;
                }
            };
            put("title", vals.title);
            put("cf", Some(vals.cf));
            put("cons", vals.cons);
            put("fus_cl", vals.fus_cl);
            put("total", Some(vals.total));
        }
        for (component, (sum, n)) in sums {
            curves.push(LossRecord {
                stage: "mfl".to_string(),
                epoch,
                component: component.to_string(),
                value: sum / n as f64,
            });
        }
    }
    Ok(())
}

fn stack_rows(rows: impl Iterator<Item = Tensor>) -> Result<Tensor> {
    let collected: Vec<Vec<f64>> = rows.map(Tensor::into_data).collect();
    Tensor::from_rows(&collected)
}

fn train_sal_stage(
    model: &mut Model,
    catalog: &Catalog,
    train_seqs: &[TrainSeq],
    tc: &TrainConfig,
    curves: &mut Vec<LossRecord>,
) -> Result<()> {
    if train_seqs.is_empty() {
        return Err(Error::EmptySample("no training sequences".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5A1_C0DE);
    let mut opt = Optimizer::new(tc.optimizer, tc.learning_rate)?;
    let finetune = tc.finetune_mfl && model.variant.uses_mfl();
    let fused: Option<Vec<Tensor>> = if finetune {
        None
    } else {
        Some(model.fused_item_table(catalog)?)
    };
    let sal_cfg = model.cfg.sal.clone();
    let net = model.fusion_network();
    let d = model.cfg.dim;

    let mut order: Vec<usize> = (0..train_seqs.len()).collect();
    for epoch in 0..tc.epochs_sal {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(tc.batch_size) {
            if chunk.len() < 2 {
                continue; // a singleton batch has no in-batch negatives
            }
            let mut tape = Tape::new();
            let mut lease = Lease::new();
            let item_w = lease.take(&mut tape, &model.params, "sal.item.w")?;

            // Source of fused item rows for this batch: either frozen
            // constants or the fusion network applied on-tape.
            let mut batch_items: Vec<usize> = chunk
                .iter()
                .flat_map(|&u| train_seqs[u].items.iter().copied())
                .collect();
            batch_items.sort_unstable();
            batch_items.dedup();
            let fused_rows: FusedRows = if finetune {
                let x = stack_rows(batch_items.iter().map(|&i| catalog.flat_modalities(i)))?;
                let vars = net.lease(&mut tape, &mut lease, &model.params)?;
                let xv = tape.constant(x);
                let z = net.forward(&mut tape, &vars, xv)?;
                FusedRows::Taped {
                    z,
                    index: batch_items.clone(),
                }
            } else {
                FusedRows::Frozen(fused.as_ref().unwrap())
            };

            let sal_vars = match model.variant {
                Variant::Full | Variant::NoMfl => {
                    Some(SalParams::new(d).lease(&mut tape, &mut lease, &model.params)?)
                }
                _ => None,
            };
            let full_head = match model.variant {
                Variant::FullAttention => Some((
                    lease.take(&mut tape, &model.params, "sal.full.wq")?,
                    lease.take(&mut tape, &model.params, "sal.full.wk")?,
                    lease.take(&mut tape, &model.params, "sal.full.wv")?,
                )),
                _ => None,
            };

            let mut user_vars = Vec::with_capacity(chunk.len());
            let mut target_vars = Vec::with_capacity(chunk.len());
            for &u in chunk {
                let items = &train_seqs[u].items;
                // Next-item pair at a random cut: every position supplies
                // training signal, not just the sequence end.
                let cut = rng.gen_range(1..items.len());
                let (context, target) = items.split_at(cut);
                let target = &target[..1];
                let seq = fused_rows.sequence(&mut tape, context)?;
                let user = match model.variant {
                    Variant::Full | Variant::NoMfl => {
                        forward_user_taped(&mut tape, sal_vars.as_ref().unwrap(), seq, &sal_cfg)?
                            .user
                    }
                    Variant::NoSal => tape.mean_rows(seq)?,
                    Variant::FullAttention => {
                        let (wq, wk, wv) = full_head.as_ref().copied().unwrap();
                        let len = tape.value(seq).rows();
                        let query = tape.gather_rows(seq, &[len - 1])?;
                        let q = tape.matmul(query, wq)?;
                        let k = tape.matmul(seq, wk)?;
                        let kt = tape.transpose(k)?;
                        let scores = tape.matmul(q, kt)?;
                        let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
                        let alpha = tape.softmax_rows(scores)?;
                        let v = tape.matmul(seq, wv)?;
                        tape.matmul(alpha, v)?
                    }
                };
                user_vars.push(user);
                target_vars.push(fused_rows.sequence(&mut tape, &[target[0]])?);
            }
            let users = tape.concat_rows(&user_vars)?;
            let targets = tape.concat_rows(&target_vars)?;
            let projected = tape.matmul(targets, item_w)?;
            let loss = sal_contrastive_loss(&mut tape, users, projected, sal_cfg.tau)?;
            let value = tape.value(loss).as_scalar()?;
            if !value.is_finite() {
                return Err(Error::NonFinite("sal contrastive loss".to_string()));
            }

            let grads = tape.backward(loss)?;
            model.params.zero_grads();
            lease.accumulate(&grads, &mut model.params)?;
            opt.step_named(&mut model.params, &lease.names())?;
            sum += value;
            batches += 1;
        }
        if batches == 0 {
            return Err(Error::InsufficientNegatives(
                "every training batch had fewer than 2 users".to_string(),
            ));
        }
        curves.push(LossRecord {
            stage: "sal".to_string(),
            epoch,
            component: "contrastive".to_string(),
            value: sum / batches as f64,
        });
    }
    Ok(())
}

/// Where a training batch's fused item rows come from.
enum FusedRows<'a> {
    Frozen(&'a [Tensor]),
    Taped { z: Var, index: Vec<usize> },
}

impl FusedRows<'_> {
    /// Build the `[len, d]` sequence for the given catalog item indices.
    fn sequence(&self, tape: &mut Tape, items: &[usize]) -> Result<Var> {
        match self {
            FusedRows::Frozen(table) => {
                let rows: Vec<Vec<f64>> = items
                    .iter()
                    .map(|&i| table[i].data().to_vec())
                    .collect();
                Ok(tape.constant(Tensor::from_rows(&rows)?))
            }
            FusedRows::Taped { z, index } => {
                let rows: Vec<usize> = items
                    .iter()
                    .map(|&i| index.binary_search(&i).expect("item indexed for batch"))
                    .collect();
                tape.gather_rows(*z, &rows)
            }
        }
    }
}
