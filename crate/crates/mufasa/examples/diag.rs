//! Scratch diagnostic (not shipped): per-head ranking quality.
use mufasa::data::split::{split, SplitMode, SplitSpec};
use mufasa::data::synthetic::{generate_synthetic, SyntheticConfig};
use mufasa::eval::recall_at_k;
use mufasa::model::{Model, ModelConfig, Variant};
use mufasa::sal::forward_user;
use mufasa::tensor::Tensor;
use mufasa::train::{train_pipeline, PipelineConfig, TrainConfig};

fn main() {
    let seed: u64 = std::env::args().nth(1).unwrap().parse().unwrap();
    let scfg = SyntheticConfig { seed, ..SyntheticConfig::default() };
    let (mut catalog, users) = generate_synthetic(&scfg).unwrap();
    let cf = mufasa::data::cf::cf_oracle(&users, &catalog, 32, 10, seed).unwrap();
    mufasa::data::cf::apply_cf_embeddings(&mut catalog, &cf);
    let mut pcfg = PipelineConfig {
        split: SplitSpec { mode: SplitMode::ZeroShot, ..SplitSpec::default() },
        train: TrainConfig { seed, ..TrainConfig::default() },
        ..PipelineConfig::default()
    };
    if let Ok(p) = std::env::var("P") { pcfg.model.sal.block_size = p.parse().unwrap(); }
    if let Ok(k) = std::env::var("K") { pcfg.model.sal.top_k = k.parse().unwrap(); }
    let (model, _, parts) = train_pipeline(&catalog, &users, &pcfg, Variant::Full).unwrap();
    let fused = model.fused_item_table(&catalog).unwrap();
    let item_w = model.params.value("sal.item.w").unwrap();
    let projected: Vec<Tensor> = fused.iter().map(|z| z.matmul(item_w).unwrap()).collect();
    let rank20 = |u: &Tensor, targets: &[usize]| -> f64 {
        let mut scores: Vec<(usize, f64)> = (0..catalog.len())
            .map(|i| (i, mufasa::tensor::cosine(u.data(), projected[i].data()).unwrap()))
            .collect();
        scores.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let top: Vec<usize> = scores.iter().take(20).map(|(i, _)| *i).collect();
        recall_at_k(targets, &top)
    };
    let mut gate = [0.0; 3];
    let mut overall = [0.0; 4];
    let mut long = [0.0; 4];
    let (mut n, mut nl) = (0.0f64, 0.0f64);
    for case in &parts.eval {
        let rows: Vec<Vec<f64>> = case.context.iter().map(|&i| fused[i].data().to_vec()).collect();
        let seq = Tensor::from_rows(&rows).unwrap();
        let out = forward_user(&model.params, &seq, &model.cfg.sal).unwrap();
        for (g, w) in gate.iter_mut().zip(&out.gate_weights) { *g += w; }
        let vals = [
            rank20(&out.user_emb, &case.targets),
            rank20(out.interest.z_short.as_ref().unwrap(), &case.targets),
            rank20(&out.interest.z_long, &case.targets),
            rank20(&out.interest.z_core, &case.targets),
        ];
        for (o, v) in overall.iter_mut().zip(&vals) { *o += v; }
        n += 1.0;
        if case.context.len() >= 150 {
            for (o, v) in long.iter_mut().zip(&vals) { *o += v; }
            nl += 1.0;
        }
    }
    println!("seed {seed}: gate short={:.3} long={:.3} core={:.3}", gate[0]/n, gate[1]/n, gate[2]/n);
    println!("  overall: gated={:.3} short={:.3} long={:.3} core={:.3}", overall[0]/n, overall[1]/n, overall[2]/n, overall[3]/n);
    println!("  long   : gated={:.3} short={:.3} long={:.3} core={:.3} ({} users)", long[0]/nl, long[1]/nl, long[2]/nl, long[3]/nl, nl);
    let _ = ModelConfig::default();
}
