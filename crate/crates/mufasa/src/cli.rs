//! Command implementations behind the binary. Each command validates its
//! config up front, writes its outputs plus a manifest into the run
//! directory, and prints a human-readable summary.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::config::RunConfig;
use crate::data::cf::{apply_cf_embeddings, cf_oracle};
use crate::data::io::{load_catalog, load_interactions, save_catalog, save_interactions};
use crate::data::split::split;
use crate::data::synthetic::generate_synthetic;
use crate::data::{Catalog, UserRecord};
use crate::error::{Error, Result};
use crate::eval::{evaluate, run_ablation, MetricReport};
use crate::gradcheck::{run_gradient_checks, GradCheckOptions};
use crate::model::{config_fingerprint, Model, Variant};
use crate::sal::{attention_cost, dense_single_query, forward_user};
use crate::tensor::Tensor;
use crate::train::train_pipeline;

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config_sha256: String,
}

fn write_manifest(cfg: &RunConfig, command: &str) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)?;
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        config_sha256: config_fingerprint(cfg),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Config(format!("serialize manifest: {e}")))?;
    fs::write(cfg.out_dir.join("manifest.json"), json)?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)
            .map_err(|e| Error::Config(format!("serialize record: {e}")))?;
        out.push(b'\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn load_corpus(cfg: &RunConfig) -> Result<(Catalog, Vec<UserRecord>)> {
    let catalog = load_catalog(&cfg.items_path())?;
    let users = load_interactions(&cfg.interactions_path(), &catalog)?;
    Ok((catalog, users))
}

/// Corpus statistics in the usual dataset-table style.
pub fn corpus_stats_table(catalog: &Catalog, users: &[UserRecord]) -> String {
    let interactions: usize = users.iter().map(|u| u.items.len()).sum();
    let avg = interactions as f64 / users.len().max(1) as f64;
    let sps = 100.0 * (1.0 - interactions as f64 / (users.len().max(1) * catalog.len()) as f64);
    format!(
        "{:>8} {:>8} {:>10} {:>8} {:>8}\n{:>8} {:>8} {:>10} {:>8.2} {:>7.2}%\n",
        "User",
        "Item",
        "Inter.",
        "Avg",
        "Sps",
        users.len(),
        catalog.len(),
        interactions,
        avg,
        sps
    )
}

/// Generate the synthetic corpus, fit the cf oracle, and write both files.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<String> {
    write_manifest(cfg, "gen-data")?;
    let (mut catalog, users) = generate_synthetic(&cfg.synthetic)?;
    let cf = cf_oracle(&users, &catalog, cfg.model.dim, cfg.cf_epochs, cfg.seed)?;
    apply_cf_embeddings(&mut catalog, &cf);
    save_catalog(&cfg.items_path(), &catalog)?;
    save_interactions(&cfg.interactions_path(), &users)?;
    let table = corpus_stats_table(&catalog, &users);
    Ok(format!(
        "wrote {} and {}\n{}",
        cfg.items_path().display(),
        cfg.interactions_path().display(),
        table
    ))
}

/// Two-stage training; writes the checkpoint and per-epoch loss records.
pub fn cmd_train(cfg: &RunConfig) -> Result<String> {
    write_manifest(cfg, "train")?;
    let (catalog, users) = load_corpus(cfg)?;
    let pcfg = cfg.pipeline();
    let (model, curves, _) = train_pipeline(&catalog, &users, &pcfg, cfg.variant)?;
    model.save(&cfg.checkpoint_path())?;
    write_jsonl(&cfg.out_dir.join("losses.jsonl"), &curves)?;

    let mut summary = format!(
        "trained variant `{}`; checkpoint at {}\n",
        cfg.variant.name(),
        cfg.checkpoint_path().display()
    );
    for stage in ["mfl", "sal"] {
        let totals: Vec<&crate::train::LossRecord> = curves
            .iter()
            .filter(|r| r.stage == stage && (r.component == "total" || r.component == "contrastive"))
            .collect();
        if let (Some(first), Some(last)) = (totals.first(), totals.last()) {
            summary.push_str(&format!(
                "{stage}: {:.4} -> {:.4} over {} epochs\n",
                first.value,
                last.value,
                totals.len()
            ));
        }
    }
    Ok(summary)
}

/// Evaluate a checkpoint under the configured protocol.
pub fn cmd_eval(cfg: &RunConfig) -> Result<String> {
    write_manifest(cfg, "eval")?;
    let (catalog, users) = load_corpus(cfg)?;
    let model = Model::load(&cfg.checkpoint_path())?;
    let pcfg = cfg.pipeline();
    let parts = split(&users, &catalog, &pcfg.split)?;
    let report = evaluate(&model, &catalog, &parts.eval, &pcfg, model.variant)?;
    write_jsonl(&cfg.out_dir.join("metrics.jsonl"), &report.entries)?;
    let mut out = report.text_table();
    if parts.skipped > 0 {
        out.push_str(&format!("skipped {} short users\n", parts.skipped));
    }
    Ok(out)
}

/// Train and evaluate every variant on the same data and seed.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<String> {
    write_manifest(cfg, "ablate")?;
    let (catalog, users) = load_corpus(cfg)?;
    let pcfg = cfg.pipeline();
    let mut reports: Vec<(Variant, MetricReport)> = Vec::new();
    for variant in Variant::ALL {
        let report = run_ablation(&catalog, &users, &pcfg, variant)?;
        reports.push((variant, report));
    }

    #[derive(Serialize)]
    struct AblationRecord<'a> {
        variant: &'a str,
        metric: &'a str,
        k: usize,
        value: f64,
        fingerprint: &'a str,
    }
    let mut records = Vec::new();
    for (variant, report) in &reports {
        for e in &report.entries {
            records.push(AblationRecord {
                variant: variant.name(),
                metric: &e.name,
                k: e.k,
                value: e.value,
                fingerprint: &report.fingerprint,
            });
        }
    }
    write_jsonl(&cfg.out_dir.join("ablation.jsonl"), &records)?;

    let mut table = String::new();
    let header: Vec<String> = reports[0]
        .1
        .entries
        .iter()
        .map(|e| format!("{}@{}", e.name, e.k))
        .collect();
    table.push_str(&format!("{:<16}", "variant"));
    for h in &header {
        table.push_str(&format!(" {h:>10}"));
    }
    table.push('\n');
    for (variant, report) in &reports {
        table.push_str(&format!("{:<16}", variant.name()));
        for e in &report.entries {
            table.push_str(&format!(" {:>10.4}", e.value));
        }
        table.push('\n');
    }
    Ok(table)
}

/// Finite-difference verification of every loss and attention head.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<String> {
    write_manifest(cfg, "gradcheck")?;
    let report = run_gradient_checks(&GradCheckOptions {
        seed: cfg.seed,
        ..GradCheckOptions::default()
    })?;
    write_jsonl(&cfg.out_dir.join("gradcheck.jsonl"), &report.entries)?;
    let table = report.text_table();
    if report.all_passed() {
        Ok(table)
    } else {
        Err(Error::NonFinite(format!(
            "gradient check failed:\n{table}"
        )))
    }
}

/// Score-pair counts and wall time, dense vs sparse, across a length sweep.
pub fn cmd_bench(cfg: &RunConfig) -> Result<String> {
    write_manifest(cfg, "bench")?;

    #[derive(Serialize)]
    struct BenchRecord {
        len: usize,
        full_pairs: usize,
        window_pairs: usize,
        block_pairs: usize,
        select_pairs: usize,
        sparse_pairs: usize,
        ratio: f64,
        sparse_micros: f64,
        full_micros: f64,
    }

    let d = cfg.model.dim;
    let mut records = Vec::new();
    for &len in &cfg.bench_lengths {
        let (full, sparse, parts) = attention_cost(d, len, &cfg.model.sal, cfg.seed)?;

        // Wall time over repeated forward passes against the same inputs.
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = crate::params::ParamSet::new();
        crate::sal::SalParams::new(d).init_params(&mut params, &mut rng);
        let seq = Tensor::randn(vec![len, d], 1.0, &mut rng);
        let reps = 50;

        let t0 = Instant::now();
        for _ in 0..reps {
            forward_user(&params, &seq, &cfg.model.sal)?;
        }
        let sparse_micros = t0.elapsed().as_secs_f64() * 1e6 / reps as f64;

        let query = seq.gather_rows(&[len - 1])?;
        let t0 = Instant::now();
        for _ in 0..reps {
            dense_single_query(
                &query,
                &seq,
                params.value("sal.win.wq")?,
                params.value("sal.win.wk")?,
                params.value("sal.win.wv")?,
            )?;
        }
        let full_micros = t0.elapsed().as_secs_f64() * 1e6 / reps as f64;

        records.push(BenchRecord {
            len,
            full_pairs: full,
            window_pairs: parts.window_pairs,
            block_pairs: parts.block_pairs,
            select_pairs: parts.select_pairs,
            sparse_pairs: sparse,
            ratio: sparse as f64 / full as f64,
            sparse_micros,
            full_micros,
        });
    }
    write_jsonl(&cfg.out_dir.join("bench.jsonl"), &records)?;

    let mut table = format!(
        "{:>6} {:>10} {:>8} {:>8} {:>8} {:>10} {:>8} {:>12} {:>12}\n",
        "L", "full", "window", "block", "select", "sparse", "ratio", "sparse(us)", "full(us)"
    );
    for r in &records {
        table.push_str(&format!(
            "{:>6} {:>10} {:>8} {:>8} {:>8} {:>10} {:>8.4} {:>12.1} {:>12.1}\n",
            r.len,
            r.full_pairs,
            r.window_pairs,
            r.block_pairs,
            r.select_pairs,
            r.sparse_pairs,
            r.ratio,
            r.sparse_micros,
            r.full_micros
        ));
    }
    Ok(table)
}

/// Print a command result to stdout.
pub fn emit(result: &str) {
    let mut stdout = std::io::stdout().lock();
    let _ = stdout.write_all(result.as_bytes());
    if !result.ends_with('\n') {
        let _ = stdout.write_all(b"\n");
    }
}
