//! Finite-difference verification of every backward path in the model:
//! the four fusion losses and their weighted total (through the fusion
//! network), and the user–item contrastive objective through all three
//! attention heads, the block aggregator, the gate, and the item scoring
//! projection.

use std::collections::BTreeMap;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::mfl::{self, FusionNetwork, MflConfig};
use crate::params::{fd_gradient, max_rel_err, Lease, ParamSet};
use crate::sal::{forward_user_taped, sal_contrastive_loss, SalConfig, SalParams};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub seed: u64,
    /// Maximum allowed relative error between backward and central
    /// differences.
    pub tolerance: f64,
    /// Central-difference step.
    pub step: f64,
    /// Test hook: deliberately corrupt the analytic gradient of the named
    /// component so the failure path is exercised.
    pub corrupt: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            seed: 7,
            tolerance: 1e-4,
            step: 1e-5,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub component: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn text_table(&self) -> String {
        let mut out = format!("{:<22} {:>14} {:>8}\n", "component", "max rel err", "status");
        for e in &self.entries {
            out.push_str(&format!(
                "{:<22} {:>14.3e} {:>8}\n",
                e.component,
                e.max_rel_err,
                if e.passed { "pass" } else { "FAIL" }
            ));
        }
        out
    }
}

type LossBuilder<'a> = dyn Fn(&mut Tape, &mut Lease, &ParamSet) -> Result<Var> + 'a;

/// Compare backward against central differences for every parameter in
/// `params`, grouping per-parameter errors under `label_of(param_name)`.
fn check_paths(
    params: &mut ParamSet,
    build: &LossBuilder,
    label_of: &dyn Fn(&str) -> String,
    opts: &GradCheckOptions,
    results: &mut BTreeMap<String, f64>,
) -> Result<()> {
    let mut tape = Tape::new();
    let mut lease = Lease::new();
    let loss = build(&mut tape, &mut lease, params)?;
    let grads = tape.backward(loss)?;
    params.zero_grads();
    lease.accumulate(&grads, params)?;

    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let label = label_of(&name);
        let mut analytic = params
            .get(&name)?
            .grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(params.get(&name).unwrap().value.shape().to_vec()));
        if opts.corrupt.as_deref() == Some(label.as_str()) {
            analytic.data_mut()[0] += 0.5;
        }
        let fd = fd_gradient(
            |ps| {
                let mut tape = Tape::new();
                let mut lease = Lease::new();
                let loss = build(&mut tape, &mut lease, ps)?;
                tape.value(loss).as_scalar()
            },
            params,
            &name,
            opts.step,
        )?;
        let err = max_rel_err(&analytic, &fd);
        let slot = results.entry(label.clone()).or_insert(0.0);
        *slot = slot.max(err);
    }
    Ok(())
}

fn sal_label(name: &str) -> String {
    if name.starts_with("sal.win") {
        "window_attention".to_string()
    } else if name.starts_with("sal.blk") {
        "block_attention".to_string()
    } else if name.starts_with("sal.sel") {
        "selective_attention".to_string()
    } else if name.starts_with("sal.agg") {
        "aggregation".to_string()
    } else if name.starts_with("sal.gate") {
        "gate".to_string()
    } else {
        "item_projection".to_string()
    }
}

/// Run the whole suite at small dimensions. Every reported component must
/// stay under `opts.tolerance`.
pub fn run_gradient_checks(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut results: BTreeMap<String, f64> = BTreeMap::new();

    let n = 5;
    let d = 6;
    let titles = Tensor::randn(vec![n, d], 1.0, &mut rng);
    let cf = Tensor::randn(vec![n, d], 1.0, &mut rng);
    let z0 = Tensor::randn(vec![n, d], 1.0, &mut rng);

    // Each fused-batch loss, differentiated with respect to the fused rows.
    {
        let mut params = ParamSet::new();
        params.insert("z", z0.clone());
        let t = titles.clone();
        check_paths(
            &mut params,
            &|tape, lease, ps| {
                let z = lease.take(tape, ps, "z")?;
                let tv = tape.constant(t.clone());
                mfl::loss_title(tape, z, tv, 0.07)
            },
            &|_| "loss_title".to_string(),
            opts,
            &mut results,
        )?;

        let c = cf.clone();
        check_paths(
            &mut params,
            &|tape, lease, ps| {
                let z = lease.take(tape, ps, "z")?;
                let cv = tape.constant(c.clone());
                mfl::loss_cf(tape, z, cv)
            },
            &|_| "loss_cf".to_string(),
            opts,
            &mut results,
        )?;

        let t = titles.clone();
        let pairs = vec![(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)];
        check_paths(
            &mut params,
            &|tape, lease, ps| {
                let z = lease.take(tape, ps, "z")?;
                mfl::loss_cons(tape, z, &t, &pairs)
            },
            &|_| "loss_cons".to_string(),
            opts,
            &mut results,
        )?;

        let noise_seed = opts.seed ^ 0xF05;
        check_paths(
            &mut params,
            &|tape, lease, ps| {
                let z = lease.take(tape, ps, "z")?;
                // The perturbations must be identical across evaluations:
                // reseed per call so only the leased values vary.
                let mut noise = ChaCha8Rng::seed_from_u64(noise_seed);
                mfl::loss_fus_cl(tape, z, 0.05, 0.07, Some(3), &mut noise)
            },
            &|_| "loss_fus_cl".to_string(),
            opts,
            &mut results,
        )?;
    }

    // The weighted total through the fusion network itself.
    {
        let m = 3;
        let net = FusionNetwork::new(m, d);
        let mut params = ParamSet::new();
        net.init_params(&mut params, &mut rng);
        let x = Tensor::randn(vec![n, m * d], 1.0, &mut rng);
        let cfg = MflConfig::default();
        let admitted = vec![true; n];
        let t = titles.clone();
        let c = cf.clone();
        let noise_seed = opts.seed ^ 0x70741;
        check_paths(
            &mut params,
            &|tape, lease, ps| {
                let vars = net.lease(tape, lease, ps)?;
                let mut noise = ChaCha8Rng::seed_from_u64(noise_seed);
                let (total, _) = mfl::mfl_batch_loss(
                    tape, &net, &vars, &x, &t, &c, &admitted, &cfg, &mut noise,
                )?;
                Ok(total)
            },
            &|_| "loss_total".to_string(),
            opts,
            &mut results,
        )?;
    }

    // The contrastive objective through the full attention stack, with
    // per-head error reporting.
    {
        let sal = SalParams::new(d);
        let mut params = ParamSet::new();
        sal.init_params(&mut params, &mut rng);
        let cfg = SalConfig {
            block_size: 3,
            top_k: 2,
            ..SalConfig::default()
        };
        let batch = 3;
        let seq_len = 11;
        let seqs: Vec<Tensor> = (0..batch)
            .map(|_| Tensor::randn(vec![seq_len, d], 1.0, &mut rng))
            .collect();
        let targets = Tensor::randn(vec![batch, d], 1.0, &mut rng);
        check_paths(
            &mut params,
            &|tape, lease, ps| {
                let vars = sal.lease(tape, lease, ps)?;
                let item_w = lease.take(tape, ps, "sal.item.w")?;
                let users: Vec<Var> = seqs
                    .iter()
                    .map(|s| {
                        let sv = tape.constant(s.clone());
                        Ok(forward_user_taped(tape, &vars, sv, &cfg)?.user)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let users = tape.concat_rows(&users)?;
                let tv = tape.constant(targets.clone());
                let projected = tape.matmul(tv, item_w)?;
                sal_contrastive_loss(tape, users, projected, cfg.tau)
            },
            &sal_label,
            opts,
            &mut results,
        )?;
    }

    let entries = results
        .into_iter()
        .map(|(component, max_rel_err)| GradCheckEntry {
            component,
            passed: max_rel_err <= opts.tolerance,
            max_rel_err,
        })
        .collect();
    Ok(GradCheckReport {
        entries,
        tolerance: opts.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_suite_passes_at_default_tolerance() {
        let report = run_gradient_checks(&GradCheckOptions::default()).unwrap();
        assert!(report.all_passed(), "\n{}", report.text_table());
        let names: Vec<&str> = report
            .entries
            .iter()
            .map(|e| e.component.as_str())
            .collect();
        for required in [
            "loss_title",
            "loss_cf",
            "loss_cons",
            "loss_fus_cl",
            "loss_total",
            "window_attention",
            "block_attention",
            "selective_attention",
            "aggregation",
            "gate",
            "item_projection",
        ] {
            assert!(names.contains(&required), "missing component {required}");
        }
    }

    #[test]
    fn corrupted_gradient_is_reported_as_failure() {
        let opts = GradCheckOptions {
            corrupt: Some("block_attention".to_string()),
            ..GradCheckOptions::default()
        };
        let report = run_gradient_checks(&opts).unwrap();
        assert!(!report.all_passed());
        let bad = report
            .entries
            .iter()
            .find(|e| e.component == "block_attention")
            .unwrap();
        assert!(!bad.passed);
        // Every other component still passes.
        for e in &report.entries {
            if e.component != "block_attention" {
                assert!(e.passed, "{} unexpectedly failed", e.component);
            }
        }
    }
}
