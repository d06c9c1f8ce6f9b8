//! Named learnable parameters, gradient bookkeeping, and optimizers.
//!
//! Parameters live outside any tape. A forward pass leases them onto a fresh
//! tape via [`Lease::take`]; after `Tape::backward`, [`Lease::accumulate`]
//! adds the tape gradients back into each parameter's grad buffer. Resetting
//! is explicit ([`ParamSet::zero_grads`]) so cross-batch accumulation can
//! never happen silently.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    /// Populated by backward passes; `None` until then. Not part of a
    /// checkpoint.
    #[serde(skip)]
    pub grad: Option<Tensor>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Parameter {
            name: name.into(),
            value,
            grad: None,
        }
    }
}

/// A model's parameters, keyed by unique name. BTreeMap keeps iteration
/// order (and therefore optimizer behavior) deterministic.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamSet {
    params: BTreeMap<String, Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        debug_assert!(
            !self.params.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.params
            .insert(name.to_string(), Parameter::new(name, value));
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Explicit gradient reset; the only way gradients are cleared.
    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// Total number of scalar entries across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }
}

/// Records which tape leaf corresponds to which parameter during one pass.
#[derive(Default)]
pub struct Lease {
    entries: Vec<(String, Var)>,
}

impl Lease {
    pub fn new() -> Self {
        Lease::default()
    }

    /// Copy a parameter's value onto the tape as a grad-requiring leaf.
    pub fn take(&mut self, tape: &mut Tape, params: &ParamSet, name: &str) -> Result<Var> {
        let p = params.get(name)?;
        let var = tape.leaf(p.value.clone(), true);
        self.entries.push((name.to_string(), var));
        Ok(var)
    }

    /// Unique names leased so far (the parameters one optimizer step covers).
    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.entries.iter().map(|(n, _)| n.clone()).collect();
        names.sort();
        names.dedup();
        names
    }

    /// Add the tape gradients of every leased parameter into its grad buffer.
    pub fn accumulate(&self, grads: &Gradients, params: &mut ParamSet) -> Result<()> {
        for (name, var) in &self.entries {
            let p = params.get_mut(name)?;
            let delta = match grads.get(*var) {
                Some(g) => g.clone(),
                None => Tensor::zeros(p.value.shape().to_vec()),
            };
            match &mut p.grad {
                Some(existing) => {
                    for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                        *e += d;
                    }
                }
                slot => *slot = Some(delta),
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Deterministic first-order optimizer. Plain gradient descent by default;
/// Adam is available behind configuration.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        step: u64,
        moments: BTreeMap<String, (Tensor, Tensor)>,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if lr <= 0.0 {
            return Err(Error::Config(format!("learning rate must be > 0, got {lr}")));
        }
        Ok(match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => Optimizer::Adam {
                lr,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                step: 0,
                moments: BTreeMap::new(),
            },
        })
    }

    /// Apply one update from the populated grads. Errors if any parameter's
    /// gradient is unpopulated.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        let names: Vec<String> = params.names().map(str::to_string).collect();
        self.step_named(params, &names)
    }

    /// Update only the named parameters (the ones a stage actually leased);
    /// each must have a populated gradient.
    pub fn step_named(&mut self, params: &mut ParamSet, names: &[String]) -> Result<()> {
        for name in names {
            if params.get(name)?.grad.is_none() {
                return Err(Error::UnpopulatedGradient(name.clone()));
            }
        }
        match self {
            Optimizer::Sgd { lr } => {
                for name in names {
                    let p = params.get_mut(name)?;
                    let g = p.grad.as_ref().unwrap();
                    let g = g.data().to_vec();
                    for (v, gv) in p.value.data_mut().iter_mut().zip(g) {
                        *v -= *lr * gv;
                    }
                }
            }
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                step,
                moments,
            } => {
                *step += 1;
                let t = *step as f64;
                let bc1 = 1.0 - beta1.powf(t);
                let bc2 = 1.0 - beta2.powf(t);
                for name in names {
                    let p = params.get_mut(name)?;
                    let g = p.grad.as_ref().unwrap().clone();
                    let (m, v) = moments.entry(p.name.clone()).or_insert_with(|| {
                        (
                            Tensor::zeros(p.value.shape().to_vec()),
                            Tensor::zeros(p.value.shape().to_vec()),
                        )
                    });
                    for i in 0..g.numel() {
                        let gi = g.data()[i];
                        m.data_mut()[i] = *beta1 * m.data()[i] + (1.0 - *beta1) * gi;
                        v.data_mut()[i] = *beta2 * v.data()[i] + (1.0 - *beta2) * gi * gi;
                        let mhat = m.data()[i] / bc1;
                        let vhat = v.data()[i] / bc2;
                        p.value.data_mut()[i] -= *lr * mhat / (vhat.sqrt() + *eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Central-difference gradient of `f` with respect to the named parameter:
/// the independent oracle for every backward implementation in this crate.
pub fn fd_gradient<F>(mut f: F, params: &mut ParamSet, name: &str, h: f64) -> Result<Tensor>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::Config(format!("fd step must be > 0, got {h}")));
    }
    let n = params.get(name)?.value.numel();
    let shape = params.get(name)?.value.shape().to_vec();
    let mut grad = vec![0.0; n];
    for i in 0..n {
        let orig = params.get(name)?.value.data()[i];
        params.get_mut(name)?.value.data_mut()[i] = orig + h;
        let fp = f(params)?;
        params.get_mut(name)?.value.data_mut()[i] = orig - h;
        let fm = f(params)?;
        params.get_mut(name)?.value.data_mut()[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Tensor::new(shape, grad)
}

/// Largest relative disagreement between two gradients, with an absolute
/// floor so exact zeros compare cleanly.
pub fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / (x.abs() + y.abs() + 1e-8))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn sgd_step_arithmetic() {
        let mut params = ParamSet::new();
        params.insert("p", Tensor::scalar(1.0));
        params.get_mut("p").unwrap().grad = Some(Tensor::scalar(2.0));
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1).unwrap();
        opt.step(&mut params).unwrap();
        assert!((params.value("p").unwrap().data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_is_fixed_point() {
        let mut params = ParamSet::new();
        params.insert("p", Tensor::row(vec![3.0, -1.0]));
        params.get_mut("p").unwrap().grad = Some(Tensor::row(vec![0.0, 0.0]));
        let before = params.value("p").unwrap().clone();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.5).unwrap();
        opt.step(&mut params).unwrap();
        assert_eq!(params.value("p").unwrap(), &before);
    }

    #[test]
    fn missing_grad_is_error() {
        let mut params = ParamSet::new();
        params.insert("p", Tensor::scalar(1.0));
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1).unwrap();
        assert!(matches!(
            opt.step(&mut params),
            Err(Error::UnpopulatedGradient(_))
        ));
    }

    #[test]
    fn sgd_converges_on_convex_quadratic() {
        // loss = ||p - c||^2 pulls p to c.
        let c = Tensor::row(vec![0.3, -0.7, 1.1]);
        let mut params = ParamSet::new();
        params.insert("p", Tensor::row(vec![5.0, 5.0, 5.0]));
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1).unwrap();
        for _ in 0..100 {
            params.zero_grads();
            let mut tape = Tape::new();
            let mut lease = Lease::new();
            let p = lease.take(&mut tape, &params, "p").unwrap();
            let cv = tape.constant(c.clone());
            let d = tape.sub(p, cv).unwrap();
            let sq = tape.mul(d, d).unwrap();
            let loss = tape.sum(sq);
            let grads = tape.backward(loss).unwrap();
            lease.accumulate(&grads, &mut params).unwrap();
            opt.step(&mut params).unwrap();
        }
        for (v, want) in params.value("p").unwrap().data().iter().zip(c.data()) {
            assert!((v - want).abs() < 1e-3);
        }
    }

    #[test]
    fn fd_gradient_of_sum_is_ones() {
        let mut params = ParamSet::new();
        params.insert("p", Tensor::row(vec![0.4, -2.0, 7.0]));
        let g = fd_gradient(
            |ps| Ok(ps.value("p")?.sum()),
            &mut params,
            "p",
            1e-5,
        )
        .unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn fd_gradient_of_squared_norm() {
        let mut params = ParamSet::new();
        params.insert("p", Tensor::row(vec![1.0, 2.0]));
        let g = fd_gradient(
            |ps| Ok(ps.value("p")?.data().iter().map(|v| v * v).sum()),
            &mut params,
            "p",
            1e-5,
        )
        .unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-7);
        assert!((g.data()[1] - 4.0).abs() < 1e-7);
    }

    #[test]
    fn backward_matches_fd_on_matmul() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut params = ParamSet::new();
        params.insert("a", Tensor::randn(vec![3, 4], 1.0, &mut rng));
        let b = Tensor::randn(vec![4, 2], 1.0, &mut rng);

        let run = |ps: &ParamSet| -> Result<f64> {
            let mut tape = Tape::new();
            let a = tape.leaf(ps.value("a")?.clone(), true);
            let bv = tape.constant(b.clone());
            let out = tape.matmul(a, bv)?;
            let loss = tape.sum(out);
            tape.value(loss).as_scalar()
        };

        let fd = fd_gradient(|ps| run(ps), &mut params, "a", 1e-5).unwrap();

        let mut tape = Tape::new();
        let mut lease = Lease::new();
        let a = lease.take(&mut tape, &params, "a").unwrap();
        let bv = tape.constant(b.clone());
        let out = tape.matmul(a, bv).unwrap();
        let loss = tape.sum(out);
        let grads = tape.backward(loss).unwrap();
        lease.accumulate(&grads, &mut params).unwrap();

        let analytic = params.get("a").unwrap().grad.as_ref().unwrap();
        assert!(max_rel_err(analytic, &fd) <= 1e-6);
    }
}
