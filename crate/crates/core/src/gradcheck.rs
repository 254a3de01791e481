//! Finite-difference gradient oracle.
//!
//! A check evaluates a scalar function twice per perturbed element (central
//! differences) and compares against the reverse-mode gradient. Relative
//! error is `|a - n| / max(|a|, |n|, floor)`, where the floor is 1e-3 of the
//! tensor's largest gradient magnitude so that entries at round-off scale do
//! not dominate the report.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many elements per tensor (chosen at random).
    pub max_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-6,
            tolerance: 1e-4,
            max_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TensorReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    /// Largest absolute discrepancy, and the largest gradient magnitude it
    /// can be compared against.
    pub max_abs_error: f64,
    pub scale: f64,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub tolerance: f64,
    pub tensors: Vec<TensorReport>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
    }
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for t in &self.tensors {
            writeln!(
                f,
                "{:<32} n={:<5} max_rel={:.3e} at {}",
                t.name, t.checked, t.max_rel_error, t.worst_index
            )?;
        }
        Ok(())
    }
}

/// Check `f`'s gradients with respect to every input tensor and every
/// trainable parameter the function binds from `store`.
pub fn grad_check<F>(
    store: &ParamStore<f64>,
    inputs: &[(&str, Tensor<f64>)],
    config: GradCheckConfig,
    f: F,
) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f(&mut g, store, &vars)?;
        Ok(g.scalar(out))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, store, &vars)?;
    let grads = g.backward(out)?;
    let mut bound: Vec<_> = g.bindings().filter(|(p, _)| store.is_trainable(*p)).collect();
    bound.sort_by_key(|(p, _)| *p);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut values: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut work = store.clone();
    let mut report = GradReport {
        tolerance: config.tolerance,
        tensors: Vec::new(),
    };

    let targets = inputs
        .iter()
        .enumerate()
        .map(|(i, (name, _))| (name.to_string(), vars[i], Target::Input(i)))
        .chain(
            bound
                .iter()
                .map(|(p, v)| (store.name(*p).to_string(), *v, Target::Param(*p))),
        )
        .collect::<Vec<_>>();

    for (name, var, target) in targets {
        let numel = g.value(var).numel();
        let analytic = grads.get(var).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(var)));
        if let Some(i) = analytic.first_non_finite() {
            return Err(Error::NonFinite {
                context: format!("analytic gradient of `{name}`"),
                detail: format!("element {i}"),
            });
        }
        let picks: Vec<usize> = match config.max_per_tensor {
            Some(m) if m < numel => {
                let mut v = sample(&mut rng, numel, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..numel).collect(),
        };
        let scale = analytic.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let mut worst = (0.0, 0);
        let mut max_abs = 0.0f64;
        let mut numeric = Vec::with_capacity(picks.len());
        for &k in &picks {
            // Returns the loss and the perturbation actually applied, which
            // differs from `delta` by the rounding of `orig + delta`.
            let mut probe = |delta: f64| -> Result<(f64, f64)> {
                let slot = match target {
                    Target::Input(i) => &mut values[i].data_mut()[k],
                    Target::Param(p) => &mut work.get_mut(p).data_mut()[k],
                };
                let orig = *slot;
                *slot = orig + delta;
                let applied = *slot;
                let r = eval(&work, &values).map(|l| (l, applied));
                match target {
                    Target::Input(i) => values[i].data_mut()[k] = orig,
                    Target::Param(p) => work.get_mut(p).data_mut()[k] = orig,
                }
                r
            };
            let (fp, xp) = probe(config.step)?;
            let (fm, xm) = probe(-config.step)?;
            let n = (fp - fm) / (xp - xm);
            if !n.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("numeric gradient of `{name}`"),
                    detail: format!("element {k}"),
                });
            }
            numeric.push(n);
        }
        let scale = numeric.iter().fold(scale, |a, v| a.max(v.abs()));
        let floor = (1e-3 * scale).max(1e-12);
        for (&k, n) in picks.iter().zip(&numeric) {
            let a = analytic.data()[k];
            max_abs = max_abs.max((a - n).abs());
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            if rel > worst.0 {
                worst = (rel, k);
            }
        }
        report.tensors.push(TensorReport {
            name,
            checked: picks.len(),
            max_rel_error: worst.0,
            worst_index: worst.1,
            max_abs_error: max_abs,
            scale,
        });
    }
    Ok(report)
}

#[derive(Clone, Copy)]
enum Target {
    Input(usize),
    Param(crate::params::ParamId),
}

/// Random fixed projection, a convenient way to reduce any output to a
/// scalar without symmetric cancellations.
pub fn projection(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}
