//! Central-difference verification of tape gradients.
//!
//! Each parameter tensor is probed along a random unit direction and at a
//! handful of individual entries (all entries for small tensors). The
//! directional probe exercises every entry of the analytic gradient at once.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Ctx, Mode, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Individual entries probed per tensor; tensors at most this large are probed exhaustively.
    pub entries_per_tensor: usize,
    pub directions_per_tensor: usize,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            tol: 1e-4,
            entries_per_tensor: 2,
            directions_per_tensor: 1,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub probes: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tol: f64,
    pub checks: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.max_rel_err < self.tol)
    }

    pub fn probes(&self) -> usize {
        self.checks.iter().map(|c| c.probes).sum()
    }

    /// Maximum relative error grouped by the first `depth` name components.
    pub fn by_module(&self, depth: usize) -> Vec<(String, f64, usize)> {
        let mut m: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for c in &self.checks {
            let key = c.name.split('.').take(depth).collect::<Vec<_>>().join(".");
            let e = m.entry(key).or_insert((0.0, 0));
            e.0 = e.0.max(c.max_rel_err);
            e.1 += 1;
        }
        m.into_iter().map(|(k, (e, n))| (k, e, n)).collect()
    }

    pub fn module_table(&self, depth: usize) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<40} {:>8} {:>14}  status", "module", "tensors", "max_rel_err");
        for (name, err, n) in self.by_module(depth) {
            let status = if err < self.tol { "pass" } else { "FAIL" };
            let _ = writeln!(s, "{name:<40} {n:>8} {err:>14.3e}  {status}");
        }
        s
    }
}

fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Check the gradient of the scalar produced by `f` with respect to every
/// parameter in `store`. The store is restored before returning.
pub fn grad_check<F>(store: &mut ParamStore, mode: Mode, mut f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Ctx<'_>) -> Result<Var>,
{
    let analytic = {
        let mut cx = Ctx::new(store, mode);
        let loss = f(&mut cx)?;
        cx.backward(loss)?.grads
    };
    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut cx = Ctx::inference(store, mode);
        let loss = f(&mut cx)?;
        Ok(cx.value(loss).item())
    };
    let mut rng = Rng::new(opts.seed);
    let ids: Vec<ParamId> = store.ids().collect();
    let mut checks = Vec::with_capacity(ids.len());
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        let n = store.get(id).numel();
        let grad = analytic[id.0].clone().unwrap_or_else(|| Tensor::zeros(&shape));
        let mut probes: Vec<Tensor> = Vec::new();
        for _ in 0..opts.directions_per_tensor {
            let mut u = Tensor::from_fn(&shape, |_| rng.normal());
            let norm = u.data().iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            u.data_mut().iter_mut().for_each(|v| *v /= norm);
            probes.push(u);
        }
        let entries: Vec<usize> = if n <= opts.entries_per_tensor {
            (0..n).collect()
        } else {
            let mut all: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut all);
            all.truncate(opts.entries_per_tensor);
            all
        };
        for e in entries {
            let mut u = Tensor::zeros(&shape);
            u.data_mut()[e] = 1.0;
            probes.push(u);
        }
        let original = store.get(id).clone();
        let mut worst: f64 = 0.0;
        for u in &probes {
            let a: f64 = grad.data().iter().zip(u.data()).map(|(g, d)| g * d).sum();
            let shifted = |sign: f64| {
                Tensor::from_fn(&shape, |i| original.data()[i] + sign * opts.eps * u.data()[i])
            };
            *store.get_mut(id) = shifted(1.0);
            let plus = eval(store);
            *store.get_mut(id) = shifted(-1.0);
            let minus = eval(store);
            *store.get_mut(id) = original.clone();
            let numeric = (plus? - minus?) / (2.0 * opts.eps);
            if !a.is_finite() || !numeric.is_finite() {
                return Err(Error::NonFinite { op: "grad_check" });
            }
            worst = worst.max(rel_err(a, numeric, opts.floor));
        }
        checks.push(TensorCheck {
            name: store.name(id).to_string(),
            probes: probes.len(),
            max_rel_err: worst,
        });
    }
    Ok(GradCheckReport { tol: opts.tol, checks })
}
