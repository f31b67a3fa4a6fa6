use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Coordinates sampled across all parameters (all of them if fewer).
    pub max_coords: usize,
    pub seed: u64,
    /// Build the graph in training mode with this RNG seed. Checks are
    /// rejected if the graph then draws random numbers.
    pub train_seed: Option<u64>,
    /// Skip coordinates where the forward and backward one-sided differences
    /// disagree by more than this fraction: the loss has a kink (ReLU, max)
    /// inside the step there, so no finite difference is meaningful.
    pub kink_tol: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            max_coords: 200,
            seed: 0,
            train_seed: None,
            kink_tol: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|a - n| / max(1e-8, |a| + |n|)` seen.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// Coordinates dropped by `kink_tol`.
    pub skipped: usize,
}

fn graph(opts: &GradCheckOptions) -> Graph<f64> {
    match opts.train_seed {
        Some(s) => Graph::train(ChaCha8Rng::seed_from_u64(s)),
        None => Graph::new(),
    }
}

fn eval<F>(store: &ParamStore<f64>, f: &F, opts: &GradCheckOptions) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = graph(opts);
    let v = f(&mut g, store)?;
    Ok(g.value(v).item())
}

/// Compares reverse-mode gradients of the scalar built by `f` with central
/// differences on a random sample of parameter coordinates.
pub fn grad_check<F>(store: &ParamStore<f64>, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = graph(opts);
    let loss = f(&mut g, store)?;
    if g.is_stochastic() {
        return Err(Error::invalid(
            "grad_check needs a deterministic graph, but a random op was active",
        ));
    }
    let grads = g.backward(loss)?;
    drop(g);

    let coords: Vec<(ParamId, usize)> = store
        .ids()
        .flat_map(|id| (0..store.get(id).len()).map(move |i| (id, i)))
        .collect();
    let picked: Vec<usize> = if coords.len() <= opts.max_coords {
        (0..coords.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut v = rand::seq::index::sample(&mut rng, coords.len(), opts.max_coords).into_vec();
        v.sort_unstable();
        v
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
        skipped: 0,
    };
    let f0 = match opts.kink_tol {
        Some(_) => eval(store, &f, opts)?,
        None => 0.0,
    };
    for ci in picked {
        let (id, idx) = coords[ci];
        let base = store.get(id).data()[idx];
        let mut plus = store.clone();
        plus.get_mut(id).data_mut()[idx] = base + opts.eps;
        let mut minus = store.clone();
        minus.get_mut(id).data_mut()[idx] = base - opts.eps;
        let fp = eval(&plus, &f, opts)?;
        let fm = eval(&minus, &f, opts)?;
        if let Some(tol) = opts.kink_tol {
            let (fwd, bwd) = ((fp - f0) / opts.eps, (f0 - fm) / opts.eps);
            if (fwd - bwd).abs() > tol * (fwd.abs() + bwd.abs()).max(1e-8) {
                report.skipped += 1;
                continue;
            }
        }
        let numeric = (fp - fm) / (2.0 * opts.eps);
        let analytic = grads.get(id).map_or(0.0, |t| t.data()[idx]);
        if !numeric.is_finite() || !analytic.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {}[{idx}]", store.name(id))));
        }
        let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
        report.checked += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((store.name(id).to_string(), idx));
        }
    }
    Ok(report)
}
