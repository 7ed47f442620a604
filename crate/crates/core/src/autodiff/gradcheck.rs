//! Central finite-difference verification of analytic gradients.
//!
//! Relative error is measured per tensor as `‖analytic − numeric‖₂ /
//! max(‖analytic‖₂, ‖numeric‖₂)`. Tensors whose gradients both sit below the
//! round-off floor of a central difference on an O(1) loss (norm `1e-8`) count as
//! exact; a bias ahead of a per-channel norm has a true gradient of zero and only
//! noise on the numeric side.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Label of the tensor with the largest error.
    pub worst: String,
    pub checked_entries: usize,
}

const ZERO_NORM: f64 = 1e-8;

fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < ZERO_NORM {
        0.0
    } else {
        diff / scale
    }
}

fn merge(report: &mut GradCheck, err: f64, label: String, n: usize) {
    report.checked_entries += n;
    if err > report.max_rel_error || report.worst.is_empty() {
        report.max_rel_error = err;
        report.worst = label;
    }
}

/// Check gradients of a scalar function of the given input tensors, all entries.
pub fn check_inputs<F>(inputs: Vec<Tensor<f64>>, step: f64, build: F) -> GradCheck
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Var,
{
    let eval = |inputs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out);

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: String::new(),
        checked_entries: 0,
    };
    let mut work = inputs.clone();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(v)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let mut numeric = vec![0.0; inputs[i].len()];
        for (j, num) in numeric.iter_mut().enumerate() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let fp = eval(&work);
            work[i].data_mut()[j] = orig - step;
            let fm = eval(&work);
            work[i].data_mut()[j] = orig;
            *num = (fp - fm) / (2.0 * step);
        }
        merge(&mut report, rel_error(&analytic, &numeric), format!("input {i}"), numeric.len());
    }
    report
}

/// Check parameter gradients of a scalar function of a parameter store.
///
/// At most `max_entries` randomly chosen entries of each tensor are probed.
pub fn check_params<F>(
    store: &ParamStore<f64>,
    step: f64,
    max_entries: usize,
    seed: u64,
    build: F,
) -> GradCheck
where
    F: Fn(&mut Graph<'_, f64>) -> Var,
{
    let mut g = Graph::with_params(store);
    let out = build(&mut g);
    let grads = g.backward(out);
    let analytic_all: Vec<Option<Tensor<f64>>> = store
        .ids()
        .map(|id| grads.param(id).cloned())
        .collect();
    drop(grads);
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: String::new(),
        checked_entries: 0,
    };
    let eval = |s: &ParamStore<f64>| -> f64 {
        let mut g = Graph::inference(s);
        let out = build(&mut g);
        g.value(out).item()
    };
    for (id, analytic) in store.ids().zip(analytic_all) {
        let n = store.get(id).len();
        let picks: Vec<usize> = if n <= max_entries {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, max_entries).into_vec();
            v.sort_unstable();
            v
        };
        let mut a = Vec::with_capacity(picks.len());
        let mut num = Vec::with_capacity(picks.len());
        for &j in &picks {
            a.push(analytic.as_ref().map_or(0.0, |t| t.data()[j]));
            let orig = store.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + step;
            let fp = eval(&work);
            work.get_mut(id).data_mut()[j] = orig - step;
            let fm = eval(&work);
            work.get_mut(id).data_mut()[j] = orig;
            num.push((fp - fm) / (2.0 * step));
        }
        let name = store.iter().nth(id.index()).map(|p| p.name.clone()).unwrap_or_default();
        merge(&mut report, rel_error(&a, &num), name, picks.len());
    }
    report
}
