//! Sample-statistics objective: per-altitude-bin moments plus a histogram divergence.

use super::{huber_var, PixelLossConfig};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volume::SampleSet;

fn bin_center(b: usize, bins: usize) -> f64 {
    (b as f64 + 0.5) / bins as f64
}

/// Kernel responsibilities of one value over the bins (a softmax of the log-kernels).
fn responsibilities<T: Scalar>(v: T, centers: &[T], inv_two_bw2: T, out: &mut [T]) {
    let mut hi = T::neg_infinity();
    for (o, &c) in out.iter_mut().zip(centers) {
        *o = -(v - c) * (v - c) * inv_two_bw2;
        hi = hi.max(*o);
    }
    let mut s = T::zero();
    for o in out.iter_mut() {
        *o = (*o - hi).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

/// Gaussian-kernel soft histogram of a `[n]` vector. Centres sit at `(b + 0.5) / bins`;
/// each value's kernel weights are normalised to one before averaging.
pub fn soft_histogram_var<T: Scalar>(g: &mut Graph<'_, T>, values: Var, bins: usize, bandwidth: f64) -> Result<Var> {
    let n = g.value(values).len();
    if n == 0 {
        return Err(Error::invalid("soft histogram of an empty set"));
    }
    if bins < 2 || !(bandwidth > 0.0) {
        return Err(Error::invalid("soft histogram needs >= 2 bins and a positive bandwidth"));
    }
    let centers: Vec<T> = (0..bins).map(|b| T::of(bin_center(b, bins))).collect();
    let inv = T::of(1.0 / (2.0 * bandwidth * bandwidth));
    let nf = T::of(n as f64);
    let mut hist = vec![T::zero(); bins];
    let mut q = vec![T::zero(); bins];
    for &v in g.value(values).data() {
        responsibilities(v, &centers, inv, &mut q);
        for (h, &qb) in hist.iter_mut().zip(&q) {
            *h += qb;
        }
    }
    hist.iter_mut().for_each(|h| *h /= nf);
    let inv_bw2 = T::of(1.0 / (bandwidth * bandwidth));
    Ok(g.custom(&[values], Tensor::new([bins], hist), move |ctx, up, sink| {
        let vs = ctx.value(values).data();
        let mut q = vec![T::zero(); centers.len()];
        let dv = sink.slot(values, &[vs.len()]);
        for (d, &v) in dv.iter_mut().zip(vs) {
            responsibilities(v, &centers, inv, &mut q);
            // d q_b / d v = q_b (g_b - sum_c q_c g_c) with g_b = -(v - c_b) / bw^2
            let gs: Vec<T> = centers.iter().map(|&c| -(v - c) * inv_bw2).collect();
            let mean_g: T = q.iter().zip(&gs).map(|(&a, &b)| a * b).sum();
            let mut acc = T::zero();
            for b in 0..q.len() {
                acc += up.data()[b] * q[b] * (gs[b] - mean_g);
            }
            *d += acc / nf;
        }
    }))
}

pub fn soft_histogram<T: Scalar>(values: &[T], bins: usize, bandwidth: f64) -> Result<Vec<T>> {
    let mut g = Graph::new();
    let v = g.constant(Tensor::new([values.len()], values.to_vec()));
    let h = soft_histogram_var(&mut g, v, bins, bandwidth)?;
    Ok(g.value(h).data().to_vec())
}

fn check_distributions<T: Scalar>(p: &[T], q: &[T]) -> Result<()> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::invalid(format!("distributions of length {} and {}", p.len(), q.len())));
    }
    for d in [p, q] {
        let s: f64 = d.iter().map(|v| v.f64()).sum();
        if (s - 1.0).abs() > 1e-6 || d.iter().any(|v| *v < T::zero()) {
            return Err(Error::invalid(format!("not a probability vector (sum {s})")));
        }
    }
    Ok(())
}

fn xlogy_ratio<T: Scalar>(a: T, e: T) -> T {
    if a > T::zero() {
        a * (a / e).ln()
    } else {
        T::zero()
    }
}

/// Jensen-Shannon divergence (natural log) between two probability vectors.
pub fn js_divergence_var<T: Scalar>(g: &mut Graph<'_, T>, p: Var, q: Var) -> Result<Var> {
    check_distributions(g.value(p).data(), g.value(q).data())?;
    let half = T::of(0.5);
    let value: T = g
        .value(p)
        .data()
        .iter()
        .zip(g.value(q).data())
        .map(|(&a, &b)| {
            let e = half * (a + b);
            half * (xlogy_ratio(a, e) + xlogy_ratio(b, e))
        })
        .sum();
    let len = g.value(p).len();
    Ok(g.custom(&[p, q], Tensor::scalar(value), move |ctx, up, sink| {
        let u = up.item();
        let (pv, qv) = (ctx.value(p).data(), ctx.value(q).data());
        // d/dP_b = 0.5 log(P_b / E_b)
        let grad = |a: T, b: T| {
            if a > T::zero() {
                half * (a / (half * (a + b))).ln()
            } else {
                T::zero()
            }
        };
        if sink.needs(p) {
            let d = sink.slot(p, &[len]);
            for i in 0..len {
                d[i] += u * grad(pv[i], qv[i]);
            }
        }
        if sink.needs(q) {
            let d = sink.slot(q, &[len]);
            for i in 0..len {
                d[i] += u * grad(qv[i], pv[i]);
            }
        }
    }))
}

pub fn js_divergence<T: Scalar>(p: &[T], q: &[T]) -> Result<f64> {
    let mut g = Graph::new();
    let pv = g.constant(Tensor::new([p.len()], p.to_vec()));
    let qv = g.constant(Tensor::new([q.len()], q.to_vec()));
    let j = js_divergence_var(&mut g, pv, qv)?;
    Ok(g.value(j).item().f64())
}

#[derive(Clone, Copy, Debug)]
pub struct PixelTerms {
    pub total: Var,
    /// Sum over non-empty altitude bins of the mean and standard-deviation penalties.
    pub moments: Var,
    pub js: Var,
}

/// Sample-statistics loss of a `[N, H, W]` prediction against the sparse observations.
pub fn pixel_loss_var<T: Scalar>(
    g: &mut Graph<'_, T>,
    pred: Var,
    samples: &SampleSet,
    cfg: &PixelLossConfig,
    delta: f64,
) -> Result<PixelTerms> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("pixel loss needs at least one sample"));
    }
    let shape = g.shape(pred).to_vec();
    if shape.len() != 3 {
        return Err(Error::invalid(format!("pixel loss expects [N, H, W], got {shape:?}")));
    }
    let (n, h, w) = (shape[0], shape[1], shape[2]);
    let kb = cfg.altitude_bins;
    let mut bins: Vec<(Vec<usize>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); kb];
    let mut all_idx = Vec::with_capacity(samples.len());
    let mut all_obs = Vec::with_capacity(samples.len());
    for o in samples.observations() {
        let (z, y, x) = o.voxel(n, h, w);
        let flat = (z * h + y) * w + x;
        let b = (z * kb / n).min(kb - 1);
        bins[b].0.push(flat);
        bins[b].1.push(o.value);
        all_idx.push(flat);
        all_obs.push(T::of(o.value));
    }

    let mut moments: Option<Var> = None;
    for (idx, obs) in bins.into_iter().filter(|(i, _)| !i.is_empty()) {
        let m = obs.len() as f64;
        let mean = obs.iter().sum::<f64>() / m;
        let std = (obs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m).sqrt();
        let vals = g.gather(pred, idx);
        let ms = g.mean_std(vals);
        // huber_var averages the two entries
        let pair = huber_var(g, ms, &[T::of(mean), T::of(std)], delta)?;
        let pair = g.scale(pair, T::of(2.0));
        moments = Some(match moments {
            Some(acc) => g.add(acc, pair),
            None => pair,
        });
    }
    let moments = moments.expect("at least one non-empty bin");

    let vals = g.gather(pred, all_idx);
    let p = soft_histogram_var(g, vals, cfg.hist_bins, cfg.hist_bandwidth)?;
    let qh = soft_histogram(&all_obs, cfg.hist_bins, cfg.hist_bandwidth)?;
    let q = g.constant(Tensor::new([cfg.hist_bins], qh));
    let js = js_divergence_var(g, p, q)?;
    let total = g.add(moments, js);
    Ok(PixelTerms { total, moments, js })
}

pub fn pixel_loss<T: Scalar>(
    pred: &crate::volume::RadioVolume<T>,
    samples: &SampleSet,
    cfg: &PixelLossConfig,
    delta: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(pred.to_tensor());
    let terms = pixel_loss_var(&mut g, p, samples, cfg, delta)?;
    Ok(g.value(terms.total).item().f64())
}
