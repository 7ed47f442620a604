//! Training objectives: robust regression, volume, rendering and sample-statistics terms.

mod pixel;
mod render;

pub use pixel::{js_divergence, js_divergence_var, pixel_loss, pixel_loss_var, soft_histogram, soft_histogram_var, PixelTerms};
pub use render::{composite_column, radio_rendering_loss, radio_rendering_loss_var, render_heights, render_heights_var, Composite};

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volume::{build_pseudo_volume, BuildingHeightMap, RadioVolume, SampleSet, SupervisionSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_v: f64,
    pub lambda_r: f64,
    pub lambda_p: f64,
    pub lambda_pl: f64,
    pub huber_delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_v: 1.0,
            lambda_r: 0.05,
            lambda_p: 0.1,
            lambda_pl: SupervisionSpec::DEFAULT_PSEUDO_LABEL_WEIGHT,
            huber_delta: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_v, self.lambda_r, self.lambda_p, self.lambda_pl];
        if all.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        if !(self.huber_delta > 0.0) {
            return Err(Error::invalid("huber delta must be positive"));
        }
        Ok(())
    }
}

/// Rendering intervals and the initial density gain and threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderParams {
    pub k_gain: f64,
    pub t_threshold: f64,
    /// `N - 1` gaps between consecutive altitudes, metres.
    pub delta_z: Vec<f64>,
    pub top_down: bool,
}

impl RenderParams {
    pub const DEFAULT_K: f64 = 10.0;
    pub const DEFAULT_T: f64 = 0.5;

    pub fn for_altitudes(altitudes: &[f64]) -> Self {
        Self {
            k_gain: Self::DEFAULT_K,
            t_threshold: Self::DEFAULT_T,
            delta_z: altitudes.windows(2).map(|w| w[1] - w[0]).collect(),
            top_down: true,
        }
    }

    /// Interval attached to each layer. A layer's interval is the gap to its
    /// neighbour below; the bottom layer reuses the gap above it (1 m with a single layer).
    pub fn layer_intervals(&self, layers: usize) -> Result<Vec<f64>> {
        if self.delta_z.len() + 1 != layers {
            return Err(Error::invalid(format!(
                "{} altitude intervals for {layers} layers",
                self.delta_z.len()
            )));
        }
        if self.delta_z.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::invalid("altitude intervals must be positive"));
        }
        let mut out = Vec::with_capacity(layers);
        out.push(self.delta_z.first().copied().unwrap_or(1.0));
        out.extend_from_slice(&self.delta_z);
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PixelLossConfig {
    pub altitude_bins: usize,
    pub hist_bins: usize,
    pub hist_bandwidth: f64,
}

impl Default for PixelLossConfig {
    fn default() -> Self {
        Self {
            altitude_bins: 8,
            hist_bins: 2,
            hist_bandwidth: 0.25,
        }
    }
}

impl PixelLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.altitude_bins == 0 || self.hist_bins < 2 || !(self.hist_bandwidth > 0.0) {
            return Err(Error::invalid("pixel loss needs >= 1 altitude bin, >= 2 histogram bins and a positive bandwidth"));
        }
        Ok(())
    }
}

/// Per-element Huber penalty.
pub fn huber_elem(e: f64, delta: f64) -> f64 {
    let a = e.abs();
    if a <= delta {
        0.5 * e * e
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// Mean Huber penalty between two equally long slices.
pub fn huber<T: Scalar>(pred: &[T], target: &[T], delta: f64) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::invalid(format!(
            "huber on {} vs {} elements",
            pred.len(),
            target.len()
        )));
    }
    if !(delta > 0.0) {
        return Err(Error::invalid("huber delta must be positive"));
    }
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| huber_elem((p - t).f64(), delta))
        .sum();
    Ok(s / pred.len() as f64)
}

/// Mean Huber penalty of `pred` against a fixed target with the same number of elements.
pub fn huber_var<T: Scalar>(g: &mut Graph<'_, T>, pred: Var, target: &[T], delta: f64) -> Result<Var> {
    let pv = g.value(pred);
    if pv.len() != target.len() || target.is_empty() {
        return Err(Error::invalid(format!(
            "huber on {} vs {} elements",
            pv.len(),
            target.len()
        )));
    }
    if !(delta > 0.0) {
        return Err(Error::invalid("huber delta must be positive"));
    }
    let d = T::of(delta);
    let half = T::of(0.5);
    let n = T::of(target.len() as f64);
    let mut total = T::zero();
    for (&p, &t) in pv.data().iter().zip(target) {
        let e = p - t;
        let a = e.abs();
        total += if a <= d { half * e * e } else { d * (a - half * d) };
    }
    let shape = pv.shape().to_vec();
    let target = target.to_vec();
    Ok(g.custom(&[pred], Tensor::scalar(total / n), move |ctx, up, sink| {
        let scale = up.item() / n;
        let pv = ctx.value(pred).data();
        let dp = sink.slot(pred, &shape);
        for ((dd, &p), &t) in dp.iter_mut().zip(pv).zip(&target) {
            *dd += scale * (p - t).max(-d).min(d);
        }
    }))
}

/// Mean squared error against a fixed target.
pub fn mse_var<T: Scalar>(g: &mut Graph<'_, T>, pred: Var, target: &[T]) -> Result<Var> {
    let pv = g.value(pred);
    if pv.len() != target.len() || target.is_empty() {
        return Err(Error::invalid(format!("mse on {} vs {} elements", pv.len(), target.len())));
    }
    let n = T::of(target.len() as f64);
    let total: T = pv.data().iter().zip(target).map(|(&p, &t)| (p - t) * (p - t)).sum();
    let shape = pv.shape().to_vec();
    let target = target.to_vec();
    Ok(g.custom(&[pred], Tensor::scalar(total / n), move |ctx, up, sink| {
        let scale = T::of(2.0) * up.item() / n;
        let pv = ctx.value(pred).data();
        let dp = sink.slot(pred, &shape);
        for ((dd, &p), &t) in dp.iter_mut().zip(pv).zip(&target) {
            *dd += scale * (p - t);
        }
    }))
}

pub fn mse_loss<T: Scalar>(pred: &RadioVolume<T>, target: &RadioVolume<T>) -> Result<f64> {
    if pred.dims() != target.dims() {
        return Err(Error::invalid(format!("mse on {:?} vs {:?}", pred.dims(), target.dims())));
    }
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let e = (p - t).f64();
            e * e
        })
        .sum();
    Ok(s / pred.data().len() as f64)
}

/// Ground truth visible under weak supervision: the supervised slices and the
/// pseudo-label volume interpolated from them. Unlabeled layers are never read.
#[derive(Clone, Debug)]
pub struct WeakTargets<T> {
    pub supervision: SupervisionSpec,
    /// Supervised slices, layer-major, `N_s * H * W` values.
    pub slices: Vec<T>,
    pub pseudo: RadioVolume<T>,
}

impl<T: Scalar> WeakTargets<T> {
    pub fn new(truth: &RadioVolume<T>, supervision: &SupervisionSpec) -> Result<Self> {
        let n = truth.layers();
        if let Some(&z) = supervision.layers().iter().find(|&&z| z >= n) {
            return Err(Error::invalid(format!("supervised layer {z} out of range for {n} layers")));
        }
        let slices: Vec<&[T]> = supervision.layers().iter().map(|&z| truth.layer(z)).collect();
        let alts: Vec<f64> = supervision.layers().iter().map(|&z| truth.altitudes()[z]).collect();
        let pseudo = build_pseudo_volume(&slices, &alts, truth.altitudes(), truth.height(), truth.width())?;
        Ok(Self {
            supervision: supervision.clone(),
            slices: slices.concat(),
            pseudo,
        })
    }

    /// Flat indices of the supervised voxels in an `N x H x W` volume.
    pub fn supervised_indices(&self) -> Vec<usize> {
        let plane = self.pseudo.layer_len();
        self.supervision
            .layers()
            .iter()
            .flat_map(|&z| z * plane..(z + 1) * plane)
            .collect()
    }

    fn check_pred(&self, shape: &[usize]) -> Result<()> {
        let (n, h, w) = self.pseudo.dims();
        if shape != [n, h, w] {
            return Err(Error::invalid(format!("prediction shape {shape:?}, expected [{n}, {h}, {w}]")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct VolumeTerms {
    pub total: Var,
    pub supervised: Var,
    pub pseudo: Var,
}

/// `(1/N_s) sum_k huber(pred[z_k], R_s^k) + lambda_pl huber(pred, G_l)`.
pub fn linear_volume_loss_var<T: Scalar>(
    g: &mut Graph<'_, T>,
    pred: Var,
    targets: &WeakTargets<T>,
    weights: &LossWeights,
) -> Result<VolumeTerms> {
    targets.check_pred(g.shape(pred))?;
    // every slice has H*W voxels, so one mean over all supervised voxels is the layer average
    let sup_pred = g.gather(pred, targets.supervised_indices());
    let supervised = huber_var(g, sup_pred, &targets.slices, weights.huber_delta)?;
    let pseudo = huber_var(g, pred, targets.pseudo.data(), weights.huber_delta)?;
    let weighted = g.scale(pseudo, T::of(weights.lambda_pl));
    let total = g.add(supervised, weighted);
    Ok(VolumeTerms { total, supervised, pseudo })
}

pub fn linear_volume_loss<T: Scalar>(pred: &RadioVolume<T>, targets: &WeakTargets<T>, weights: &LossWeights) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(pred.to_tensor());
    let terms = linear_volume_loss_var(&mut g, p, targets, weights)?;
    Ok(g.value(terms.total).item().f64())
}

/// Mean squared error over the supervised layers only.
pub fn mse_weak_var<T: Scalar>(g: &mut Graph<'_, T>, pred: Var, targets: &WeakTargets<T>) -> Result<Var> {
    targets.check_pred(g.shape(pred))?;
    let sup_pred = g.gather(pred, targets.supervised_indices());
    mse_var(g, sup_pred, &targets.slices)
}

/// Everything the combined objective needs besides the prediction.
pub struct LossInputs<'a, T> {
    pub targets: &'a WeakTargets<T>,
    pub buildings: &'a BuildingHeightMap<T>,
    pub max_height: f64,
    pub samples: &'a SampleSet,
}

/// Graph handles of every reported term.
#[derive(Clone, Copy, Debug)]
pub struct JsilTerms {
    pub total: Var,
    pub l_v: Var,
    pub l_r: Var,
    pub l_p: Var,
    pub l_v_sup: Var,
    pub l_v_pl: Var,
}

/// `lambda_v L_v + lambda_r L_r + lambda_p L_p`; `k` and `t` are the learnable render scalars.
#[allow(clippy::too_many_arguments)]
pub fn total_loss_var<T: Scalar>(
    g: &mut Graph<'_, T>,
    pred: Var,
    inputs: &LossInputs<'_, T>,
    weights: &LossWeights,
    k: Var,
    t: Var,
    rp: &RenderParams,
    cfg: &PixelLossConfig,
) -> Result<JsilTerms> {
    weights.validate()?;
    let v = linear_volume_loss_var(g, pred, inputs.targets, weights)?;
    let l_r = radio_rendering_loss_var(
        g,
        pred,
        k,
        t,
        inputs.targets.pseudo.altitudes(),
        inputs.buildings,
        inputs.max_height,
        rp,
        weights.huber_delta,
    )?;
    let p = pixel_loss_var(g, pred, inputs.samples, cfg, weights.huber_delta)?;
    let a = g.scale(v.total, T::of(weights.lambda_v));
    let b = g.scale(l_r, T::of(weights.lambda_r));
    let c = g.scale(p.total, T::of(weights.lambda_p));
    let ab = g.add(a, b);
    let total = g.add(ab, c);
    Ok(JsilTerms {
        total,
        l_v: v.total,
        l_r,
        l_p: p.total,
        l_v_sup: v.supervised,
        l_v_pl: v.pseudo,
    })
}

/// Scalar values of every loss term for one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_total: f64,
    pub l_v: f64,
    pub l_r: f64,
    pub l_p: f64,
    pub l_v_sup: f64,
    pub l_v_pl: f64,
}

impl LossReport {
    pub const CSV_HEADER: [&'static str; 7] = ["step", "L_total", "L_v", "L_r", "L_p", "L_v_sup", "L_v_pl"];

    pub fn from_terms<T: Scalar>(g: &Graph<'_, T>, terms: &JsilTerms) -> Self {
        let v = |x: Var| g.value(x).item().f64();
        Self {
            l_total: v(terms.total),
            l_v: v(terms.l_v),
            l_r: v(terms.l_r),
            l_p: v(terms.l_p),
            l_v_sup: v(terms.l_v_sup),
            l_v_pl: v(terms.l_v_pl),
        }
    }

    pub fn write_csv<W: Write>(out: W, rows: &[(usize, LossReport)]) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::CSV_HEADER)?;
        for (step, r) in rows {
            w.write_record([
                step.to_string(),
                r.l_total.to_string(),
                r.l_v.to_string(),
                r.l_r.to_string(),
                r.l_p.to_string(),
                r.l_v_sup.to_string(),
                r.l_v_pl.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Evaluates the combined objective on a fixed prediction.
pub fn total_loss<T: Scalar>(
    pred: &RadioVolume<T>,
    inputs: &LossInputs<'_, T>,
    weights: &LossWeights,
    rp: &RenderParams,
    cfg: &PixelLossConfig,
) -> Result<LossReport> {
    let mut g = Graph::new();
    let p = g.constant(pred.to_tensor());
    let k = g.constant(Tensor::scalar(T::of(rp.k_gain)));
    let t = g.constant(Tensor::scalar(T::of(rp.t_threshold)));
    let terms = total_loss_var(&mut g, p, inputs, weights, k, t, rp, cfg)?;
    Ok(LossReport::from_terms(&g, &terms))
}
