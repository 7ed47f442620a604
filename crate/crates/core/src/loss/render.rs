//! Differentiable vertical compositing of a predicted volume into a height map.

use super::{huber_var, RenderParams};
use crate::autodiff::{sigmoid, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volume::{BuildingHeightMap, RadioVolume};

/// Per-sample compositing state of one column, in traversal order.
#[derive(Clone, Debug, PartialEq)]
pub struct Composite {
    pub alpha: Vec<f64>,
    pub transmittance: Vec<f64>,
    pub weights: Vec<f64>,
    pub height: f64,
}

/// Composites one ray: `alpha = 1 - exp(-sigma dz)`, `T_i = prod_{j<i} (1 - alpha_j)`,
/// `w_i = T_i alpha_i`, height `sum w_i z_i`. An infinite density is fully opaque.
pub fn composite_column(sigmas: &[f64], deltas: &[f64], altitudes: &[f64]) -> Composite {
    assert_eq!(sigmas.len(), deltas.len());
    assert_eq!(sigmas.len(), altitudes.len());
    let n = sigmas.len();
    let mut out = Composite {
        alpha: Vec::with_capacity(n),
        transmittance: Vec::with_capacity(n),
        weights: Vec::with_capacity(n),
        height: 0.0,
    };
    let mut trans = 1.0;
    for i in 0..n {
        let a = if sigmas[i].is_infinite() { 1.0 } else { 1.0 - (-sigmas[i] * deltas[i]).exp() };
        let w = trans * a;
        out.alpha.push(a);
        out.transmittance.push(trans);
        out.weights.push(w);
        out.height += w * altitudes[i];
        trans *= 1.0 - a;
    }
    out
}

struct Layout {
    order: Vec<usize>,
    dz: Vec<f64>,
    alt: Vec<f64>,
}

fn layout(layers: usize, altitudes: &[f64], rp: &RenderParams) -> Result<Layout> {
    if altitudes.len() != layers {
        return Err(Error::invalid(format!("{} altitudes for {layers} layers", altitudes.len())));
    }
    let intervals = rp.layer_intervals(layers)?;
    let order: Vec<usize> = if rp.top_down { (0..layers).rev().collect() } else { (0..layers).collect() };
    Ok(Layout {
        dz: order.iter().map(|&z| intervals[z]).collect(),
        alt: order.iter().map(|&z| altitudes[z]).collect(),
        order,
    })
}

/// Rendered height `[H, W]` of a `[N, H, W]` prediction with scalar density gain `k` and threshold `t`.
pub fn render_heights_var<T: Scalar>(
    g: &mut Graph<'_, T>,
    pred: Var,
    k: Var,
    t: Var,
    altitudes: &[f64],
    rp: &RenderParams,
) -> Result<Var> {
    let shape = g.shape(pred).to_vec();
    if shape.len() != 3 {
        return Err(Error::invalid(format!("render expects [N, H, W], got {shape:?}")));
    }
    let (n, h, w) = (shape[0], shape[1], shape[2]);
    let lay = layout(n, altitudes, rp)?;
    let plane = h * w;
    let kv = g.value(k).item();
    let tv = g.value(t).item();
    let pv = g.value(pred).data();
    let dz: Vec<T> = lay.dz.iter().map(|&d| T::of(d)).collect();
    let alt: Vec<T> = lay.alt.iter().map(|&a| T::of(a)).collect();

    let mut heights = vec![T::zero(); plane];
    for (c, out) in heights.iter_mut().enumerate() {
        let mut trans = T::one();
        for (i, &z) in lay.order.iter().enumerate() {
            let sigma = sigmoid(kv * (pv[z * plane + c] - tv));
            let a = T::one() - (-sigma * dz[i]).exp();
            *out += trans * a * alt[i];
            trans *= T::one() - a;
        }
    }

    let order = lay.order;
    Ok(g.custom(&[pred, k, t], Tensor::new([h, w], heights), move |ctx, up, sink| {
        let pv = ctx.value(pred).data();
        let kv = ctx.value(k).item();
        let tv = ctx.value(t).item();
        let nn = order.len();
        let mut sig = vec![T::zero(); nn];
        let mut alpha = vec![T::zero(); nn];
        let mut trans = vec![T::zero(); nn];
        let mut dv = vec![T::zero(); nn];
        let (mut gk, mut gt) = (T::zero(), T::zero());
        let mut gpred = if sink.needs(pred) { Some(vec![T::zero(); pv.len()]) } else { None };
        for c in 0..plane {
            let u = up.data()[c];
            let mut tr = T::one();
            for (i, &z) in order.iter().enumerate() {
                sig[i] = sigmoid(kv * (pv[z * plane + c] - tv));
                alpha[i] = T::one() - (-sig[i] * dz[i]).exp();
                trans[i] = tr;
                tr *= T::one() - alpha[i];
            }
            // dM/dalpha_j = T_j (z_j - A_j), A_j = alpha_{j+1} z_{j+1} + (1 - alpha_{j+1}) A_{j+1}
            let mut acc = T::zero();
            for j in (0..nn).rev() {
                let dm_da = trans[j] * (alt[j] - acc);
                let da_ds = dz[j] * (T::one() - alpha[j]);
                let ds = sig[j] * (T::one() - sig[j]);
                let common = u * dm_da * da_ds * ds;
                let v = pv[order[j] * plane + c];
                dv[j] = common * kv;
                gk += common * (v - tv);
                gt -= common * kv;
                acc = alpha[j] * alt[j] + (T::one() - alpha[j]) * acc;
            }
            if let Some(gp) = gpred.as_mut() {
                for (j, &z) in order.iter().enumerate() {
                    gp[z * plane + c] += dv[j];
                }
            }
        }
        if let Some(gp) = gpred {
            sink.add(pred, Tensor::new(ctx.value(pred).shape().to_vec(), gp));
        }
        if sink.needs(k) {
            sink.slot(k, &[1])[0] += gk;
        }
        if sink.needs(t) {
            sink.slot(t, &[1])[0] += gt;
        }
    }))
}

pub fn render_heights<T: Scalar>(pred: &RadioVolume<T>, rp: &RenderParams) -> Result<BuildingHeightMap<T>> {
    let mut g = Graph::new();
    let p = g.constant(pred.to_tensor());
    let k = g.constant(Tensor::scalar(T::of(rp.k_gain)));
    let t = g.constant(Tensor::scalar(T::of(rp.t_threshold)));
    let m = render_heights_var(&mut g, p, k, t, pred.altitudes(), rp)?;
    BuildingHeightMap::new(pred.height(), pred.width(), g.value(m).data().to_vec())
}

/// `huber(render(pred) / H_max, M / H_max)`.
#[allow(clippy::too_many_arguments)]
pub fn radio_rendering_loss_var<T: Scalar>(
    g: &mut Graph<'_, T>,
    pred: Var,
    k: Var,
    t: Var,
    altitudes: &[f64],
    buildings: &BuildingHeightMap<T>,
    max_height: f64,
    rp: &RenderParams,
    delta: f64,
) -> Result<Var> {
    if !(max_height > 0.0) {
        return Err(Error::invalid("maximum scene height must be positive"));
    }
    let shape = g.shape(pred);
    if shape.len() != 3 || shape[1] != buildings.height() || shape[2] != buildings.width() {
        return Err(Error::invalid("prediction and building map footprints differ"));
    }
    let m = render_heights_var(g, pred, k, t, altitudes, rp)?;
    let inv = T::of(1.0 / max_height);
    let m = g.scale(m, inv);
    let target: Vec<T> = buildings.heights().iter().map(|&v| v * inv).collect();
    huber_var(g, m, &target, delta)
}

pub fn radio_rendering_loss<T: Scalar>(
    pred: &RadioVolume<T>,
    buildings: &BuildingHeightMap<T>,
    max_height: f64,
    rp: &RenderParams,
    delta: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(pred.to_tensor());
    let k = g.constant(Tensor::scalar(T::of(rp.k_gain)));
    let t = g.constant(Tensor::scalar(T::of(rp.t_threshold)));
    let l = radio_rendering_loss_var(&mut g, p, k, t, pred.altitudes(), buildings, max_height, rp, delta)?;
    Ok(g.value(l).item().f64())
}
