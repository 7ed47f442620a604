//! Point stream (Fourier features, adaptive radius, FiLM) and map stream (patch transformer).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::params::{truncated_normal, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volume::{BuildingHeightMap, SampleSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub k_freq: usize,
    pub d_model: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub heads: usize,
    pub film_alpha: f64,
    pub radius_epsilon: f64,
    /// Hidden width of the transformer MLPs as a multiple of `d_model`.
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            k_freq: 6,
            d_model: 128,
            patch_size: 8,
            depth: 4,
            heads: 4,
            film_alpha: 0.1,
            radius_epsilon: 1e-3,
            mlp_ratio: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.patch_size == 0 || height % self.patch_size != 0 || width % self.patch_size != 0 {
            return Err(Error::invalid(format!(
                "patch size {} does not divide the {height}x{width} map",
                self.patch_size
            )));
        }
        if self.k_freq == 0 || !(self.radius_epsilon > 0.0) || self.mlp_ratio == 0 {
            return Err(Error::invalid("k_freq, radius_epsilon and mlp_ratio must be positive"));
        }
        Ok(())
    }
}

/// `[sin(2^k pi p) || cos(2^k pi p)]` for `k = 0..K`, length `6K`.
pub fn fourier_encode(p: [f64; 3], k_freq: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(6 * k_freq);
    for k in 0..k_freq {
        let f = (1u64 << k) as f64 * std::f64::consts::PI;
        out.extend(p.iter().map(|&c| (f * c).sin()));
        out.extend(p.iter().map(|&c| (f * c).cos()));
    }
    out
}

/// Point-stream outputs; every field is `[k, .]`.
#[derive(Clone, Copy, Debug)]
pub struct PointTokens {
    pub tokens: Var,
    pub radii: Var,
    pub h: Var,
    pub gamma: Var,
    pub beta: Var,
}

#[derive(Clone, Debug)]
pub struct PointEncoder {
    pub coord: Mlp,
    pub radius: Mlp,
    pub film: Mlp,
    pub d_model: usize,
    pub k_freq: usize,
    pub alpha: f64,
    pub epsilon: f64,
}

pub const RADIUS_HIDDEN: usize = 32;

impl PointEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, cfg: &EncoderConfig) -> Self {
        let d = cfg.d_model;
        Self {
            coord: Mlp::fan_in(store, rng, "points.coord", (6 * cfg.k_freq, d, d), Activation::Gelu),
            radius: Mlp::fan_in(store, rng, "points.radius", (4, RADIUS_HIDDEN, 1), Activation::Gelu),
            film: Mlp::fan_in(store, rng, "points.film", (5, d, 2 * d), Activation::Gelu),
            d_model: d,
            k_freq: cfg.k_freq,
            alpha: cfg.film_alpha,
            epsilon: cfg.radius_epsilon,
        }
    }

    /// Encodes `[k, 4]` rows of `(p_x, p_y, p_z, v)` with `p` in `[0, 1]^3`.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<'_, T>, pv: Var) -> Result<PointTokens> {
        let shape = g.shape(pv).to_vec();
        if shape.len() != 2 || shape[1] != 4 || shape[0] == 0 {
            return Err(Error::invalid(format!("point input must be [k, 4], got {shape:?}")));
        }
        let rows = g.value(pv).data().to_vec();
        if !rows.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite point input"));
        }
        let k = shape[0];
        let mut feats = Vec::with_capacity(k * 6 * self.k_freq);
        for r in rows.chunks(4) {
            let p = [r[0].f64(), r[1].f64(), r[2].f64()];
            feats.extend(fourier_encode(p, self.k_freq).into_iter().map(T::of));
        }
        let feats = g.constant(Tensor::new([k, 6 * self.k_freq], feats));
        let h = self.coord.forward(g, feats);

        let r = self.radius.forward(g, pv);
        let r = g.softplus(r);
        let radii = g.add_scalar(r, T::of(self.epsilon));

        let c = g.concat_cols(&[pv, radii]);
        let gb = self.film.forward(g, c);
        let gamma = g.slice_cols(gb, 0, self.d_model);
        let beta = g.slice_cols(gb, self.d_model, self.d_model);
        let t = g.tanh(gamma);
        let t = g.scale(t, T::of(self.alpha));
        let s = g.add_scalar(t, T::one());
        let m = g.mul(s, h);
        let tokens = g.add(m, beta);
        Ok(PointTokens { tokens, radii, h, gamma, beta })
    }
}

/// `[k, 4]` model input: coordinates divided by `(W, H, N)` and the observed value.
pub fn point_inputs<T: Scalar>(samples: &SampleSet, layers: usize, height: usize, width: usize) -> Result<Tensor<T>> {
    samples.check_bounds(layers, height, width)?;
    let mut data = Vec::with_capacity(samples.len() * 4);
    for o in samples.observations() {
        data.extend([
            T::of(o.x / width as f64),
            T::of(o.y / height as f64),
            T::of(o.z / layers as f64),
            T::of(o.value),
        ]);
    }
    Ok(Tensor::new([samples.len(), 4], data))
}

/// Map-stream output: `[(H/p)(W/p), D]` tokens and per-block, per-head attention.
pub struct MapTokens {
    pub tokens: Var,
    pub attention: Vec<Vec<Var>>,
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct MapEncoder {
    embed: Linear,
    pos: ParamId,
    blocks: Vec<Block>,
    ln_out: LayerNorm,
    patch: usize,
    grid: (usize, usize),
}

impl MapEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        cfg: &EncoderConfig,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        cfg.validate(height, width)?;
        let p = cfg.patch_size;
        let grid = (height / p, width / p);
        let d = cfg.d_model;
        let embed = Linear::new(store, rng, "map.embed", p * p, d, true);
        let pos = store.add("map.pos", truncated_normal(rng, [grid.0 * grid.1, d], crate::nn::DENSE_INIT_STD), true);
        let blocks = (0..cfg.depth)
            .map(|i| Block {
                ln1: LayerNorm::new(store, &format!("map.block{i}.ln1"), d),
                attn: MultiHeadAttention::new(store, rng, &format!("map.block{i}.attn"), d, cfg.heads),
                ln2: LayerNorm::new(store, &format!("map.block{i}.ln2"), d),
                mlp: Mlp::new(store, rng, &format!("map.block{i}.mlp"), (d, cfg.mlp_ratio * d, d), Activation::Gelu),
            })
            .collect();
        Ok(Self {
            embed,
            pos,
            blocks,
            ln_out: LayerNorm::new(store, "map.ln_out", d),
            patch: p,
            grid,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    /// Encodes a building map normalised by `max_height`.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<'_, T>, map: &BuildingHeightMap<T>, max_height: f64) -> Result<MapTokens> {
        let (gh, gw) = self.grid;
        let p = self.patch;
        if map.height() != gh * p || map.width() != gw * p {
            return Err(Error::invalid(format!(
                "map is {}x{}, encoder expects {}x{}",
                map.height(),
                map.width(),
                gh * p,
                gw * p
            )));
        }
        if !(max_height > 0.0) {
            return Err(Error::invalid("maximum height must be positive"));
        }
        let inv = T::of(1.0 / max_height);
        let mut patches = Vec::with_capacity(map.heights().len());
        for py in 0..gh {
            for px in 0..gw {
                for y in 0..p {
                    for x in 0..p {
                        let v = map.at(py * p + y, px * p + x) * inv;
                        patches.push(v.max(T::zero()).min(T::one()));
                    }
                }
            }
        }
        let patches = g.constant(Tensor::new([gh * gw, p * p], patches));
        let x = self.embed.forward(g, patches);
        let pos = g.param(self.pos);
        let mut x = g.add(x, pos);
        let mut attention = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let n1 = b.ln1.forward(g, x);
            let a = b.attn.forward(g, n1, n1);
            x = g.add(x, a.out);
            let n2 = b.ln2.forward(g, x);
            let m = b.mlp.forward(g, n2);
            x = g.add(x, m);
            attention.push(a.probs);
        }
        let tokens = self.ln_out.forward(g, x);
        Ok(MapTokens { tokens, attention })
    }
}
