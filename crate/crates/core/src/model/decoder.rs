//! Convolutional upsampling decoder from the fused token grid to an `[N, H, W]` volume.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv1x1, Conv3x3, GroupNorm, Linear};
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub base_channels: usize,
    /// Number of resolution stages; stage `i > 0` doubles the resolution.
    pub stages: usize,
    pub nonlocal_stages: Vec<usize>,
    /// Lower bound when halving channels per stage.
    pub channel_floor: usize,
    pub res_blocks: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            base_channels: 128,
            stages: 4,
            nonlocal_stages: vec![0],
            channel_floor: 32,
            res_blocks: 2,
        }
    }
}

impl DecoderConfig {
    pub fn upscale(&self) -> usize {
        1 << self.stages.saturating_sub(1)
    }

    pub fn channels(&self) -> Vec<usize> {
        let mut c = self.base_channels;
        (0..self.stages)
            .map(|i| {
                if i > 0 {
                    c = (c / 2).max(self.channel_floor);
                }
                c
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.base_channels == 0 || self.channel_floor == 0 {
            return Err(Error::invalid("decoder needs at least one stage and positive widths"));
        }
        if let Some(&s) = self.nonlocal_stages.iter().find(|&&s| s >= self.stages) {
            return Err(Error::invalid(format!("non-local stage {s} beyond {} stages", self.stages)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    n1: GroupNorm,
    c1: Conv3x3,
    n2: GroupNorm,
    c2: Conv3x3,
}

impl ResBlock {
    fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, ch: usize) -> Self {
        Self {
            n1: GroupNorm::new(store, &format!("{name}.gn1"), ch),
            c1: Conv3x3::new(store, rng, &format!("{name}.conv1"), ch, ch),
            n2: GroupNorm::new(store, &format!("{name}.gn2"), ch),
            c2: Conv3x3::new(store, rng, &format!("{name}.conv2"), ch, ch),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let h = self.n1.forward(g, x);
        let h = g.silu(h);
        let h = self.c1.forward(g, h);
        let h = self.n2.forward(g, h);
        let h = g.silu(h);
        let h = self.c2.forward(g, h);
        g.add(x, h)
    }
}

/// Spatial self-attention block; the output projection starts at zero so the block is the identity.
#[derive(Clone, Debug)]
pub struct NonLocal {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Conv1x1,
}

impl NonLocal {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, ch: usize) -> Self {
        Self {
            norm: GroupNorm::new(store, &format!("{name}.gn"), ch),
            q: Linear::new(store, rng, &format!("{name}.q"), ch, ch, false),
            k: Linear::new(store, rng, &format!("{name}.k"), ch, ch, false),
            v: Linear::new(store, rng, &format!("{name}.v"), ch, ch, false),
            out: Conv1x1::new(store, rng, &format!("{name}.out"), ch, ch, true),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let shape = g.shape(x).to_vec();
        let (c, hw) = (shape[0], shape[1] * shape[2]);
        let h = self.norm.forward(g, x);
        let h = g.reshape(h, [c, hw]);
        let h = g.transpose(h);
        // bias-free projections: a key bias would only shift each softmax row
        let q = self.q.forward(g, h);
        let k = self.k.forward(g, h);
        let v = self.v.forward(g, h);
        let s = g.matmul_t(q, false, k, true);
        let s = g.scale(s, T::one() / T::of(c as f64).sqrt());
        let p = g.softmax_rows(s);
        let a = g.matmul(p, v);
        let a = g.transpose(a);
        let a = g.reshape(a, shape);
        let o = self.out.forward(g, a);
        g.add(x, o)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    up: Option<Conv3x3>,
    blocks: Vec<ResBlock>,
    nonlocal: Option<NonLocal>,
}

#[derive(Clone, Debug)]
pub struct VolumeDecoder {
    stem: Conv3x3,
    stages: Vec<Stage>,
    head_norm: GroupNorm,
    head: Conv3x3,
    grid: (usize, usize),
    d_model: usize,
}

impl VolumeDecoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        cfg: &DecoderConfig,
        d_model: usize,
        grid: (usize, usize),
        layers: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let chans = cfg.channels();
        let stem = Conv3x3::new(store, rng, "decoder.stem", d_model, chans[0]);
        let mut stages = Vec::with_capacity(cfg.stages);
        for (i, &c) in chans.iter().enumerate() {
            let up = (i > 0).then(|| Conv3x3::new(store, rng, &format!("decoder.stage{i}.up"), chans[i - 1], c));
            let blocks = (0..cfg.res_blocks)
                .map(|b| ResBlock::new(store, rng, &format!("decoder.stage{i}.res{b}"), c))
                .collect();
            let nonlocal = cfg
                .nonlocal_stages
                .contains(&i)
                .then(|| NonLocal::new(store, rng, &format!("decoder.stage{i}.nonlocal"), c));
            stages.push(Stage { up, blocks, nonlocal });
        }
        let last = *chans.last().expect("at least one stage");
        Ok(Self {
            stem,
            stages,
            head_norm: GroupNorm::new(store, "decoder.head_gn", last),
            head: Conv3x3::new(store, rng, "decoder.head", last, layers),
            grid,
            d_model,
        })
    }

    /// Decodes `[T, D]` tokens laid out row-major over the patch grid into `[N, H, W]` in `(0, 1)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, tokens: Var) -> Result<Var> {
        let (gh, gw) = self.grid;
        let shape = g.shape(tokens).to_vec();
        if shape != [gh * gw, self.d_model] {
            return Err(Error::invalid(format!(
                "decoder expects [{}, {}] tokens, got {shape:?}",
                gh * gw,
                self.d_model
            )));
        }
        let x = g.transpose(tokens);
        let x = g.reshape(x, [self.d_model, gh, gw]);
        let mut x = self.stem.forward(g, x);
        for s in &self.stages {
            if let Some(up) = &s.up {
                let u = g.upsample2x(x);
                x = up.forward(g, u);
            }
            for b in &s.blocks {
                x = b.forward(g, x);
            }
            if let Some(nl) = &s.nonlocal {
                x = nl.forward(g, x);
            }
        }
        let h = self.head_norm.forward(g, x);
        let h = g.silu(h);
        let h = self.head.forward(g, h);
        Ok(g.sigmoid(h))
    }
}
