//! Parameterised building blocks shared by the encoder, fusion and decoder.

use rand::Rng;

use crate::autodiff::{Activation, Graph, Var};
use crate::params::{truncated_normal, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Standard deviation of the truncated-normal init used for dense layers.
pub const DENSE_INIT_STD: f64 = 0.02;

/// Dense layer `x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        Self::with_std(store, rng, name, in_dim, out_dim, bias, DENSE_INIT_STD)
    }

    pub fn with_std<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        std: f64,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), truncated_normal(rng, [in_dim, out_dim], std), false);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([out_dim]), true));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row_bias(y, b)
            }
            None => y,
        }
    }
}

/// Two-layer perceptron `Linear -> act -> Linear`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub act: Activation,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dims: (usize, usize, usize),
        act: Activation,
    ) -> Self {
        let (i, h, o) = dims;
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), i, h, true),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), h, o, true),
            act,
        }
    }

    /// Variant with `1/sqrt(fan_in)` weights, so outputs stay at unit scale without a following norm.
    pub fn fan_in<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dims: (usize, usize, usize),
        act: Activation,
    ) -> Self {
        let (i, h, o) = dims;
        let std = |n: usize| 1.0 / (n as f64).sqrt();
        Self {
            fc1: Linear::with_std(store, rng, &format!("{name}.fc1"), i, h, true, std(i)),
            fc2: Linear::with_std(store, rng, &format!("{name}.fc2"), h, o, true, std(h)),
            act,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.activation(h, self.act);
        self.fc2.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full([dim], T::one()), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([dim]), true),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gm, bt, Self::EPS)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub const EPS: f64 = 1e-5;

    /// Up to eight groups, falling back to fewer when channels do not divide.
    pub fn group_count(channels: usize) -> usize {
        (1..=8.min(channels))
            .rev()
            .find(|g| channels % g == 0)
            .unwrap_or(1)
    }

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full([channels], T::one()), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([channels]), true),
            groups: Self::group_count(channels),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.group_norm(x, self.groups, gm, bt, Self::EPS)
    }
}

/// 3x3 "same" convolution; weights drawn with fan-in scaled std.
#[derive(Clone, Debug)]
pub struct Conv3x3 {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Conv3x3 {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
    ) -> Self {
        let std = (1.0 / (9 * in_ch) as f64).sqrt();
        Self {
            weight: store.add(
                format!("{name}.weight"),
                truncated_normal(rng, [out_ch, in_ch * 9], std),
                false,
            ),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([out_ch]), true),
            in_ch,
            out_ch,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.conv3x3(x, w, b)
    }
}

/// 1x1 convolution. `zero_init` starts the layer at the zero map.
#[derive(Clone, Debug)]
pub struct Conv1x1 {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv1x1 {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        zero_init: bool,
    ) -> Self {
        let weight = if zero_init {
            Tensor::zeros([out_ch, in_ch])
        } else {
            truncated_normal(rng, [out_ch, in_ch], (1.0 / in_ch as f64).sqrt())
        };
        Self {
            weight: store.add(format!("{name}.weight"), weight, false),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([out_ch]), true),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.conv1x1(x, w, b)
    }
}

/// Output of a multi-head attention application.
pub struct AttentionOutput {
    /// Projected output, `[L_q, D]`.
    pub out: Var,
    /// Concatenated head outputs before the output projection, `[L_q, D]`.
    pub heads: Var,
    /// Per-head attention probabilities, each `[L_q, L_k]`.
    pub probs: Vec<Var>,
}

/// Multi-head scaled dot-product attention with bias-free Q/K/V projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        Self::with_std(store, rng, name, dim, heads, DENSE_INIT_STD)
    }

    pub fn with_std<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        std: f64,
    ) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim must be divisible by heads");
        let lin = |store: &mut ParamStore<T>, rng: &mut R, n: &str, bias| Linear::with_std(store, rng, &format!("{name}.{n}"), dim, dim, bias, std);
        Self {
            wq: lin(store, rng, "wq", false),
            wk: lin(store, rng, "wk", false),
            wv: lin(store, rng, "wv", false),
            wo: lin(store, rng, "wo", true),
            heads,
            dim,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, queries: Var, context: Var) -> AttentionOutput {
        let q = self.wq.forward(g, queries);
        let k = self.wk.forward(g, context);
        let v = self.wv.forward(g, context);
        let dk = self.head_dim();
        let scale = T::one() / T::of(dk as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dk, dk),
                    g.slice_cols(k, h * dk, dk),
                    g.slice_cols(v, h * dk, dk),
                )
            };
            let scores = g.matmul_t(qh, false, kh, true);
            let scores = g.scale(scores, scale);
            let p = g.softmax_rows(scores);
            outs.push(g.matmul(p, vh));
            probs.push(p);
        }
        let heads = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        let out = self.wo.forward(g, heads);
        AttentionOutput { out, heads, probs }
    }
}
