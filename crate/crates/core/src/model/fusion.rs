//! Cross-attention from map tokens (queries) into point tokens (keys/values).

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, MultiHeadAttention};
use crate::params::ParamStore;
use crate::scalar::Scalar;

pub struct Fused {
    /// `LN(f_m + attn)`, `[T, D]`.
    pub tokens: Var,
    /// Attention output before the residual, `[T, D]`.
    pub attended: Var,
    /// Per-head `[T, k]` attention over the points.
    pub probs: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct CrossAttentionFusion {
    pub attn: MultiHeadAttention,
    pub norm: LayerNorm,
}

impl CrossAttentionFusion {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, dim: usize, heads: usize) -> Self {
        Self {
            attn: MultiHeadAttention::with_std(store, rng, "fusion.attn", dim, heads, (1.0 / dim as f64).sqrt()),
            norm: LayerNorm::new(store, "fusion.ln", dim),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, map_tokens: Var, point_tokens: Var) -> Result<Fused> {
        let (ms, ps) = (g.shape(map_tokens).to_vec(), g.shape(point_tokens).to_vec());
        if ms.len() != 2 || ps.len() != 2 || ms[1] != self.attn.dim || ps[1] != self.attn.dim || ps[0] == 0 {
            return Err(Error::invalid(format!("fusion got map {ms:?} and points {ps:?}")));
        }
        let a = self.attn.forward(g, map_tokens, point_tokens);
        let r = g.add(map_tokens, a.out);
        let tokens = self.norm.forward(g, r);
        Ok(Fused { tokens, attended: a.out, probs: a.probs })
    }
}
