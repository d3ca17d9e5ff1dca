//! Small layers shared by the backbone, fusion, enhancement and head.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{Init, ParamStore};

pub const LN_EPS: f64 = 1e-5;

/// `x W + b`, weight stored `[in, out]`. Fan-in scaled uniform weights,
/// zero bias.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = init.uniform(&format!("{name}.weight"), &[in_dim, out_dim], bound);
        let bias = init.constant(&format!("{name}.bias"), &[out_dim], 0.0);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn num_params(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight)?;
        let b = g.param(store, &self.bias)?;
        Ok(g.linear(x, w, b))
    }
}

/// Normalization over the last axis with learned scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, dim: usize) -> Self {
        Self {
            gamma: init.constant(&format!("{name}.gamma"), &[dim], 1.0),
            beta: init.constant(&format!("{name}.beta"), &[dim], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, &self.gamma)?;
        let beta = g.param(store, &self.beta)?;
        let z = g.standardize_rows(x, LN_EPS);
        let z = g.mul_row(z, gamma);
        Ok(g.add_row(z, beta))
    }
}

/// Two-layer perceptron `fc2(gelu(fc1(x)))`.
#[derive(Clone, Debug)]
pub struct Mlp2 {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp2 {
    pub fn new(init: &mut Init, name: &str, in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        Self {
            fc1: Linear::new(init, &format!("{name}.fc1"), in_dim, hidden),
            fc2: Linear::new(init, &format!("{name}.fc2"), hidden, out_dim),
        }
    }

    pub fn num_params(in_dim: usize, hidden: usize, out_dim: usize) -> usize {
        Linear::num_params(in_dim, hidden) + Linear::num_params(hidden, out_dim)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}

/// Multi-head scaled dot-product self-attention, no positional terms.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(init, &format!("{name}.q"), dim, dim),
            k: Linear::new(init, &format!("{name}.k"), dim, dim),
            v: Linear::new(init, &format!("{name}.v"), dim, dim),
            o: Linear::new(init, &format!("{name}.o"), dim, dim),
            heads,
        }
    }

    pub fn num_params(dim: usize) -> usize {
        4 * Linear::num_params(dim, dim)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(g, store, x)?.0)
    }

    /// Also returns the per-head `[L, L]` attention matrices.
    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let dim = self.q.out_dim;
        let hd = dim / self.heads;
        let q = self.q.forward(g, store, x)?;
        let k = self.k.forward(g, store, x)?;
        let v = self.v.forward(g, store, x)?;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * hd, hd);
            let kh = g.slice_cols(k, h * hd, hd);
            let vh = g.slice_cols(v, h * hd, hd);
            let scores = g.matmul_nt(qh, kh);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            weights.push(attn);
            outs.push(g.matmul(attn, vh));
        }
        let joined = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        Ok((self.o.forward(g, store, joined)?, weights))
    }
}

/// Pre-norm transformer encoder layer: attention and a ×2 feed-forward,
/// each wrapped in a residual connection.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub norm1: LayerNorm,
    pub attn: SelfAttention,
    pub norm2: LayerNorm,
    pub ffn: Mlp2,
}

impl TransformerLayer {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            norm1: LayerNorm::new(init, &format!("{name}.norm1"), dim),
            attn: SelfAttention::new(init, &format!("{name}.attn"), dim, heads),
            norm2: LayerNorm::new(init, &format!("{name}.norm2"), dim),
            ffn: Mlp2::new(init, &format!("{name}.ffn"), dim, 2 * dim, dim),
        }
    }

    pub fn num_params(dim: usize) -> usize {
        4 * dim + SelfAttention::num_params(dim) + Mlp2::num_params(dim, 2 * dim, dim)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.norm1.forward(g, store, x)?;
        let h = self.attn.forward(g, store, h)?;
        let x = g.add(x, h);
        let h = self.norm2.forward(g, store, x)?;
        let h = self.ffn.forward(g, store, h)?;
        Ok(g.add(x, h))
    }
}
