//! Layers built from graph primitives. Parameters live in a [`ParamStore`];
//! a layer only remembers the ids it registered.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GradError, Graph, ParamId, ParamStore, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self, GradError> {
        let weight = store.add_uniform(format!("{name}.weight"), &[in_dim, out_dim], in_dim, rng)?;
        let bias = store.add_uniform(format!("{name}.bias"), &[out_dim], in_dim, rng)?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    /// All-zero weights and bias; used for output heads.
    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self, GradError> {
        let weight = store.add_zeros(format!("{name}.weight"), &[in_dim, out_dim])?;
        let bias = store.add_zeros(format!("{name}.bias"), &[out_dim])?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, GradError> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self, GradError> {
        Ok(Self {
            gamma: store.add_full(format!("{name}.gamma"), &[dim], 1.0)?,
            beta: store.add_zeros(format!("{name}.beta"), &[dim])?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, GradError> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self, GradError> {
        let table = store.add_uniform(format!("{name}.table"), &[vocab, dim], dim, rng)?;
        Ok(Self { table, vocab, dim })
    }

    /// Indices beyond the table are clamped to the last row.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        indices: &[usize],
        index_shape: &[usize],
    ) -> Result<Var, GradError> {
        let clamped: Vec<usize> = indices.iter().map(|&i| i.min(self.vocab - 1)).collect();
        let t = g.param(store, self.table);
        g.gather(t, &clamped, index_shape)
    }
}

/// Query/key/value projections around the fused causal attention op.
#[derive(Clone, Debug)]
pub struct CausalSelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl CausalSelfAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self, GradError> {
        if heads == 0 || dim % heads != 0 {
            return Err(GradError::HeadSplit { dim, heads });
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, rng)?,
            key: Linear::new(store, &format!("{name}.key"), dim, dim, rng)?,
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng)?,
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, rng)?,
            heads,
        })
    }

    /// `x` is `[batch, time, dim]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        key_valid: Option<&[bool]>,
    ) -> Result<Var, GradError> {
        let q = self.query.forward(g, store, x)?;
        let k = self.key.forward(g, store, x)?;
        let v = self.value.forward(g, store, x)?;
        let y = g.attention(q, k, v, self.heads, key_valid)?;
        self.proj.forward(g, store, y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrunkConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub dropout: f64,
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    attn: CausalSelfAttention,
    ln2: LayerNorm,
    fc: Linear,
    out: Linear,
}

/// Pre-norm GPT trunk with GELU feed-forward (4x width).
#[derive(Clone, Debug)]
pub struct Transformer {
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    pub config: TrunkConfig,
}

impl Transformer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        config: TrunkConfig,
        rng: &mut R,
    ) -> Result<Self, GradError> {
        let d = config.dim;
        let mut blocks = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let p = format!("{name}.block{i}");
            blocks.push(Block {
                ln1: LayerNorm::new(store, &format!("{p}.ln1"), d)?,
                attn: CausalSelfAttention::new(store, &format!("{p}.attn"), d, config.heads, rng)?,
                ln2: LayerNorm::new(store, &format!("{p}.ln2"), d)?,
                fc: Linear::new(store, &format!("{p}.fc"), d, 4 * d, rng)?,
                out: Linear::new(store, &format!("{p}.out"), 4 * d, d, rng)?,
            });
        }
        Ok(Self {
            blocks,
            ln_f: LayerNorm::new(store, &format!("{name}.ln_f"), d)?,
            config,
        })
    }

    /// `x` is `[batch, time, dim]`; dropout is applied only when `rng` is given.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        key_valid: Option<&[bool]>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, GradError> {
        let p = self.config.dropout;
        let mut h = match rng.as_deref_mut() {
            Some(r) => g.dropout(x, p, r)?,
            None => x,
        };
        for block in &self.blocks {
            let a = block.ln1.forward(g, store, h)?;
            let mut a = block.attn.forward(g, store, a, key_valid)?;
            if let Some(r) = rng.as_deref_mut() {
                a = g.dropout(a, p, r)?;
            }
            h = g.add(h, a)?;
            let f = block.ln2.forward(g, store, h)?;
            let f = block.fc.forward(g, store, f)?;
            let f = g.gelu(f)?;
            let mut f = block.out.forward(g, store, f)?;
            if let Some(r) = rng.as_deref_mut() {
                f = g.dropout(f, p, r)?;
            }
            h = g.add(h, f)?;
        }
        self.ln_f.forward(g, store, h)
    }
}
