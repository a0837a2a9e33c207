//! Parameter storage and transformer building blocks.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names; the prefix of a
//! name (`backbone.text.`, `adapter.v.`, `fusion.`, `head.`) decides which
//! stage may update it. Model components hold [`ParamId`] handles and build
//! their forward pass on a [`Graph`] whose leaf nodes mirror the store.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rng;
use crate::tensor::Tensor;
use rand_chacha::ChaCha12Rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
}

/// Named, ordered parameter tensors. Registration order is fixed by model
/// construction, which makes initialization and checkpoints reproducible.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter {name}")));
        }
        self.entries.push(ParamEntry { name, tensor });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    /// Total scalar count across parameters whose name passes `filter`.
    pub fn scalar_count(&self, filter: impl Fn(&str) -> bool) -> usize {
        self.entries
            .iter()
            .filter(|e| filter(&e.name))
            .map(|e| e.tensor.len())
            .sum()
    }

    /// Insert one graph leaf per parameter, in registration order.
    pub fn leaves(&self, g: &mut Graph) -> Vec<NodeId> {
        self.entries
            .iter()
            .map(|e| g.leaf(e.tensor.clone()))
            .collect()
    }

    /// FNV-1a over the bit pattern of every tensor matching `filter`;
    /// used for exact freeze-contract checks.
    pub fn digest(&self, filter: impl Fn(&str) -> bool) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for e in &self.entries {
            if !filter(&e.name) {
                continue;
            }
            for b in e.name.as_bytes() {
                h ^= *b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            for v in e.tensor.data() {
                for b in v.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

// ---- initializers ----

pub fn xavier_normal(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> Tensor {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng::normal(rng) * std).collect();
    Tensor::from_vec(rows, cols, data).expect("xavier shape")
}

pub fn normal_init(rng: &mut ChaCha12Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng::normal(rng) * std).collect();
    Tensor::from_vec(rows, cols, data).expect("normal shape")
}

// ---- layers ----

/// Affine map `x * w + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        prefix: &str,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self> {
        let w = store.register(format!("{prefix}.w"), xavier_normal(rng, d_in, d_out))?;
        let b = store.register(format!("{prefix}.b"), Tensor::zeros(1, d_out))?;
        Ok(Linear { w, b, d_in, d_out })
    }

    pub fn forward(&self, g: &mut Graph, params: &[NodeId], x: NodeId) -> Result<NodeId> {
        g.linear(x, params[self.w.0], params[self.b.0])
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn register(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        let gain = store.register(
            format!("{prefix}.gain"),
            Tensor::row_vector(vec![1.0; dim]),
        )?;
        let bias = store.register(format!("{prefix}.bias"), Tensor::zeros(1, dim))?;
        Ok(LayerNorm { gain, bias })
    }

    pub fn forward(&self, g: &mut Graph, params: &[NodeId], x: NodeId) -> Result<NodeId> {
        g.layer_norm(x, params[self.gain.0], params[self.bias.0], LAYER_NORM_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        prefix: &str,
        d_model: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {d_model} not divisible by heads {heads}"
            )));
        }
        Ok(MultiHeadAttention {
            wq: Linear::register(store, rng, &format!("{prefix}.q"), d_model, d_model)?,
            wk: Linear::register(store, rng, &format!("{prefix}.k"), d_model, d_model)?,
            wv: Linear::register(store, rng, &format!("{prefix}.v"), d_model, d_model)?,
            wo: Linear::register(store, rng, &format!("{prefix}.o"), d_model, d_model)?,
            heads,
            d_model,
        })
    }

    pub fn forward(&self, g: &mut Graph, params: &[NodeId], x: NodeId) -> Result<NodeId> {
        let q = self.wq.forward(g, params, x)?;
        let k = self.wk.forward(g, params, x)?;
        let v = self.wv.forward(g, params, x)?;
        let dh = self.d_model / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, lo, hi)?;
            let kh = g.slice_cols(k, lo, hi)?;
            let vh = g.slice_cols(v, lo, hi)?;
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt)?;
            let scaled = g.scale(scores, scale);
            let attn = g.softmax_rows(scaled);
            head_outs.push(g.matmul(attn, vh)?);
        }
        let merged = g.concat_cols(&head_outs)?;
        self.wo.forward(g, params, merged)
    }
}

/// Post-norm transformer encoder layer: attention and feed-forward sublayers,
/// each wrapped in residual + layer norm. ReLU feed-forward activation.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln2: LayerNorm,
}

impl TransformerLayer {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        prefix: &str,
        d_model: usize,
        heads: usize,
        d_ff: usize,
    ) -> Result<Self> {
        Ok(TransformerLayer {
            attn: MultiHeadAttention::register(
                store,
                rng,
                &format!("{prefix}.attn"),
                d_model,
                heads,
            )?,
            ln1: LayerNorm::register(store, &format!("{prefix}.ln1"), d_model)?,
            ff1: Linear::register(store, rng, &format!("{prefix}.ff1"), d_model, d_ff)?,
            ff2: Linear::register(store, rng, &format!("{prefix}.ff2"), d_ff, d_model)?,
            ln2: LayerNorm::register(store, &format!("{prefix}.ln2"), d_model)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, params: &[NodeId], x: NodeId) -> Result<NodeId> {
        let a = self.attn.forward(g, params, x)?;
        let res1 = g.add(x, a)?;
        let x1 = self.ln1.forward(g, params, res1)?;
        let h = self.ff1.forward(g, params, x1)?;
        let h = g.relu(h);
        let f = self.ff2.forward(g, params, h)?;
        let res2 = g.add(x1, f)?;
        self.ln2.forward(g, params, res2)
    }
}

/// Fixed sinusoidal positional encoding, `len x dim`.
pub fn positional_encoding(len: usize, dim: usize) -> Tensor {
    let mut pe = Tensor::zeros(len, dim);
    for pos in 0..len {
        for i in 0..dim {
            let exponent = (2 * (i / 2)) as f64 / dim as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            pe.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}
