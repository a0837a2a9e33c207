//! Backbone encoders producing pan-knowledge representations.
//!
//! The text backbone is a seed-initialized stand-in for a pretrained
//! language model: token embeddings, sinusoidal positions, stacked
//! transformer layers, and a first-position pooler (affine + tanh). It stays
//! frozen under the stage rules. Vision and audio use the same layer stack
//! over a linear input projection and pool by sequence mean. Every encoder
//! also exposes its full hidden stack so adapters can tap intermediate
//! states.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{positional_encoding, xavier_normal, Linear, ParamId, ParamStore, TransformerLayer};
use crate::tensor::Tensor;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// First-position vector through affine + tanh (pretrained-LM pooler).
    FirstToken,
    /// Mean over the sequence axis.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub d_repr: usize,
    pub pooling: Pooling,
    /// Never train this backbone, regardless of stage.
    pub freeze: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            num_layers: 2,
            d_model: 32,
            heads: 4,
            d_ff: 64,
            max_seq_len: 64,
            d_repr: 32,
            pooling: Pooling::Mean,
            freeze: false,
        }
    }
}

impl BackboneConfig {
    pub fn text_default() -> Self {
        BackboneConfig {
            num_layers: 4,
            pooling: Pooling::FirstToken,
            freeze: true,
            ..BackboneConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::InvalidConfig("num_layers must be >= 1".into()));
        }
        if self.d_repr == 0 {
            return Err(Error::InvalidConfig("d_repr must be >= 1".into()));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.max_seq_len == 0 || self.d_ff == 0 || self.d_model == 0 {
            return Err(Error::InvalidConfig(
                "d_model, d_ff, max_seq_len must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Ordered per-layer activations: embedding output first, then each layer's
/// output, `num_layers + 1` entries of shape `len x d_model`.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStack {
    pub layers: Vec<Tensor>,
}

impl HiddenStack {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }
}

/// Graph-level forward output: pooled representation plus hidden stack ids.
pub struct EncoderForward {
    pub pooled: NodeId,
    pub hidden: Vec<NodeId>,
}

pub struct TextBackbone {
    pub cfg: BackboneConfig,
    pub vocab_size: u32,
    embedding: ParamId,
    layers: Vec<TransformerLayer>,
    pooler: Linear,
    out_proj: ParamId,
}

impl TextBackbone {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        cfg: &BackboneConfig,
        vocab_size: u32,
        prefix: &str,
    ) -> Result<Self> {
        cfg.validate()?;
        if vocab_size == 0 {
            return Err(Error::InvalidConfig("vocab_size must be >= 1".into()));
        }
        let embedding = store.register(
            format!("{prefix}.embedding"),
            crate::nn::normal_init(rng, vocab_size as usize, cfg.d_model, 0.02),
        )?;
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            layers.push(TransformerLayer::register(
                store,
                rng,
                &format!("{prefix}.layer{l}"),
                cfg.d_model,
                cfg.heads,
                cfg.d_ff,
            )?);
        }
        let pooler = Linear::register(store, rng, &format!("{prefix}.pooler"), cfg.d_model, cfg.d_model)?;
        let out_proj = store.register(
            format!("{prefix}.out_proj"),
            xavier_normal(rng, cfg.d_model, cfg.d_repr),
        )?;
        Ok(TextBackbone {
            cfg: cfg.clone(),
            vocab_size,
            embedding,
            layers,
            pooler,
            out_proj,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        params: &[NodeId],
        tokens: &[u32],
    ) -> Result<EncoderForward> {
        if tokens.is_empty() {
            return Err(Error::Length("empty token sequence".into()));
        }
        if tokens.len() > self.cfg.max_seq_len {
            return Err(Error::Length(format!(
                "sequence of {} tokens exceeds max length {}",
                tokens.len(),
                self.cfg.max_seq_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::InvalidInput(format!(
                "token id {t} >= vocab size {}",
                self.vocab_size
            )));
        }
        let indices: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let embedded = g.gather(params[self.embedding.0], &indices)?;
        let pe = g.leaf(positional_encoding(tokens.len(), self.cfg.d_model));
        let mut x = g.add(embedded, pe)?;
        let mut hidden = vec![x];
        for layer in &self.layers {
            x = layer.forward(g, params, x)?;
            hidden.push(x);
        }
        let first = g.row(x, 0)?;
        let pooled = self.pooler.forward(g, params, first)?;
        let pooled = g.tanh(pooled);
        let o = g.matmul(pooled, params[self.out_proj.0])?;
        Ok(EncoderForward { pooled: o, hidden })
    }

    /// Value-level encode for a single sequence.
    pub fn encode(&self, store: &ParamStore, tokens: &[u32]) -> Result<(Vec<f64>, HiddenStack)> {
        let mut g = Graph::new();
        let params = store.leaves(&mut g);
        let out = self.forward(&mut g, &params, tokens)?;
        Ok((
            g.value(out.pooled).data().to_vec(),
            HiddenStack {
                layers: out.hidden.iter().map(|&h| g.value(h).clone()).collect(),
            },
        ))
    }
}

/// Trainable transformer encoder over dense sequence features.
pub struct SeqBackbone {
    pub cfg: BackboneConfig,
    pub d_in: usize,
    input_proj: Linear,
    layers: Vec<TransformerLayer>,
    out_proj: ParamId,
}

impl SeqBackbone {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        cfg: &BackboneConfig,
        d_in: usize,
        prefix: &str,
    ) -> Result<Self> {
        cfg.validate()?;
        if d_in == 0 {
            return Err(Error::InvalidConfig("input feature dim must be >= 1".into()));
        }
        let input_proj = Linear::register(store, rng, &format!("{prefix}.input"), d_in, cfg.d_model)?;
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            layers.push(TransformerLayer::register(
                store,
                rng,
                &format!("{prefix}.layer{l}"),
                cfg.d_model,
                cfg.heads,
                cfg.d_ff,
            )?);
        }
        let out_proj = store.register(
            format!("{prefix}.out_proj"),
            xavier_normal(rng, cfg.d_model, cfg.d_repr),
        )?;
        Ok(SeqBackbone {
            cfg: cfg.clone(),
            d_in,
            input_proj,
            layers,
            out_proj,
        })
    }

    /// Forward from a feature leaf already on the graph (`len x d_in`).
    pub fn forward_node(
        &self,
        g: &mut Graph,
        params: &[NodeId],
        feats: NodeId,
    ) -> Result<EncoderForward> {
        let v = g.value(feats);
        let len = v.rows();
        if len == 0 {
            return Err(Error::Length("empty feature sequence".into()));
        }
        if len > self.cfg.max_seq_len {
            return Err(Error::Length(format!(
                "sequence of {len} frames exceeds max length {}",
                self.cfg.max_seq_len
            )));
        }
        if v.cols() != self.d_in {
            return Err(Error::Shape(format!(
                "feature dim {} != expected {}",
                v.cols(),
                self.d_in
            )));
        }
        if !v.is_finite() {
            return Err(Error::InvalidInput("non-finite encoder input".into()));
        }
        let projected = self.input_proj.forward(g, params, feats)?;
        let pe = g.leaf(positional_encoding(len, self.cfg.d_model));
        let mut x = g.add(projected, pe)?;
        let mut hidden = vec![x];
        for layer in &self.layers {
            x = layer.forward(g, params, x)?;
            hidden.push(x);
        }
        let mean = g.mean_rows(x);
        let o = g.matmul(mean, params[self.out_proj.0])?;
        Ok(EncoderForward { pooled: o, hidden })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        params: &[NodeId],
        feats: &Tensor,
    ) -> Result<EncoderForward> {
        let leaf = g.leaf(feats.clone());
        self.forward_node(g, params, leaf)
    }

    /// Value-level encode for a single sequence.
    pub fn encode(&self, store: &ParamStore, feats: &Tensor) -> Result<(Vec<f64>, HiddenStack)> {
        let mut g = Graph::new();
        let params = store.leaves(&mut g);
        let out = self.forward(&mut g, &params, feats)?;
        Ok((
            g.value(out.pooled).data().to_vec(),
            HiddenStack {
                layers: out.hidden.iter().map(|&h| g.value(h).clone()).collect(),
            },
        ))
    }
}
