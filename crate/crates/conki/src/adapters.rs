//! Knowledge-injection adapters.
//!
//! An adapter is a chain of sandwich modules plugged outside a backbone.
//! Module `i` reads the hidden state entering backbone layer
//! `insertion_points[i]`; from the second module on, that state is
//! concatenated along the feature axis with the previous module's output
//! sequence. Each module is affine down-projection, two transformer layers,
//! affine up-projection back to the backbone width. The last module's output
//! is mean-pooled and linearly projected to the shared representation space.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{xavier_normal, Linear, ParamId, ParamStore, TransformerLayer};
use crate::encoders::HiddenStack;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    /// Backbone layer indices (1-based) each module is inserted before;
    /// strictly increasing.
    pub insertion_points: Vec<usize>,
    pub d_adapter: usize,
    pub d_repr: usize,
    pub heads: usize,
    pub d_ff: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            insertion_points: vec![2],
            d_adapter: 16,
            d_repr: 32,
            heads: 2,
            d_ff: 32,
        }
    }
}

impl AdapterConfig {
    pub fn text_default() -> Self {
        AdapterConfig {
            insertion_points: vec![1, 3],
            ..AdapterConfig::default()
        }
    }

    pub fn validate(&self, backbone_layers: usize) -> Result<()> {
        if self.insertion_points.is_empty() {
            return Err(Error::InvalidConfig("insertion_points is empty".into()));
        }
        if !self.insertion_points.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidConfig(format!(
                "insertion_points {:?} not strictly increasing",
                self.insertion_points
            )));
        }
        for &p in &self.insertion_points {
            if p == 0 || p > backbone_layers {
                return Err(Error::InvalidConfig(format!(
                    "insertion point {p} outside [1, {backbone_layers}]"
                )));
            }
        }
        if self.d_adapter == 0 || self.d_repr == 0 || self.d_ff == 0 {
            return Err(Error::InvalidConfig(
                "adapter dims must be >= 1".into(),
            ));
        }
        if self.heads == 0 || self.d_adapter % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_adapter {} not divisible by heads {}",
                self.d_adapter, self.heads
            )));
        }
        Ok(())
    }
}

struct AdapterModule {
    down: Linear,
    inner: Vec<TransformerLayer>,
    up: Linear,
}

pub struct Adapter {
    pub cfg: AdapterConfig,
    backbone_layers: usize,
    modules: Vec<AdapterModule>,
    out_proj: ParamId,
}

impl Adapter {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        cfg: &AdapterConfig,
        d_model: usize,
        backbone_layers: usize,
        prefix: &str,
    ) -> Result<Self> {
        cfg.validate(backbone_layers)?;
        let mut modules = Vec::with_capacity(cfg.insertion_points.len());
        for (i, _) in cfg.insertion_points.iter().enumerate() {
            let d_in = if i == 0 { d_model } else { 2 * d_model };
            let mp = format!("{prefix}.module{i}");
            let down = Linear::register(store, rng, &format!("{mp}.down"), d_in, cfg.d_adapter)?;
            let inner = (0..2)
                .map(|l| {
                    TransformerLayer::register(
                        store,
                        rng,
                        &format!("{mp}.inner{l}"),
                        cfg.d_adapter,
                        cfg.heads,
                        cfg.d_ff,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let up = Linear::register(store, rng, &format!("{mp}.up"), cfg.d_adapter, d_model)?;
            modules.push(AdapterModule { down, inner, up });
        }
        let out_proj = store.register(
            format!("{prefix}.out_proj"),
            xavier_normal(rng, d_model, cfg.d_repr),
        )?;
        Ok(Adapter {
            cfg: cfg.clone(),
            backbone_layers,
            modules,
            out_proj,
        })
    }

    /// Knowledge-specific representation from a backbone hidden stack
    /// (`backbone_layers + 1` sequence nodes, embedding output first).
    pub fn forward(&self, g: &mut Graph, params: &[NodeId], hidden: &[NodeId]) -> Result<NodeId> {
        if hidden.len() != self.backbone_layers + 1 {
            return Err(Error::InvalidConfig(format!(
                "hidden stack depth {} does not match backbone of {} layers",
                hidden.len(),
                self.backbone_layers
            )));
        }
        let mut prev: Option<NodeId> = None;
        for (module, &point) in self.modules.iter().zip(&self.cfg.insertion_points) {
            let tap = hidden[point - 1];
            let input = match prev {
                None => tap,
                Some(p) => g.concat_cols(&[tap, p])?,
            };
            let mut x = module.down.forward(g, params, input)?;
            for layer in &module.inner {
                x = layer.forward(g, params, x)?;
            }
            prev = Some(module.up.forward(g, params, x)?);
        }
        let last = prev.expect("at least one adapter module");
        let pooled = g.mean_rows(last);
        g.matmul(pooled, params[self.out_proj.0])
    }

    /// Value-level forward over a materialized hidden stack.
    pub fn forward_values(&self, store: &ParamStore, hidden: &HiddenStack) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let params = store.leaves(&mut g);
        let hidden_nodes: Vec<NodeId> = hidden.layers.iter().map(|t| g.leaf(t.clone())).collect();
        let out = self.forward(&mut g, &params, &hidden_nodes)?;
        Ok(g.value(out).data().to_vec())
    }
}
