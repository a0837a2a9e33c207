//! Full model assembly: three backbones, three adapters, fusion, head.
//!
//! Parameter names are grouped by prefix so stage freezing rules and
//! checkpoint subsetting can operate on names alone:
//! `backbone.{text,vision,audio}.*`, `adapter.{t,v,a}.*`, `fusion.*`,
//! `head.*`.

use crate::adapters::Adapter;
use crate::config::RunConfig;
use crate::contrastive::{KnowledgeSet, Modality, RepKey};
use crate::data::{DatasetMeta, FeatMatrix, MultimodalSample};
use crate::encoders::{EncoderForward, SeqBackbone, TextBackbone};
use crate::error::{Error, Result};
use crate::fusion::{FusionNetwork, InnerFusion, MlpHead};
use crate::graph::{Graph, NodeId};
use crate::nn::ParamStore;
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DataDims {
    pub vocab_size: u32,
    pub d_v: usize,
    pub d_a: usize,
}

impl DataDims {
    pub fn of(meta: &DatasetMeta) -> Self {
        DataDims {
            vocab_size: meta.vocab_size,
            d_v: meta.d_v,
            d_a: meta.d_a,
        }
    }
}

/// Which representation paths the model wires in. The full model uses both;
/// ablations drop one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub use_pan: bool,
    pub use_adapters: bool,
}

impl Variant {
    pub const FULL: Variant = Variant {
        use_pan: true,
        use_adapters: true,
    };

    pub fn validate(self) -> Result<()> {
        if !self.use_pan && !self.use_adapters {
            return Err(Error::InvalidConfig(
                "a model needs at least one of the pan and adapter paths".into(),
            ));
        }
        Ok(())
    }

    pub fn knowledge_set(self) -> KnowledgeSet {
        KnowledgeSet {
            pan: self.use_pan,
            specific: self.use_adapters,
        }
    }
}

/// Per-sample forward outputs on a graph.
pub struct SampleForward {
    pub y_hat: NodeId,
    pub pan: Option<[NodeId; 3]>,
    pub specific: Option<[NodeId; 3]>,
    /// Input leaves, exposed so gradients can be read at the raw features.
    pub vision_leaf: NodeId,
    pub audio_leaf: NodeId,
}

impl SampleForward {
    /// Representation node for a key, if that knowledge path is wired.
    pub fn rep(&self, knowledge: crate::contrastive::Knowledge, modality: Modality) -> Option<NodeId> {
        let bank = match knowledge {
            crate::contrastive::Knowledge::Pan => self.pan.as_ref(),
            crate::contrastive::Knowledge::Specific => self.specific.as_ref(),
        }?;
        let idx = match modality {
            Modality::Text => 0,
            Modality::Vision => 1,
            Modality::Audio => 2,
        };
        Some(bank[idx])
    }
}

pub struct ConkiModel {
    pub store: ParamStore,
    pub variant: Variant,
    pub d_repr: usize,
    text: TextBackbone,
    vision: SeqBackbone,
    audio: SeqBackbone,
    adapters: Option<(Adapter, Adapter, Adapter)>,
    inner_t: InnerFusion,
    inner_v: InnerFusion,
    inner_a: InnerFusion,
    network: FusionNetwork,
    head: MlpHead,
}

impl ConkiModel {
    /// Seed-initialize a model. Identical `(cfg, dims, seed, variant)` yield
    /// bit-identical parameters.
    pub fn build(cfg: &RunConfig, dims: &DataDims, seed: u64, variant: Variant) -> Result<Self> {
        cfg.validate()?;
        variant.validate()?;
        let mut store = ParamStore::new();
        let mut rng = stream(seed, Stream::ParamInit);

        let text = TextBackbone::register(
            &mut store,
            &mut rng,
            &cfg.backbone.text,
            dims.vocab_size,
            "backbone.text",
        )?;
        let vision = SeqBackbone::register(
            &mut store,
            &mut rng,
            &cfg.backbone.vision,
            dims.d_v,
            "backbone.vision",
        )?;
        let audio = SeqBackbone::register(
            &mut store,
            &mut rng,
            &cfg.backbone.audio,
            dims.d_a,
            "backbone.audio",
        )?;

        let adapters = if variant.use_adapters {
            Some((
                Adapter::register(
                    &mut store,
                    &mut rng,
                    &cfg.adapter.text,
                    cfg.backbone.text.d_model,
                    cfg.backbone.text.num_layers,
                    "adapter.t",
                )?,
                Adapter::register(
                    &mut store,
                    &mut rng,
                    &cfg.adapter.vision,
                    cfg.backbone.vision.d_model,
                    cfg.backbone.vision.num_layers,
                    "adapter.v",
                )?,
                Adapter::register(
                    &mut store,
                    &mut rng,
                    &cfg.adapter.audio,
                    cfg.backbone.audio.d_model,
                    cfg.backbone.audio.num_layers,
                    "adapter.a",
                )?,
            ))
        } else {
            None
        };

        let d_repr = cfg.backbone.text.d_repr;
        let paths = usize::from(variant.use_pan) + usize::from(variant.use_adapters);
        let inner_in = paths * d_repr;
        let inner_t =
            InnerFusion::register(&mut store, &mut rng, "fusion.inner_t", inner_in, cfg.fusion.d_fuse)?;
        let inner_v =
            InnerFusion::register(&mut store, &mut rng, "fusion.inner_v", inner_in, cfg.fusion.d_fuse)?;
        let inner_a =
            InnerFusion::register(&mut store, &mut rng, "fusion.inner_a", inner_in, cfg.fusion.d_fuse)?;
        let network = FusionNetwork::register(
            &mut store,
            &mut rng,
            "fusion.network",
            cfg.fusion.d_fuse,
            cfg.fusion.d_joint,
        )?;
        let head = MlpHead::register(
            &mut store,
            &mut rng,
            "head",
            cfg.fusion.d_joint,
            cfg.fusion.head_hidden,
        )?;

        Ok(ConkiModel {
            store,
            variant,
            d_repr,
            text,
            vision,
            audio,
            adapters,
            inner_t,
            inner_v,
            inner_a,
            network,
            head,
        })
    }

    pub fn knowledge_set(&self) -> KnowledgeSet {
        self.variant.knowledge_set()
    }

    fn feat_tensor(m: &FeatMatrix) -> Tensor {
        Tensor::from_vec(
            m.rows(),
            m.cols(),
            m.data().iter().map(|&v| v as f64).collect(),
        )
        .expect("feature matrix is rectangular")
    }

    /// One sample through encode, inner fusion, multi-modality fusion, and
    /// the head. `params` must be the store's leaves on `g`.
    pub fn forward_sample(
        &self,
        g: &mut Graph,
        params: &[NodeId],
        sample: &MultimodalSample,
    ) -> Result<SampleForward> {
        self.forward_parts(
            g,
            params,
            &sample.text_tokens,
            &Self::feat_tensor(&sample.vision_feats),
            &Self::feat_tensor(&sample.audio_feats),
        )
    }

    /// [`Self::forward_sample`] over raw f64 inputs.
    pub fn forward_parts(
        &self,
        g: &mut Graph,
        params: &[NodeId],
        tokens: &[u32],
        vision_feats: &Tensor,
        audio_feats: &Tensor,
    ) -> Result<SampleForward> {
        let text_out = self.text.forward(g, params, tokens)?;
        let vision_leaf = g.leaf(vision_feats.clone());
        let vision_out = self.vision.forward_node(g, params, vision_leaf)?;
        let audio_leaf = g.leaf(audio_feats.clone());
        let audio_out = self.audio.forward_node(g, params, audio_leaf)?;

        let pan = if self.variant.use_pan {
            Some([text_out.pooled, vision_out.pooled, audio_out.pooled])
        } else {
            None
        };
        let specific = match &self.adapters {
            Some((at, av, aa)) => Some([
                at.forward(g, params, &text_out.hidden)?,
                av.forward(g, params, &vision_out.hidden)?,
                aa.forward(g, params, &audio_out.hidden)?,
            ]),
            None => None,
        };

        let fuse_parts = |out: &EncoderForward, adapted: Option<NodeId>| -> Vec<NodeId> {
            let mut parts = Vec::new();
            if self.variant.use_pan {
                parts.push(out.pooled);
            }
            if let Some(a) = adapted {
                parts.push(a);
            }
            parts
        };
        let f_t = self.inner_t.forward(
            g,
            params,
            &fuse_parts(&text_out, specific.map(|s| s[0])),
        )?;
        let f_v = self.inner_v.forward(
            g,
            params,
            &fuse_parts(&vision_out, specific.map(|s| s[1])),
        )?;
        let f_a = self.inner_a.forward(
            g,
            params,
            &fuse_parts(&audio_out, specific.map(|s| s[2])),
        )?;
        let fused = self.network.forward(g, params, f_t, f_v, f_a)?;
        let y_hat = self.head.forward(g, params, fused)?;
        Ok(SampleForward {
            y_hat,
            pan,
            specific,
            vision_leaf,
            audio_leaf,
        })
    }

    /// Flat representation nodes for a batch forward, in [`RepKey`] order;
    /// `None` where the variant wires no such path.
    pub fn batch_rep_nodes(outs: &[SampleForward]) -> Vec<Option<NodeId>> {
        let mut nodes = Vec::with_capacity(outs.len() * 6);
        for idx in 0..outs.len() * 6 {
            let key = RepKey::from_index(idx);
            nodes.push(outs[key.sample].rep(key.knowledge, key.modality));
        }
        nodes
    }

    /// The gated multi-modality fusion over three fused-modality vectors.
    pub fn fusion_network_forward(
        &self,
        g: &mut Graph,
        params: &[NodeId],
        f_t: NodeId,
        f_v: NodeId,
        f_a: NodeId,
    ) -> Result<NodeId> {
        self.network.forward(g, params, f_t, f_v, f_a)
    }

    /// Value-level predictions for a list of samples.
    pub fn predict(&self, samples: &[MultimodalSample]) -> Result<Vec<f64>> {
        samples
            .iter()
            .map(|s| {
                let mut g = Graph::new();
                let params = self.store.leaves(&mut g);
                let out = self.forward_sample(&mut g, &params, s)?;
                Ok(g.value(out.y_hat).item())
            })
            .collect()
    }
}
