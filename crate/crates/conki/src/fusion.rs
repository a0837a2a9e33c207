//! Inner-modality fusion, the gated multi-modality fusion network, and the
//! regression head.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{Linear, ParamStore};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub d_fuse: usize,
    pub d_joint: usize,
    pub head_hidden: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            d_fuse: 32,
            d_joint: 32,
            head_hidden: 32,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_fuse == 0 || self.d_joint == 0 || self.head_hidden == 0 {
            return Err(Error::InvalidConfig("fusion dims must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-modality fusion of pan and specific representations:
/// `F_m = relu(W [O_m; A_m] + b)`. Ablated variants feed only the surviving
/// representation, halving the input width.
pub struct InnerFusion {
    fc: Linear,
}

impl InnerFusion {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        prefix: &str,
        d_in: usize,
        d_fuse: usize,
    ) -> Result<Self> {
        Ok(InnerFusion {
            fc: Linear::register(store, rng, prefix, d_in, d_fuse)?,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        params: &[NodeId],
        parts: &[NodeId],
    ) -> Result<NodeId> {
        let cat = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat_cols(parts)?
        };
        if g.value(cat).cols() != self.fc.d_in {
            return Err(Error::Shape(format!(
                "inner fusion input {} != expected {}",
                g.value(cat).cols(),
                self.fc.d_in
            )));
        }
        let z = self.fc.forward(g, params, cat)?;
        Ok(g.relu(z))
    }
}

/// Concatenates the three fused modality vectors, then gates a linear
/// content map with a sigmoid weight vector: `F = sigmoid(W1 C) ⊙ (W2 C)`.
pub struct FusionNetwork {
    gate: Linear,
    content: Linear,
}

impl FusionNetwork {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        prefix: &str,
        d_fuse: usize,
        d_joint: usize,
    ) -> Result<Self> {
        Ok(FusionNetwork {
            gate: Linear::register(store, rng, &format!("{prefix}.gate"), 3 * d_fuse, d_joint)?,
            content: Linear::register(
                store,
                rng,
                &format!("{prefix}.content"),
                3 * d_fuse,
                d_joint,
            )?,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        params: &[NodeId],
        f_t: NodeId,
        f_v: NodeId,
        f_a: NodeId,
    ) -> Result<NodeId> {
        let cat = g.concat_cols(&[f_t, f_v, f_a])?;
        if g.value(cat).cols() != self.gate.d_in {
            return Err(Error::Shape(format!(
                "fusion network input {} != expected {}",
                g.value(cat).cols(),
                self.gate.d_in
            )));
        }
        let w = self.gate.forward(g, params, cat)?;
        let w = g.sigmoid(w);
        let c = self.content.forward(g, params, cat)?;
        g.mul(w, c)
    }
}

/// Two-layer MLP with a ReLU between, scalar output, no output squashing.
pub struct MlpHead {
    l1: Linear,
    l2: Linear,
}

impl MlpHead {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        prefix: &str,
        d_joint: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(MlpHead {
            l1: Linear::register(store, rng, &format!("{prefix}.l1"), d_joint, hidden)?,
            l2: Linear::register(store, rng, &format!("{prefix}.l2"), hidden, 1)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, params: &[NodeId], f: NodeId) -> Result<NodeId> {
        let h = self.l1.forward(g, params, f)?;
        let h = g.relu(h);
        self.l2.forward(g, params, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use crate::tensor::Tensor;
    use rand::Rng;

    struct Rig {
        store: ParamStore,
        inner: InnerFusion,
        network: FusionNetwork,
        head: MlpHead,
    }

    fn rig(seed: u64) -> Rig {
        let mut store = ParamStore::new();
        let mut r = stream(seed, Stream::ParamInit);
        let inner = InnerFusion::register(&mut store, &mut r, "fusion.inner_t", 8, 6).unwrap();
        let network = FusionNetwork::register(&mut store, &mut r, "fusion.network", 6, 5).unwrap();
        let head = MlpHead::register(&mut store, &mut r, "head", 5, 7).unwrap();
        Rig {
            store,
            inner,
            network,
            head,
        }
    }

    fn rand_row(seed: u64, n: usize) -> Tensor {
        let mut r = stream(seed, Stream::GenTrain);
        Tensor::row_vector((0..n).map(|_| r.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn inner_fusion_shapes() {
        let rig = rig(1);
        let mut g = Graph::new();
        let params = rig.store.leaves(&mut g);
        let o = g.leaf(rand_row(2, 4));
        let a = g.leaf(rand_row(3, 4));
        let f = rig.inner.forward(&mut g, &params, &[o, a]).unwrap();
        assert_eq!(g.value(f).shape(), (1, 6));

        let short = g.leaf(rand_row(4, 3));
        assert!(rig.inner.forward(&mut g, &params, &[o, short]).is_err());
    }

    #[test]
    fn inner_fusion_degenerate_weights_pass_bias() {
        let mut rig = rig(2);
        let w = rig.store.find("fusion.inner_t.w").unwrap();
        rig.store.get_mut(w).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let b = rig.store.find("fusion.inner_t.b").unwrap();
        let bias: Vec<f64> = (0..6).map(|i| 0.1 * (i + 1) as f64).collect();
        rig.store.get_mut(b).data_mut().copy_from_slice(&bias);

        let mut g = Graph::new();
        let params = rig.store.leaves(&mut g);
        let o = g.leaf(rand_row(5, 4));
        let a = g.leaf(rand_row(6, 4));
        let f = rig.inner.forward(&mut g, &params, &[o, a]).unwrap();
        // Nonnegative bias passes through the ReLU unchanged.
        assert_eq!(g.value(f).data(), bias.as_slice());
    }

    #[test]
    fn fusion_network_zero_gate_halves_content() {
        let mut rig = rig(3);
        for part in ["w", "b"] {
            let id = rig.store.find(&format!("fusion.network.gate.{part}")).unwrap();
            rig.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let params = rig.store.leaves(&mut g);
        let (ft, fv, fa) = (
            g.leaf(rand_row(7, 6)),
            g.leaf(rand_row(8, 6)),
            g.leaf(rand_row(9, 6)),
        );
        let f = rig.network.forward(&mut g, &params, ft, fv, fa).unwrap();
        assert_eq!(g.value(f).shape(), (1, 5));

        let cat = g.concat_cols(&[ft, fv, fa]).unwrap();
        let c = rig.network.content.forward(&mut g, &params, cat).unwrap();
        for (got, want) in g.value(f).data().to_vec().iter().zip(g.value(c).data()) {
            assert!((got - 0.5 * want).abs() < 1e-12);
        }
    }

    #[test]
    fn head_zero_weights_returns_bias() {
        let mut rig = rig(4);
        for name in ["head.l1.w", "head.l1.b", "head.l2.w"] {
            let id = rig.store.find(name).unwrap();
            rig.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let b = rig.store.find("head.l2.b").unwrap();
        rig.store.get_mut(b).data_mut()[0] = -1.25;

        let mut g = Graph::new();
        let params = rig.store.leaves(&mut g);
        let f = g.leaf(rand_row(10, 5));
        let y = rig.head.forward(&mut g, &params, f).unwrap();
        assert_eq!(g.value(y).shape(), (1, 1));
        assert_eq!(g.value(y).item(), -1.25);
    }

    #[test]
    fn fusion_pipeline_gradient_check() {
        let rig = rig(5);
        let base = [rand_row(11, 4), rand_row(12, 4)];

        let eval = |inputs: &[Tensor]| -> f64 {
            let mut g = Graph::new();
            let params = rig.store.leaves(&mut g);
            let o = g.leaf(inputs[0].clone());
            let a = g.leaf(inputs[1].clone());
            let fm = rig.inner.forward(&mut g, &params, &[o, a]).unwrap();
            let f = rig.network.forward(&mut g, &params, fm, fm, fm).unwrap();
            let y = rig.head.forward(&mut g, &params, f).unwrap();
            g.value(y).item()
        };

        let mut g = Graph::new();
        let params = rig.store.leaves(&mut g);
        let ids = [g.leaf(base[0].clone()), g.leaf(base[1].clone())];
        let fm = rig.inner.forward(&mut g, &params, &[ids[0], ids[1]]).unwrap();
        let f = rig.network.forward(&mut g, &params, fm, fm, fm).unwrap();
        let y = rig.head.forward(&mut g, &params, f).unwrap();
        let grads = g.backward(y).unwrap();

        let mut r = stream(13, Stream::GenTrain);
        for trial in 0..20 {
            let which = r.random_range(0..2usize);
            let k = r.random_range(0..4usize);
            let h = 1e-6;
            let mut plus = base.clone();
            plus[which].data_mut()[k] += h;
            let mut minus = base.clone();
            minus[which].data_mut()[k] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let an = grads[ids[which].0].as_ref().unwrap().data()[k];
            let denom = fd.abs().max(an.abs()).max(1e-10);
            assert!(
                (fd - an).abs() / denom < 1e-4,
                "trial {trial}: fd {fd} vs analytic {an}"
            );
        }
    }
}
