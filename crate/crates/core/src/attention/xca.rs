//! Cross-covariance attention: attention over the channel axis instead of
//! the token axis, linear in token count.

use super::msa::{merge_heads, split_heads};
use super::AttentionSpec;
use crate::nn::Linear;
use crate::rng::SeedRng;
use crate::tensor::{Binding, Element, Graph, NodeId, ParamId, ParamStore, Tensor, TensorError};

/// Numerical floor for the per-column L2 norms of Q and K.
const NORM_EPS: f64 = 1e-12;

/// Cross-covariance attention block. Per head with `Q, K, V: [N, d]`:
/// columns of Q and K are L2-normalized over the token axis, the `d x d`
/// channel map `S = (Q^T . K) / tau` is softmaxed over its last axis, and
/// the output is `V . A^T`. Heads are concatenated and projected. Cost is
/// `O(N * d^2)` — linear in token count.
#[derive(Debug, Clone)]
pub struct XcaBlock {
    pub spec: AttentionSpec,
    qkv: Linear,
    proj: Linear,
    /// Per-head log-temperature; `tau = exp(theta)` keeps `tau > 0`.
    theta: ParamId,
}

/// Forward products of [`XcaBlock::forward_detailed`].
pub struct XcaOutputs {
    pub out: NodeId,
    /// Attention maps `[B, heads, d, d]`, row-stochastic over the last axis.
    pub attn: NodeId,
}

impl XcaBlock {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        spec: AttentionSpec,
        qkv_bias: bool,
        rng: &mut SeedRng,
    ) -> Result<Self, TensorError> {
        spec.validate()?;
        let c = spec.dim;
        let qkv = Linear::new(store, &format!("{name}.qkv"), c, 3 * c, qkv_bias, rng);
        let proj = Linear::new(store, &format!("{name}.proj"), c, c, true, rng);
        let theta = store.add(format!("{name}.theta"), Tensor::zeros(vec![spec.heads]));
        Ok(Self {
            spec,
            qkv,
            proj,
            theta,
        })
    }

    pub fn forward<E: Element>(
        &self,
        g: &mut Graph<E>,
        bind: &Binding,
        x: NodeId,
    ) -> Result<NodeId, TensorError> {
        Ok(self.forward_detailed(g, bind, x)?.out)
    }

    /// `x: [B, N, C]` -> outputs plus the attention map for inspection.
    pub fn forward_detailed<E: Element>(
        &self,
        g: &mut Graph<E>,
        bind: &Binding,
        x: NodeId,
    ) -> Result<XcaOutputs, TensorError> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 3 || shape[2] != self.spec.dim {
            return Err(TensorError::Invalid {
                op: "xca",
                msg: format!("expected [B, N, {}], got {shape:?}", self.spec.dim),
            });
        }
        let c = self.spec.dim;
        let (h, d) = (self.spec.heads, self.spec.head_dim());

        let qkv = self.qkv.forward(g, bind, x)?;
        let q = g.narrow(qkv, 2, 0, c)?;
        let k = g.narrow(qkv, 2, c, c)?;
        let v = g.narrow(qkv, 2, 2 * c, c)?;
        let q = split_heads(g, q, h, d)?; // [B, h, N, d]
        let k = split_heads(g, k, h, d)?;
        let v = split_heads(g, v, h, d)?;

        // L2-normalize each channel column over the token axis
        let qn = g.l2_normalize(q, 2, NORM_EPS)?;
        let kn = g.l2_normalize(k, 2, NORM_EPS)?;

        let s = g.matmul_ex(qn, kn, true, false)?; // [B, h, d, d]
        // divide by tau = exp(theta): multiply by exp(-theta) per head
        let neg_theta = g.scale(bind.node(self.theta), -1.0);
        let inv_tau = g.exp(neg_theta);
        let scaled = g.mul_axis(s, inv_tau, 1)?;
        let attn = g.softmax(scaled, 3)?;

        let mixed = g.matmul_ex(v, attn, false, true)?; // [B, h, N, d]
        let merged = merge_heads(g, mixed, c)?;
        let out = self.proj.forward(g, bind, merged)?;
        Ok(XcaOutputs { out, attn })
    }
}
