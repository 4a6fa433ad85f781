//! The autodiff tape: a [`Graph`] records every operation as a node holding
//! its forward value; [`Graph::backward`] walks the tape in reverse and
//! accumulates vector-Jacobian products into each node that requires them.
//!
//! Tapes are cheap to build and are reconstructed for every training step;
//! parameters enter through [`super::Binding`] so their gradients can be
//! looked up by parameter id afterwards.

use super::{Element, Tensor, TensorError};
use crate::rng::SeedRng;
use crate::special;

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

enum Op {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        trans_a: bool,
        trans_b: bool,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        a: NodeId,
        factor: f64,
    },
    /// `b`'s shape is a trailing suffix of `a`'s; broadcast add over the
    /// leading axes (bias vectors, position bias tables, attention masks).
    AddSuffix {
        a: NodeId,
        b: NodeId,
    },
    /// Suffix-broadcast elementwise product (layer-norm affine weight).
    MulSuffix {
        a: NodeId,
        b: NodeId,
    },
    /// Multiply by a vector laid along one axis (per-head temperature).
    MulAxis {
        a: NodeId,
        v: NodeId,
        axis: usize,
    },
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    Narrow {
        a: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape {
        a: NodeId,
    },
    Permute {
        a: NodeId,
        perm: Vec<usize>,
    },
    /// Cyclic roll of the two spatial axes of a `[B, H, W, C]` tensor:
    /// `out[b, y, x, c] = in[b, (y - dy) mod H, (x - dx) mod W, c]`.
    Roll2d {
        a: NodeId,
        dy: i64,
        dx: i64,
    },
    /// Divide each fiber along `axis` by `max(its L2 norm, eps)`.
    L2Normalize {
        a: NodeId,
        axis: usize,
        eps: f64,
    },
    Softmax {
        a: NodeId,
        axis: usize,
    },
    /// Normalize over the last axis to zero mean, unit variance (no affine).
    LayerNorm {
        a: NodeId,
        eps: f64,
    },
    Gelu {
        a: NodeId,
    },
    Exp {
        a: NodeId,
    },
    SumAll {
        a: NodeId,
    },
    MeanAll {
        a: NodeId,
    },
    /// Mean negative log-likelihood of rows of `[N, K]` logits.
    CrossEntropy {
        logits: NodeId,
        targets: Vec<u32>,
    },
    /// One minus the class-mean soft Dice coefficient of softmaxed logits.
    DiceLoss {
        logits: NodeId,
        targets: Vec<u32>,
        smooth: f64,
    },
    /// Gather rows of a `[R, C]` table; backward scatter-adds.
    IndexSelect {
        table: NodeId,
        indices: Vec<usize>,
    },
    Dropout {
        a: NodeId,
        keep: Vec<bool>,
        scale: f64,
    },
}

struct Node<E: Element> {
    op: Op,
    value: Tensor<E>,
    requires_grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<E: Element> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Gradients<E> {
    /// Gradient of the loss w.r.t. the node's value, if any path required it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<E>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

/// Reverse-mode autodiff tape over [`Tensor`] values.
pub struct Graph<E: Element> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    /// Scalar value of a `[1]`-shaped node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.len(), 1, "scalar_value on non-scalar node");
        v.data()[0].to_f64()
    }

    fn push(&mut self, op: Op, value: Tensor<E>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Non-trainable input (data, masks, fixed tables).
    pub fn constant(&mut self, value: Tensor<E>) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Tape input; trainable leaves receive gradients.
    pub fn leaf(&mut self, value: Tensor<E>, trainable: bool) -> NodeId {
        self.push(Op::Leaf, value, trainable)
    }

    // ----- elementwise and broadcast arithmetic -------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_same_shape("add", a, b)?;
        let value = zip_new(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.wants(a) || self.wants(b);
        Ok(self.push(Op::Add { a, b }, value, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_same_shape("sub", a, b)?;
        let value = zip_new(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.wants(a) || self.wants(b);
        Ok(self.push(Op::Sub { a, b }, value, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_same_shape("mul", a, b)?;
        let value = zip_new(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.wants(a) || self.wants(b);
        Ok(self.push(Op::Mul { a, b }, value, rg))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let f = E::from_f64(factor);
        let value = map_new(self.value(a), |x| x * f);
        let rg = self.wants(a);
        self.push(Op::Scale { a, factor }, value, rg)
    }

    pub fn add_suffix(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.check_suffix("add_suffix", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let bl = bv.len();
        let mut out = av.data().to_vec();
        for (i, slot) in out.iter_mut().enumerate() {
            *slot += bv.data()[i % bl];
        }
        let value = Tensor::new(av.shape().to_vec(), out).unwrap();
        let rg = self.wants(a) || self.wants(b);
        Ok(self.push(Op::AddSuffix { a, b }, value, rg))
    }

    pub fn mul_suffix(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.check_suffix("mul_suffix", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let bl = bv.len();
        let mut out = av.data().to_vec();
        for (i, slot) in out.iter_mut().enumerate() {
            *slot *= bv.data()[i % bl];
        }
        let value = Tensor::new(av.shape().to_vec(), out).unwrap();
        let rg = self.wants(a) || self.wants(b);
        Ok(self.push(Op::MulSuffix { a, b }, value, rg))
    }

    pub fn mul_axis(&mut self, a: NodeId, v: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        let ashape = self.value(a).shape().to_vec();
        if axis >= ashape.len() {
            return Err(TensorError::InvalidAxis {
                op: "mul_axis",
                axis,
                rank: ashape.len(),
            });
        }
        let vv = self.value(v);
        if vv.rank() != 1 || vv.shape()[0] != ashape[axis] {
            return Err(TensorError::ShapeMismatch {
                op: "mul_axis",
                lhs: ashape,
                rhs: vv.shape().to_vec(),
            });
        }
        let (outer, len, inner) = axis_split(&ashape, axis);
        let av = self.value(a);
        let vd = self.value(v).data().to_vec();
        let mut out = av.data().to_vec();
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                let f = vd[l];
                for slot in &mut out[base..base + inner] {
                    *slot *= f;
                }
            }
        }
        let value = Tensor::new(ashape, out).unwrap();
        let rg = self.wants(a) || self.wants(v);
        Ok(self.push(Op::MulAxis { a, v, axis }, value, rg))
    }

    // ----- matrix products ---------------------------------------------

    /// Plain (possibly batched) product of the trailing two axes.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.matmul_ex(a, b, false, false)
    }

    /// Product with either operand's trailing two axes logically transposed.
    /// `b` may be rank 2 while `a` is batched, in which case it is shared
    /// across the batch (a linear layer applied at every position).
    pub fn matmul_ex(
        &mut self,
        a: NodeId,
        b: NodeId,
        trans_a: bool,
        trans_b: bool,
    ) -> Result<NodeId, TensorError> {
        let ashape = self.value(a).shape().to_vec();
        let bshape = self.value(b).shape().to_vec();
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: ashape.clone(),
            rhs: bshape.clone(),
        };
        if ashape.len() < 2 || bshape.len() < 2 {
            return Err(mismatch());
        }
        let (a0, a1) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
        let (b0, b1) = (bshape[bshape.len() - 2], bshape[bshape.len() - 1]);
        let (m, k) = if trans_a { (a1, a0) } else { (a0, a1) };
        let (kb, n) = if trans_b { (b1, b0) } else { (b0, b1) };
        if k != kb {
            return Err(mismatch());
        }
        let shared_b = bshape.len() == 2 && ashape.len() > 2;
        if !shared_b && bshape[..bshape.len() - 2] != ashape[..ashape.len() - 2] {
            return Err(mismatch());
        }
        let batch: usize = ashape[..ashape.len() - 2].iter().product();
        let (asz, bsz, osz) = (a0 * a1, b0 * b1, m * n);
        let mut out = vec![E::zero(); batch * osz];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for t in 0..batch {
                let bs = if shared_b { bd } else { &bd[t * bsz..(t + 1) * bsz] };
                E::gemm(
                    m,
                    k,
                    n,
                    E::one(),
                    &ad[t * asz..(t + 1) * asz],
                    trans_a,
                    bs,
                    trans_b,
                    E::zero(),
                    &mut out[t * osz..(t + 1) * osz],
                );
            }
        }
        let mut out_shape = ashape[..ashape.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let value = Tensor::new(out_shape, out).unwrap();
        let rg = self.wants(a) || self.wants(b);
        Ok(self.push(
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            },
            value,
            rg,
        ))
    }

    // ----- structural ops ----------------------------------------------

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId, TensorError> {
        let av = self.value(a);
        let numel: usize = shape.iter().product();
        if numel != av.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: av.shape().to_vec(),
                rhs: shape,
            });
        }
        let value = Tensor::new(shape, av.data().to_vec()).unwrap();
        let rg = self.wants(a);
        Ok(self.push(Op::Reshape { a }, value, rg))
    }

    pub fn permute(&mut self, a: NodeId, perm: Vec<usize>) -> Result<NodeId, TensorError> {
        let av = self.value(a);
        let rank = av.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of 0..{rank}"),
            });
        }
        let value = permute_data(av, &perm);
        let rg = self.wants(a);
        Ok(self.push(Op::Permute { a, perm }, value, rg))
    }

    pub fn narrow(
        &mut self,
        a: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<NodeId, TensorError> {
        let av = self.value(a);
        if axis >= av.rank() {
            return Err(TensorError::InvalidAxis {
                op: "narrow",
                axis,
                rank: av.rank(),
            });
        }
        if start + len > av.shape()[axis] {
            return Err(TensorError::Invalid {
                op: "narrow",
                msg: format!(
                    "window {start}..{} exceeds axis length {}",
                    start + len,
                    av.shape()[axis]
                ),
            });
        }
        let (outer, full, inner) = axis_split(av.shape(), axis);
        let mut out = vec![E::zero(); outer * len * inner];
        for o in 0..outer {
            let src = (o * full + start) * inner;
            let dst = o * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&av.data()[src..src + len * inner]);
        }
        let mut shape = av.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, out).unwrap();
        let rg = self.wants(a);
        Ok(self.push(
            Op::Narrow {
                a,
                axis,
                start,
                len,
            },
            value,
            rg,
        ))
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId, TensorError> {
        let first = match inputs.first() {
            Some(&id) => id,
            None => {
                return Err(TensorError::Invalid {
                    op: "concat",
                    msg: "no inputs".into(),
                })
            }
        };
        let base_shape = self.value(first).shape().to_vec();
        if axis >= base_shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "concat",
                axis,
                rank: base_shape.len(),
            });
        }
        let mut total_axis = 0;
        for &id in inputs {
            let s = self.value(id).shape();
            let compatible = s.len() == base_shape.len()
                && s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .all(|(i, (&d, &b))| i == axis || d == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base_shape,
                    rhs: s.to_vec(),
                });
            }
            total_axis += s[axis];
        }
        let (outer, _, inner) = axis_split(&base_shape, axis);
        let mut out_shape = base_shape.clone();
        out_shape[axis] = total_axis;
        let mut out = vec![E::zero(); outer * total_axis * inner];
        let mut offset = 0;
        for &id in inputs {
            let v = self.value(id);
            let node_axis = v.shape()[axis];
            let block = node_axis * inner;
            for o in 0..outer {
                let dst = (o * total_axis + offset) * inner;
                out[dst..dst + block].copy_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
            offset += node_axis;
        }
        let value = Tensor::new(out_shape, out).unwrap();
        let rg = inputs.iter().any(|&id| self.wants(id));
        Ok(self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            value,
            rg,
        ))
    }

    pub fn roll2d(&mut self, a: NodeId, dy: i64, dx: i64) -> Result<NodeId, TensorError> {
        let av = self.value(a);
        if av.rank() != 4 {
            return Err(TensorError::Invalid {
                op: "roll2d",
                msg: format!("expects [B, H, W, C], got rank {}", av.rank()),
            });
        }
        let value = roll2d_data(av, dy, dx);
        let rg = self.wants(a);
        Ok(self.push(Op::Roll2d { a, dy, dx }, value, rg))
    }

    // ----- nonlinearities ----------------------------------------------

    pub fn l2_normalize(&mut self, a: NodeId, axis: usize, eps: f64) -> Result<NodeId, TensorError> {
        let av = self.value(a);
        if axis >= av.rank() {
            return Err(TensorError::InvalidAxis {
                op: "l2_normalize",
                axis,
                rank: av.rank(),
            });
        }
        let (outer, len, inner) = axis_split(av.shape(), axis);
        let mut out = av.data().to_vec();
        let e = E::from_f64(eps);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut sq = E::zero();
                for l in 0..len {
                    let x = out[base + l * inner];
                    sq += x * x;
                }
                let norm = sq.sqrt().maximum(e);
                for l in 0..len {
                    let idx = base + l * inner;
                    out[idx] = out[idx] / norm;
                }
            }
        }
        let value = Tensor::new(av.shape().to_vec(), out).unwrap();
        let rg = self.wants(a);
        Ok(self.push(Op::L2Normalize { a, axis, eps }, value, rg))
    }

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        let av = self.value(a);
        if axis >= av.rank() {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                rank: av.rank(),
            });
        }
        let value = softmax_data(av, axis);
        let rg = self.wants(a);
        Ok(self.push(Op::Softmax { a, axis }, value, rg))
    }

    pub fn layer_norm(&mut self, a: NodeId, eps: f64) -> Result<NodeId, TensorError> {
        let av = self.value(a);
        if av.rank() == 0 || av.shape().last() == Some(&0) {
            return Err(TensorError::Invalid {
                op: "layer_norm",
                msg: "needs a non-empty last axis".into(),
            });
        }
        let k = *av.shape().last().unwrap();
        let inv_k = E::from_f64(1.0 / k as f64);
        let e = E::from_f64(eps);
        let mut out = av.data().to_vec();
        for row in out.chunks_exact_mut(k) {
            let mut mean = E::zero();
            for &x in row.iter() {
                mean += x;
            }
            mean *= inv_k;
            let mut var = E::zero();
            for &x in row.iter() {
                let d = x - mean;
                var += d * d;
            }
            var *= inv_k;
            let inv_sigma = E::one() / (var + e).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv_sigma;
            }
        }
        let value = Tensor::new(av.shape().to_vec(), out).unwrap();
        let rg = self.wants(a);
        Ok(self.push(Op::LayerNorm { a, eps }, value, rg))
    }

    /// Exact GELU, `x * Phi(x)` with the standard normal CDF.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let value = map_new(self.value(a), |x| {
            let xf = x.to_f64();
            E::from_f64(xf * special::normal_cdf_precise(xf))
        });
        let rg = self.wants(a);
        self.push(Op::Gelu { a }, value, rg)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = map_new(self.value(a), |x| x.exp());
        let rg = self.wants(a);
        self.push(Op::Exp { a }, value, rg)
    }

    pub fn dropout(&mut self, a: NodeId, rate: f64, rng: &mut SeedRng) -> NodeId {
        if rate <= 0.0 {
            return a;
        }
        assert!(rate < 1.0, "dropout rate must be < 1");
        let av = self.value(a);
        let keep: Vec<bool> = (0..av.len()).map(|_| rng.uniform() >= rate).collect();
        let scale = 1.0 / (1.0 - rate);
        let s = E::from_f64(scale);
        let data: Vec<E> = av
            .data()
            .iter()
            .zip(&keep)
            .map(|(&x, &k)| if k { x * s } else { E::zero() })
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data).unwrap();
        let rg = self.wants(a);
        self.push(Op::Dropout { a, keep, scale }, value, rg)
    }

    // ----- reductions and losses ---------------------------------------

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let mut total = E::zero();
        for &x in self.value(a).data() {
            total += x;
        }
        let rg = self.wants(a);
        self.push(Op::SumAll { a }, Tensor::scalar(total), rg)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len().max(1);
        let mut total = E::zero();
        for &x in self.value(a).data() {
            total += x;
        }
        let mean = total * E::from_f64(1.0 / n as f64);
        let rg = self.wants(a);
        self.push(Op::MeanAll { a }, Tensor::scalar(mean), rg)
    }

    /// Mean cross-entropy of `[N, K]` logits against integer class targets.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[u32]) -> Result<NodeId, TensorError> {
        let lv = self.value(logits);
        let (n, k) = self.check_logits("cross_entropy", logits, targets)?;
        let mut total = 0.0f64;
        for (row, &t) in lv.data().chunks_exact(k).zip(targets) {
            let (m, lse) = log_sum_exp(row);
            total += m + lse - row[t as usize].to_f64();
        }
        let value = Tensor::scalar(E::from_f64(total / n as f64));
        let rg = self.wants(logits);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            value,
            rg,
        ))
    }

    /// One minus the mean-over-classes soft Dice coefficient, computed on
    /// softmax probabilities against one-hot targets.
    pub fn dice_loss(
        &mut self,
        logits: NodeId,
        targets: &[u32],
        smooth: f64,
    ) -> Result<NodeId, TensorError> {
        let (_, k) = self.check_logits("dice_loss", logits, targets)?;
        let (inter, psum, tcount) = self.dice_stats(logits, targets, k);
        let mut dice_sum = 0.0;
        for c in 0..k {
            dice_sum += (2.0 * inter[c] + smooth) / (psum[c] + tcount[c] + smooth);
        }
        let value = Tensor::scalar(E::from_f64(1.0 - dice_sum / k as f64));
        let rg = self.wants(logits);
        Ok(self.push(
            Op::DiceLoss {
                logits,
                targets: targets.to_vec(),
                smooth,
            },
            value,
            rg,
        ))
    }

    pub fn index_select(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId, TensorError> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(TensorError::Invalid {
                op: "index_select",
                msg: format!("table must be rank 2, got {}", tv.rank()),
            });
        }
        let (rows, cols) = (tv.shape()[0], tv.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&ix| ix >= rows) {
            return Err(TensorError::Invalid {
                op: "index_select",
                msg: format!("index {bad} out of range for {rows} rows"),
            });
        }
        let mut out = vec![E::zero(); indices.len() * cols];
        for (r, &ix) in indices.iter().enumerate() {
            out[r * cols..(r + 1) * cols].copy_from_slice(&tv.data()[ix * cols..(ix + 1) * cols]);
        }
        let value = Tensor::new(vec![indices.len(), cols], out).unwrap();
        let rg = self.wants(table);
        Ok(self.push(
            Op::IndexSelect {
                table,
                indices: indices.to_vec(),
            },
            value,
            rg,
        ))
    }

    // ----- backward -----------------------------------------------------

    /// Run reverse accumulation from a scalar loss node. Returns gradients
    /// for every node on a path from a trainable leaf to the loss.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<E>, TensorError> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), E::one()));
            for i in (0..=loss.0).rev() {
                if grads[i].is_none() || !self.nodes[i].requires_grad {
                    continue;
                }
                let go = grads[i].take().unwrap();
                self.backward_node(i, &go, &mut grads);
                grads[i] = Some(go);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<E>>], target: NodeId, contrib: Tensor<E>) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(acc) => {
                debug_assert_eq!(acc.shape(), contrib.shape());
                for (d, s) in acc.data_mut().iter_mut().zip(contrib.data()) {
                    *d += *s;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backward_node(&self, i: usize, go: &Tensor<E>, grads: &mut [Option<Tensor<E>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            } => self.backward_matmul(*a, *b, *trans_a, *trans_b, go, grads),
            Op::Add { a, b } => {
                self.accumulate(grads, *a, go.clone());
                self.accumulate(grads, *b, go.clone());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, go.clone());
                self.accumulate(grads, *b, map_new(go, |g| -g));
            }
            Op::Mul { a, b } => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, zip_new(go, self.value(*b), |g, y| g * y));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, zip_new(go, self.value(*a), |g, x| g * x));
                }
            }
            Op::Scale { a, factor } => {
                let f = E::from_f64(*factor);
                self.accumulate(grads, *a, map_new(go, |g| g * f));
            }
            Op::AddSuffix { a, b } => {
                self.accumulate(grads, *a, go.clone());
                if self.wants(*b) {
                    let bv = self.value(*b);
                    let bl = bv.len();
                    let mut db = vec![E::zero(); bl];
                    for (idx, &g) in go.data().iter().enumerate() {
                        db[idx % bl] += g;
                    }
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db).unwrap());
                }
            }
            Op::MulSuffix { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let bl = bv.len();
                if self.wants(*a) {
                    let mut da = go.data().to_vec();
                    for (idx, slot) in da.iter_mut().enumerate() {
                        *slot *= bv.data()[idx % bl];
                    }
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da).unwrap());
                }
                if self.wants(*b) {
                    let mut db = vec![E::zero(); bl];
                    for (idx, (&g, &x)) in go.data().iter().zip(av.data()).enumerate() {
                        db[idx % bl] += g * x;
                    }
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db).unwrap());
                }
            }
            Op::MulAxis { a, v, axis } => {
                let (av, vv) = (self.value(*a), self.value(*v));
                let (outer, len, inner) = axis_split(av.shape(), *axis);
                if self.wants(*a) {
                    let mut da = go.data().to_vec();
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            let f = vv.data()[l];
                            for slot in &mut da[base..base + inner] {
                                *slot *= f;
                            }
                        }
                    }
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da).unwrap());
                }
                if self.wants(*v) {
                    let mut dv = vec![E::zero(); len];
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            let mut acc = E::zero();
                            for idx in base..base + inner {
                                acc += go.data()[idx] * av.data()[idx];
                            }
                            dv[l] += acc;
                        }
                    }
                    self.accumulate(grads, *v, Tensor::new(vec![len], dv).unwrap());
                }
            }
            Op::Concat { inputs, axis } => {
                let out_shape = self.nodes[i].value.shape();
                let (outer, total, inner) = axis_split(out_shape, *axis);
                let mut offset = 0;
                for &id in inputs {
                    let v = self.value(id);
                    let part = v.shape()[*axis];
                    if self.wants(id) {
                        let block = part * inner;
                        let mut d = vec![E::zero(); outer * block];
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            d[o * block..(o + 1) * block]
                                .copy_from_slice(&go.data()[src..src + block]);
                        }
                        self.accumulate(grads, id, Tensor::new(v.shape().to_vec(), d).unwrap());
                    }
                    offset += part;
                }
            }
            Op::Narrow {
                a,
                axis,
                start,
                len,
            } => {
                let av = self.value(*a);
                let (outer, full, inner) = axis_split(av.shape(), *axis);
                let mut da = vec![E::zero(); av.len()];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    da[dst..dst + len * inner].copy_from_slice(&go.data()[src..src + len * inner]);
                }
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da).unwrap());
            }
            Op::Reshape { a } => {
                let av = self.value(*a);
                self.accumulate(
                    grads,
                    *a,
                    Tensor::new(av.shape().to_vec(), go.data().to_vec()).unwrap(),
                );
            }
            Op::Permute { a, perm } => {
                let inverse = invert_perm(perm);
                self.accumulate(grads, *a, permute_data(go, &inverse));
            }
            Op::Roll2d { a, dy, dx } => {
                self.accumulate(grads, *a, roll2d_data(go, -dy, -dx));
            }
            Op::L2Normalize { a, axis, eps } => {
                let av = self.value(*a);
                let (outer, len, inner) = axis_split(av.shape(), *axis);
                let e = E::from_f64(*eps);
                let mut da = vec![E::zero(); av.len()];
                for o in 0..outer {
                    for ix in 0..inner {
                        let base = o * len * inner + ix;
                        let mut sq = E::zero();
                        for l in 0..len {
                            let x = av.data()[base + l * inner];
                            sq += x * x;
                        }
                        let norm = sq.sqrt();
                        if norm > e {
                            // y = x / norm; dx = (g - y (y.g)) / norm
                            let mut dot = E::zero();
                            for l in 0..len {
                                let idx = base + l * inner;
                                dot += (av.data()[idx] / norm) * go.data()[idx];
                            }
                            for l in 0..len {
                                let idx = base + l * inner;
                                let y = av.data()[idx] / norm;
                                da[idx] = (go.data()[idx] - y * dot) / norm;
                            }
                        } else {
                            // fiber was divided by the constant eps
                            for l in 0..len {
                                let idx = base + l * inner;
                                da[idx] = go.data()[idx] / e;
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da).unwrap());
            }
            Op::Softmax { a, axis } => {
                let yv = &self.nodes[i].value;
                let (outer, len, inner) = axis_split(yv.shape(), *axis);
                let mut da = vec![E::zero(); yv.len()];
                for o in 0..outer {
                    for ix in 0..inner {
                        let base = o * len * inner + ix;
                        let mut dot = E::zero();
                        for l in 0..len {
                            let idx = base + l * inner;
                            dot += yv.data()[idx] * go.data()[idx];
                        }
                        for l in 0..len {
                            let idx = base + l * inner;
                            da[idx] = yv.data()[idx] * (go.data()[idx] - dot);
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(yv.shape().to_vec(), da).unwrap());
            }
            Op::LayerNorm { a, eps } => {
                let av = self.value(*a);
                let yv = &self.nodes[i].value;
                let k = *av.shape().last().unwrap();
                let inv_k = E::from_f64(1.0 / k as f64);
                let e = E::from_f64(*eps);
                let mut da = vec![E::zero(); av.len()];
                for (r, (row, yrow)) in av
                    .data()
                    .chunks_exact(k)
                    .zip(yv.data().chunks_exact(k))
                    .enumerate()
                {
                    let grow = &go.data()[r * k..(r + 1) * k];
                    let mut mean = E::zero();
                    for &x in row {
                        mean += x;
                    }
                    mean *= inv_k;
                    let mut var = E::zero();
                    for &x in row {
                        let d = x - mean;
                        var += d * d;
                    }
                    var *= inv_k;
                    let inv_sigma = E::one() / (var + e).sqrt();
                    let mut gmean = E::zero();
                    let mut gymean = E::zero();
                    for j in 0..k {
                        gmean += grow[j];
                        gymean += grow[j] * yrow[j];
                    }
                    gmean *= inv_k;
                    gymean *= inv_k;
                    for j in 0..k {
                        da[r * k + j] = (grow[j] - gmean - yrow[j] * gymean) * inv_sigma;
                    }
                }
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da).unwrap());
            }
            Op::Gelu { a } => {
                let av = self.value(*a);
                let da: Vec<E> = av
                    .data()
                    .iter()
                    .zip(go.data())
                    .map(|(&x, &g)| {
                        let xf = x.to_f64();
                        let d = special::normal_cdf_precise(xf) + xf * special::normal_pdf(xf);
                        g * E::from_f64(d)
                    })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da).unwrap());
            }
            Op::Exp { a } => {
                let yv = &self.nodes[i].value;
                self.accumulate(grads, *a, zip_new(go, yv, |g, y| g * y));
            }
            Op::SumAll { a } => {
                let av = self.value(*a);
                let g0 = go.data()[0];
                self.accumulate(grads, *a, Tensor::full(av.shape().to_vec(), g0));
            }
            Op::MeanAll { a } => {
                let av = self.value(*a);
                let g0 = go.data()[0] * E::from_f64(1.0 / av.len().max(1) as f64);
                self.accumulate(grads, *a, Tensor::full(av.shape().to_vec(), g0));
            }
            Op::CrossEntropy { logits, targets } => {
                let lv = self.value(*logits);
                let k = lv.shape()[1];
                let n = targets.len();
                let gscale = go.data()[0] * E::from_f64(1.0 / n as f64);
                let mut da = vec![E::zero(); lv.len()];
                for (r, (row, &t)) in lv.data().chunks_exact(k).zip(targets).enumerate() {
                    let (m, lse) = log_sum_exp(row);
                    for j in 0..k {
                        let p = E::from_f64((row[j].to_f64() - m - lse).exp());
                        let delta = if j == t as usize { E::one() } else { E::zero() };
                        da[r * k + j] = (p - delta) * gscale;
                    }
                }
                self.accumulate(grads, *logits, Tensor::new(lv.shape().to_vec(), da).unwrap());
            }
            Op::DiceLoss {
                logits,
                targets,
                smooth,
            } => {
                let lv = self.value(*logits);
                let k = lv.shape()[1];
                let (inter, psum, tcount) = self.dice_stats(*logits, targets, k);
                let g0 = go.data()[0].to_f64();
                let mut da = vec![E::zero(); lv.len()];
                for (r, (row, &t)) in lv.data().chunks_exact(k).zip(targets).enumerate() {
                    let (m, lse) = log_sum_exp(row);
                    let p: Vec<f64> = row.iter().map(|&x| (x.to_f64() - m - lse).exp()).collect();
                    // q_c = d(loss)/d(p_c) for this row, then chain through softmax
                    let mut qdotp = 0.0;
                    let mut q = vec![0.0f64; k];
                    for c in 0..k {
                        let den = psum[c] + tcount[c] + smooth;
                        let num = 2.0 * inter[c] + smooth;
                        let t_ic = if c == t as usize { 1.0 } else { 0.0 };
                        q[c] = -(2.0 * t_ic / den - num / (den * den)) / k as f64;
                        qdotp += q[c] * p[c];
                    }
                    for c in 0..k {
                        da[r * k + c] = E::from_f64(g0 * p[c] * (q[c] - qdotp));
                    }
                }
                self.accumulate(grads, *logits, Tensor::new(lv.shape().to_vec(), da).unwrap());
            }
            Op::IndexSelect { table, indices } => {
                let tv = self.value(*table);
                let cols = tv.shape()[1];
                let mut da = vec![E::zero(); tv.len()];
                for (r, &ix) in indices.iter().enumerate() {
                    for c in 0..cols {
                        da[ix * cols + c] += go.data()[r * cols + c];
                    }
                }
                self.accumulate(grads, *table, Tensor::new(tv.shape().to_vec(), da).unwrap());
            }
            Op::Dropout { a, keep, scale } => {
                let s = E::from_f64(*scale);
                let da: Vec<E> = go
                    .data()
                    .iter()
                    .zip(keep)
                    .map(|(&g, &kp)| if kp { g * s } else { E::zero() })
                    .collect();
                let av = self.value(*a);
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da).unwrap());
            }
        }
    }

    fn backward_matmul(
        &self,
        a: NodeId,
        b: NodeId,
        trans_a: bool,
        trans_b: bool,
        go: &Tensor<E>,
        grads: &mut [Option<Tensor<E>>],
    ) {
        let (av, bv) = (self.value(a), self.value(b));
        let (ashape, bshape) = (av.shape(), bv.shape());
        let (a0, a1) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
        let (b0, b1) = (bshape[bshape.len() - 2], bshape[bshape.len() - 1]);
        let (m, k) = if trans_a { (a1, a0) } else { (a0, a1) };
        let n = if trans_b { b0 } else { b1 };
        let shared_b = bshape.len() == 2 && ashape.len() > 2;
        let batch: usize = ashape[..ashape.len() - 2].iter().product();
        let (asz, bsz, osz) = (a0 * a1, b0 * b1, m * n);
        if self.wants(a) {
            let mut da = vec![E::zero(); av.len()];
            for t in 0..batch {
                let bs = if shared_b {
                    bv.data()
                } else {
                    &bv.data()[t * bsz..(t + 1) * bsz]
                };
                let gs = &go.data()[t * osz..(t + 1) * osz];
                let ds = &mut da[t * asz..(t + 1) * asz];
                if !trans_a {
                    // dA = dC . op(B)^T
                    E::gemm(m, n, k, E::one(), gs, false, bs, !trans_b, E::zero(), ds);
                } else {
                    // stored A is [k, m]: dA_stored = op(B) . dC^T
                    E::gemm(k, n, m, E::one(), bs, trans_b, gs, true, E::zero(), ds);
                }
            }
            self.accumulate(grads, a, Tensor::new(ashape.to_vec(), da).unwrap());
        }
        if self.wants(b) {
            let mut db = vec![E::zero(); bv.len()];
            for t in 0..batch {
                let asl = &av.data()[t * asz..(t + 1) * asz];
                let gs = &go.data()[t * osz..(t + 1) * osz];
                let (dst, beta) = if shared_b {
                    (&mut db[..], E::one())
                } else {
                    (&mut db[t * bsz..(t + 1) * bsz], E::zero())
                };
                if !trans_b {
                    // dB = op(A)^T . dC
                    E::gemm(k, m, n, E::one(), asl, !trans_a, gs, false, beta, dst);
                } else {
                    // stored B is [n, k]: dB_stored = dC^T . op(A)
                    E::gemm(n, m, k, E::one(), gs, true, asl, trans_a, beta, dst);
                }
            }
            self.accumulate(grads, b, Tensor::new(bshape.to_vec(), db).unwrap());
        }
    }

    // ----- shared validation -------------------------------------------

    fn binary_same_shape(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<(), TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn check_suffix(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let ok = sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb;
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn check_logits(
        &self,
        op: &'static str,
        logits: NodeId,
        targets: &[u32],
    ) -> Result<(usize, usize), TensorError> {
        let lv = self.value(logits);
        if lv.rank() != 2 {
            return Err(TensorError::Invalid {
                op,
                msg: format!("logits must be [N, K], got {:?}", lv.shape()),
            });
        }
        let (n, k) = (lv.shape()[0], lv.shape()[1]);
        if targets.len() != n {
            return Err(TensorError::Invalid {
                op,
                msg: format!("{} targets for {} rows", targets.len(), n),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= k) {
            return Err(TensorError::LabelOutOfRange {
                label: bad,
                classes: k,
            });
        }
        if n == 0 {
            return Err(TensorError::Invalid {
                op,
                msg: "no rows".into(),
            });
        }
        Ok((n, k))
    }

    /// Per-class (intersection, predicted mass, target count) over all rows.
    fn dice_stats(&self, logits: NodeId, targets: &[u32], k: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let lv = self.value(logits);
        let mut inter = vec![0.0f64; k];
        let mut psum = vec![0.0f64; k];
        let mut tcount = vec![0.0f64; k];
        for (row, &t) in lv.data().chunks_exact(k).zip(targets) {
            let (m, lse) = log_sum_exp(row);
            for (c, &x) in row.iter().enumerate() {
                let p = (x.to_f64() - m - lse).exp();
                psum[c] += p;
                if c == t as usize {
                    inter[c] += p;
                }
            }
            tcount[t as usize] += 1.0;
        }
        (inter, psum, tcount)
    }
}

// ----- data-level helpers shared by forward and backward ----------------

fn map_new<E: Element>(t: &Tensor<E>, f: impl Fn(E) -> E) -> Tensor<E> {
    let data = t.data().iter().map(|&x| f(x)).collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

fn zip_new<E: Element>(a: &Tensor<E>, b: &Tensor<E>, f: impl Fn(E, E) -> E) -> Tensor<E> {
    debug_assert_eq!(a.len(), b.len());
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

/// `(outer, length, inner)` extents around one axis of a shape.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// `(max, ln(sum(exp(x - max))))` of a slice, for stable softmax family ops.
fn log_sum_exp<E: Element>(row: &[E]) -> (f64, f64) {
    let m = row
        .iter()
        .fold(f64::NEG_INFINITY, |acc, &x| acc.max(x.to_f64()));
    let s: f64 = row.iter().map(|&x| (x.to_f64() - m).exp()).sum();
    (m, s.ln())
}

fn permute_data<E: Element>(t: &Tensor<E>, perm: &[usize]) -> Tensor<E> {
    let in_shape = t.shape();
    let rank = in_shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = vec![E::zero(); t.len()];
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for slot in out.iter_mut() {
        *slot = t.data()[src];
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out).unwrap()
}

fn roll2d_data<E: Element>(t: &Tensor<E>, dy: i64, dx: i64) -> Tensor<E> {
    let s = t.shape();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (hh, ww) = (h as i64, w as i64);
    let mut out = vec![E::zero(); t.len()];
    for bi in 0..b {
        for y in 0..h {
            let sy = (y as i64 - dy).rem_euclid(hh) as usize;
            for x in 0..w {
                let sx = (x as i64 - dx).rem_euclid(ww) as usize;
                let dst = ((bi * h + y) * w + x) * c;
                let src = ((bi * h + sy) * w + sx) * c;
                out[dst..dst + c].copy_from_slice(&t.data()[src..src + c]);
            }
        }
    }
    Tensor::new(s.to_vec(), out).unwrap()
}

fn softmax_data<E: Element>(t: &Tensor<E>, axis: usize) -> Tensor<E> {
    let (outer, len, inner) = axis_split(t.shape(), axis);
    let mut out = t.data().to_vec();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut m = f64::NEG_INFINITY;
            for l in 0..len {
                m = m.max(out[base + l * inner].to_f64());
            }
            let mut sum = 0.0f64;
            for l in 0..len {
                let e = (out[base + l * inner].to_f64() - m).exp();
                out[base + l * inner] = E::from_f64(e);
                sum += e;
            }
            let inv = E::from_f64(1.0 / sum);
            for l in 0..len {
                out[base + l * inner] *= inv;
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out).unwrap()
}
