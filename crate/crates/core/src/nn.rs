//! Small trainable building blocks layered over the autodiff tape: linear
//! projections, affine layer normalization, and the two-layer GELU MLP.
//!
//! Each block owns [`ParamId`]s registered in a shared [`ParamStore`] under
//! a dotted name prefix; `forward` replays the block onto whatever tape the
//! caller is recording, via the step's [`Binding`].

use crate::rng::SeedRng;
use crate::tensor::{Binding, Element, Graph, NodeId, ParamId, ParamStore, Tensor, TensorError};

/// Standard deviation of weight initialization for all projections.
const INIT_STD: f64 = 0.02;

/// Fully connected layer `y = x . W + b`, with `W: [in, out]`.
///
/// Accepts any input shaped `[..., in]`; the weight is shared over all
/// leading axes.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut SeedRng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            normal_init(&[in_dim, out_dim], rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(vec![out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<E: Element>(
        &self,
        g: &mut Graph<E>,
        bind: &Binding,
        x: NodeId,
    ) -> Result<NodeId, TensorError> {
        let shape = g.value(x).shape().to_vec();
        let rank = shape.len();
        // collapse leading axes so the shared-RHS matmul applies
        let lead: usize = shape[..rank - 1].iter().product();
        let flat = g.reshape(x, vec![lead, shape[rank - 1]])?;
        let mut y = g.matmul(flat, bind.node(self.weight))?;
        if let Some(b) = self.bias {
            y = g.add_suffix(y, bind.node(b))?;
        }
        let mut out_shape = shape[..rank - 1].to_vec();
        out_shape.push(self.out_dim);
        g.reshape(y, out_shape)
    }
}

/// Layer normalization over the last axis with learnable affine
/// `gamma * norm(x) + beta`.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<E: Element>(store: &mut ParamStore<E>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(vec![dim], E::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![dim])),
            eps: 1e-5,
        }
    }

    pub fn forward<E: Element>(
        &self,
        g: &mut Graph<E>,
        bind: &Binding,
        x: NodeId,
    ) -> Result<NodeId, TensorError> {
        let n = g.layer_norm(x, self.eps)?;
        let scaled = g.mul_suffix(n, bind.node(self.gamma))?;
        g.add_suffix(scaled, bind.node(self.beta))
    }
}

/// Two-layer MLP with GELU: `fc2(gelu(fc1(x)))`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut SeedRng,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, rng),
        }
    }

    pub fn forward<E: Element>(
        &self,
        g: &mut Graph<E>,
        bind: &Binding,
        x: NodeId,
    ) -> Result<NodeId, TensorError> {
        let h = self.fc1.forward(g, bind, x)?;
        let a = g.gelu(h);
        self.fc2.forward(g, bind, a)
    }
}

/// Gaussian-initialized tensor with [`INIT_STD`] spread.
pub fn normal_init<E: Element>(shape: &[usize], rng: &mut SeedRng) -> Tensor<E> {
    let n: usize = shape.iter().product();
    let data: Vec<E> = (0..n)
        .map(|_| E::from_f64(rng.normal_with(0.0, INIT_STD)))
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, GradCheckOptions};

    #[test]
    fn linear_applies_shared_weight_over_batch() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeedRng::new(5);
        let lin = Linear::new(&mut store, "lin", 3, 2, true, &mut rng);
        // overwrite with a known weight and bias
        store.get_mut(lin.weight).value =
            Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        store.get_mut(lin.bias.unwrap()).value = Tensor::new(vec![2], vec![10.0, 20.0]).unwrap();
        let mut g = Graph::new();
        let bind = Binding::new(&mut g, &store);
        let x = g.constant(Tensor::new(vec![2, 1, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = lin.forward(&mut g, &bind, x).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 1, 2]);
        // row [1,2,3]: [1+3+10, 2+3+20] = [14, 25]; row [4,5,6]: [20, 31]
        assert_eq!(g.value(y).data(), &[14.0, 25.0, 20.0, 31.0]);
    }

    #[test]
    fn layer_norm_affine_recovers_scale_and_shift() {
        let mut store = ParamStore::<f64>::new();
        let ln = LayerNorm::new(&mut store, "ln", 2);
        store.get_mut(ln.gamma).value = Tensor::new(vec![2], vec![2.0, 2.0]).unwrap();
        store.get_mut(ln.beta).value = Tensor::new(vec![2], vec![5.0, 5.0]).unwrap();
        let mut g = Graph::new();
        let bind = Binding::new(&mut g, &store);
        let x = g.constant(Tensor::new(vec![1, 2], vec![-1.0, 1.0]).unwrap());
        let y = ln.forward(&mut g, &bind, x).unwrap();
        // normalized to almost exactly (-1, 1), then scaled and shifted
        let d = g.value(y).data();
        assert!((d[0] - 3.0).abs() < 1e-4);
        assert!((d[1] - 7.0).abs() < 1e-4);
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeedRng::new(17);
        let mlp = Mlp::new(&mut store, "mlp", 3, 5, &mut rng);
        let x = Tensor::new(vec![4, 3], (0..12).map(|_| rng.normal()).collect()).unwrap();
        let report = grad_check(
            &mut store,
            &|g, b| {
                let input = g.constant(x.clone());
                let y = mlp.forward(g, b, input)?;
                let sq = g.mul(y, y)?;
                Ok(g.mean_all(sq))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-6,
            "max rel err {} at {}",
            report.max_rel_err,
            report.worst_param
        );
    }
}
