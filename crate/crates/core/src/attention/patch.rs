//! Patch-level spatial operators: embedding at model entry, 2x merging
//! between encoder stages, 2x expansion between decoder stages.

use crate::nn::{LayerNorm, Linear};
use crate::rng::SeedRng;
use crate::tensor::{Binding, Element, Graph, NodeId, ParamStore, TensorError};

/// Flatten non-overlapping `p x p` patches and project to `C` channels,
/// then layer-normalize: `[B, H, W, in_ch] -> [B, (H/p)*(W/p), C]`.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub patch: usize,
    pub in_ch: usize,
    pub dim: usize,
    proj: Linear,
    norm: LayerNorm,
}

impl PatchEmbed {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        patch: usize,
        in_ch: usize,
        dim: usize,
        rng: &mut SeedRng,
    ) -> Self {
        let proj = Linear::new(
            store,
            &format!("{name}.proj"),
            patch * patch * in_ch,
            dim,
            true,
            rng,
        );
        let norm = LayerNorm::new(store, &format!("{name}.norm"), dim);
        Self {
            patch,
            in_ch,
            dim,
            proj,
            norm,
        }
    }

    /// Patch gather and linear projection only (no normalization); exposed
    /// so the projection's linearity is directly testable.
    pub fn project<E: Element>(
        &self,
        g: &mut Graph<E>,
        bind: &Binding,
        image: NodeId,
    ) -> Result<NodeId, TensorError> {
        let shape = g.value(image).shape().to_vec();
        let p = self.patch;
        if shape.len() != 4 || shape[3] != self.in_ch {
            return Err(TensorError::Invalid {
                op: "patch_embed",
                msg: format!("expected [B, H, W, {}], got {shape:?}", self.in_ch),
            });
        }
        let (b, h, w) = (shape[0], shape[1], shape[2]);
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(TensorError::Invalid {
                op: "patch_embed",
                msg: format!("spatial dims {h}x{w} not divisible by patch {p}"),
            });
        }
        let (nh, nw) = (h / p, w / p);
        let split = g.reshape(image, vec![b, nh, p, nw, p, self.in_ch])?;
        let grouped = g.permute(split, vec![0, 1, 3, 2, 4, 5])?;
        let tokens = g.reshape(grouped, vec![b, nh * nw, p * p * self.in_ch])?;
        self.proj.forward(g, bind, tokens)
    }

    pub fn forward<E: Element>(
        &self,
        g: &mut Graph<E>,
        bind: &Binding,
        image: NodeId,
    ) -> Result<NodeId, TensorError> {
        let projected = self.project(g, bind, image)?;
        self.norm.forward(g, bind, projected)
    }
}

/// Concatenate each 2x2 token neighborhood to 4C, layer-normalize, and
/// reduce linearly to 2C: `[B, H*W, C] -> [B, (H/2)*(W/2), 2C]`.
#[derive(Debug, Clone)]
pub struct PatchMerge {
    pub dim: usize,
    norm: LayerNorm,
    reduce: Linear,
}

impl PatchMerge {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        dim: usize,
        rng: &mut SeedRng,
    ) -> Self {
        let norm = LayerNorm::new(store, &format!("{name}.norm"), 4 * dim);
        let reduce = Linear::new(store, &format!("{name}.reduce"), 4 * dim, 2 * dim, false, rng);
        Self { dim, norm, reduce }
    }

    pub fn forward<E: Element>(
        &self,
        g: &mut Graph<E>,
        bind: &Binding,
        tokens: NodeId,
        h: usize,
        w: usize,
    ) -> Result<NodeId, TensorError> {
        let shape = g.value(tokens).shape().to_vec();
        if shape.len() != 3 || shape[1] != h * w || shape[2] != self.dim {
            return Err(TensorError::Invalid {
                op: "patch_merge",
                msg: format!("expected [B, {}, {}], got {shape:?}", h * w, self.dim),
            });
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::Invalid {
                op: "patch_merge",
                msg: format!("spatial dims {h}x{w} must be even"),
            });
        }
        let b = shape[0];
        let c = self.dim;
        let map = g.reshape(tokens, vec![b, h / 2, 2, w / 2, 2, c])?;
        // neighborhood order (dy, dx): (0,0), (0,1), (1,0), (1,1)
        let grouped = g.permute(map, vec![0, 1, 3, 2, 4, 5])?;
        let wide = g.reshape(grouped, vec![b, (h / 2) * (w / 2), 4 * c])?;
        let normed = self.norm.forward(g, bind, wide)?;
        self.reduce.forward(g, bind, normed)
    }
}

/// Expand each token into a 2x2 spatial block of C/2 channels via a linear
/// map to 2C: `[B, H*W, C] -> [B, (2H)*(2W), C/2]`. Exact shape inverse of
/// [`PatchMerge`].
#[derive(Debug, Clone)]
pub struct PatchExpand {
    pub dim: usize,
    expand: Linear,
}

impl PatchExpand {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        dim: usize,
        rng: &mut SeedRng,
    ) -> Result<Self, TensorError> {
        if dim % 2 != 0 {
            return Err(TensorError::Invalid {
                op: "patch_expand",
                msg: format!("channel count {dim} must be even"),
            });
        }
        let expand = Linear::new(store, &format!("{name}.expand"), dim, 2 * dim, false, rng);
        Ok(Self { dim, expand })
    }

    pub fn forward<E: Element>(
        &self,
        g: &mut Graph<E>,
        bind: &Binding,
        tokens: NodeId,
        h: usize,
        w: usize,
    ) -> Result<NodeId, TensorError> {
        let shape = g.value(tokens).shape().to_vec();
        if shape.len() != 3 || shape[1] != h * w || shape[2] != self.dim {
            return Err(TensorError::Invalid {
                op: "patch_expand",
                msg: format!("expected [B, {}, {}], got {shape:?}", h * w, self.dim),
            });
        }
        let b = shape[0];
        let half = self.dim / 2;
        let wide = self.expand.forward(g, bind, tokens)?; // [B, HW, 2C]
        let blocks = g.reshape(wide, vec![b, h, w, 2, 2, half])?;
        let spread = g.permute(blocks, vec![0, 1, 3, 2, 4, 5])?; // [B, H, 2, W, 2, C/2]
        g.reshape(spread, vec![b, 2 * h * 2 * w, half])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Binding, ParamStore, Tensor};
    use proptest::prelude::*;

    fn rand_tensor(shape: &[usize], rng: &mut SeedRng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn embed_counts_tokens() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeedRng::new(51);
        let embed = PatchEmbed::new(&mut store, "embed", 4, 1, 12, &mut rng);
        let mut g = Graph::new();
        let bind = Binding::new(&mut g, &store);
        let img = g.constant(rand_tensor(&[2, 64, 64, 1], &mut rng));
        let tokens = embed.forward(&mut g, &bind, img).unwrap();
        assert_eq!(g.value(tokens).shape(), &[2, 256, 12]);
    }

    #[test]
    fn embed_patch_one_is_pointwise_projection() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeedRng::new(52);
        let embed = PatchEmbed::new(&mut store, "embed", 1, 3, 5, &mut rng);
        let x = rand_tensor(&[1, 2, 2, 3], &mut rng);
        let mut g = Graph::new();
        let bind = Binding::new(&mut g, &store);
        let img = g.constant(x.clone());
        let projected = embed.project(&mut g, &bind, img).unwrap();
        // each token is one pixel: out[t] = x[t] . W + b
        let wt = store.get(embed.proj.weight).value.clone();
        let bias = store.get(embed.proj.bias.unwrap()).value.clone();
        for t in 0..4 {
            for j in 0..5 {
                let mut want = bias.data()[j];
                for i in 0..3 {
                    want += x.data()[t * 3 + i] * wt.at(&[i, j]);
                }
                let got = g.value(projected).at(&[0, t, j]);
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]
        #[test]
        fn projection_is_linear_in_the_input(scale in 0.1f64..4.0, seed in 0u64..500) {
            let mut store = ParamStore::<f64>::new();
            let mut rng = SeedRng::new(seed);
            let embed = PatchEmbed::new(&mut store, "embed", 2, 1, 6, &mut rng);
            // zero the projection bias so scaling commutes
            store.get_mut(embed.proj.bias.unwrap()).value = Tensor::zeros(vec![6]);
            let x = rand_tensor(&[1, 4, 4, 1], &mut rng);
            let scaled = Tensor::new(
                x.shape().to_vec(),
                x.data().iter().map(|v| v * scale).collect(),
            ).unwrap();

            let mut g = Graph::new();
            let bind = Binding::new(&mut g, &store);
            let a = g.constant(x);
            let b = g.constant(scaled);
            let pa = embed.project(&mut g, &bind, a).unwrap();
            let pb = embed.project(&mut g, &bind, b).unwrap();
            for (ya, yb) in g.value(pa).data().iter().zip(g.value(pb).data()) {
                prop_assert!((ya * scale - yb).abs() < 1e-9 * (1.0 + yb.abs()));
            }
        }
    }

    #[test]
    fn merge_halves_sides_and_doubles_channels() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeedRng::new(53);
        let merge = PatchMerge::new(&mut store, "merge", 3, &mut rng);
        let mut g = Graph::new();
        let bind = Binding::new(&mut g, &store);
        let tokens = g.constant(rand_tensor(&[2, 16, 3], &mut rng));
        let out = merge.forward(&mut g, &bind, tokens, 4, 4).unwrap();
        assert_eq!(g.value(out).shape(), &[2, 4, 6]);
    }

    #[test]
    fn merge_matches_gather_and_project_oracle() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeedRng::new(54);
        let c = 3;
        let merge = PatchMerge::new(&mut store, "merge", c, &mut rng);
        let (h, w) = (4usize, 6usize);
        let x = rand_tensor(&[1, h * w, c], &mut rng);

        let mut g = Graph::new();
        let bind = Binding::new(&mut g, &store);
        let tokens = g.constant(x.clone());
        let got = merge.forward(&mut g, &bind, tokens, h, w).unwrap();

        let wred = store.get(merge.reduce.weight).value.clone();
        let gamma = store.get(merge.norm.gamma).value.clone();
        let beta = store.get(merge.norm.beta).value.clone();
        for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                // gather (0,0), (0,1), (1,0), (1,1) neighbors
                let mut wide = Vec::with_capacity(4 * c);
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let t = (2 * oy + dy) * w + (2 * ox + dx);
                    wide.extend_from_slice(&x.data()[t * c..(t + 1) * c]);
                }
                // layer norm with affine
                let mean: f64 = wide.iter().sum::<f64>() / (4 * c) as f64;
                let var: f64 =
                    wide.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (4 * c) as f64;
                let normed: Vec<f64> = wide
                    .iter()
                    .enumerate()
                    .map(|(i, v)| {
                        (v - mean) / (var + 1e-5).sqrt() * gamma.data()[i] + beta.data()[i]
                    })
                    .collect();
                for j in 0..2 * c {
                    let want: f64 = normed
                        .iter()
                        .enumerate()
                        .map(|(i, v)| v * wred.at(&[i, j]))
                        .sum();
                    let got_v = g.value(got).at(&[0, oy * (w / 2) + ox, j]);
                    assert!((got_v - want).abs() < 1e-6, "{got_v} vs {want}");
                }
            }
        }
    }

    #[test]
    fn expand_is_shape_inverse_of_merge() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeedRng::new(55);
        let expand = PatchExpand::new(&mut store, "expand", 6, &mut rng).unwrap();
        let mut g = Graph::new();
        let bind = Binding::new(&mut g, &store);
        let tokens = g.constant(rand_tensor(&[2, 4, 6], &mut rng));
        let out = expand.forward(&mut g, &bind, tokens, 2, 2).unwrap();
        assert_eq!(g.value(out).shape(), &[2, 16, 3]);
    }

    #[test]
    fn expand_single_token_rearrangement_matches_loop_oracle() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeedRng::new(56);
        let c = 4;
        let expand = PatchExpand::new(&mut store, "expand", c, &mut rng).unwrap();
        let x = rand_tensor(&[1, 1, c], &mut rng);
        let mut g = Graph::new();
        let bind = Binding::new(&mut g, &store);
        let tokens = g.constant(x.clone());
        let out = expand.forward(&mut g, &bind, tokens, 1, 1).unwrap();
        assert_eq!(g.value(out).shape(), &[1, 4, 2]);

        // wide = x . W (no bias), laid out (dy, dx, channel)
        let wexp = store.get(expand.expand.weight).value.clone();
        for (block, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
            for ch in 0..c / 2 {
                let col = (dy * 2 + dx) * (c / 2) + ch;
                let want: f64 = (0..c).map(|i| x.data()[i] * wexp.at(&[i, col])).sum();
                // output position: y = dy, x = dx on the 2x2 grid
                let token = dy * 2 + dx;
                let got = g.value(out).at(&[0, token, ch]);
                assert!((got - want).abs() < 1e-12, "block {block} ch {ch}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]
        #[test]
        fn expand_spatial_layout_is_consistent_with_merge(seed in 0u64..500) {
            // expanding then merging restores token count and channel count
            let mut store = ParamStore::<f64>::new();
            let mut rng = SeedRng::new(seed);
            let expand = PatchExpand::new(&mut store, "expand", 4, &mut rng).unwrap();
            let merge = PatchMerge::new(&mut store, "merge", 2, &mut rng);
            let x = rand_tensor(&[1, 6, 4], &mut rng);
            let mut g = Graph::new();
            let bind = Binding::new(&mut g, &store);
            let tokens = g.constant(x);
            let up = expand.forward(&mut g, &bind, tokens, 2, 3).unwrap();
            prop_assert_eq!(g.value(up).shape(), &[1, 24, 2]);
            let down = merge.forward(&mut g, &bind, up, 4, 6).unwrap();
            prop_assert_eq!(g.value(down).shape(), &[1, 6, 4]);
        }
    }
}
