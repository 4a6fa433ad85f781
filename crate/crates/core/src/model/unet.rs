//! The segmentation network: patch embedding, windowed-attention encoder
//! stages joined by patch merging, a mirrored decoder joined by patch
//! expansion, per-level skip fusion, and a linear pixel head.

use crate::attention::{
    cyclic_shift, cyclic_unshift, shift_attention_mask, window_partition, window_reverse,
    AttentionSpec, PatchEmbed, PatchExpand, PatchMerge, WindowAttention, XcaBlock,
};
use crate::nn::{LayerNorm, Linear, Mlp};
use crate::rng::SeedRng;
use crate::tensor::{Binding, Element, Graph, NodeId, ParamStore, Tensor, TensorError};

use super::{ModelConfig, ModelError, SkipMode};

/// Pre-norm transformer block over a token grid: window attention (cyclically
/// shifted on alternating blocks) followed by a 4x MLP, both residual.
#[derive(Debug, Clone)]
pub struct SwinBlock {
    norm1: LayerNorm,
    attn: WindowAttention,
    norm2: LayerNorm,
    mlp: Mlp,
    window: usize,
    shift: usize,
    drop_rate: f64,
}

impl SwinBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        shift: usize,
        drop_rate: f64,
        rng: &mut SeedRng,
    ) -> Result<Self, TensorError> {
        let spec = AttentionSpec { dim, heads };
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: WindowAttention::new(store, &format!("{name}.attn"), spec, window, true, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, 4 * dim, rng),
            window,
            shift,
            drop_rate,
        })
    }

    /// `tokens: [B, h*w, C]` laid out row-major over the `h x w` grid.
    /// `rng: Some` enables dropout (training); `None` is inference.
    pub fn forward<E: Element>(
        &self,
        g: &mut Graph<E>,
        bind: &Binding,
        tokens: NodeId,
        h: usize,
        w: usize,
        mut rng: Option<&mut SeedRng>,
    ) -> Result<NodeId, TensorError> {
        let shape = g.value(tokens).shape().to_vec();
        let (b, c) = (shape[0], *shape.last().unwrap());
        let m = self.window;
        // a single whole-image window is already global attention; shifting
        // it would only mask out the wrapped seam
        let shift = if h <= m && w <= m { 0 } else { self.shift };

        let shortcut = tokens;
        let y = self.norm1.forward(g, bind, tokens)?;
        let mut grid = g.reshape(y, vec![b, h, w, c])?;
        let mask = if shift > 0 {
            grid = cyclic_shift(g, grid, shift)?;
            Some(shift_attention_mask::<E>(h, w, m, shift)?)
        } else {
            None
        };
        let windows = window_partition(g, grid, m)?;
        let attended = self.attn.forward(g, bind, windows, mask.as_ref())?;
        let mut grid = window_reverse(g, attended, m, h, w)?;
        if shift > 0 {
            grid = cyclic_unshift(g, grid, shift)?;
        }
        let mut y = g.reshape(grid, vec![b, h * w, c])?;
        if let Some(r) = rng.as_deref_mut() {
            y = g.dropout(y, self.drop_rate, r);
        }
        let x = g.add(shortcut, y)?;

        let shortcut = x;
        let z = self.norm2.forward(g, bind, x)?;
        let mut z = self.mlp.forward(g, bind, z)?;
        if let Some(r) = rng.as_deref_mut() {
            z = g.dropout(z, self.drop_rate, r);
        }
        g.add(shortcut, z)
    }
}

/// Per-level fusion of the encoder feature `E` into the decoder stream `D`.
///
/// Attentive mode runs cross-covariance attention over the channel-wise
/// concatenation `[E | D]`, layer-normalizes, projects back to the decoder
/// width, and adds the result to `D` residually. Concat mode is the plain
/// concatenate-and-project skip; None passes `D` through untouched.
#[derive(Debug, Clone)]
pub struct AttentiveSkip {
    mode: SkipMode,
    xca: Option<XcaBlock>,
    norm: Option<LayerNorm>,
    proj: Option<Linear>,
}

impl AttentiveSkip {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        dim: usize,
        heads: usize,
        mode: SkipMode,
        rng: &mut SeedRng,
    ) -> Result<Self, TensorError> {
        let (xca, norm, proj) = match mode {
            SkipMode::Attentive => {
                let spec = AttentionSpec {
                    dim: 2 * dim,
                    heads,
                };
                (
                    Some(XcaBlock::new(store, &format!("{name}.xca"), spec, true, rng)?),
                    Some(LayerNorm::new(store, &format!("{name}.norm"), 2 * dim)),
                    Some(Linear::new(
                        store,
                        &format!("{name}.proj"),
                        2 * dim,
                        dim,
                        true,
                        rng,
                    )),
                )
            }
            SkipMode::Concat => (
                None,
                None,
                Some(Linear::new(
                    store,
                    &format!("{name}.proj"),
                    2 * dim,
                    dim,
                    true,
                    rng,
                )),
            ),
            SkipMode::None => (None, None, None),
        };
        Ok(Self {
            mode,
            xca,
            norm,
            proj,
        })
    }

    /// `enc` and `dec` are both `[B, N, C]`; the output matches `dec`.
    pub fn forward<E: Element>(
        &self,
        g: &mut Graph<E>,
        bind: &Binding,
        enc: NodeId,
        dec: NodeId,
    ) -> Result<NodeId, TensorError> {
        match self.mode {
            SkipMode::None => Ok(dec),
            SkipMode::Concat => {
                let cat = g.concat(&[enc, dec], 2)?;
                self.proj.as_ref().unwrap().forward(g, bind, cat)
            }
            SkipMode::Attentive => {
                let cat = g.concat(&[enc, dec], 2)?;
                let mixed = self.xca.as_ref().unwrap().forward(g, bind, cat)?;
                let normed = self.norm.as_ref().unwrap().forward(g, bind, mixed)?;
                let fused = self.proj.as_ref().unwrap().forward(g, bind, normed)?;
                g.add(dec, fused)
            }
        }
    }
}

/// Expand each token into an `f x f` pixel block while keeping the channel
/// width: `[B, h*w, C] -> [B, (f*h)*(f*w), C]` via a linear map to `f*f*C`.
#[derive(Debug, Clone)]
pub struct FinalExpand {
    pub factor: usize,
    pub dim: usize,
    expand: Linear,
}

impl FinalExpand {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        dim: usize,
        factor: usize,
        rng: &mut SeedRng,
    ) -> Self {
        let expand = Linear::new(
            store,
            &format!("{name}.expand"),
            dim,
            factor * factor * dim,
            false,
            rng,
        );
        Self {
            factor,
            dim,
            expand,
        }
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
                op: "final_expand",
                msg: format!("expected [B, {}, {}], got {shape:?}", h * w, self.dim),
            });
        }
        let (b, f) = (shape[0], self.factor);
        let wide = self.expand.forward(g, bind, tokens)?; // [B, hw, f*f*C]
        let blocks = g.reshape(wide, vec![b, h, w, f, f, self.dim])?;
        let spread = g.permute(blocks, vec![0, 1, 3, 2, 4, 5])?; // [B, h, f, w, f, C]
        g.reshape(spread, vec![b, f * h * f * w, self.dim])
    }
}

/// Encoder-decoder segmentation network with windowed attention throughout
/// and cross-covariance attentive skips between matching resolutions.
#[derive(Debug, Clone)]
pub struct SattisUnet {
    pub config: ModelConfig,
    patch_embed: PatchEmbed,
    stages: Vec<Vec<SwinBlock>>,
    merges: Vec<PatchMerge>,
    expands: Vec<PatchExpand>,
    skips: Vec<AttentiveSkip>,
    dec_stages: Vec<Vec<SwinBlock>>,
    final_expand: FinalExpand,
    final_norm: LayerNorm,
    head: Linear,
}

impl SattisUnet {
    pub fn new<E: Element>(
        config: &ModelConfig,
        store: &mut ParamStore<E>,
        rng: &mut SeedRng,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let s = config.stages();
        let m = config.window;

        let patch_embed = PatchEmbed::new(
            store,
            "embed",
            config.patch,
            config.in_channels,
            config.base_dim,
            rng,
        );

        let mut stages = Vec::with_capacity(s);
        let mut merges = Vec::with_capacity(s.saturating_sub(1));
        for i in 0..s {
            let dim = config.stage_dim(i);
            let mut blocks = Vec::with_capacity(config.stage_depths[i]);
            for j in 0..config.stage_depths[i] {
                // alternate W-MSA (even blocks) and SW-MSA (odd blocks)
                let shift = if j % 2 == 1 { m / 2 } else { 0 };
                blocks.push(SwinBlock::new(
                    store,
                    &format!("enc{i}.b{j}"),
                    dim,
                    config.heads[i],
                    m,
                    shift,
                    config.drop_rate,
                    rng,
                )?);
            }
            stages.push(blocks);
            if i + 1 < s {
                merges.push(PatchMerge::new(store, &format!("merge{i}"), dim, rng));
            }
        }

        // decoder levels run deepest-first; level l mirrors encoder stage l
        let mut expands = Vec::new();
        let mut skips = Vec::new();
        let mut dec_stages = Vec::new();
        for l in (0..s.saturating_sub(1)).rev() {
            let dim = config.stage_dim(l);
            expands.push(PatchExpand::new(
                store,
                &format!("dec{l}.expand"),
                2 * dim,
                rng,
            )?);
            skips.push(AttentiveSkip::new(
                store,
                &format!("dec{l}.skip"),
                dim,
                config.heads[l],
                config.skip_mode,
                rng,
            )?);
            let mut blocks = Vec::with_capacity(config.stage_depths[l]);
            for j in 0..config.stage_depths[l] {
                let shift = if j % 2 == 1 { m / 2 } else { 0 };
                blocks.push(SwinBlock::new(
                    store,
                    &format!("dec{l}.b{j}"),
                    dim,
                    config.heads[l],
                    m,
                    shift,
                    config.drop_rate,
                    rng,
                )?);
            }
            dec_stages.push(blocks);
        }

        let final_expand = FinalExpand::new(store, "final", config.base_dim, config.patch, rng);
        let final_norm = LayerNorm::new(store, "final.norm", config.base_dim);
        let head = Linear::new(
            store,
            "head",
            config.base_dim,
            config.num_classes,
            true,
            rng,
        );

        Ok(Self {
            config: config.clone(),
            patch_embed,
            stages,
            merges,
            expands,
            skips,
            dec_stages,
            final_expand,
            final_norm,
            head,
        })
    }

    /// `image: [B, H, W, in_channels]` -> logits `[B, H, W, num_classes]`.
    /// Inputs are zero-padded (bottom/right) to the stage-divisible multiple
    /// and the logits are cropped back, so any size works.
    pub fn forward<E: Element>(
        &self,
        g: &mut Graph<E>,
        bind: &Binding,
        image: NodeId,
        mut rng: Option<&mut SeedRng>,
    ) -> Result<NodeId, TensorError> {
        let shape = g.value(image).shape().to_vec();
        if shape.len() != 4 || shape[3] != self.config.in_channels {
            return Err(TensorError::Invalid {
                op: "forward",
                msg: format!(
                    "expected [B, H, W, {}], got {shape:?}",
                    self.config.in_channels
                ),
            });
        }
        let (b, h, w, ch) = (shape[0], shape[1], shape[2], shape[3]);
        if h == 0 || w == 0 {
            return Err(TensorError::Invalid {
                op: "forward",
                msg: "empty input image".into(),
            });
        }

        let mult = self.config.side_multiple();
        let hp = h.div_ceil(mult) * mult;
        let wp = w.div_ceil(mult) * mult;
        let mut x = image;
        if hp > h {
            let pad = g.constant(Tensor::zeros(vec![b, hp - h, w, ch]));
            x = g.concat(&[x, pad], 1)?;
        }
        if wp > w {
            let pad = g.constant(Tensor::zeros(vec![b, hp, wp - w, ch]));
            x = g.concat(&[x, pad], 2)?;
        }

        let mut tokens = self.patch_embed.forward(g, bind, x)?;
        let mut gh = hp / self.config.patch;
        let mut gw = wp / self.config.patch;

        let s = self.config.stages();
        let mut enc_feats: Vec<(NodeId, usize, usize)> = Vec::with_capacity(s - 1);
        for i in 0..s {
            for block in &self.stages[i] {
                tokens = block.forward(g, bind, tokens, gh, gw, rng.as_deref_mut())?;
            }
            if i + 1 < s {
                enc_feats.push((tokens, gh, gw));
                tokens = self.merges[i].forward(g, bind, tokens, gh, gw)?;
                gh /= 2;
                gw /= 2;
            }
        }

        for (d, l) in (0..s.saturating_sub(1)).rev().enumerate() {
            tokens = self.expands[d].forward(g, bind, tokens, gh, gw)?;
            gh *= 2;
            gw *= 2;
            let (enc, eh, ew) = enc_feats[l];
            debug_assert_eq!((eh, ew), (gh, gw));
            tokens = self.skips[d].forward(g, bind, enc, tokens)?;
            for block in &self.dec_stages[d] {
                tokens = block.forward(g, bind, tokens, gh, gw, rng.as_deref_mut())?;
            }
        }

        let pixels = self.final_expand.forward(g, bind, tokens, gh, gw)?;
        let normed = self.final_norm.forward(g, bind, pixels)?;
        let logits = self.head.forward(g, bind, normed)?;
        let mut grid = g.reshape(logits, vec![b, hp, wp, self.config.num_classes])?;
        if hp > h {
            grid = g.narrow(grid, 1, 0, h)?;
        }
        if wp > w {
            grid = g.narrow(grid, 2, 0, w)?;
        }
        Ok(grid)
    }

    /// Inference: per-pixel argmax labels (ties -> lowest class index),
    /// flattened in `[B, H, W]` order.
    pub fn predict<E: Element>(
        &self,
        store: &ParamStore<E>,
        image: &Tensor<E>,
    ) -> Result<Vec<u8>, ModelError> {
        let mut g = Graph::new();
        let bind = Binding::new(&mut g, store);
        let x = g.constant(image.clone());
        let logits = self.forward(&mut g, &bind, x, None)?;
        Ok(g.value(logits)
            .argmax_last_axis()
            .into_iter()
            .map(|c| c as u8)
            .collect())
    }
}
