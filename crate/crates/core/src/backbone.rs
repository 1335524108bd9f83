//! Minimal video transformer.
//!
//! Clips are cut into disjoint `tau x p x p` patches, linearly embedded,
//! given learned positional embeddings and a class token, then passed through
//! `depth` pre-norm blocks. Token rows are ordered: class token, any extra
//! prefix tokens, then patches time-major and row-major in space.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use serde::{Deserialize, Serialize};

use crate::data::VideoClip;
use crate::error::{Error, Result};
use crate::nn::{ensure_finite, Dense, LayerNorm, Mlp, Scope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    /// Temporal attention across frames at each location, then spatial
    /// attention within each frame.
    Divided,
    /// One attention over every token.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub tau: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub attention: AttentionKind,
    /// Apply a final layer norm to the class token before the head.
    pub final_norm: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            frames: 4,
            height: 32,
            width: 32,
            tau: 2,
            patch: 8,
            dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            num_classes: 4,
            attention: AttentionKind::Divided,
            final_norm: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return fail("clip dimensions must be positive");
        }
        if self.tau == 0 || self.patch == 0 {
            return fail("patch extents must be positive");
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return fail("dim must be a positive multiple of heads");
        }
        if self.depth == 0 || self.mlp_ratio == 0 || self.num_classes == 0 {
            return fail("depth, mlp_ratio and num_classes must be positive");
        }
        Ok(())
    }

    pub fn t_v(&self) -> usize {
        self.frames.div_ceil(self.tau)
    }

    pub fn grid_h(&self) -> usize {
        self.height.div_ceil(self.patch)
    }

    pub fn grid_w(&self) -> usize {
        self.width.div_ceil(self.patch)
    }

    pub fn s_v(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    pub fn num_patches(&self) -> usize {
        self.t_v() * self.s_v()
    }

    /// Token rows including the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.tau * self.patch * self.patch * VideoClip::CHANNELS
    }

    pub fn check_layers(&self, layers: &[usize]) -> Result<()> {
        match layers.iter().find(|&&l| l == 0 || l > self.depth) {
            Some(l) => Err(Error::Config(format!(
                "layer {l} outside 1..={}",
                self.depth
            ))),
            None => Ok(()),
        }
    }
}

/// Flattens a clip into `T_v * S_v` patch vectors, zero-padding partial
/// patches at the temporal and spatial edges. Within a patch values are
/// ordered `(dt, dy, dx, c)`.
pub fn patchify(clip: &VideoClip, cfg: &BackboneConfig) -> Result<Vec<f32>> {
    if clip.dims() != (cfg.frames, cfg.height, cfg.width) {
        return Err(Error::Contract(format!(
            "clip {} has shape {:?}, model expects {:?}",
            clip.id,
            clip.dims(),
            (cfg.frames, cfg.height, cfg.width)
        )));
    }
    let (tau, p) = (cfg.tau, cfg.patch);
    let pd = cfg.patch_dim();
    let mut out = vec![0f32; cfg.num_patches() * pd];
    for tv in 0..cfg.t_v() {
        for gy in 0..cfg.grid_h() {
            for gx in 0..cfg.grid_w() {
                let token = (tv * cfg.grid_h() + gy) * cfg.grid_w() + gx;
                let base = token * pd;
                for dt in 0..tau {
                    let t = tv * tau + dt;
                    if t >= cfg.frames {
                        continue;
                    }
                    for dy in 0..p {
                        let h = gy * p + dy;
                        if h >= cfg.height {
                            continue;
                        }
                        for dx in 0..p {
                            let w = gx * p + dx;
                            if w >= cfg.width {
                                continue;
                            }
                            let off = base + ((dt * p + dy) * p + dx) * 3;
                            for c in 0..3 {
                                out[off + c] = clip.pixel(t, h, w, c);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Patchifies a batch into a `(B, T_v * S_v, patch_dim)` tensor.
pub fn patch_batch(clips: &[&VideoClip], cfg: &BackboneConfig, dtype: DType) -> Result<Tensor> {
    let mut data = Vec::with_capacity(clips.len() * cfg.num_patches() * cfg.patch_dim());
    for clip in clips {
        data.extend(patchify(clip, cfg)?);
    }
    let t = Tensor::from_vec(data, (clips.len(), cfg.num_patches(), cfg.patch_dim()), &Device::Cpu)?;
    Ok(t.to_dtype(dtype)?)
}

/// Token sequence `z_l` for a batch: `(B, prefix + T_v * S_v, d)`.
#[derive(Debug, Clone)]
pub struct TokenTensor {
    pub tokens: Tensor,
    pub layer: usize,
    /// Rows before the first patch token (class token plus extra tokens).
    pub prefix: usize,
}

impl TokenTensor {
    pub fn class_token(&self) -> Result<Tensor> {
        Ok(self.tokens.narrow(1, 0, 1)?.squeeze(1)?)
    }

    /// Prefix row `i` as `(B, d)`.
    pub fn prefix_token(&self, i: usize) -> Result<Tensor> {
        if i >= self.prefix {
            return Err(Error::Contract(format!("no prefix token {i}")));
        }
        Ok(self.tokens.narrow(1, i, 1)?.squeeze(1)?)
    }

    /// Patch tokens only, `(B, T_v * S_v, d)`.
    pub fn patch_tokens(&self) -> Result<Tensor> {
        let n = self.tokens.dim(1)?;
        Ok(self.tokens.narrow(1, self.prefix, n - self.prefix)?)
    }
}

#[derive(Debug, Clone)]
pub struct BackboneOutput {
    pub logits: Tensor,
    pub taps: BTreeMap<usize, TokenTensor>,
    /// `z_L`, always returned for callers that read the final tokens.
    pub last: TokenTensor,
}

#[derive(Debug, Clone)]
pub struct Attention {
    qkv: Dense,
    proj: Dense,
    heads: usize,
}

impl Attention {
    pub fn new(mut scope: Scope, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            qkv: Dense::new(scope.pp("qkv"), dim, 3 * dim)?,
            proj: Dense::new(scope.pp("proj"), dim, dim)?,
            heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let (b, n, d) = x.dims3()?;
        let hd = d / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        Ok((q, k, v))
    }

    /// Attention distributions `(B, heads, n, n)`; each row sums to one.
    pub fn weights(&self, x: &Tensor) -> Result<Tensor> {
        let (q, k, _) = self.split_heads(x)?;
        self.scores(&q, &k)
    }

    fn scores(&self, q: &Tensor, k: &Tensor) -> Result<Tensor> {
        let hd = q.dim(D::Minus1)?;
        let logits = (q.matmul(&k.t()?)? * (1.0 / (hd as f64).sqrt()))?;
        Ok(candle_nn::ops::softmax(&logits, D::Minus1)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let (q, k, v) = self.split_heads(x)?;
        let attn = self.scores(&q, &k)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, n, d))?;
        self.proj.forward(&out)
    }

    /// MACs for `batches` independent sequences of length `n`.
    pub fn macs(&self, batches: usize, n: usize) -> u64 {
        let d = self.proj.d_in();
        let per_seq = self.qkv.macs(n) + 2 * (n * n * d) as u64 + self.proj.macs(n);
        batches as u64 * per_seq
    }
}

#[derive(Debug, Clone)]
enum Mixer {
    Divided {
        norm_t: LayerNorm,
        attn_t: Attention,
        norm_s: LayerNorm,
        attn_s: Attention,
    },
    Joint {
        norm: LayerNorm,
        attn: Attention,
    },
}

#[derive(Debug, Clone)]
pub struct Block {
    mixer: Mixer,
    norm_mlp: LayerNorm,
    mlp: Mlp,
}

/// Token layout facts a block needs to regroup rows.
#[derive(Debug, Clone, Copy)]
pub struct Layout {
    pub prefix: usize,
    pub t_v: usize,
    pub s_v: usize,
}

impl Block {
    pub fn new(mut scope: Scope, cfg: &BackboneConfig) -> Result<Self> {
        let d = cfg.dim;
        let mixer = match cfg.attention {
            AttentionKind::Divided => Mixer::Divided {
                norm_t: LayerNorm::new(scope.pp("norm_t"), d)?,
                attn_t: Attention::new(scope.pp("attn_t"), d, cfg.heads)?,
                norm_s: LayerNorm::new(scope.pp("norm_s"), d)?,
                attn_s: Attention::new(scope.pp("attn_s"), d, cfg.heads)?,
            },
            AttentionKind::Joint => Mixer::Joint {
                norm: LayerNorm::new(scope.pp("norm"), d)?,
                attn: Attention::new(scope.pp("attn"), d, cfg.heads)?,
            },
        };
        Ok(Self {
            mixer,
            norm_mlp: LayerNorm::new(scope.pp("norm_mlp"), d)?,
            mlp: Mlp::new(scope.pp("mlp"), d, d * cfg.mlp_ratio, d)?,
        })
    }

    pub fn forward(&self, x: &Tensor, layout: Layout) -> Result<Tensor> {
        let x = match &self.mixer {
            Mixer::Joint { norm, attn } => (x + attn.forward(&norm.forward(x)?)?)?,
            Mixer::Divided {
                norm_t,
                attn_t,
                norm_s,
                attn_s,
            } => divided_mix(x, layout, norm_t, attn_t, norm_s, attn_s)?,
        };
        Ok((&x + self.mlp.forward(&self.norm_mlp.forward(&x)?)?)?)
    }

    pub fn macs(&self, layout: Layout) -> u64 {
        let Layout { prefix, t_v, s_v } = layout;
        let rows = prefix + t_v * s_v;
        let mix = match &self.mixer {
            Mixer::Joint { attn, .. } => attn.macs(1, rows),
            Mixer::Divided { attn_t, attn_s, .. } => {
                attn_t.macs(s_v, t_v) + attn_s.macs(t_v, prefix + s_v)
            }
        };
        mix + self.mlp.macs(rows)
    }
}

fn divided_mix(
    x: &Tensor,
    Layout { prefix, t_v, s_v }: Layout,
    norm_t: &LayerNorm,
    attn_t: &Attention,
    norm_s: &LayerNorm,
    attn_s: &Attention,
) -> Result<Tensor> {
    let (b, _, d) = x.dims3()?;
    let pre = x.narrow(1, 0, prefix)?;
    let patches = x.narrow(1, prefix, t_v * s_v)?;

    // temporal: each spatial location attends over its T_v tokens
    let by_loc = patches
        .reshape((b, t_v, s_v, d))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b * s_v, t_v, d))?;
    let res_t = attn_t
        .forward(&norm_t.forward(&by_loc)?)?
        .reshape((b, s_v, t_v, d))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b, t_v * s_v, d))?;
    let patches = (patches + res_t)?;

    // spatial: prefix tokens are shared by every frame and averaged afterwards
    let frames = patches.reshape((b * t_v, s_v, d))?;
    let pre_rep = pre
        .unsqueeze(1)?
        .broadcast_as((b, t_v, prefix, d))?
        .contiguous()?
        .reshape((b * t_v, prefix, d))?;
    let seq = Tensor::cat(&[&pre_rep, &frames], 1)?;
    let res_s = attn_s.forward(&norm_s.forward(&seq)?)?;
    let pre_out = res_s
        .narrow(1, 0, prefix)?
        .reshape((b, t_v, prefix, d))?
        .mean(1)?;
    let patch_out = res_s.narrow(1, prefix, s_v)?.reshape((b, t_v * s_v, d))?;
    Ok(Tensor::cat(&[(pre + pre_out)?, (patches + patch_out)?], 1)?)
}

#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    patch_embed: Dense,
    cls_token: Var,
    pos_embed: Var,
    blocks: Vec<Block>,
    norm: Option<LayerNorm>,
    head: Dense,
}

impl Backbone {
    pub fn new(mut scope: Scope, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(scope.pp("blocks").pp(i), cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed: Dense::new(scope.pp("patch_embed"), cfg.patch_dim(), d)?,
            cls_token: scope.trunc_normal("cls_token", &[1, 1, d])?,
            pos_embed: scope.zeros("pos_embed", &[1, cfg.num_tokens(), d])?,
            blocks,
            norm: if cfg.final_norm {
                Some(LayerNorm::new(scope.pp("norm"), d)?)
            } else {
                None
            },
            head: Dense::new(scope.pp("head"), d, cfg.num_classes)?,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn head(&self) -> &Dense {
        &self.head
    }

    /// Patch embedding, positional embedding and class token: `z_0`.
    /// `extra` tokens (each `(1, 1, d)`) are inserted right after the class token.
    pub fn embed(&self, patches: &Tensor, extra: &[&Tensor]) -> Result<TokenTensor> {
        let (b, n, _) = patches.dims3()?;
        if n != self.cfg.num_patches() {
            return Err(Error::Contract(format!(
                "expected {} patches, got {n}",
                self.cfg.num_patches()
            )));
        }
        let d = self.cfg.dim;
        let pos = self.pos_embed.as_tensor();
        let x = self.patch_embed.forward(patches)?.broadcast_add(&pos.narrow(1, 1, n)?)?;
        let cls = (self.cls_token.as_tensor() + pos.narrow(1, 0, 1)?)?.broadcast_as((b, 1, d))?;
        let mut parts = vec![cls];
        for e in extra {
            parts.push(e.broadcast_as((b, 1, d))?);
        }
        parts.push(x);
        Ok(TokenTensor {
            tokens: Tensor::cat(&parts, 1)?,
            layer: 0,
            prefix: 1 + extra.len(),
        })
    }

    /// Patchifies and embeds a batch of clips.
    pub fn tokenize(&self, clips: &[&VideoClip]) -> Result<TokenTensor> {
        let patches = patch_batch(clips, &self.cfg, self.pos_embed.dtype())?;
        self.embed(&patches, &[])
    }

    pub fn layout(&self, prefix: usize) -> Layout {
        Layout {
            prefix,
            t_v: self.cfg.t_v(),
            s_v: self.cfg.s_v(),
        }
    }

    /// Runs all blocks from `z_0`, recording `z_l` for each requested layer.
    pub fn run_blocks(&self, z0: TokenTensor, taps: &[usize]) -> Result<(TokenTensor, BTreeMap<usize, TokenTensor>)> {
        self.cfg.check_layers(taps)?;
        let layout = self.layout(z0.prefix);
        let mut x = z0.tokens;
        let mut recorded = BTreeMap::new();
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(&x, layout)?;
            let layer = i + 1;
            if taps.contains(&layer) {
                recorded.insert(
                    layer,
                    TokenTensor {
                        tokens: x.clone(),
                        layer,
                        prefix: z0.prefix,
                    },
                );
            }
        }
        let last = TokenTensor {
            tokens: x,
            layer: self.cfg.depth,
            prefix: z0.prefix,
        };
        Ok((last, recorded))
    }

    /// Normalised final token row `i` (the class token for `i = 0`).
    pub fn pooled_token(&self, last: &TokenTensor, i: usize) -> Result<Tensor> {
        let tok = last.prefix_token(i)?;
        match &self.norm {
            Some(n) => n.forward(&tok),
            None => Ok(tok),
        }
    }

    pub fn forward_with_taps(&self, patches: &Tensor, taps: &[usize], extra: &[&Tensor]) -> Result<BackboneOutput> {
        let z0 = self.embed(patches, extra)?;
        let (last, taps) = self.run_blocks(z0, taps)?;
        let logits = self.head.forward(&self.pooled_token(&last, 0)?)?;
        Ok(BackboneOutput { logits, taps, last })
    }

    pub fn logits(&self, patches: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_taps(patches, &[], &[])?.logits)
    }

    pub fn attention_weights(&self, patches: &Tensor, layer: usize) -> Result<Vec<Tensor>> {
        self.cfg.check_layers(&[layer])?;
        let z0 = self.embed(patches, &[])?;
        let layout = self.layout(1);
        let mut x = z0.tokens;
        for block in &self.blocks[..layer - 1] {
            x = block.forward(&x, layout)?;
        }
        let (b, _, d) = x.dims3()?;
        let Layout { prefix, t_v, s_v } = layout;
        Ok(match &self.blocks[layer - 1].mixer {
            Mixer::Joint { norm, attn } => vec![attn.weights(&norm.forward(&x)?)?],
            Mixer::Divided { norm_t, attn_t, norm_s, attn_s } => {
                let patches = x.narrow(1, prefix, t_v * s_v)?;
                let by_loc = patches
                    .reshape((b, t_v, s_v, d))?
                    .transpose(1, 2)?
                    .contiguous()?
                    .reshape((b * s_v, t_v, d))?;
                let frames = patches.reshape((b * t_v, s_v, d))?;
                let pre = x
                    .narrow(1, 0, prefix)?
                    .unsqueeze(1)?
                    .broadcast_as((b, t_v, prefix, d))?
                    .contiguous()?
                    .reshape((b * t_v, prefix, d))?;
                let seq = Tensor::cat(&[&pre, &frames], 1)?;
                vec![
                    attn_t.weights(&norm_t.forward(&by_loc)?)?,
                    attn_s.weights(&norm_s.forward(&seq)?)?,
                ]
            }
        })
    }

    /// Matmul multiply-accumulates for one clip through the inference path.
    pub fn macs(&self) -> u64 {
        self.macs_with_prefix(1)
    }

    pub fn macs_with_prefix(&self, prefix: usize) -> u64 {
        let layout = self.layout(prefix);
        self.patch_embed.macs(self.cfg.num_patches())
            + self.blocks.iter().map(|b| b.macs(layout)).sum::<u64>()
            + self.head.macs(1)
    }
}

/// Mean cross-entropy of `logits` `(B, C)` against integer labels.
pub fn loss_cls(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, c) = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::Contract(format!("{b} logit rows, {} labels", labels.len())));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Contract(format!("label {l} not below class count {c}")));
    }
    ensure_finite(logits, "classification logits")?;
    let log_p = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let idx = Tensor::from_vec(
        labels.iter().map(|&l| l as u32).collect::<Vec<_>>(),
        (b, 1),
        logits.device(),
    )?;
    Ok(log_p.gather(&idx, 1)?.neg()?.mean_all()?)
}
