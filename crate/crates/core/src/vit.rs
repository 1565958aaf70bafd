//! Patch embedding, pre-norm transformer encoder blocks and the linear
//! classification head.
//!
//! Batches are processed item by item on a shared [`Tape`](crate::autodiff::Tape):
//! after patch selection different images keep different patches, so a
//! token sequence is a list of per-item `[T×D]` matrices rather than one
//! dense `[B×T×D]` array.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::model::{BlockLayout, Pass};
use crate::tensor::{Element, Tensor};

/// Pixel standardization applied when images are cut into patches:
/// `(x - PIXEL_MEAN) / PIXEL_STD` for every channel.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.5;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_base_blocks: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig::desk()
    }
}

impl ViTConfig {
    /// 32px single-channel images cut into a 4×4 grid of 8px patches.
    pub fn desk() -> Self {
        ViTConfig {
            image_size: 32,
            patch_size: 8,
            channels: 1,
            embed_dim: 64,
            num_heads: 4,
            num_base_blocks: 4,
            mlp_ratio: 2,
            num_classes: 4,
        }
    }

    /// 224px RGB images, 16px patches (196 patch tokens), 8 base blocks.
    pub fn full() -> Self {
        ViTConfig {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            embed_dim: 768,
            num_heads: 12,
            num_base_blocks: 8,
            mlp_ratio: 4,
            num_classes: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    /// Patches per image side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }
}

/// Class token plus the surviving patch tokens of every batch item.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    /// One `[T×D]` node per item; row 0 is the class token.
    pub items: Vec<Var>,
    /// Original patch index of each row 1..T, ascending.
    pub patch_ids: Vec<Vec<usize>>,
}

impl TokenSequence {
    pub fn batch(&self) -> usize {
        self.items.len()
    }

    /// Patch tokens per item (excludes the class token).
    pub fn num_patches(&self) -> usize {
        self.patch_ids.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Dense `[B×T×D]` copy of the token values.
    pub fn tokens<E: Element>(&self, tape: &crate::autodiff::Tape<E>) -> Result<Tensor<E>> {
        let first = tape.value(*self.items.first().ok_or_else(|| Error::invalid("tokens", "empty batch"))?);
        let (t, d) = first.matrix_dims()?;
        let mut data = Vec::with_capacity(self.items.len() * t * d);
        for &v in &self.items {
            data.extend_from_slice(tape.value(v).data());
        }
        Tensor::new(&[self.items.len(), t, d], data)
    }
}

/// Attention of one block over a batch, both `[B×H×T×T]`.
#[derive(Clone, Debug)]
pub struct AttentionMaps<E: Element = f32> {
    /// Scaled `QKᵀ` logits before the softmax.
    pub scores: Tensor<E>,
    /// Row-stochastic attention weights.
    pub probs: Tensor<E>,
}

/// Cuts `[C×S×S]` into raster-ordered, standardized `[N × C·P·P]` patch rows.
pub fn patchify<E: Element>(image: &[E], cfg: &ViTConfig) -> Result<Tensor<E>> {
    let (c, s, p, g) = (cfg.channels, cfg.image_size, cfg.patch_size, cfg.grid());
    if image.len() != c * s * s {
        return Err(Error::shape(
            "patchify",
            format!("image has {} values, expected {c}×{s}×{s}", image.len()),
        ));
    }
    let mut out = Vec::with_capacity(image.len());
    for pr in 0..g {
        for pc in 0..g {
            for ch in 0..c {
                for y in 0..p {
                    let row = ch * s * s + (pr * p + y) * s + pc * p;
                    out.extend(
                        image[row..row + p]
                            .iter()
                            .map(|v| E::from_wide((v.to_wide() - PIXEL_MEAN) / PIXEL_STD)),
                    );
                }
            }
        }
    }
    Tensor::new(&[g * g, cfg.patch_dim()], out)
}

impl<E: Element> Pass<'_, E> {
    /// Embeds a `[B×C×S×S]` batch: linear patch projection, prepended class
    /// token, learned position embeddings.
    pub fn patch_embed(&mut self, images: &Tensor<E>) -> Result<TokenSequence> {
        let cfg = &self.model.config.vit;
        let dims = images.dims();
        if dims.len() != 4 || dims[1] != cfg.channels || dims[2] != cfg.image_size || dims[3] != cfg.image_size {
            return Err(Error::shape(
                "patch_embed",
                format!(
                    "images {} do not match [B×{}×{}×{}]",
                    images.shape(),
                    cfg.channels,
                    cfg.image_size,
                    cfg.image_size
                ),
            ));
        }
        let per_image = cfg.channels * cfg.image_size * cfg.image_size;
        let n = cfg.num_patches();
        let layout = self.model.layout.embed;
        let (w, b, cls, pos) = (
            self.var(layout.proj.weight),
            self.var(layout.proj.bias),
            self.var(layout.cls),
            self.var(layout.pos),
        );
        let mut items = Vec::with_capacity(dims[0]);
        for img in images.data().chunks(per_image) {
            let patches = patchify(img, &self.model.config.vit)?;
            let patches = self.tape.constant(patches);
            let proj = self.tape.matmul(patches, w)?;
            let proj = self.tape.add_row(proj, b)?;
            let seq = self.tape.concat_rows(&[cls, proj])?;
            items.push(self.tape.add(seq, pos)?);
        }
        Ok(TokenSequence {
            patch_ids: vec![(0..n).collect(); items.len()],
            items,
        })
    }

    /// Pre-norm multi-head self-attention and GELU MLP, each with a residual.
    pub fn encoder_block(&mut self, block: &BlockLayout, seq: &TokenSequence) -> Result<(TokenSequence, AttentionMaps<E>)> {
        let cfg = &self.model.config.vit;
        let (d, heads, dh) = (cfg.embed_dim, cfg.num_heads, cfg.head_dim());
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let p = self.bind_block(block);
        let t = seq.len();
        let mut scores = Vec::with_capacity(seq.batch() * heads * t * t);
        let mut probs = Vec::with_capacity(seq.batch() * heads * t * t);
        let mut items = Vec::with_capacity(seq.batch());
        for &x in &seq.items {
            let rows = self.tape.value(x).matrix_dims()?.0;
            if rows != t {
                return Err(Error::shape("encoder_block", format!("item has {rows} tokens, sequence says {t}")));
            }
            let h = self.tape.layer_norm(x, p.norm1_gain, p.norm1_bias, LAYER_NORM_EPS)?;
            let qkv = self.tape.matmul(h, p.qkv_w)?;
            let qkv = self.tape.add_row(qkv, p.qkv_b)?;
            let mut outs = Vec::with_capacity(heads);
            for head in 0..heads {
                let q = self.tape.slice_cols(qkv, head * dh, dh)?;
                let k = self.tape.slice_cols(qkv, d + head * dh, dh)?;
                let v = self.tape.slice_cols(qkv, 2 * d + head * dh, dh)?;
                let kt = self.tape.transpose(k)?;
                let s = self.tape.matmul(q, kt)?;
                let s = self.tape.scale(s, inv_sqrt);
                let a = self.tape.softmax_rows(s)?;
                scores.extend_from_slice(self.tape.value(s).data());
                probs.extend_from_slice(self.tape.value(a).data());
                outs.push(self.tape.matmul(a, v)?);
            }
            let cat = self.tape.concat_cols(&outs)?;
            let attn = self.tape.matmul(cat, p.proj_w)?;
            let attn = self.tape.add_row(attn, p.proj_b)?;
            let x1 = self.tape.add(x, attn)?;

            let h2 = self.tape.layer_norm(x1, p.norm2_gain, p.norm2_bias, LAYER_NORM_EPS)?;
            let m = self.tape.matmul(h2, p.fc1_w)?;
            let m = self.tape.add_row(m, p.fc1_b)?;
            let m = self.tape.gelu(m);
            let m = self.tape.matmul(m, p.fc2_w)?;
            let m = self.tape.add_row(m, p.fc2_b)?;
            items.push(self.tape.add(x1, m)?);
        }
        let dims = [seq.batch(), heads, t, t];
        let maps = AttentionMaps {
            scores: Tensor::new(&dims, scores)?,
            probs: Tensor::new(&dims, probs)?,
        };
        Ok((
            TokenSequence {
                items,
                patch_ids: seq.patch_ids.clone(),
            },
            maps,
        ))
    }

    /// Linear map of each item's class token to `[B×num_classes]` logits.
    pub fn classify(&mut self, seq: &TokenSequence) -> Result<Var> {
        let head = self.model.layout.head;
        let (w, b) = (self.var(head.weight), self.var(head.bias));
        let cls: Vec<Var> = seq
            .items
            .iter()
            .map(|&x| self.tape.gather_rows(x, &[0]))
            .collect::<Result<_>>()?;
        let cls = self.tape.concat_rows(&cls)?;
        let logits = self.tape.matmul(cls, w)?;
        self.tape.add_row(logits, b)
    }
}
