//! Attention-gradient patch importance.
//!
//! The pipeline turns one block's attention logits into a per-patch
//! probability distribution:
//!
//! 1. row means of the attention logits (class-token row dropped),
//! 2. three-case finite-difference gradient along the raster patch order,
//! 3. mean absolute gradient over heads,
//! 4. 1-D smoothing with the stage kernel,
//! 5. per-item z-normalization blended with a running average keyed by
//!    original patch id (training only),
//! 6. temperature softmax.
//!
//! Step 1 consumes pre-softmax logits: on softmax rows every mean is exactly
//! `1/T` and the gradient vanishes identically.
//!
//! None of this is differentiated. Importance only decides routing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Pass;
use crate::tensor::{self, Element, Tensor};
use crate::vit::{AttentionMaps, TokenSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GalaConfig {
    /// Odd smoothing kernel length; the kernel starts uniform at `1/K`.
    pub kernel_size: usize,
    pub temperature: f64,
    pub ema_decay: f64,
    pub norm_epsilon: f64,
}

impl Default for GalaConfig {
    fn default() -> Self {
        GalaConfig {
            kernel_size: 3,
            temperature: 1.0,
            ema_decay: 0.9,
            norm_epsilon: 1e-6,
        }
    }
}

impl GalaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel_size must be odd, got {}", self.kernel_size)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay must lie in [0, 1), got {}", self.ema_decay)));
        }
        if !(self.norm_epsilon > 0.0) {
            return Err(Error::Config(format!("norm_epsilon must be positive, got {}", self.norm_epsilon)));
        }
        Ok(())
    }
}

/// Running importance average for one stage, indexed by original patch id.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceState {
    pub ema: Vec<f64>,
    /// Whether `ema[id]` has been initialized.
    pub seen: Vec<bool>,
    pub step_count: u64,
}

impl ImportanceState {
    pub fn new(num_patches: usize) -> Self {
        ImportanceState {
            ema: vec![0.0; num_patches],
            seen: vec![false; num_patches],
            step_count: 0,
        }
    }

    pub fn num_patches(&self) -> usize {
        self.ema.len()
    }
}

/// Row-stochastic importance over the current patches of each item.
#[derive(Clone, Debug)]
pub struct ImportanceDistribution<E: Element = f32> {
    /// `[B×N_cur]`
    pub probs: Tensor<E>,
    pub patch_ids: Vec<Vec<usize>>,
}

/// Plain row means of `[B×H×T×T]` attention, `[B×H×T]`.
pub fn row_means<E: Element>(attention: &Tensor<E>) -> Result<Tensor<E>> {
    if attention.shape().rank() != 4 || attention.dims()[2] != attention.dims()[3] {
        return Err(Error::shape("mean_attention", format!("expected [B×H×T×T], got {}", attention.shape())));
    }
    tensor::reduce_mean(attention, 3)
}

/// Mean attention of each patch row over all `T` columns (class column
/// included), class-token row removed: `[B×H×T×T]` → `[B×H×(T−1)]`.
pub fn mean_attention<E: Element>(attention: &Tensor<E>) -> Result<Tensor<E>> {
    let means = row_means(attention)?;
    let d = attention.dims();
    let (b, h, t) = (d[0], d[1], d[2]);
    if t < 2 {
        return Err(Error::invalid("mean_attention", "need at least one patch token besides the class token"));
    }
    let data = means.data().chunks(t).flat_map(|row| row[1..].to_vec()).collect();
    Tensor::new(&[b, h, t - 1], data)
}

/// Forward difference at the first index, central differences inside,
/// backward difference at the last index, along the last axis.
pub fn spatial_gradient<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let n = x.shape().last();
    if n < 2 {
        return Err(Error::invalid("spatial_gradient", format!("need at least 2 positions, got {n}")));
    }
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(n) {
        let r: Vec<f64> = row.iter().map(|v| v.to_wide()).collect();
        out.push(E::from_wide(r[1] - r[0]));
        for i in 1..n - 1 {
            out.push(E::from_wide((r[i + 1] - r[i - 1]) / 2.0));
        }
        out.push(E::from_wide(r[n - 1] - r[n - 2]));
    }
    Tensor::new(x.dims(), out)
}

/// `out[b,i] = (1/H)·Σ_h |g[b,h,i]|`.
pub fn aggregate_heads<E: Element>(g: &Tensor<E>) -> Result<Tensor<E>> {
    let &[b, h, n] = g.dims() else {
        return Err(Error::shape("aggregate_heads", format!("expected [B×H×N], got {}", g.shape())));
    };
    let mut out = Vec::with_capacity(b * n);
    for item in g.data().chunks(h * n) {
        for i in 0..n {
            let s: f64 = (0..h).map(|head| item[head * n + i].to_wide().abs()).sum();
            out.push(E::from_wide(s / h as f64));
        }
    }
    Tensor::new(&[b, n], out)
}

/// Zero-padded 1-D smoothing along the patch axis.
pub fn smooth<E: Element>(scores: &Tensor<E>, kernel: &Tensor<E>) -> Result<Tensor<E>> {
    tensor::conv1d_same(scores, kernel)
}

/// Mean attention → spatial gradient → head aggregation: the unsmoothed
/// per-patch gradient importance of `[B×H×T×T]` attention logits.
pub fn attention_gradient_importance<E: Element>(attention: &Tensor<E>) -> Result<Tensor<E>> {
    aggregate_heads(&spatial_gradient(&mean_attention(attention)?)?)
}

/// Per-item z-normalization `(x − μ)/(σ + ε)` of `[B×N]` scores.
pub fn z_normalize<E: Element>(scores: &Tensor<E>, eps: f64) -> Result<Vec<Vec<f64>>> {
    let (_, n) = scores.matrix_dims()?;
    Ok(scores
        .data()
        .chunks(n)
        .map(|row| {
            let r: Vec<f64> = row.iter().map(|v| v.to_wide()).collect();
            let mean = r.iter().sum::<f64>() / n as f64;
            let std = (r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            r.iter().map(|v| (v - mean) / (std + eps)).collect()
        })
        .collect())
}

/// Normalizes `[B×N_cur]` scores and, in training, folds their batch mean
/// into the running average for each present patch id.
///
/// Training returns `β·ema[id] + (1−β)·normed[b,i]` using the updated
/// average; an id observed for the first time is initialized with its batch
/// mean and returns the normalized score unchanged. Evaluation returns the
/// normalized scores and leaves `state` untouched. Non-finite scores are
/// not rejected: they propagate so that a diverging run surfaces as a
/// non-finite loss.
pub fn ema_update<E: Element>(
    state: &mut ImportanceState,
    scores: &Tensor<E>,
    patch_ids: &[Vec<usize>],
    cfg: &GalaConfig,
    training: bool,
) -> Result<Tensor<E>> {
    let (b, n) = scores.matrix_dims()?;
    if patch_ids.len() != b || patch_ids.iter().any(|ids| ids.len() != n) {
        return Err(Error::shape(
            "ema_update",
            format!("patch ids do not line up with [{b}×{n}] scores"),
        ));
    }
    if let Some(&bad) = patch_ids.iter().flatten().find(|&&id| id >= state.num_patches()) {
        return Err(Error::invalid(
            "ema_update",
            format!("patch id {bad} outside 0..{}", state.num_patches()),
        ));
    }
    let normed = z_normalize(scores, cfg.norm_epsilon)?;
    if !training {
        return Tensor::new(&[b, n], normed.into_iter().flatten().map(E::from_wide).collect());
    }

    let total = state.num_patches();
    let mut sums = vec![0.0; total];
    let mut counts = vec![0usize; total];
    for (row, ids) in normed.iter().zip(patch_ids) {
        for (v, &id) in row.iter().zip(ids) {
            sums[id] += v;
            counts[id] += 1;
        }
    }
    let beta = cfg.ema_decay;
    let mut fresh = vec![false; total];
    for id in 0..total {
        if counts[id] == 0 {
            continue;
        }
        let m = sums[id] / counts[id] as f64;
        if state.seen[id] {
            state.ema[id] = beta * state.ema[id] + (1.0 - beta) * m;
        } else {
            state.ema[id] = m;
            state.seen[id] = true;
            fresh[id] = true;
        }
    }
    state.step_count += 1;

    let mut out = Vec::with_capacity(b * n);
    for (row, ids) in normed.iter().zip(patch_ids) {
        for (v, &id) in row.iter().zip(ids) {
            let blended = if fresh[id] { *v } else { beta * state.ema[id] + (1.0 - beta) * v };
            out.push(E::from_wide(blended));
        }
    }
    Tensor::new(&[b, n], out)
}

/// Row-wise `softmax(scores / τ)`.
pub fn importance_distribution<E: Element>(
    scores: &Tensor<E>,
    temperature: f64,
    patch_ids: &[Vec<usize>],
) -> Result<ImportanceDistribution<E>> {
    let (b, _) = scores.matrix_dims()?;
    if patch_ids.len() != b {
        return Err(Error::shape("importance_distribution", "patch ids do not match batch"));
    }
    Ok(ImportanceDistribution {
        probs: tensor::softmax(scores, 1, temperature)?,
        patch_ids: patch_ids.to_vec(),
    })
}

/// Everything a GALA stage produces, kept for analysis and heatmaps.
#[derive(Clone, Debug)]
pub struct GalaOutput<E: Element = f32> {
    pub seq: TokenSequence,
    pub attention: AttentionMaps<E>,
    /// Smoothed gradient importance, before normalization, `[B×N_cur]`.
    pub importance: Tensor<E>,
    /// Scores entering the softmax, `[B×N_cur]`.
    pub scores: Tensor<E>,
    pub distribution: ImportanceDistribution<E>,
}

impl<E: Element> Pass<'_, E> {
    /// Runs GALA stage `stage` (0-based): an encoder block, then the
    /// importance pipeline on that block's attention logits.
    pub fn gala_block(
        &mut self,
        stage: usize,
        seq: &TokenSequence,
        state: &mut ImportanceState,
        training: bool,
    ) -> Result<GalaOutput<E>> {
        let layout = self
            .model
            .layout
            .gala
            .get(stage)
            .ok_or_else(|| Error::invalid("gala_block", format!("no GALA stage {stage}")))?
            .clone();
        let (seq, attention) = self.encoder_block(&layout.block, seq)?;
        let cfg = &self.model.config.gala;
        let kernel = &self.model.params.by_id(layout.kernel).value;
        let importance = smooth(&attention_gradient_importance(&attention.scores)?, kernel)?;
        let scores = ema_update(state, &importance, &seq.patch_ids, cfg, training)?;
        let distribution = importance_distribution(&scores, cfg.temperature, &seq.patch_ids)?;
        Ok(GalaOutput {
            seq,
            attention,
            importance,
            scores,
            distribution,
        })
    }
}
