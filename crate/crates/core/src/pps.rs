//! Progressive patch selection: staged top-k routing of patch tokens, the
//! full staged forward pass, and the compute model.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::gala::{self, GalaOutput, ImportanceDistribution};
use crate::model::{GftState, ModelConfig, Pass};
use crate::tensor::{self, Element, Tensor};
use crate::vit::{TokenSequence, ViTConfig};

/// Guards `floor(k·N)` against ratios like 0.29 whose product lands a hair
/// below an integer.
const FLOOR_SLACK: f64 = 1e-9;

/// Fraction of the ORIGINAL patch count kept after each GALA stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SelectionSchedule {
    keep_ratios: Vec<f64>,
}

impl Default for SelectionSchedule {
    fn default() -> Self {
        SelectionSchedule {
            keep_ratios: vec![0.75, 0.5, 0.25],
        }
    }
}

impl SelectionSchedule {
    pub fn new(keep_ratios: Vec<f64>) -> Result<Self> {
        let s = SelectionSchedule { keep_ratios };
        s.validate()?;
        Ok(s)
    }

    /// Ratios must lie in (0, 1]. A non-monotone schedule is allowed but
    /// logged: later stages can never keep more than earlier ones.
    pub fn validate(&self) -> Result<()> {
        if let Some(k) = self.keep_ratios.iter().find(|k| !(**k > 0.0 && **k <= 1.0)) {
            return Err(Error::Config(format!("keep ratio {k} outside (0, 1]")));
        }
        if self.keep_ratios.windows(2).any(|w| w[1] > w[0]) {
            log::warn!("keep ratios {:?} increase; counts are clamped to the previous stage", self.keep_ratios);
        }
        Ok(())
    }

    pub fn keep_ratios(&self) -> &[f64] {
        &self.keep_ratios
    }

    pub fn len(&self) -> usize {
        self.keep_ratios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep_ratios.is_empty()
    }

    /// Patches kept after each stage out of `n` original patches:
    /// `max(1, floor(k_i·n))`, never more than the stage before.
    pub fn counts(&self, n: usize) -> Vec<usize> {
        let mut current = n;
        self.keep_ratios
            .iter()
            .map(|k| {
                let c = ((k * n as f64 + FLOOR_SLACK).floor() as usize).max(1).min(current);
                current = c;
                c
            })
            .collect()
    }
}

/// Original patch ids kept by one stage, per batch item, ascending.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionMask {
    /// 0-based stage index.
    pub stage: usize,
    pub kept: Vec<Vec<usize>>,
}

/// How each stage decides which patches survive.
#[derive(Clone, Debug, Default)]
pub enum Routing {
    /// Top-k of the stage's importance distribution.
    #[default]
    Importance,
    /// Replay previously recorded masks. Used where the selection must not
    /// move, e.g. finite-difference probes of a pruned network.
    Fixed(Vec<SelectionMask>),
}

/// Per-patch gradient importance of `[B×H×T×T]` attention logits. This is
/// the GALA scorer itself, so the selection and importance paths share one
/// implementation.
pub fn importance_for_selection<E: Element>(attention: &Tensor<E>) -> Result<Tensor<E>> {
    gala::attention_gradient_importance(attention)
}

/// Keeps the class token and the `count` patches of highest probability in
/// every item (ties toward the lower original id). Token rows are copied
/// unchanged and stay in ascending id order.
pub fn select<E: Element>(
    pass: &mut Pass<'_, E>,
    seq: &TokenSequence,
    dist: &ImportanceDistribution<E>,
    count: usize,
    stage: usize,
) -> Result<(TokenSequence, SelectionMask)> {
    let (b, n) = dist.probs.matrix_dims()?;
    if b != seq.batch() || n != seq.num_patches() {
        return Err(Error::shape(
            "select",
            format!("distribution [{b}×{n}] does not match {} items of {} patches", seq.batch(), seq.num_patches()),
        ));
    }
    if n == 0 {
        return Err(Error::invalid("select", "no patches left to select from"));
    }
    let local = (0..b)
        .map(|i| tensor::topk_slice(dist.probs.row(i), count))
        .collect::<Result<Vec<_>>>()?;
    gather(pass, seq, &local, stage)
}

/// Applies a recorded mask: `kept` must be a subset of each item's ids.
pub fn apply_mask<E: Element>(pass: &mut Pass<'_, E>, seq: &TokenSequence, mask: &SelectionMask) -> Result<TokenSequence> {
    if mask.kept.len() != seq.batch() {
        return Err(Error::shape("apply_mask", "mask and sequence batch sizes differ"));
    }
    let local = seq
        .patch_ids
        .iter()
        .zip(&mask.kept)
        .map(|(ids, kept)| {
            kept.iter()
                .map(|id| {
                    ids.binary_search(id)
                        .map_err(|_| Error::invalid("apply_mask", format!("patch {id} is not present")))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(gather(pass, seq, &local, mask.stage)?.0)
}

fn gather<E: Element>(
    pass: &mut Pass<'_, E>,
    seq: &TokenSequence,
    local: &[Vec<usize>],
    stage: usize,
) -> Result<(TokenSequence, SelectionMask)> {
    let mut items = Vec::with_capacity(seq.batch());
    let mut kept = Vec::with_capacity(seq.batch());
    for ((&x, ids), rows) in seq.items.iter().zip(&seq.patch_ids).zip(local) {
        let gather_rows: Vec<usize> = std::iter::once(0).chain(rows.iter().map(|r| r + 1)).collect();
        items.push(pass.tape.gather_rows(x, &gather_rows)?);
        kept.push(rows.iter().map(|&r| ids[r]).collect::<Vec<_>>());
    }
    Ok((
        TokenSequence {
            items,
            patch_ids: kept.clone(),
        },
        SelectionMask { stage, kept },
    ))
}

/// One GALA stage: the block's outputs and what survived its selection.
#[derive(Clone, Debug)]
pub struct StageTrace<E: Element = f32> {
    pub gala: GalaOutput<E>,
    pub mask: SelectionMask,
    pub selected: TokenSequence,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<E: Element = f32> {
    /// `[B×num_classes]`
    pub logits: Var,
    /// Output of the last base block, the input of the first GALA stage.
    pub base: TokenSequence,
    pub stages: Vec<StageTrace<E>>,
}

impl<E: Element> ForwardOutput<E> {
    pub fn masks(&self) -> Vec<SelectionMask> {
        self.stages.iter().map(|s| s.mask.clone()).collect()
    }
}

impl<E: Element> Pass<'_, E> {
    /// Embedding and the unpruned base blocks.
    pub fn forward_base(&mut self, images: &Tensor<E>) -> Result<TokenSequence> {
        let mut seq = self.patch_embed(images)?;
        let model = self.model;
        for block in &model.layout.blocks {
            seq = self.encoder_block(block, &seq)?.0;
        }
        Ok(seq)
    }

    /// Full staged forward: base blocks, then every GALA block followed by
    /// selection, then the classification head.
    pub fn gft_forward(
        &mut self,
        images: &Tensor<E>,
        state: &mut GftState,
        training: bool,
        routing: &Routing,
    ) -> Result<ForwardOutput<E>> {
        let base = self.forward_base(images)?;
        let (logits, stages) = self.forward_stages(0, &base, state, training, routing)?;
        Ok(ForwardOutput { logits, base, stages })
    }

    /// Runs GALA stages `first..` on `seq` and classifies the result.
    pub fn forward_stages(
        &mut self,
        first: usize,
        seq: &TokenSequence,
        state: &mut GftState,
        training: bool,
        routing: &Routing,
    ) -> Result<(Var, Vec<StageTrace<E>>)> {
        let model = self.model;
        let cfg = &model.config;
        let stages = cfg.num_stages();
        if state.stages.len() != stages {
            return Err(Error::invalid(
                "gft_forward",
                format!("state has {} stages, model has {stages}", state.stages.len()),
            ));
        }
        if first > stages {
            return Err(Error::invalid("gft_forward", format!("no stage {first}")));
        }
        let counts = cfg.schedule.counts(cfg.vit.num_patches());
        let mut seq = seq.clone();
        let mut traces = Vec::with_capacity(stages - first);
        for stage in first..stages {
            let out = self.gala_block(stage, &seq, &mut state.stages[stage], training)?;
            let (selected, mask) = match routing {
                Routing::Importance => {
                    let count = counts[stage].min(out.seq.num_patches());
                    select(self, &out.seq, &out.distribution, count, stage)?
                }
                Routing::Fixed(masks) => {
                    let mask = masks
                        .iter()
                        .find(|m| m.stage == stage)
                        .ok_or_else(|| Error::invalid("gft_forward", format!("no fixed mask for stage {stage}")))?
                        .clone();
                    (apply_mask(self, &out.seq, &mask)?, mask)
                }
            };
            seq = selected.clone();
            traces.push(StageTrace {
                gala: out,
                mask,
                selected,
            });
        }
        let logits = self.classify(&seq)?;
        Ok((logits, traces))
    }

    /// The same network with every selection removed: all patches flow
    /// through every GALA block.
    pub fn forward_dense(&mut self, images: &Tensor<E>) -> Result<Var> {
        let mut seq = self.forward_base(images)?;
        let model = self.model;
        for layout in &model.layout.gala {
            seq = self.encoder_block(&layout.block, &seq)?.0;
        }
        self.classify(&seq)
    }
}

/// Multiply-accumulates of one encoder block on `t` tokens: QKV and output
/// projections, attention logits and weighted values, and the two MLP layers.
pub fn block_macs(cfg: &ViTConfig, t: usize) -> u64 {
    let (t, d, m) = (t as u64, cfg.embed_dim as u64, cfg.mlp_dim() as u64);
    t * d * 3 * d + 2 * t * t * d + t * d * d + 2 * t * d * m
}

/// Patch projection per image.
pub fn embedding_macs(cfg: &ViTConfig) -> u64 {
    (cfg.num_patches() * cfg.patch_dim() * cfg.embed_dim) as u64
}

pub fn head_macs(cfg: &ViTConfig) -> u64 {
    (cfg.embed_dim * cfg.num_classes) as u64
}

/// Per-image multiply-accumulates with the given token count (class token
/// included) entering each encoder layer in depth order.
pub fn flops_for_tokens(cfg: &ViTConfig, tokens_per_layer: &[usize]) -> u64 {
    embedding_macs(cfg) + tokens_per_layer.iter().map(|&t| block_macs(cfg, t)).sum::<u64>() + head_macs(cfg)
}

/// Tokens entering each encoder layer under `config`'s schedule. Each GALA
/// block runs on what the previous stage kept.
pub fn tokens_per_layer(config: &ModelConfig) -> Vec<usize> {
    let n = config.vit.num_patches();
    let mut tokens = vec![n + 1; config.vit.num_base_blocks];
    let mut current = n;
    for kept in config.schedule.counts(n) {
        tokens.push(current + 1);
        current = kept;
    }
    tokens
}

/// Baseline and pruned compute of one configuration, per image.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostModel {
    /// Multiply-accumulates with every layer at full length.
    pub c_base: f64,
    /// Share of `c_base` in the layers that run on stage-i-reduced tokens.
    pub alphas: Vec<f64>,
    pub keep_ratios: Vec<f64>,
    /// Exact sum over layers at their actual token counts.
    pub direct: f64,
}

impl CostModel {
    /// `C_base·(1 − Σ α_i(1 − k_i))`. This is linear in token count while
    /// attention is quadratic, so [`CostModel::direct`] is the exact figure.
    pub fn closed_form(&self) -> f64 {
        closed_form_cost(self.c_base, &self.alphas, &self.keep_ratios)
    }

    pub fn direct_ratio(&self) -> f64 {
        self.direct / self.c_base
    }
}

pub fn closed_form_cost(c_base: f64, alphas: &[f64], keep_ratios: &[f64]) -> f64 {
    let saved: f64 = alphas.iter().zip(keep_ratios).map(|(a, k)| a * (1.0 - k)).sum();
    c_base * (1.0 - saved)
}

/// Cost model of `config`. Stage i's selection shrinks GALA block i+1, so
/// `α_i` is that block's full-length share; the last stage's selection only
/// feeds the head, which reads the class token alone, giving it `α = 0`.
pub fn flops_estimate(config: &ModelConfig) -> CostModel {
    let vit = &config.vit;
    let full = vit.num_patches() + 1;
    let layers = vit.num_base_blocks + config.num_stages();
    let c_base = flops_for_tokens(vit, &vec![full; layers]) as f64;
    let direct = flops_for_tokens(vit, &tokens_per_layer(config)) as f64;
    let stages = config.num_stages();
    let alphas = (0..stages)
        .map(|i| {
            if i + 1 < stages {
                block_macs(vit, full) as f64 / c_base
            } else {
                0.0
            }
        })
        .collect();
    CostModel {
        c_base,
        alphas,
        keep_ratios: config.schedule.keep_ratios().to_vec(),
        direct,
    }
}

/// Share of `c_base` saved by the attention products alone, `2·T²·d` per
/// layer. Selection also shrinks every projection, so the true saving is at
/// least this large.
pub fn attention_only_saving(config: &ModelConfig) -> f64 {
    let vit = &config.vit;
    let d = vit.embed_dim as f64;
    let full = (vit.num_patches() + 1) as f64;
    let saved: f64 = tokens_per_layer(config)
        .iter()
        .map(|&t| 2.0 * d * (full * full - (t * t) as f64))
        .sum();
    saved / flops_estimate(config).c_base
}
