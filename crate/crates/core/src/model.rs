//! Parameter storage, the network layout and the per-step [`Pass`].

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::gala::{GalaConfig, ImportanceState};
use crate::pps::SelectionSchedule;
use crate::tensor::{Element, Tensor};
use crate::vit::ViTConfig;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vit: ViTConfig,
    pub gala: GalaConfig,
    pub schedule: SelectionSchedule,
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            vit: ViTConfig::desk(),
            gala: GalaConfig::default(),
            schedule: SelectionSchedule::default(),
        }
    }

    pub fn full() -> Self {
        ModelConfig {
            vit: ViTConfig::full(),
            gala: GalaConfig::default(),
            schedule: SelectionSchedule::default(),
        }
    }

    pub fn num_stages(&self) -> usize {
        self.schedule.len()
    }

    /// Checks every component plus the cross-cutting constraint that each
    /// GALA stage sees enough patches for the gradient stencil and kernel.
    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.gala.validate()?;
        self.schedule.validate()?;
        let n = self.vit.num_patches();
        let mut current = n;
        for (stage, kept) in self.schedule.counts(n).into_iter().enumerate() {
            let need = self.gala.kernel_size.max(2);
            if current < need {
                return Err(Error::Config(format!(
                    "GALA stage {} would see {current} patches; needs at least {need}",
                    stage + 1
                )));
            }
            current = kept.min(current);
        }
        Ok(())
    }
}

/// Coarse grouping of parameters by network depth, used for gradient traces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LayerGroup {
    Embedding,
    /// 1-based base encoder block.
    Block(usize),
    /// 1-based GALA stage.
    Gala(usize),
    Head,
}

impl fmt::Display for LayerGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerGroup::Embedding => write!(f, "embedding"),
            LayerGroup::Block(i) => write!(f, "block{i}"),
            LayerGroup::Gala(i) => write!(f, "gala{i}"),
            LayerGroup::Head => write!(f, "head"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<E: Element = f32> {
    pub name: String,
    pub group: LayerGroup,
    pub value: Tensor<E>,
    /// Frozen parameters (the GALA smoothing kernel) never receive gradients.
    pub trainable: bool,
}

/// Ordered, uniquely named parameter list.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<E: Element = f32> {
    params: Vec<Param<E>>,
}

impl<E: Element> ParamStore<E> {
    fn add(&mut self, name: String, group: LayerGroup, value: Tensor<E>, trainable: bool) -> ParamId {
        debug_assert!(self.get(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            group,
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<E>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<E>> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Param<E>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<E>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn by_id(&self, id: ParamId) -> &Param<E> {
        &self.params[id.0]
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Distinct layer groups in depth order.
    pub fn groups(&self) -> Vec<LayerGroup> {
        let mut groups: Vec<LayerGroup> = self.params.iter().map(|p| p.group).collect();
        groups.sort();
        groups.dedup();
        groups
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct NormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct EmbedLayout {
    pub proj: LinearIds,
    pub cls: ParamId,
    pub pos: ParamId,
}

#[derive(Clone, Debug)]
pub struct BlockLayout {
    pub norm1: NormIds,
    pub qkv: LinearIds,
    pub proj: LinearIds,
    pub norm2: NormIds,
    pub fc1: LinearIds,
    pub fc2: LinearIds,
}

#[derive(Clone, Debug)]
pub struct GalaLayout {
    pub block: BlockLayout,
    pub kernel: ParamId,
}

#[derive(Clone, Debug)]
pub struct ModelLayout {
    pub embed: EmbedLayout,
    pub blocks: Vec<BlockLayout>,
    pub gala: Vec<GalaLayout>,
    pub head: LinearIds,
}

/// Builds parameters in a fixed order; the same order is used by checkpoints.
struct Builder<'a, E: Element> {
    store: ParamStore<E>,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<E: Element> Builder<'_, E> {
    fn trunc_normal(&mut self, dims: &[usize]) -> Result<Tensor<E>> {
        let Some(rng) = self.rng.as_deref_mut() else {
            return Tensor::zeros(dims);
        };
        let normal = Normal::new(0.0, INIT_STD).expect("positive std");
        Tensor::from_fn(dims, |_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * INIT_STD {
                break E::from_wide(v);
            }
        })
    }

    fn random(&mut self, name: String, group: LayerGroup, dims: &[usize]) -> Result<ParamId> {
        let t = self.trunc_normal(dims)?;
        Ok(self.store.add(name, group, t, true))
    }

    fn filled(&mut self, name: String, group: LayerGroup, dims: &[usize], v: f64) -> Result<ParamId> {
        let t = Tensor::full(dims, E::from_wide(v))?;
        Ok(self.store.add(name, group, t, true))
    }

    fn linear(&mut self, prefix: &str, group: LayerGroup, fan_in: usize, fan_out: usize) -> Result<LinearIds> {
        Ok(LinearIds {
            weight: self.random(format!("{prefix}.weight"), group, &[fan_in, fan_out])?,
            bias: self.filled(format!("{prefix}.bias"), group, &[fan_out], 0.0)?,
        })
    }

    fn norm(&mut self, prefix: &str, group: LayerGroup, d: usize) -> Result<NormIds> {
        Ok(NormIds {
            gain: self.filled(format!("{prefix}.gain"), group, &[d], 1.0)?,
            bias: self.filled(format!("{prefix}.bias"), group, &[d], 0.0)?,
        })
    }

    fn block(&mut self, prefix: &str, group: LayerGroup, cfg: &ViTConfig) -> Result<BlockLayout> {
        let d = cfg.embed_dim;
        Ok(BlockLayout {
            norm1: self.norm(&format!("{prefix}.norm1"), group, d)?,
            qkv: self.linear(&format!("{prefix}.attn.qkv"), group, d, 3 * d)?,
            proj: self.linear(&format!("{prefix}.attn.proj"), group, d, d)?,
            norm2: self.norm(&format!("{prefix}.norm2"), group, d)?,
            fc1: self.linear(&format!("{prefix}.mlp.fc1"), group, d, cfg.mlp_dim())?,
            fc2: self.linear(&format!("{prefix}.mlp.fc2"), group, cfg.mlp_dim(), d)?,
        })
    }

    fn build(mut self, config: &ModelConfig) -> Result<(ParamStore<E>, ModelLayout)> {
        let cfg = &config.vit;
        let d = cfg.embed_dim;
        let emb = LayerGroup::Embedding;
        let embed = EmbedLayout {
            proj: self.linear("embed.proj", emb, cfg.patch_dim(), d)?,
            cls: self.random("embed.cls".into(), emb, &[1, d])?,
            pos: self.random("embed.pos".into(), emb, &[cfg.num_patches() + 1, d])?,
        };
        let blocks = (0..cfg.num_base_blocks)
            .map(|i| self.block(&format!("blocks.{i}"), LayerGroup::Block(i + 1), cfg))
            .collect::<Result<_>>()?;
        let k = config.gala.kernel_size;
        let gala = (0..config.num_stages())
            .map(|s| {
                let group = LayerGroup::Gala(s + 1);
                let block = self.block(&format!("gala.{s}"), group, cfg)?;
                let kernel = Tensor::full(&[k], E::from_wide(1.0 / k as f64))?;
                let kernel = self.store.add(format!("gala.{s}.kernel"), group, kernel, false);
                Ok(GalaLayout { block, kernel })
            })
            .collect::<Result<_>>()?;
        let head = self.linear("head", LayerGroup::Head, d, cfg.num_classes)?;
        Ok((
            self.store,
            ModelLayout {
                embed,
                blocks,
                gala,
                head,
            },
        ))
    }
}

/// Vision transformer with GALA stages and progressive patch selection.
#[derive(Clone, Debug)]
pub struct GftModel<E: Element = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<E>,
    pub layout: ModelLayout,
}

impl GftModel<f32> {
    /// Truncated-normal projections, zero biases, unit norm gains and a
    /// uniform smoothing kernel, drawn from a ChaCha stream seeded by `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (params, layout) = Builder {
            store: ParamStore::default(),
            rng: Some(&mut rng),
        }
        .build(&config)?;
        Ok(GftModel {
            config,
            params,
            layout,
        })
    }
}

impl<E: Element> GftModel<E> {
    /// Rebuilds a model around externally supplied parameters, which must
    /// match the layout implied by `config` name for name and shape.
    pub fn from_params(config: ModelConfig, params: Vec<(String, Tensor<E>)>) -> Result<Self> {
        config.validate()?;
        let (mut store, layout) = Builder::<E> {
            store: ParamStore::default(),
            rng: None,
        }
        .build(&config)?;
        if params.len() != store.len() {
            return Err(Error::Config(format!(
                "expected {} parameters, got {}",
                store.len(),
                params.len()
            )));
        }
        for (slot, (name, value)) in store.iter_mut().zip(params) {
            if slot.name != name {
                return Err(Error::Config(format!("expected parameter {}, found {name}", slot.name)));
            }
            if slot.value.dims() != value.dims() {
                return Err(Error::Config(format!(
                    "parameter {name}: expected shape {}, found {}",
                    slot.value.shape(),
                    value.shape()
                )));
            }
            slot.value = value;
        }
        Ok(GftModel {
            config,
            params: store,
            layout,
        })
    }

    pub fn cast<F: Element>(&self) -> GftModel<F> {
        GftModel {
            config: self.config.clone(),
            params: ParamStore {
                params: self
                    .params
                    .iter()
                    .map(|p| Param {
                        name: p.name.clone(),
                        group: p.group,
                        value: p.value.cast(),
                        trainable: p.trainable,
                    })
                    .collect(),
            },
            layout: self.layout.clone(),
        }
    }

    /// Same parameters under a different selection schedule.
    pub fn with_schedule(&self, schedule: SelectionSchedule) -> Result<Self> {
        let mut config = self.config.clone();
        if schedule.len() != config.schedule.len() {
            return Err(Error::Config(format!(
                "schedule has {} stages, model has {}",
                schedule.len(),
                config.schedule.len()
            )));
        }
        config.schedule = schedule;
        config.validate()?;
        Ok(GftModel {
            config,
            params: self.params.clone(),
            layout: self.layout.clone(),
        })
    }

    /// Starts a forward pass on a fresh tape. With `trainable` set, trainable
    /// parameters are recorded as gradient-receiving leaves.
    pub fn pass(&self, trainable: bool) -> Pass<'_, E> {
        let mut tape = Tape::new();
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable && p.trainable {
                    tape.param(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Pass {
            model: self,
            tape,
            vars,
        }
    }
}

/// Mutable per-stage importance statistics carried across training steps.
#[derive(Clone, Debug, PartialEq)]
pub struct GftState {
    pub stages: Vec<ImportanceState>,
}

impl GftState {
    pub fn new(config: &ModelConfig) -> Self {
        GftState {
            stages: (0..config.num_stages())
                .map(|_| ImportanceState::new(config.vit.num_patches()))
                .collect(),
        }
    }
}

/// Parameter handles of one encoder block on the current tape.
pub(crate) struct BoundBlock {
    pub norm1_gain: Var,
    pub norm1_bias: Var,
    pub qkv_w: Var,
    pub qkv_b: Var,
    pub proj_w: Var,
    pub proj_b: Var,
    pub norm2_gain: Var,
    pub norm2_bias: Var,
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

/// One forward (and optionally backward) evaluation of a model.
pub struct Pass<'m, E: Element = f32> {
    pub model: &'m GftModel<E>,
    pub tape: Tape<E>,
    vars: Vec<Var>,
}

impl<E: Element> Pass<'_, E> {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub(crate) fn bind_block(&self, b: &BlockLayout) -> BoundBlock {
        BoundBlock {
            norm1_gain: self.var(b.norm1.gain),
            norm1_bias: self.var(b.norm1.bias),
            qkv_w: self.var(b.qkv.weight),
            qkv_b: self.var(b.qkv.bias),
            proj_w: self.var(b.proj.weight),
            proj_b: self.var(b.proj.bias),
            norm2_gain: self.var(b.norm2.gain),
            norm2_bias: self.var(b.norm2.bias),
            fc1_w: self.var(b.fc1.weight),
            fc1_b: self.var(b.fc1.bias),
            fc2_w: self.var(b.fc2.weight),
            fc2_b: self.var(b.fc2.bias),
        }
    }

    /// Gradient of every parameter, aligned with the model's [`ParamStore`].
    /// Frozen parameters and parameters off the loss path get `None`.
    pub fn param_grads(&self, grads: &mut Gradients<E>) -> Vec<Option<Tensor<E>>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}
