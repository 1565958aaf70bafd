//! Gradient audit of a whole model: analytic backward against central finite
//! differences on sampled parameter entries of every layer group.
//!
//! The audit runs on an `f64` copy of the model. Selection is replayed from
//! masks recorded on the unperturbed input, so a probe that nudges a weight
//! cannot flip a top-k decision and break the finite difference.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{relative_error, Tape};
use crate::error::Result;
use crate::model::{GftModel, GftState, LayerGroup};
use crate::pps::{Routing, SelectionMask};
use crate::tensor::Tensor;

pub const DEFAULT_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub batch: usize,
    /// Entries probed per parameter tensor.
    pub samples_per_param: usize,
    pub step: f64,
    /// Gradients below this magnitude are compared absolutely.
    pub floor: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            batch: 2,
            samples_per_param: 3,
            step: 1e-4,
            floor: 1e-6,
            tolerance: DEFAULT_TOLERANCE,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupReport {
    pub group: LayerGroup,
    pub entries_checked: usize,
    pub max_rel_error: f64,
    /// Parameter holding the worst entry.
    pub worst: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub groups: Vec<GroupReport>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_error < self.tolerance)
    }
}

pub fn gradcheck(model: &GftModel, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    audit(model, opts, |_| {})
}

fn loss_of(model: &GftModel<f64>, images: &Tensor<f64>, labels: &[usize], masks: &[SelectionMask]) -> Result<f64> {
    let mut state = GftState::new(&model.config);
    let mut pass = model.pass(false);
    let out = pass.gft_forward(images, &mut state, false, &Routing::Fixed(masks.to_vec()))?;
    let loss = pass.tape.cross_entropy(out.logits, labels)?;
    pass.tape.value(loss).item()
}

/// `prepare` sees the analytic pass's tape before backward runs.
pub(crate) fn audit(model: &GftModel, opts: &GradcheckOptions, prepare: impl Fn(&mut Tape<f64>)) -> Result<GradcheckReport> {
    let mut m = model.cast::<f64>();
    let vit = &m.config.vit;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let images = Tensor::<f64>::from_fn(&[opts.batch, vit.channels, vit.image_size, vit.image_size], |_| {
        rng.random_range(0.0..1.0)
    })?;
    let labels: Vec<usize> = (0..opts.batch).map(|_| rng.random_range(0..vit.num_classes)).collect();

    let mut state = GftState::new(&m.config);
    let (masks, analytic) = {
        let mut pass = m.pass(true);
        let out = pass.gft_forward(&images, &mut state, false, &Routing::Importance)?;
        let loss = pass.tape.cross_entropy(out.logits, &labels)?;
        prepare(&mut pass.tape);
        let mut grads = pass.tape.backward(loss)?;
        (out.masks(), pass.param_grads(&mut grads))
    };

    let mut reports: Vec<GroupReport> = Vec::new();
    for (index, grad) in analytic.into_iter().enumerate() {
        let (name, group, trainable, numel) = {
            let p = m.params.iter().nth(index).expect("aligned with params");
            (p.name.clone(), p.group, p.trainable, p.value.numel())
        };
        if !trainable {
            continue;
        }
        let grad = match grad {
            Some(g) => g,
            // Off the loss path (e.g. positions of dropped patches only):
            // the true gradient is zero everywhere.
            None => Tensor::zeros(&[numel])?,
        };
        let mut entries: Vec<usize> = (0..numel).collect();
        entries.shuffle(&mut rng);
        entries.truncate(opts.samples_per_param.min(numel));

        let mut worst = 0.0f64;
        for &e in &entries {
            let orig = m.params.iter().nth(index).expect("index").value.data()[e];
            let mut probe = |value: f64| -> Result<f64> {
                m.params.iter_mut().nth(index).expect("index").value.data_mut()[e] = value;
                loss_of(&m, &images, &labels, &masks)
            };
            let plus = probe(orig + opts.step)?;
            let minus = probe(orig - opts.step)?;
            probe(orig)?;
            let numeric = (plus - minus) / (2.0 * opts.step);
            worst = worst.max(relative_error(grad.data()[e], numeric, opts.floor));
        }

        match reports.iter_mut().find(|r| r.group == group) {
            Some(r) => {
                r.entries_checked += entries.len();
                if worst > r.max_rel_error {
                    r.max_rel_error = worst;
                    r.worst = name;
                }
            }
            None => reports.push(GroupReport {
                group,
                entries_checked: entries.len(),
                max_rel_error: worst,
                worst: name,
            }),
        }
    }
    reports.sort_by_key(|r| r.group);
    Ok(GradcheckReport {
        groups: reports,
        tolerance: opts.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::FaultyRule;
    use crate::model::ModelConfig;

    #[test]
    fn random_desk_model_passes() {
        let model = GftModel::new(ModelConfig::desk(), 0).unwrap();
        let report = gradcheck(&model, &GradcheckOptions::default()).unwrap();
        assert_eq!(report.groups.iter().map(|g| g.group).collect::<Vec<_>>(), model.params.groups());
        assert!(report.passed(), "{report:#?}");
    }

    #[test]
    fn corrupted_backward_rule_fails() {
        let model = GftModel::new(ModelConfig::desk(), 0).unwrap();
        let report = audit(&model, &GradcheckOptions::default(), |t| t.inject_fault(FaultyRule::Gelu)).unwrap();
        assert!(!report.passed(), "{report:#?}");
        // the head sits after every MLP and is unaffected
        let head = report.groups.iter().find(|g| g.group == LayerGroup::Head).unwrap();
        assert!(head.max_rel_error < DEFAULT_TOLERANCE);
    }
}
