//! Mini-batch training with SGD and momentum, evaluation metrics, and the
//! per-epoch run log.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, LabeledImage};
use crate::error::{Error, Result};
use crate::model::{GftModel, GftState, LayerGroup};
use crate::pps::{self, Routing};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Seeds the train/eval split and every epoch's shuffle.
    pub seed: u64,
    /// Share of the corpus held out for evaluation.
    pub eval_fraction: f64,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
            eval_fraction: 0.2,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be finite and ≥ 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(Error::Config(format!("eval_fraction must lie in [0, 1), got {}", self.eval_fraction)));
        }
        Ok(())
    }
}

/// Mean absolute gradient of one layer group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupGrad {
    pub group: LayerGroup,
    pub mean_abs: f64,
}

/// One completed epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    /// `None` without a held-out split.
    pub eval_accuracy: Option<f64>,
    /// Every layer group in depth order, averaged over the epoch's steps.
    pub grad_norms: Vec<GroupGrad>,
    /// Mean boundary recall of each stage's selection over training items
    /// with ground truth.
    pub boundary_recall: Vec<Option<f64>>,
    /// Estimated multiply-accumulates per image under the active schedule.
    pub flops: f64,
}

impl EpochRecord {
    pub fn grad(&self, group: LayerGroup) -> Option<f64> {
        self.grad_norms.iter().find(|g| g.group == group).map(|g| g.mean_abs)
    }
}

/// Append-only training history, stored as one JSON object per line.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<EpochRecord>,
}

impl RunLog {
    pub fn to_json_lines(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }

    pub fn from_json_lines(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Data(format!("bad run log line: {e}"))))
            .collect::<Result<_>>()?;
        Ok(RunLog { records })
    }
}

/// Accuracy and macro-averaged precision, recall and F1.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `confusion[truth][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

impl Metrics {
    /// A class that is never predicted has precision 0; one that never
    /// occurs has recall 0.
    pub fn from_predictions(predicted: &[usize], truth: &[usize], num_classes: usize) -> Result<Self> {
        if predicted.len() != truth.len() || truth.is_empty() {
            return Err(Error::invalid("metrics", "need equally many non-zero predictions and labels"));
        }
        let mut confusion = vec![vec![0usize; num_classes]; num_classes];
        for (&p, &t) in predicted.iter().zip(truth) {
            if p >= num_classes || t >= num_classes {
                return Err(Error::invalid("metrics", format!("class index outside 0..{num_classes}")));
            }
            confusion[t][p] += 1;
        }
        let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
        let (mut precision, mut recall, mut f1) = (0.0, 0.0, 0.0);
        for c in 0..num_classes {
            let tp = confusion[c][c] as f64;
            let predicted_c: usize = (0..num_classes).map(|t| confusion[t][c]).sum();
            let actual_c: usize = confusion[c].iter().sum();
            let p = if predicted_c > 0 { tp / predicted_c as f64 } else { 0.0 };
            let r = if actual_c > 0 { tp / actual_c as f64 } else { 0.0 };
            precision += p;
            recall += r;
            f1 += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        }
        let k = num_classes as f64;
        Ok(Metrics {
            accuracy: correct as f64 / truth.len() as f64,
            precision: precision / k,
            recall: recall / k,
            f1: f1 / k,
            confusion,
        })
    }
}

/// Evaluation outcome: metrics plus per-stage selection quality.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub predictions: Vec<usize>,
    /// Mean boundary recall per stage over items with ground truth.
    pub boundary_recall: Vec<Option<f64>>,
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Default)]
struct RecallSum {
    sums: Vec<f64>,
    counts: Vec<usize>,
}

impl RecallSum {
    fn add(&mut self, stage: usize, value: f64) {
        if self.sums.len() <= stage {
            self.sums.resize(stage + 1, 0.0);
            self.counts.resize(stage + 1, 0);
        }
        self.sums[stage] += value;
        self.counts[stage] += 1;
    }

    fn means(&self, stages: usize) -> Vec<Option<f64>> {
        (0..stages)
            .map(|s| match self.counts.get(s) {
                Some(&n) if n > 0 => Some(self.sums[s] / n as f64),
                _ => None,
            })
            .collect()
    }
}

/// Evaluates on `items` with importance statistics frozen: `state` is only
/// read.
pub fn evaluate(model: &GftModel, state: &GftState, items: &[LabeledImage], batch_size: usize) -> Result<Evaluation> {
    if items.is_empty() {
        return Err(Error::invalid("evaluate", "empty evaluation set"));
    }
    let mut frozen = state.clone();
    let mut predictions = Vec::with_capacity(items.len());
    let mut recall = RecallSum::default();
    let order: Vec<usize> = (0..items.len()).collect();
    for chunk in order.chunks(batch_size.max(1)) {
        let images = data::stack(items, chunk)?;
        let mut pass = model.pass(false);
        let out = pass.gft_forward(&images, &mut frozen, false, &Routing::Importance)?;
        let logits = pass.tape.value(out.logits);
        for (b, &i) in chunk.iter().enumerate() {
            predictions.push(argmax(logits.row(b)));
            for stage in &out.stages {
                if let Some(r) = data::boundary_recall(&stage.mask.kept[b], &items[i].boundary) {
                    recall.add(stage.mask.stage, r);
                }
            }
        }
    }
    let truth: Vec<usize> = items.iter().map(|i| i.label).collect();
    Ok(Evaluation {
        metrics: Metrics::from_predictions(&predictions, &truth, model.config.vit.num_classes)?,
        predictions,
        boundary_recall: recall.means(model.config.num_stages()),
    })
}

/// Splits item indices into (train, eval) with a seeded shuffle.
pub fn split_indices(n: usize, eval_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_eval = ((n as f64) * eval_fraction).floor() as usize;
    let n_eval = n_eval.min(n.saturating_sub(1));
    let eval = idx[..n_eval].to_vec();
    (idx[n_eval..].to_vec(), eval)
}

/// Trains `model` in place. `on_epoch` runs after each epoch's record is
/// appended, e.g. to write checkpoints.
pub fn train_with(
    model: &mut GftModel,
    state: &mut GftState,
    items: &[LabeledImage],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &GftModel, &GftState) -> Result<()>,
) -> Result<RunLog> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::invalid("train", "empty corpus"));
    }
    let num_classes = model.config.vit.num_classes;
    if let Some(bad) = items.iter().find(|i| i.label >= num_classes) {
        return Err(Error::Data(format!("label {} outside 0..{num_classes}", bad.label)));
    }
    let (train_idx, eval_idx) = split_indices(items.len(), cfg.eval_fraction, cfg.seed);
    let eval_items: Vec<LabeledImage> = eval_idx.iter().map(|&i| items[i].clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let groups = model.params.groups();
    let group_slot: Vec<usize> = model
        .params
        .iter()
        .map(|p| groups.iter().position(|g| *g == p.group).expect("group listed"))
        .collect();
    let mut velocity: Vec<Vec<f32>> = model.params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
    let flops = pps::flops_estimate(&model.config).direct;
    let stages = model.config.num_stages();
    let mut log = RunLog::default();

    for epoch in 1..=cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut grad_sums = vec![0.0; groups.len()];
        let mut steps = 0usize;
        let mut recall = RecallSum::default();
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let images = data::stack(items, batch)?;
            let labels: Vec<usize> = batch.iter().map(|&i| items[i].label).collect();
            let mut pass = model.pass(true);
            let out = pass.gft_forward(&images, state, true, &Routing::Importance)?;
            let loss = pass.tape.cross_entropy(out.logits, &labels)?;
            let loss_value = pass.tape.value(loss).data()[0] as f64;
            if !loss_value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: step + 1,
                    loss: loss_value,
                    log: Box::new(log),
                });
            }
            let logits = pass.tape.value(out.logits);
            for (b, &i) in batch.iter().enumerate() {
                correct += usize::from(argmax(logits.row(b)) == labels[b]);
                for stage in &out.stages {
                    if let Some(r) = data::boundary_recall(&stage.mask.kept[b], &items[i].boundary) {
                        recall.add(stage.mask.stage, r);
                    }
                }
            }
            let mut grads = pass.tape.backward(loss)?;
            let grads = pass.param_grads(&mut grads);
            drop(pass);

            let mut abs_sum = vec![0.0; groups.len()];
            let mut abs_count = vec![0usize; groups.len()];
            for (((param, grad), v), &slot) in model.params.iter_mut().zip(grads).zip(&mut velocity).zip(&group_slot) {
                let Some(grad) = grad else { continue };
                if !param.trainable {
                    continue;
                }
                abs_sum[slot] += grad.data().iter().map(|g| g.abs() as f64).sum::<f64>();
                abs_count[slot] += grad.numel();
                let mu = cfg.momentum as f32;
                let lr = cfg.learning_rate as f32;
                for ((p, g), v) in param.value.data_mut().iter_mut().zip(grad.data()).zip(v.iter_mut()) {
                    *v = mu * *v + g;
                    *p -= lr * *v;
                }
            }
            if model.params.iter().any(|p| !p.value.is_finite()) {
                // The loss of this step was finite but the update was not;
                // no later loss can be.
                return Err(Error::Diverged {
                    epoch,
                    step: step + 1,
                    loss: f64::NAN,
                    log: Box::new(log),
                });
            }
            for slot in 0..groups.len() {
                if abs_count[slot] > 0 {
                    grad_sums[slot] += abs_sum[slot] / abs_count[slot] as f64;
                }
            }
            loss_sum += loss_value * batch.len() as f64;
            steps += 1;
        }

        let eval_accuracy = if eval_items.is_empty() {
            None
        } else {
            Some(evaluate(model, state, &eval_items, cfg.batch_size)?.metrics.accuracy)
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_idx.len() as f64,
            train_accuracy: correct as f64 / train_idx.len() as f64,
            eval_accuracy,
            grad_norms: groups
                .iter()
                .zip(&grad_sums)
                .map(|(&group, s)| GroupGrad {
                    group,
                    mean_abs: s / steps as f64,
                })
                .collect(),
            boundary_recall: recall.means(stages),
            flops,
        };
        log::info!(
            "epoch {epoch}: loss {:.4}, train acc {:.3}, eval acc {}",
            record.train_loss,
            record.train_accuracy,
            record.eval_accuracy.map_or("-".to_string(), |a| format!("{a:.3}"))
        );
        log.records.push(record);
        on_epoch(log.records.last().expect("just pushed"), model, state)?;
    }
    Ok(log)
}

pub fn train(model: &mut GftModel, state: &mut GftState, items: &[LabeledImage], cfg: &TrainConfig) -> Result<RunLog> {
    train_with(model, state, items, cfg, |_, _, _| Ok(()))
}

/// Writes the run log as JSON lines.
pub fn write_run_log(log: &RunLog, path: &std::path::Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(log.to_json_lines().as_bytes()).map_err(|e| Error::io(path, e))
}
