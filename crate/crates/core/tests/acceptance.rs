//! Acceptance gate: runs criteria 1-10 in order, prints one PASS/FAIL line
//! each and exits non-zero if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use gft_core::checkpoint;
use gft_core::data::{self, BoundaryTask, LabeledImage};
use gft_core::gala::{self, GalaConfig, ImportanceState};
use gft_core::gradcheck::{self, GradcheckOptions, DEFAULT_TOLERANCE};
use gft_core::model::{GftModel, GftState, LayerGroup, ModelConfig};
use gft_core::pps::{self, Routing, SelectionSchedule};
use gft_core::tensor::{self, flops, Tensor};
use gft_core::train::{self, RunLog, TrainConfig};
use gft_core::vit::TokenSequence;
use gft_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, ok: impl Into<String>, bad: impl Into<String>) -> Outcome {
    if cond {
        Ok(ok.into())
    } else {
        Err(bad.into())
    }
}

fn fail(e: Error) -> String {
    format!("error: {e}")
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let model = GftModel::new(ModelConfig::desk(), 0).map_err(fail)?;
    let report = gradcheck::gradcheck(&model, &GradcheckOptions::default()).map_err(fail)?;
    let elapsed = start.elapsed();
    let groups: Vec<LayerGroup> = report.groups.iter().map(|g| g.group).collect();
    let all_groups = groups == model.params.groups();
    let worst = report.max_rel_error();
    let summary = format!(
        "gradient oracle over {} layer groups, max rel error {worst:.2e} (< {DEFAULT_TOLERANCE:.0e}), {:.1}s (< 60s)",
        groups.len(),
        elapsed.as_secs_f64()
    );
    check(
        all_groups && report.passed() && elapsed < Duration::from_secs(60),
        summary.clone(),
        format!("{summary}; every group covered: {all_groups}"),
    )
}

fn criterion_2() -> Outcome {
    let grad = |v: Vec<f64>| -> Result<Vec<f64>, String> {
        let n = v.len();
        Ok(gala::spatial_gradient(&Tensor::new(&[n], v).map_err(fail)?).map_err(fail)?.data().to_vec())
    };
    let a = grad(vec![1.0, 2.0, 3.0])?;
    let b = grad(vec![0.0, 1.0, 0.0, 0.0])?;
    let hand = a == [1.0, 1.0, 1.0] && b == [1.0, 0.0, -0.5, 0.0];

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (qa, qb, qc) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let n = rng.random_range(3..40);
        let g = grad((0..n).map(|i| qa * (i * i) as f64 + qb * i as f64 + qc).collect())?;
        for (i, gi) in g.iter().enumerate().take(n - 1).skip(1) {
            worst = worst.max((gi - (2.0 * qa * i as f64 + qb)).abs());
        }
    }
    let summary = format!("stencil hand vectors {a:?} and {b:?}; 200 random quadratics, interior error {worst:.1e}");
    check(hand && worst < 1e-6, summary.clone(), summary)
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_sum = 0.0f64;
    let mut violations = 0;
    let trials = 200;
    for _ in 0..trials {
        let (b, n) = (rng.random_range(1..5), rng.random_range(2..40));
        let scale = rng.random_range(0.1..20.0);
        let scores = Tensor::<f64>::from_fn(&[b, n], |_| rng.random_range(-scale..scale)).map_err(fail)?;
        let ids: Vec<Vec<usize>> = (0..b).map(|_| (0..n).collect()).collect();
        let t_hi = rng.random_range(0.05..5.0);
        let t_lo = t_hi * rng.random_range(0.05..1.0);
        let hi = gala::importance_distribution(&scores, t_hi, &ids).map_err(fail)?;
        let lo = gala::importance_distribution(&scores, t_lo, &ids).map_err(fail)?;
        for i in 0..b {
            for probs in [hi.probs.row(i), lo.probs.row(i)] {
                worst_sum = worst_sum.max((probs.iter().sum::<f64>() - 1.0).abs());
            }
            let top = tensor::topk_slice(scores.row(i), 1).map_err(fail)?[0];
            if lo.probs.row(i)[top] < hi.probs.row(i)[top] {
                violations += 1;
            }
        }
    }
    let summary = format!(
        "{trials} trials: max |row sum - 1| = {worst_sum:.1e}, argmax mass decreased under smaller temperature {violations} times"
    );
    check(worst_sum <= 1e-6 && violations == 0, summary.clone(), summary)
}

/// Scores of a `[B×H×N]` mean-attention tensor through the importance path
/// as the model runs it at evaluation.
fn scores_from_mean_attention(mean: &Tensor<f64>) -> Result<Tensor<f64>, String> {
    let cfg = GalaConfig::default();
    let kernel = Tensor::full(&[cfg.kernel_size], 1.0 / cfg.kernel_size as f64).map_err(fail)?;
    let g = gala::aggregate_heads(&gala::spatial_gradient(mean).map_err(fail)?).map_err(fail)?;
    let smoothed = gala::smooth(&g, &kernel).map_err(fail)?;
    let (b, n) = smoothed.matrix_dims().map_err(fail)?;
    let ids: Vec<Vec<usize>> = (0..b).map(|_| (0..n).collect()).collect();
    let mut state = ImportanceState::new(n);
    gala::ema_update(&mut state, &smoothed, &ids, &cfg, false).map_err(fail)
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let counts = SelectionSchedule::default().counts(16);
    let trials = 200;
    let (mut shift_mismatch, mut set_changes) = (0usize, 0usize);
    for _ in 0..trials {
        let (b, h, n) = (2, 4, 16);
        // Dyadic values keep `a + c` and the stencil differences exact.
        let dyadic = |r: &mut ChaCha8Rng| r.random_range(0..1024) as f64 / 1024.0;
        let mean = Tensor::<f64>::from_fn(&[b, h, n], |_| dyadic(&mut rng)).map_err(fail)?;
        let c = rng.random_range(-64..64) as f64 / 8.0;
        let shifted = Tensor::new(mean.dims(), mean.data().iter().map(|v| v + c).collect()).map_err(fail)?;
        let base = scores_from_mean_attention(&mean)?;
        if scores_from_mean_attention(&shifted)?.data() != base.data() {
            shift_mismatch += 1;
        }

        let lambda = 10f64.powf(rng.random_range(-3.0..3.0));
        let mean = Tensor::<f64>::from_fn(&[b, h, n], |_| rng.random_range(0.0..1.0)).map_err(fail)?;
        let scaled = Tensor::new(mean.dims(), mean.data().iter().map(|v| v * lambda).collect()).map_err(fail)?;
        let (s0, s1) = (scores_from_mean_attention(&mean)?, scores_from_mean_attention(&scaled)?);
        for i in 0..b {
            for &k in &counts {
                let mut a = tensor::topk_slice(s0.row(i), k).map_err(fail)?;
                let mut z = tensor::topk_slice(s1.row(i), k).map_err(fail)?;
                a.sort_unstable();
                z.sort_unstable();
                if a != z {
                    set_changes += 1;
                }
            }
        }
    }
    let summary = format!(
        "{trials} trials: shifted mean attention changed scores {shift_mismatch} times, scaling changed a stage top-k set {set_changes} times"
    );
    check(shift_mismatch == 0 && set_changes == 0, summary.clone(), summary)
}

fn criterion_5() -> Outcome {
    let counts = SelectionSchedule::new(vec![0.75, 0.5, 0.25]).map_err(fail)?.counts(196);
    let tokens = pps::tokens_per_layer(&ModelConfig::full());
    let tail = tokens[tokens.len() - 3..].to_vec();
    let summary = format!("N=196 stage patch counts {counts:?}, tokens after selection {tail:?}");
    check(counts == [147, 98, 49] && tail == [197, 148, 99], summary.clone(), summary)
}

fn criterion_6() -> Outcome {
    let closed = pps::closed_form_cost(1.0, &[0.2, 0.2, 0.2], &[0.75, 0.5, 0.25]);
    let config = ModelConfig::desk();
    let estimate = pps::flops_estimate(&config).direct;
    let model = GftModel::new(config.clone(), 6).map_err(fail)?;
    let v = &config.vit;
    let batch = 2;
    let images = Tensor::from_fn(&[batch, v.channels, v.image_size, v.image_size], |i| (i % 7) as f32 / 7.0).map_err(fail)?;
    let mut state = GftState::new(&config);
    let mut pass = model.pass(false);
    flops::reset();
    pass.gft_forward(&images, &mut state, false, &Routing::Importance).map_err(fail)?;
    let counted = flops::read() as f64 / batch as f64;
    let deviation = (counted - estimate).abs() / estimate;
    let summary = format!(
        "closed form {closed} (expected 0.70); desk direct sum {estimate:.0} vs counter {counted:.0}, deviation {:.3}% (< 2%)",
        100.0 * deviation
    );
    check(closed == 0.70 && deviation < 0.02, summary.clone(), summary)
}

fn criterion_7() -> Outcome {
    let model = GftModel::new(ModelConfig::desk(), 7).map_err(fail)?.cast::<f64>();
    let v = &model.config.vit;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let batch = 3;
    let images =
        Tensor::<f64>::from_fn(&[batch, v.channels, v.image_size, v.image_size], |_| rng.random_range(0.0..1.0)).map_err(fail)?;
    let labels: Vec<usize> = (0..batch).map(|i| i % v.num_classes).collect();

    let state = GftState::new(&model.config);
    let mut pass = model.pass(true);
    let mut run_state = state.clone();
    let out = pass.gft_forward(&images, &mut run_state, false, &Routing::Importance).map_err(fail)?;
    let loss = pass.tape.cross_entropy(out.logits, &labels).map_err(fail)?;
    let grads = pass.tape.backward(loss).map_err(fail)?;

    let (mut dropped_rows, mut nonzero_dropped, mut live_kept) = (0usize, 0usize, 0usize);
    for trace in &out.stages {
        let before = &trace.gala.seq;
        for (b, &var) in before.items.iter().enumerate() {
            let g = grads.get(var).ok_or("no gradient reached a pre-selection sequence")?;
            for (row, id) in before.patch_ids[b].iter().enumerate() {
                let values = g.row(row + 1);
                if trace.mask.kept[b].contains(id) {
                    live_kept += values.iter().any(|x| *x != 0.0) as usize;
                } else {
                    dropped_rows += 1;
                    nonzero_dropped += values.iter().any(|x| *x != 0.0) as usize;
                }
            }
        }
    }

    // Deletion equivalence: after each stage, continue from a fresh copy
    // holding only the kept tokens. Nothing of the dropped patches remains,
    // so the rest of the network must reproduce the logits and masks.
    let full = pass.tape.value(out.logits).clone();
    let masks = out.masks();
    let mut worst = 0.0f64;
    let mut masks_agree = true;
    for (s, trace) in out.stages.iter().enumerate() {
        let mut fresh = model.pass(false);
        let seq = TokenSequence {
            items: trace
                .selected
                .items
                .iter()
                .map(|&v| fresh.tape.constant(pass.tape.value(v).clone()))
                .collect(),
            patch_ids: trace.selected.patch_ids.clone(),
        };
        let mut st = state.clone();
        let (logits, rest) = fresh.forward_stages(s + 1, &seq, &mut st, false, &Routing::Importance).map_err(fail)?;
        masks_agree &= rest.iter().zip(&masks[s + 1..]).all(|(t, m)| t.mask == *m);
        let reduced = fresh.tape.value(logits);
        for (a, b) in reduced.data().iter().zip(full.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    let summary = format!(
        "{dropped_rows} dropped token rows, {nonzero_dropped} with non-zero gradient ({live_kept} kept rows carry gradient); \
         deletion-equivalent logits differ by {worst:.1e} (<= 1e-5), later masks identical: {masks_agree}"
    );
    check(
        dropped_rows > 0 && nonzero_dropped == 0 && live_kept > 0 && worst <= 1e-5 && masks_agree,
        summary.clone(),
        summary,
    )
}

struct DeskRun {
    log: RunLog,
    model: GftModel,
    state: GftState,
    elapsed: Duration,
}

const DESK_SEED: u64 = 0;
const DESK_NOISE: f64 = 0.05;
const DESK_IMAGES: usize = 320;

fn desk_run() -> Result<DeskRun, String> {
    let corpus = data::generate(&BoundaryTask::desk(DESK_NOISE, DESK_SEED), DESK_IMAGES).map_err(fail)?;
    let cfg = TrainConfig {
        seed: DESK_SEED,
        ..TrainConfig::default()
    };
    let mut model = GftModel::new(ModelConfig::desk(), DESK_SEED).map_err(fail)?;
    let mut state = GftState::new(&model.config);
    let start = Instant::now();
    let log = train::train(&mut model, &mut state, &corpus.items, &cfg).map_err(fail)?;
    Ok(DeskRun {
        log,
        model,
        state,
        elapsed: start.elapsed(),
    })
}

fn criterion_8(run: &DeskRun) -> Outcome {
    let epochs = run.log.records.len();
    let reached = run
        .log
        .records
        .iter()
        .find(|r| r.eval_accuracy.is_some_and(|a| a >= 0.9))
        .map(|r| r.epoch);
    let final_acc = run.log.records.last().and_then(|r| r.eval_accuracy).unwrap_or(0.0);

    let task = BoundaryTask::desk(DESK_NOISE, DESK_SEED + 1000);
    let held_out = data::generate(&task, 200).map_err(fail)?;
    let eval = train::evaluate(&run.model, &run.state, &held_out.items, 16).map_err(fail)?;
    let stages = eval.boundary_recall.len();
    let recall = eval.boundary_recall[stages - 1].ok_or("no boundary recall for the last stage")?;
    let keep = ModelConfig::desk().schedule.counts(16)[stages - 1];
    let baseline = mean_random_recall(&held_out.items, keep);
    let summary = format!(
        "desk run: {epochs} epochs in {:.0}s (<= 300s), eval accuracy >= 0.90 first at epoch {}, final {final_acc:.3}; \
         held-out stage-{stages} boundary recall {recall:.3} vs random baseline {baseline:.3} + 0.2 (all stages {:?})",
        run.elapsed.as_secs_f64(),
        reached.map_or("never".to_string(), |e| e.to_string()),
        eval.boundary_recall.iter().map(|r| r.map(|x| (x * 1000.0).round() / 1000.0)).collect::<Vec<_>>(),
    );
    check(
        epochs <= 30 && reached.is_some() && run.elapsed <= Duration::from_secs(300) && recall >= baseline + 0.2,
        summary.clone(),
        summary,
    )
}

fn mean_random_recall(items: &[LabeledImage], keep: usize) -> f64 {
    let total: f64 = items
        .iter()
        .enumerate()
        .map(|(i, item)| data::random_recall_baseline(16, &item.boundary, keep, 2000, i as u64))
        .sum();
    total / items.len() as f64
}

fn criterion_9(run: &DeskRun) -> Outcome {
    let ratio = |r: &train::EpochRecord| -> Option<f64> { Some(r.grad(LayerGroup::Head)? / r.grad(LayerGroup::Embedding)?) };
    let first = run.log.records.first().and_then(ratio).ok_or("missing gradient records")?;
    let last = run.log.records.last().and_then(ratio).ok_or("missing gradient records")?;
    let summary = format!("head/embedding gradient ratio {first:.3} at epoch 1 -> {last:.3} at the final epoch");
    check(last > first, summary.clone(), summary)
}

fn small_run(seed: u64) -> Result<(String, Vec<u8>), String> {
    let corpus = data::generate(&BoundaryTask::desk(DESK_NOISE, seed), 48).map_err(fail)?;
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 8,
        seed,
        ..TrainConfig::default()
    };
    let mut model = GftModel::new(ModelConfig::desk(), seed).map_err(fail)?;
    let mut state = GftState::new(&model.config);
    let log = train::train(&mut model, &mut state, &corpus.items, &cfg).map_err(fail)?;
    Ok((log.to_json_lines(), checkpoint::to_bytes(&model, &state).map_err(fail)?))
}

fn criterion_10() -> Outcome {
    let (log_a, ckpt_a) = small_run(10)?;
    let (log_b, ckpt_b) = small_run(10)?;
    let deterministic = log_a == log_b && ckpt_a == ckpt_b;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("run.ckpt");
    std::fs::write(&path, &ckpt_a).map_err(|e| e.to_string())?;
    let (model, state) = checkpoint::load(&path).map_err(fail)?;
    let round_trip = checkpoint::to_bytes(&model, &state).map_err(fail)? == ckpt_a;

    let mut corrupted = ckpt_a.clone();
    let mid = corrupted.len() / 2;
    corrupted[mid] ^= 0x01;
    let rejected = matches!(checkpoint::from_bytes(&corrupted), Err(Error::CheckpointChecksum { .. }));
    let summary = format!(
        "repeat runs bit-identical: {deterministic}; save/load bit-exact: {round_trip}; flipped byte rejected by checksum: {rejected}"
    );
    check(deterministic && round_trip && rejected, summary.clone(), summary)
}

fn main() -> ExitCode {
    // `cargo test` passes harness flags; a filter that names nothing here
    // (e.g. a unit test name) selects no criteria.
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !filter.is_empty() && !filter.iter().any(|f| "acceptance".contains(f.as_str())) {
        return ExitCode::SUCCESS;
    }

    let mut results: Vec<(u32, Outcome)> = Vec::new();
    let mut report = |n: u32, outcome: Outcome| {
        match &outcome {
            Ok(msg) => println!("PASS criterion {n}: {msg}"),
            Err(msg) => println!("FAIL criterion {n}: {msg}"),
        }
        results.push((n, outcome));
    };
    report(1, criterion_1());
    report(2, criterion_2());
    report(3, criterion_3());
    report(4, criterion_4());
    report(5, criterion_5());
    report(6, criterion_6());
    report(7, criterion_7());
    match desk_run() {
        Ok(run) => {
            report(8, criterion_8(&run));
            report(9, criterion_9(&run));
        }
        Err(e) => {
            report(8, Err(e.clone()));
            report(9, Err(e));
        }
    }
    report(10, criterion_10());

    let failed: Vec<u32> = results.iter().filter(|(_, o)| o.is_err()).map(|(n, _)| *n).collect();
    println!("acceptance: {} of {} criteria passed", results.len() - failed.len(), results.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
