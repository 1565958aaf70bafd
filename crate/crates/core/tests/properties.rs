use gft_core::data::{self, BoundaryTask};
use gft_core::gala::{self, GalaConfig, ImportanceState};
use gft_core::model::{GftModel, GftState, ModelConfig};
use gft_core::pps::{Routing, SelectionSchedule};
use gft_core::tensor::{self, Tensor};
use proptest::prelude::*;

/// Sort-based oracle: indices by descending value, lower index first on ties.
fn topk_oracle(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
    let mut top = idx[..k].to_vec();
    top.sort_unstable();
    top
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn topk_matches_sort_oracle(values in prop::collection::vec(-4i32..4, 1..40), k_frac in 0.0f64..1.0) {
        // Small integer range forces plenty of ties.
        let values: Vec<f64> = values.into_iter().map(f64::from).collect();
        let k = 1 + ((values.len() - 1) as f64 * k_frac) as usize;
        prop_assert_eq!(tensor::topk_slice(&values, k).unwrap(), topk_oracle(&values, k));
    }

    #[test]
    fn schedule_counts_are_bounded_and_non_increasing(
        ratios in prop::collection::vec(0.01f64..=1.0, 1..6),
        n in 1usize..400,
    ) {
        let counts = SelectionSchedule::new(ratios).unwrap().counts(n);
        prop_assert!(counts.iter().all(|&c| (1..=n).contains(&c)));
        prop_assert!(counts.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn spatial_gradient_of_a_line_is_its_slope(slope in -5.0f64..5.0, offset in -5.0f64..5.0, n in 2usize..50) {
        let x = Tensor::new(&[n], (0..n).map(|i| offset + slope * i as f64).collect()).unwrap();
        let g = gala::spatial_gradient(&x).unwrap();
        prop_assert!(g.data().iter().all(|v| (v - slope).abs() < 1e-9));
    }

    #[test]
    fn importance_rows_form_distributions(
        rows in prop::collection::vec(prop::collection::vec(-30.0f64..30.0, 8), 1..4),
        tau in 0.05f64..10.0,
    ) {
        let b = rows.len();
        let scores = Tensor::new(&[b, 8], rows.concat()).unwrap();
        let ids: Vec<Vec<usize>> = (0..b).map(|_| (0..8).collect()).collect();
        let dist = gala::importance_distribution(&scores, tau, &ids).unwrap();
        for i in 0..b {
            let row = dist.probs.row(i);
            prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn z_normalized_rows_are_centred(row in prop::collection::vec(-100.0f64..100.0, 2..30)) {
        let n = row.len();
        let spread = row.iter().cloned().fold(f64::MIN, f64::max) - row.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(spread > 1e-3);
        let z = gala::z_normalize(&Tensor::new(&[1, n], row).unwrap(), 1e-6).unwrap();
        let mean = z[0].iter().sum::<f64>() / n as f64;
        let var = z[0].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn evaluation_never_moves_importance_state(values in prop::collection::vec(0.0f64..3.0, 6)) {
        let scores = Tensor::new(&[1, 6], values).unwrap();
        let ids = vec![vec![0, 2, 3, 5, 7, 9]];
        let mut state = ImportanceState::new(10);
        let cfg = GalaConfig::default();
        gala::ema_update(&mut state, &scores, &ids, &cfg, true).unwrap();
        let before = state.clone();
        gala::ema_update(&mut state, &scores, &ids, &cfg, false).unwrap();
        prop_assert_eq!(state, before);
    }

    #[test]
    fn boundary_recall_is_a_fraction(kept in prop::collection::btree_set(0usize..16, 1..16), truth in prop::collection::btree_set(0usize..16, 1..8)) {
        let kept: Vec<usize> = kept.into_iter().collect();
        let truth: Vec<usize> = truth.into_iter().collect();
        let r = data::boundary_recall(&kept, &truth).unwrap();
        prop_assert!((0.0..=1.0).contains(&r));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn stage_masks_nest_and_stay_sorted(seed in 0u64..1000, batch in 1usize..4) {
        let model = GftModel::new(ModelConfig::desk(), seed).unwrap();
        let task = BoundaryTask::desk(0.1, seed);
        let set = data::generate(&task, batch).unwrap();
        let images = data::stack(&set.items, &(0..batch).collect::<Vec<_>>()).unwrap();
        let mut state = GftState::new(&model.config);
        let mut pass = model.pass(false);
        let out = pass.gft_forward(&images, &mut state, false, &Routing::Importance).unwrap();
        let counts = model.config.schedule.counts(16);
        for b in 0..batch {
            let mut previous: Vec<usize> = (0..16).collect();
            for (stage, mask) in out.masks().iter().enumerate() {
                let kept = &mask.kept[b];
                prop_assert_eq!(kept.len(), counts[stage]);
                prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(kept.iter().all(|id| previous.contains(id)));
                previous = kept.clone();
            }
        }
        let logits = pass.tape.value(out.logits);
        prop_assert_eq!(logits.dims(), &[batch, 4]);
        prop_assert!(logits.data().iter().all(|v| v.is_finite()));
    }
}
