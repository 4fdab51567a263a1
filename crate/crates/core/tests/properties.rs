use dmoe_core::bounds::{distribution_l2, l2_norm, ReferenceDistribution};
use dmoe_core::gradcheck::{max_relative_error, numeric_logit_grad, numeric_param_grad};
use dmoe_core::hist_targets::{build_bin_layout, build_multi_layout, expected_value, induce_target};
use dmoe_core::loss::{histogram_loss, loss_grad_logits, softmax};
use dmoe_core::model::Objective;
use dmoe_core::train::{build_targets, clip_global_norm};
use dmoe_core::uncertainty::{
    calibration_report, entropy_score, isotonic_recalibrate, kl_divergence, quantile_grid,
};
use dmoe_core::{
    Activation, BinDistribution, BinLayout, InducedDistribution, LossConfig, Model, TargetRange,
};
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn layout_strategy() -> impl Strategy<Value = BinLayout> {
    (-3.0..3.0f64, 0.1..5.0f64, 2usize..80, any::<bool>(), 0.08..0.2f64).prop_map(
        |(lo, span, n, normal, std)| {
            let dist = if normal {
                BinDistribution::Normal { mean: 0.5, std }
            } else {
                BinDistribution::Uniform
            };
            build_bin_layout(TargetRange::new(lo, lo + span).unwrap(), n, &dist, 1e-6).unwrap()
        },
    )
}

fn induced_strategy() -> impl Strategy<Value = InducedDistribution> {
    prop_oneof![
        (0.1..4.0f64).prop_map(|c| InducedDistribution::Normal { width_multiple: c }),
        (0.1..4.0f64).prop_map(|c| InducedDistribution::Laplace { width_multiple: c }),
        Just(InducedDistribution::Categorical),
        (1usize..3).prop_map(|k| InducedDistribution::KCategorical { k }),
    ]
}

fn in_range(layout: &BinLayout, t: f64) -> f64 {
    let r = layout.range();
    r.y_min() + t * r.span()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn target_histograms_are_distributions(layout in layout_strategy(), t in 0.0..=1.0f64, dist in induced_strategy()) {
        let h = induce_target(in_range(&layout, t), &layout, &dist).unwrap();
        prop_assert!(h.probs.iter().all(|&p| p >= 0.0));
        prop_assert!((h.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn layouts_are_strictly_increasing(layout in layout_strategy()) {
        let e = layout.endpoints();
        prop_assert!(e.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(e[0], layout.range().y_min());
        prop_assert_eq!(e[e.len() - 1], layout.range().y_max());
    }

    #[test]
    fn shifted_heads_stay_inside_range(layout in layout_strategy(), m in 1usize..6) {
        if let Ok(multi) = build_multi_layout(layout.clone(), m) {
            for l in multi.layouts() {
                let e = l.endpoints();
                prop_assert!(e.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(e[0] >= layout.range().y_min() && e[e.len() - 1] <= layout.range().y_max());
            }
        }
    }

    #[test]
    fn expected_value_lies_in_range(layout in layout_strategy(), logits in prop::collection::vec(-5.0..5.0f64, 80)) {
        let f = softmax(&logits[..layout.n_bins()]);
        let e = expected_value(&f, &layout).unwrap();
        let r = layout.range();
        prop_assert!(e >= r.y_min() - 1e-12 && e <= r.y_max() + 1e-12);
    }

    #[test]
    fn cross_entropy_is_at_least_entropy(layout in layout_strategy(), t in 0.0..=1.0f64, c in 0.3..3.0f64, logits in prop::collection::vec(-4.0..4.0f64, 80)) {
        let target = induce_target(in_range(&layout, t), &layout, &InducedDistribution::Normal { width_multiple: c }).unwrap();
        let f = softmax(&logits[..layout.n_bins()]);
        let ce = histogram_loss(&f, &target).unwrap();
        let h = histogram_loss(&target.probs, &target).unwrap();
        prop_assert!(ce >= h - 1e-9, "{ce} < {h}");
    }

    #[test]
    fn logit_gradient_matches_finite_differences(
        layout in layout_strategy(),
        t in 0.0..=1.0f64,
        logits in prop::collection::vec(-3.0..3.0f64, 80),
        a_hl in 0.0..1.0f64,
        a_dl in 0.0..1.0f64,
    ) {
        let y = in_range(&layout, t);
        let target = induce_target(y, &layout, &InducedDistribution::default()).unwrap();
        let g = &logits[..layout.n_bins()];
        let e = expected_value(&softmax(g), &layout).unwrap();
        prop_assume!((e - y).abs() > 1e-6 * layout.range().span());
        let cfg = LossConfig::new(a_hl, a_dl).unwrap();
        let analytic = loss_grad_logits(g, &target, &layout, y, &cfg).unwrap();
        let numeric = numeric_logit_grad(g, &target, &layout, y, &cfg, 1e-6).unwrap();
        prop_assert!(max_relative_error(&analytic, &numeric) < 1e-4);
    }

    #[test]
    fn softmax_is_translation_invariant(logits in prop::collection::vec(-20.0..20.0f64, 1..64), shift in -100.0..100.0f64) {
        let a = softmax(&logits);
        let shifted: Vec<f64> = logits.iter().map(|g| g + shift).collect();
        let b = softmax(&shifted);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_caps_the_global_norm(mut grads in prop::collection::vec(-100.0..100.0f64, 1..200), max_norm in 1e-3..10.0f64) {
        clip_global_norm(&mut grads, max_norm);
        prop_assert!(l2_norm(&grads) <= max_norm + 1e-9);
    }

    #[test]
    fn probability_difference_is_at_most_sqrt2(a in prop::collection::vec(-6.0..6.0f64, 2..40), b in prop::collection::vec(-6.0..6.0f64, 40)) {
        let p = softmax(&a);
        let f = softmax(&b[..a.len()]);
        let d: Vec<f64> = p.iter().zip(&f).map(|(x, y)| x - y).collect();
        prop_assert!(l2_norm(&d) <= 2f64.sqrt() + 1e-12);
    }

    #[test]
    fn entropy_and_kl_bounds(logits in prop::collection::vec(-8.0..8.0f64, 2..64), other in prop::collection::vec(-8.0..8.0f64, 64)) {
        let p = softmax(&logits);
        let q = softmax(&other[..p.len()]);
        let h = entropy_score(&p);
        prop_assert!(h >= 0.0 && h <= (p.len() as f64).ln() + 1e-12);
        prop_assert!(kl_divergence(&p, &q) >= 0.0);
        prop_assert_eq!(kl_divergence(&p, &p), 0.0);
    }

    #[test]
    fn calibration_metrics_are_ordered_and_permutation_invariant(mut pit in prop::collection::vec(0.0..=1.0f64, 1..300), seed in any::<u64>()) {
        let grid = quantile_grid(100);
        let a = calibration_report(&pit, &grid).unwrap();
        prop_assert!(a.mace <= a.rmsce + 1e-15);
        prop_assert!(a.mace >= 0.0 && a.ma >= 0.0);
        use rand::seq::SliceRandom;
        pit.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let b = calibration_report(&pit, &grid).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn isotonic_map_is_monotone(pit in prop::collection::vec(0.0..=1.0f64, 10..200)) {
        let map = isotonic_recalibrate(&pit).unwrap();
        let mut prev = -1.0;
        for k in 0..=200 {
            let v = map.apply(k as f64 / 200.0);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert!(v >= prev - 1e-15);
            prev = v;
        }
    }

    #[test]
    fn normal_l2_norm_decreases_with_width(n in 16usize..128, t in 0.3..0.7f64) {
        let layout = build_bin_layout(TargetRange::new(0.0, 1.0).unwrap(), n, &BinDistribution::Uniform, 1e-6).unwrap();
        let mut prev = f64::INFINITY;
        for c in [0.25, 0.5, 1.0, 2.0, 4.0] {
            let v = distribution_l2(&ReferenceDistribution::Induced {
                dist: InducedDistribution::Normal { width_multiple: c },
                y: t,
            }, &layout).unwrap();
            prop_assert!(v <= prev + 1e-12);
            prop_assert!(v > 1.0 / (n as f64).sqrt() && v < 1.0);
            prev = v;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn model_backward_matches_finite_differences(
        seed in any::<u64>(),
        hidden in prop::collection::vec(1usize..6, 0..3),
        m in 1usize..5,
        n in 2usize..17,
        batch in 1usize..4,
        tanh in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let range = TargetRange::new(-1.0, 2.0).unwrap();
        let base = build_bin_layout(range, n, &BinDistribution::Uniform, 1e-6).unwrap();
        let layouts = build_multi_layout(base, m).unwrap();
        let mut widths = vec![3];
        widths.extend(&hidden);
        let act = if tanh { Activation::Tanh } else { Activation::Relu };
        let model = Model::histogram(&widths, act, layouts.clone(), &mut rng).unwrap();
        use rand::Rng;
        let x = Array2::from_shape_fn((batch, 3), |_| rng.random_range(-1.5..1.5));
        let y: Vec<f64> = (0..batch).map(|_| rng.random_range(-1.0..2.0)).collect();
        let targets = build_targets(&y, &layouts, &InducedDistribution::default()).unwrap();
        let objective = Objective::Histogram(LossConfig::new(0.6, 0.4).unwrap());

        let cache = model.forward_batch(x.view()).unwrap();
        let preds = cache.probs.as_ref().unwrap();
        for (i, &yi) in y.iter().enumerate() {
            for h in 0..m {
                let row = preds.row(i).to_vec();
                let e = expected_value(&row[h * n..(h + 1) * n], layouts.layout(h)).unwrap();
                prop_assume!((e - yi).abs() > 1e-5);
            }
        }
        let (_, analytic) = model.backward(x.view(), &y, Some(targets.view()), &objective).unwrap();
        let numeric = numeric_param_grad(&model, x.view(), &y, Some(targets.view()), &objective, 1e-6).unwrap();
        let err = max_relative_error(&analytic, &numeric);
        prop_assert!(err < 1e-4, "relative error {err}");
    }
}
