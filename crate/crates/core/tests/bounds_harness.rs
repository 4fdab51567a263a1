use dmoe_core::bounds::{run_harness, BoundKind, HarnessConfig};

#[test]
fn randomized_harness() {
    let summary = run_harness(&HarnessConfig::default()).unwrap();
    println!("{}", summary.summary_line());
    for kind in [BoundKind::Histogram, BoundKind::Distance, BoundKind::Combined, BoundKind::Softmax] {
        assert_eq!(summary.count(kind), 1000);
    }
    for kind in [BoundKind::Histogram, BoundKind::Combined, BoundKind::Softmax] {
        assert_eq!(summary.violations(kind), 0, "{kind:?}");
    }
}

// The distance-term bound scales with ‖f - p‖ while the gradient of |p·b - f·b|
// does not vanish as f approaches p, so wide targets on few bins can break it.
#[test]
fn distance_bound_has_counterexamples_near_the_target() {
    let summary = run_harness(&HarnessConfig::default()).unwrap();
    let worst = summary
        .rows
        .iter()
        .filter(|r| r.kind == BoundKind::Distance && !r.holds)
        .collect::<Vec<_>>();
    assert!(!worst.is_empty());
    assert!(worst.iter().all(|r| r.ratio > 1.0));
}

#[test]
fn harness_is_deterministic() {
    let cfg = HarnessConfig { draws: 50, ..HarnessConfig::default() };
    let a = run_harness(&cfg).unwrap();
    let b = run_harness(&cfg).unwrap();
    assert_eq!(a.rows, b.rows);
    let mut csv = Vec::new();
    a.write_csv(&mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 1 + 200);
}
