use dmoe_core::hist_targets::{build_bin_layout, build_multi_layout};
use dmoe_core::train::{train, Dataset, LossSetup, TrainOutcome};
use dmoe_core::{
    Activation, BinDistribution, CoefficientSchedule, DmoeError, InducedDistribution, LossConfig, LossMode, Model,
    OptimizerKind, TrainConfig, TargetRange,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn linear_data(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let y = x.iter().map(|v| 0.8 * v).collect();
    Dataset::new(Array2::from_shape_vec((n, 1), x).unwrap(), y).unwrap()
}

fn histogram_model(heads: usize, seed: u64) -> Model {
    let range = TargetRange::new(0.0, 1.0).unwrap();
    let base = build_bin_layout(range, 32, &BinDistribution::Uniform, 1e-6).unwrap();
    let layouts = build_multi_layout(base, heads).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Model::histogram(&[1, 32, 32], Activation::Relu, layouts, &mut rng).unwrap()
}

fn run(mode: LossMode, cfg: &TrainConfig) -> TrainOutcome {
    let setup = LossSetup {
        mode,
        config: LossConfig::default()
            .with_schedule(CoefficientSchedule::reference())
            .unwrap(),
        induced: InducedDistribution::default(),
    };
    train(histogram_model(1, 3), &linear_data(2000, 1), &linear_data(400, 2), &setup, cfg).unwrap()
}

fn quick() -> TrainConfig {
    TrainConfig {
        max_epochs: 5,
        batch_size: 32,
        ..TrainConfig::default()
    }
}

#[test]
fn identical_seeds_give_identical_logs() {
    let a = run(LossMode::Dmoe, &quick());
    let b = run(LossMode::Dmoe, &quick());
    assert_eq!(a.log.to_csv_string().unwrap(), b.log.to_csv_string().unwrap());
    assert_eq!(a.model, b.model);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    for optimizer in [OptimizerKind::Sgd, OptimizerKind::adam()] {
        let cfg = TrainConfig {
            learning_rate: 0.0,
            optimizer,
            ..quick()
        };
        let out = run(LossMode::Dmoe, &cfg);
        assert_eq!(out.model, histogram_model(1, 3));
        let maes: Vec<f64> = out.log.val_rows().map(|r| r.mae).collect();
        assert!(maes.windows(2).all(|w| w[0] == w[1]));
    }
}

#[test]
fn log_has_one_train_and_one_val_row_per_epoch() {
    let out = run(LossMode::Dmoe, &quick());
    assert_eq!(out.log.rows.len(), 10);
    let csv = out.log.to_csv_string().unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "epoch,split,loss_total,loss_hl,loss_dl,mae,ewt,alpha_hl,alpha_dl"
    );
    let first = &out.log.rows[0];
    assert_eq!((first.alpha_hl, first.alpha_dl), (0.9, 0.1));
}

#[test]
fn divergence_is_reported_with_partial_log() {
    let cfg = TrainConfig {
        learning_rate: 1e300,
        optimizer: OptimizerKind::Sgd,
        ..quick()
    };
    let setup = LossSetup {
        mode: LossMode::L2,
        config: LossConfig::default(),
        induced: InducedDistribution::default(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = Model::scalar(&[1, 8], Activation::Relu, TargetRange::new(0.0, 1.0).unwrap(), &mut rng).unwrap();
    match train(model, &linear_data(200, 1), &linear_data(50, 2), &setup, &cfg) {
        Err(DmoeError::Divergence { partial_log, .. }) => assert!(partial_log.rows.len() <= 10),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.best_val_mae)),
    }
}

#[test]
fn linear_task_reaches_low_error() {
    let cfg = TrainConfig {
        max_epochs: 200,
        patience: Some(30),
        batch_size: 64,
        ..TrainConfig::default()
    };
    let dmoe = run(LossMode::Dmoe, &cfg);
    println!("dmoe val mae {} at epoch {}", dmoe.best_val_mae, dmoe.best_epoch);
    assert!(dmoe.best_val_mae < 0.02);
}

#[test]
fn distance_only_is_worse_than_dmoe_on_linear_task() {
    let cfg = TrainConfig {
        max_epochs: 60,
        patience: Some(20),
        ..TrainConfig::default()
    };
    let dmoe = run(LossMode::Dmoe, &cfg);
    let dl = run(LossMode::DistanceOnly, &cfg);
    println!("dmoe {} dl-only {}", dmoe.best_val_mae, dl.best_val_mae);
    assert!(dl.best_val_mae > dmoe.best_val_mae);
}
