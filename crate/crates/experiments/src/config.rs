//! Flat `key = value` experiment configuration with dotted section keys.
//!
//! Lines starting with `#` and blank lines are ignored. Every key has a
//! default; unknown keys are errors. List values are comma separated.
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `task.generator` | `sinusoid` | `linear`, `sinusoid`, `piecewise`, `mixture` |
//! | `task.input_dim` | `1` | feature count |
//! | `task.n_train`, `task.n_val`, `task.n_test` | `2000`, `500`, `1000` | split sizes |
//! | `task.noise_std` | `0` | target noise in normalized units |
//! | `task.y_min`, `task.y_max` | `0`, `1` | target range |
//! | `task.seed` | `0` | data seed (offset by the seed index) |
//! | `task.test_shift` | `0` | input shift applied to the test split only |
//! | `model.hidden` | `64,64` | hidden layer widths (may be empty) |
//! | `model.activation` | `relu` | `relu` or `tanh` |
//! | `layout.bins`, `layout.heads` | `64`, `1` | N and M |
//! | `layout.distribution` | `uniform` | `uniform` or `normal` |
//! | `layout.normal_mean`, `layout.normal_std` | `0.5`, `0.125` | normal bins, normalized units |
//! | `layout.epsilon` | `1e-6` | tail quantile for unbounded bin distributions |
//! | `induced.kind` | `normal` | `normal`, `laplace`, `categorical`, `kcategorical` |
//! | `induced.width` | `1` | scale as a multiple of the mean bin width |
//! | `induced.k` | `2` | bins for `kcategorical` |
//! | `loss.mode` | `dmoe_scheduled` | `l1`, `l2`, `smooth_l1`, `hl_only`, `dl_only`, `dmoe`, `dmoe_scheduled` |
//! | `loss.alpha_hl`, `loss.alpha_dl` | `0.5`, `0.5` | fixed coefficients for `dmoe` |
//! | `loss.smooth_beta` | `0.01` | Smooth L1 transition point |
//! | `schedule.start_hl`, `schedule.start_dl` | `0.9`, `0.1` | coefficients at epoch 0 |
//! | `schedule.end_hl`, `schedule.end_dl` | `0.05`, `0.95` | coefficients from `schedule.epochs` on |
//! | `schedule.epochs` | `20` | schedule length |
//! | `train.optimizer` | `adam` | `adam` or `sgd` |
//! | `train.lr`, `train.batch_size`, `train.epochs` | `1e-3`, `64`, `100` | |
//! | `train.patience` | `20` | early-stopping patience, `0` disables |
//! | `train.clip_norm` | `0` | global gradient-norm cap, `0` disables |
//! | `train.adam_beta1`, `train.adam_beta2`, `train.adam_eps` | `0.9`, `0.999`, `1e-8` | |
//! | `train.seed` | `0` | mixed into every run seed |
//! | `calibrate.holdout` | `0.1` | recalibration holdout fraction |
//! | `calibrate.grid_points` | `100` | quantile levels |
//! | `grid.seeds` | `3` | seeds per cell |
//! | `grid.modes`, `grid.bins`, `grid.heads`, `grid.distributions`, `grid.induced` | empty | axes; empty keeps the single value |
//! | `grid.parallel` | `false` | run cells on the rayon pool |
//! | `output.dir` | `results` | output directory |

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use dmoe_core::hist_targets::{build_bin_layout, build_multi_layout};
use dmoe_core::loss::CoefficientSchedule;
use dmoe_core::model::ScalarLoss;
use dmoe_core::train::LossSetup;
use dmoe_core::{
    Activation, BinDistribution, InducedDistribution, LossConfig, LossMode, MultiLayout,
    OptimizerKind, TargetRange, TrainConfig,
};
use sha2::{Digest, Sha256};

use crate::error::{ExperimentError, Result};
use crate::tasks::{Generator, SyntheticTask};

/// Loss modes available to the grid; `DmoeScheduled` uses the coefficient schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GridMode {
    L1,
    L2,
    SmoothL1,
    HlOnly,
    DlOnly,
    Dmoe,
    DmoeScheduled,
}

impl GridMode {
    pub const ALL: [GridMode; 7] = [
        GridMode::L1,
        GridMode::L2,
        GridMode::SmoothL1,
        GridMode::HlOnly,
        GridMode::DlOnly,
        GridMode::Dmoe,
        GridMode::DmoeScheduled,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GridMode::L1 => "l1",
            GridMode::L2 => "l2",
            GridMode::SmoothL1 => "smooth_l1",
            GridMode::HlOnly => "hl_only",
            GridMode::DlOnly => "dl_only",
            GridMode::Dmoe => "dmoe",
            GridMode::DmoeScheduled => "dmoe_scheduled",
        }
    }

    pub fn is_histogram(self) -> bool {
        !matches!(self, GridMode::L1 | GridMode::L2 | GridMode::SmoothL1)
    }
}

impl FromStr for GridMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        GridMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = GridMode::ALL.iter().map(|m| m.name()).collect();
                format!("expected one of {}", names.join(", "))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayoutKind {
    Uniform,
    Normal,
}

impl LayoutKind {
    pub fn name(self) -> &'static str {
        match self {
            LayoutKind::Uniform => "uniform",
            LayoutKind::Normal => "normal",
        }
    }
}

impl FromStr for LayoutKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "uniform" => Ok(LayoutKind::Uniform),
            "normal" => Ok(LayoutKind::Normal),
            _ => Err("expected uniform or normal".into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InducedKind {
    Normal,
    Laplace,
    Categorical,
    KCategorical,
}

impl InducedKind {
    pub fn name(self) -> &'static str {
        match self {
            InducedKind::Normal => "normal",
            InducedKind::Laplace => "laplace",
            InducedKind::Categorical => "categorical",
            InducedKind::KCategorical => "kcategorical",
        }
    }
}

impl FromStr for InducedKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "normal" => Ok(InducedKind::Normal),
            "laplace" => Ok(InducedKind::Laplace),
            "categorical" => Ok(InducedKind::Categorical),
            "kcategorical" => Ok(InducedKind::KCategorical),
            _ => Err("expected normal, laplace, categorical or kcategorical".into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerName {
    Adam,
    Sgd,
}

impl FromStr for OptimizerName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "adam" => Ok(OptimizerName::Adam),
            "sgd" => Ok(OptimizerName::Sgd),
            _ => Err("expected adam or sgd".into()),
        }
    }
}

impl Display for OptimizerName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerName::Adam => "adam",
            OptimizerName::Sgd => "sgd",
        })
    }
}

macro_rules! display_by_name {
    ($($t:ty),*) => {$(
        impl Display for $t {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.name())
            }
        }
    )*};
}

display_by_name!(GridMode, LayoutKind, InducedKind, Generator);

/// Axes of an ablation grid; an empty axis keeps the config's single value.
#[derive(Debug, Clone, PartialEq)]
pub struct GridAxes {
    pub seeds: usize,
    pub modes: Vec<GridMode>,
    pub bins: Vec<usize>,
    pub heads: Vec<usize>,
    pub distributions: Vec<LayoutKind>,
    pub induced: Vec<InducedKind>,
    pub parallel: bool,
}

/// One value per config key; see the module docs for the schema.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub generator: Generator,
    pub input_dim: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub noise_std: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub task_seed: u64,
    pub test_shift: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub bins: usize,
    pub heads: usize,
    pub distribution: LayoutKind,
    pub normal_mean: f64,
    pub normal_std: f64,
    pub epsilon: f64,
    pub induced: InducedKind,
    pub induced_width: f64,
    pub induced_k: usize,
    pub mode: GridMode,
    pub alpha_hl: f64,
    pub alpha_dl: f64,
    pub smooth_beta: f64,
    pub schedule_start: (f64, f64),
    pub schedule_end: (f64, f64),
    pub schedule_epochs: usize,
    pub optimizer: OptimizerName,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub clip_norm: f64,
    pub adam: (f64, f64, f64),
    pub train_seed: u64,
    pub holdout: f64,
    pub grid_points: usize,
    pub grid: GridAxes,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let schedule = CoefficientSchedule::reference();
        Self {
            generator: Generator::Sinusoid,
            input_dim: 1,
            n_train: 2000,
            n_val: 500,
            n_test: 1000,
            noise_std: 0.0,
            y_min: 0.0,
            y_max: 1.0,
            task_seed: 0,
            test_shift: 0.0,
            hidden: vec![64, 64],
            activation: Activation::Relu,
            bins: 64,
            heads: 1,
            distribution: LayoutKind::Uniform,
            normal_mean: 0.5,
            normal_std: 0.125,
            epsilon: 1e-6,
            induced: InducedKind::Normal,
            induced_width: 1.0,
            induced_k: 2,
            mode: GridMode::DmoeScheduled,
            alpha_hl: 0.5,
            alpha_dl: 0.5,
            smooth_beta: 0.01,
            schedule_start: schedule.start,
            schedule_end: schedule.end,
            schedule_epochs: schedule.duration_epochs,
            optimizer: OptimizerName::Adam,
            lr: 1e-3,
            batch_size: 64,
            epochs: 100,
            patience: 20,
            clip_norm: 0.0,
            adam: (0.9, 0.999, 1e-8),
            train_seed: 0,
            holdout: 0.1,
            grid_points: 100,
            grid: GridAxes {
                seeds: 3,
                modes: Vec::new(),
                bins: Vec::new(),
                heads: Vec::new(),
                distributions: Vec::new(),
                induced: Vec::new(),
                parallel: false,
            },
            output_dir: PathBuf::from("results"),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ExperimentError::ConfigSyntax {
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment.split_once('=').ok_or_else(|| {
            ExperimentError::Invalid(format!("override `{assignment}` is not `key=value`"))
        })?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "task.generator" => self.generator = parse(key, value)?,
            "task.input_dim" => self.input_dim = parse(key, value)?,
            "task.n_train" => self.n_train = parse(key, value)?,
            "task.n_val" => self.n_val = parse(key, value)?,
            "task.n_test" => self.n_test = parse(key, value)?,
            "task.noise_std" => self.noise_std = parse(key, value)?,
            "task.y_min" => self.y_min = parse(key, value)?,
            "task.y_max" => self.y_max = parse(key, value)?,
            "task.seed" => self.task_seed = parse(key, value)?,
            "task.test_shift" => self.test_shift = parse(key, value)?,
            "model.hidden" => self.hidden = parse_list(key, value)?,
            "model.activation" => {
                self.activation = Activation::from_name(value)
                    .ok_or_else(|| ExperimentError::value(key, value, "expected relu or tanh"))?
            }
            "layout.bins" => self.bins = parse(key, value)?,
            "layout.heads" => self.heads = parse(key, value)?,
            "layout.distribution" => self.distribution = parse(key, value)?,
            "layout.normal_mean" => self.normal_mean = parse(key, value)?,
            "layout.normal_std" => self.normal_std = parse(key, value)?,
            "layout.epsilon" => self.epsilon = parse(key, value)?,
            "induced.kind" => self.induced = parse(key, value)?,
            "induced.width" => self.induced_width = parse(key, value)?,
            "induced.k" => self.induced_k = parse(key, value)?,
            "loss.mode" => self.mode = parse(key, value)?,
            "loss.alpha_hl" => self.alpha_hl = parse(key, value)?,
            "loss.alpha_dl" => self.alpha_dl = parse(key, value)?,
            "loss.smooth_beta" => self.smooth_beta = parse(key, value)?,
            "schedule.start_hl" => self.schedule_start.0 = parse(key, value)?,
            "schedule.start_dl" => self.schedule_start.1 = parse(key, value)?,
            "schedule.end_hl" => self.schedule_end.0 = parse(key, value)?,
            "schedule.end_dl" => self.schedule_end.1 = parse(key, value)?,
            "schedule.epochs" => self.schedule_epochs = parse(key, value)?,
            "train.optimizer" => self.optimizer = parse(key, value)?,
            "train.lr" => self.lr = parse(key, value)?,
            "train.batch_size" => self.batch_size = parse(key, value)?,
            "train.epochs" => self.epochs = parse(key, value)?,
            "train.patience" => self.patience = parse(key, value)?,
            "train.clip_norm" => self.clip_norm = parse(key, value)?,
            "train.adam_beta1" => self.adam.0 = parse(key, value)?,
            "train.adam_beta2" => self.adam.1 = parse(key, value)?,
            "train.adam_eps" => self.adam.2 = parse(key, value)?,
            "train.seed" => self.train_seed = parse(key, value)?,
            "calibrate.holdout" => self.holdout = parse(key, value)?,
            "calibrate.grid_points" => self.grid_points = parse(key, value)?,
            "grid.seeds" => self.grid.seeds = parse(key, value)?,
            "grid.modes" => self.grid.modes = parse_list(key, value)?,
            "grid.bins" => self.grid.bins = parse_list(key, value)?,
            "grid.heads" => self.grid.heads = parse_list(key, value)?,
            "grid.distributions" => self.grid.distributions = parse_list(key, value)?,
            "grid.induced" => self.grid.induced = parse_list(key, value)?,
            "grid.parallel" => self.grid.parallel = parse_bool(key, value)?,
            "output.dir" => self.output_dir = PathBuf::from(value),
            _ => return Err(ExperimentError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Every key and its value, in schema order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let g = &self.grid;
        vec![
            ("task.generator", self.generator.to_string()),
            ("task.input_dim", self.input_dim.to_string()),
            ("task.n_train", self.n_train.to_string()),
            ("task.n_val", self.n_val.to_string()),
            ("task.n_test", self.n_test.to_string()),
            ("task.noise_std", self.noise_std.to_string()),
            ("task.y_min", self.y_min.to_string()),
            ("task.y_max", self.y_max.to_string()),
            ("task.seed", self.task_seed.to_string()),
            ("task.test_shift", self.test_shift.to_string()),
            ("model.hidden", join(&self.hidden)),
            ("model.activation", self.activation.name().to_string()),
            ("layout.bins", self.bins.to_string()),
            ("layout.heads", self.heads.to_string()),
            ("layout.distribution", self.distribution.to_string()),
            ("layout.normal_mean", self.normal_mean.to_string()),
            ("layout.normal_std", self.normal_std.to_string()),
            ("layout.epsilon", self.epsilon.to_string()),
            ("induced.kind", self.induced.to_string()),
            ("induced.width", self.induced_width.to_string()),
            ("induced.k", self.induced_k.to_string()),
            ("loss.mode", self.mode.to_string()),
            ("loss.alpha_hl", self.alpha_hl.to_string()),
            ("loss.alpha_dl", self.alpha_dl.to_string()),
            ("loss.smooth_beta", self.smooth_beta.to_string()),
            ("schedule.start_hl", self.schedule_start.0.to_string()),
            ("schedule.start_dl", self.schedule_start.1.to_string()),
            ("schedule.end_hl", self.schedule_end.0.to_string()),
            ("schedule.end_dl", self.schedule_end.1.to_string()),
            ("schedule.epochs", self.schedule_epochs.to_string()),
            ("train.optimizer", self.optimizer.to_string()),
            ("train.lr", self.lr.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.epochs", self.epochs.to_string()),
            ("train.patience", self.patience.to_string()),
            ("train.clip_norm", self.clip_norm.to_string()),
            ("train.adam_beta1", self.adam.0.to_string()),
            ("train.adam_beta2", self.adam.1.to_string()),
            ("train.adam_eps", self.adam.2.to_string()),
            ("train.seed", self.train_seed.to_string()),
            ("calibrate.holdout", self.holdout.to_string()),
            ("calibrate.grid_points", self.grid_points.to_string()),
            ("grid.seeds", g.seeds.to_string()),
            ("grid.modes", join(&g.modes)),
            ("grid.bins", join(&g.bins)),
            ("grid.heads", join(&g.heads)),
            ("grid.distributions", join(&g.distributions)),
            ("grid.induced", join(&g.induced)),
            ("grid.parallel", g.parallel.to_string()),
            ("output.dir", self.output_dir.display().to_string()),
        ]
    }

    /// Config text that parses back to `self`.
    pub fn to_text(&self) -> String {
        self.pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// SHA-256 over the keys that define a single run (grid axes and the
    /// output directory excluded), as lowercase hex.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.pairs() {
            if k.starts_with("grid.") || k == "output.dir" {
                continue;
            }
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Seed for seed index `index` of this run: the first 8 bytes of
    /// SHA-256(fingerprint, index). `train.seed` enters through the fingerprint.
    pub fn cell_seed(&self, index: usize) -> u64 {
        let mut h = Sha256::new();
        h.update(self.fingerprint().as_bytes());
        h.update((index as u64).to_le_bytes());
        let digest = h.finalize();
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(bytes)
    }

    pub fn range(&self) -> Result<TargetRange> {
        TargetRange::new(self.y_min, self.y_max).map_err(ExperimentError::from)
    }

    /// The task for seed index `index`; the data seed is `task.seed + index`.
    pub fn task(&self, index: usize) -> Result<SyntheticTask> {
        Ok(SyntheticTask {
            generator: self.generator,
            input_dim: self.input_dim,
            n_train: self.n_train,
            n_val: self.n_val,
            n_test: self.n_test,
            noise_std: self.noise_std,
            range: self.range()?,
            seed: self.task_seed.wrapping_add(index as u64),
            test_shift: self.test_shift,
        })
    }

    pub fn bin_distribution(&self) -> BinDistribution {
        match self.distribution {
            LayoutKind::Uniform => BinDistribution::Uniform,
            LayoutKind::Normal => BinDistribution::Normal {
                mean: self.normal_mean,
                std: self.normal_std,
            },
        }
    }

    pub fn layouts(&self) -> Result<MultiLayout> {
        let base = build_bin_layout(self.range()?, self.bins, &self.bin_distribution(), self.epsilon)?;
        Ok(build_multi_layout(base, self.heads)?)
    }

    pub fn induced_distribution(&self) -> InducedDistribution {
        match self.induced {
            InducedKind::Normal => InducedDistribution::Normal { width_multiple: self.induced_width },
            InducedKind::Laplace => InducedDistribution::Laplace { width_multiple: self.induced_width },
            InducedKind::Categorical => InducedDistribution::Categorical,
            InducedKind::KCategorical => InducedDistribution::KCategorical { k: self.induced_k },
        }
    }

    pub fn loss_setup(&self) -> Result<LossSetup> {
        let mode = match self.mode {
            GridMode::L1 => LossMode::L1,
            GridMode::L2 => LossMode::L2,
            GridMode::SmoothL1 => LossMode::SmoothL1 { beta: self.smooth_beta },
            GridMode::HlOnly => LossMode::HistogramOnly,
            GridMode::DlOnly => LossMode::DistanceOnly,
            GridMode::Dmoe | GridMode::DmoeScheduled => LossMode::Dmoe,
        };
        let mut config = LossConfig::new(self.alpha_hl, self.alpha_dl)?;
        if self.mode == GridMode::DmoeScheduled {
            config = config.with_schedule(CoefficientSchedule {
                start: self.schedule_start,
                end: self.schedule_end,
                duration_epochs: self.schedule_epochs,
            })?;
        }
        Ok(LossSetup {
            mode,
            config,
            induced: self.induced_distribution(),
        })
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            optimizer: match self.optimizer {
                OptimizerName::Adam => OptimizerKind::Adam {
                    beta1: self.adam.0,
                    beta2: self.adam.1,
                    eps: self.adam.2,
                },
                OptimizerName::Sgd => OptimizerKind::Sgd,
            },
            learning_rate: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.epochs,
            patience: (self.patience > 0).then_some(self.patience),
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            seed,
        }
    }

    pub fn scalar_loss(&self) -> Option<ScalarLoss> {
        match self.mode {
            GridMode::L1 => Some(ScalarLoss::L1),
            GridMode::L2 => Some(ScalarLoss::L2),
            GridMode::SmoothL1 => Some(ScalarLoss::SmoothL1 { beta: self.smooth_beta }),
            _ => None,
        }
    }

    /// Checks everything that can be checked without running.
    pub fn validate(&self) -> Result<()> {
        self.task(0)?.validate()?;
        if self.mode.is_histogram() {
            self.layouts()?;
        }
        if self.induced == InducedKind::KCategorical && !(1..=self.bins).contains(&self.induced_k) {
            return Err(ExperimentError::Invalid(format!(
                "induced.k must lie in 1..={}, got {}",
                self.bins, self.induced_k
            )));
        }
        if matches!(self.induced, InducedKind::Normal | InducedKind::Laplace)
            && !(self.induced_width > 0.0 && self.induced_width.is_finite())
        {
            return Err(ExperimentError::Invalid("induced.width must be > 0".into()));
        }
        if self.mode == GridMode::SmoothL1 && !(self.smooth_beta > 0.0) {
            return Err(ExperimentError::Invalid("loss.smooth_beta must be > 0".into()));
        }
        if self.hidden.contains(&0) {
            return Err(ExperimentError::Invalid("model.hidden widths must be positive".into()));
        }
        if !(self.holdout > 0.0 && self.holdout < 1.0) {
            return Err(ExperimentError::Invalid("calibrate.holdout must lie in (0, 1)".into()));
        }
        if self.grid_points < 2 {
            return Err(ExperimentError::Invalid("calibrate.grid_points must be >= 2".into()));
        }
        if self.grid.seeds == 0 {
            return Err(ExperimentError::Invalid("grid.seeds must be >= 1".into()));
        }
        self.loss_setup()?.config.validate()?;
        self.train_config(0).validate()?;
        Ok(())
    }

    /// Expands the grid axes into single-run configs, in axis order
    /// (mode, distribution, bins, heads, induced).
    pub fn expand_grid(&self) -> Vec<ExperimentConfig> {
        fn axis<T: Clone>(values: &[T], fallback: T) -> Vec<T> {
            if values.is_empty() {
                vec![fallback]
            } else {
                values.to_vec()
            }
        }
        let mut out = Vec::new();
        for mode in axis(&self.grid.modes, self.mode) {
            for dist in axis(&self.grid.distributions, self.distribution) {
                for bins in axis(&self.grid.bins, self.bins) {
                    for heads in axis(&self.grid.heads, self.heads) {
                        for induced in axis(&self.grid.induced, self.induced) {
                            out.push(ExperimentConfig {
                                mode,
                                distribution: dist,
                                bins,
                                heads,
                                induced,
                                ..self.clone()
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| ExperimentError::value(key, value, e.to_string()))
}

/// Comma-separated list; the empty string is the empty list.
fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(ExperimentError::value(key, value, "expected true or false")),
    }
}

fn join<T: Display>(values: &[T]) -> String {
    values.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("grid.modes", "l1,dmoe").unwrap();
        cfg.set("model.hidden", "").unwrap();
        cfg.set("layout.distribution", "normal").unwrap();
        let back = ExperimentConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.fingerprint(), cfg.fingerprint());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_errors() {
        assert!(matches!(
            ExperimentConfig::parse("train.learning_rate = 0.1"),
            Err(ExperimentError::UnknownKey(_))
        ));
        assert!(matches!(
            ExperimentConfig::parse("layout.bins = many"),
            Err(ExperimentError::InvalidValue { .. })
        ));
        assert!(matches!(
            ExperimentConfig::parse("# fine\nno equals sign"),
            Err(ExperimentError::ConfigSyntax { line: 2, .. })
        ));
    }

    #[test]
    fn fingerprint_ignores_grid_and_output() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.set("grid.seeds", "9").unwrap();
        b.set("output.dir", "/tmp/x").unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.set("layout.bins", "32").unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.cell_seed(0), a.cell_seed(1));
        assert_eq!(a.cell_seed(3), a.clone().cell_seed(3));
    }

    #[test]
    fn grid_expansion_order() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("grid.modes", "hl_only,dmoe").unwrap();
        cfg.set("grid.bins", "16,32").unwrap();
        let cells = cfg.expand_grid();
        let keys: Vec<_> = cells.iter().map(|c| (c.mode, c.bins)).collect();
        assert_eq!(
            keys,
            vec![
                (GridMode::HlOnly, 16),
                (GridMode::HlOnly, 32),
                (GridMode::Dmoe, 16),
                (GridMode::Dmoe, 32)
            ]
        );
    }

    #[test]
    fn validation() {
        assert!(ExperimentConfig::default().validate().is_ok());
        let mut cfg = ExperimentConfig::default();
        cfg.set("task.y_max", "-1").unwrap();
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.set("layout.bins", "1").unwrap();
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.set("train.lr", "-1").unwrap();
        assert!(cfg.validate().is_err());
    }
}
