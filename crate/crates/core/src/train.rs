//! Deterministic mini-batch training loop with SGD/Adam, global-norm
//! gradient clipping and early stopping on validation MAE.

use std::io::Write;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DmoeError, Result};
use crate::hist_targets::{induce_target, InducedDistribution, MultiLayout};
use crate::loss::{schedule_coefficients, LossConfig};
use crate::metrics::compute_metrics;
use crate::model::{BatchLoss, Model, Objective, ScalarLoss};

/// A feature matrix with one row per sample and matching scalar targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn new(x: Array2<f64>, y: Vec<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(DmoeError::invalid(format!(
                "{} feature rows for {} targets",
                x.nrows(),
                y.len()
            )));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select(Axis(0), rows),
            y: rows.iter().map(|&i| self.y[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without a new best validation MAE.
    pub patience: Option<usize>,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::adam(),
            learning_rate: 1e-3,
            batch_size: 64,
            max_epochs: 100,
            patience: None,
            clip_norm: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(DmoeError::invalid("learning rate must be finite and >= 0"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(DmoeError::invalid("batch size and max epochs must be positive"));
        }
        if matches!(self.patience, Some(0)) {
            return Err(DmoeError::invalid("patience must be positive"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(DmoeError::invalid("clip norm must be positive"));
            }
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(DmoeError::invalid("Adam needs beta1, beta2 in [0, 1) and eps > 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossMode {
    L1,
    L2,
    SmoothL1 { beta: f64 },
    HistogramOnly,
    DistanceOnly,
    Dmoe,
}

impl LossMode {
    pub fn is_histogram(self) -> bool {
        matches!(
            self,
            LossMode::HistogramOnly | LossMode::DistanceOnly | LossMode::Dmoe
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            LossMode::L1 => "l1",
            LossMode::L2 => "l2",
            LossMode::SmoothL1 { .. } => "smooth_l1",
            LossMode::HistogramOnly => "hl_only",
            LossMode::DistanceOnly => "dl_only",
            LossMode::Dmoe => "dmoe",
        }
    }

    /// Coefficients in effect at `epoch` (zero for scalar modes).
    pub fn alphas(self, epoch: usize, cfg: &LossConfig) -> (f64, f64) {
        match self {
            LossMode::HistogramOnly => (1.0, 0.0),
            LossMode::DistanceOnly => (0.0, 1.0),
            LossMode::Dmoe => schedule_coefficients(epoch, cfg),
            _ => (0.0, 0.0),
        }
    }

    pub fn objective(self, epoch: usize, cfg: &LossConfig) -> Objective {
        match self {
            LossMode::L1 => Objective::Scalar(ScalarLoss::L1),
            LossMode::L2 => Objective::Scalar(ScalarLoss::L2),
            LossMode::SmoothL1 { beta } => Objective::Scalar(ScalarLoss::SmoothL1 { beta }),
            _ => {
                let (a, b) = self.alphas(epoch, cfg);
                Objective::Histogram(cfg.with_alphas(a, b))
            }
        }
    }
}

/// What the model is trained against.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSetup {
    pub mode: LossMode,
    pub config: LossConfig,
    pub induced: InducedDistribution,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub split: Split,
    pub loss_total: f64,
    pub loss_hl: f64,
    pub loss_dl: f64,
    pub mae: f64,
    pub ewt: f64,
    pub alpha_hl: f64,
    pub alpha_dl: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    pub fn val_rows(&self) -> impl Iterator<Item = &LogRow> {
        self.rows.iter().filter(|r| r.split == Split::Val)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation MAE.
    pub model: Model,
    pub log: TrainingLog,
    pub best_epoch: usize,
    pub best_val_mae: f64,
}

/// Concatenated per-head target histograms, one row per sample (`n × M·N`).
pub fn build_targets(
    y: &[f64],
    layouts: &MultiLayout,
    induced: &InducedDistribution,
) -> Result<Array2<f64>> {
    let (m, n) = (layouts.n_heads(), layouts.n_bins());
    let mut out = Array2::zeros((y.len(), m * n));
    for (i, &yi) in y.iter().enumerate() {
        let mut row = out.row_mut(i);
        let row = row.as_slice_mut().expect("standard layout");
        for (h, layout) in layouts.layouts().iter().enumerate() {
            let t = induce_target(yi, layout, induced)?;
            row[h * n..(h + 1) * n].copy_from_slice(&t.probs);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: BatchLoss,
    pub predictions: Vec<f64>,
    pub mae: f64,
    pub ewt: f64,
}

const EVAL_CHUNK: usize = 1024;

/// Mean loss, predictions, MAE and EwT over a whole dataset.
pub fn evaluate(
    model: &Model,
    data: &Dataset,
    targets: Option<ArrayView2<f64>>,
    objective: &Objective,
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(DmoeError::invalid("cannot evaluate on an empty dataset"));
    }
    let n = data.len();
    let mut loss = BatchLoss::default();
    let mut predictions = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let x = data.x.slice(ndarray::s![start..end, ..]);
        let cache = model.forward_batch(x)?;
        let t = targets.map(|t| t.slice_move(ndarray::s![start..end, ..]));
        let (chunk_loss, _) =
            model.loss_and_logit_grads(&cache, &data.y[start..end], t, objective)?;
        let frac = (end - start) as f64 / n as f64;
        loss.total += chunk_loss.total * frac;
        loss.hl += chunk_loss.hl * frac;
        loss.dl += chunk_loss.dl * frac;
        predictions.extend(model.predictions(&cache));
        start = end;
    }
    let acc = compute_metrics(&predictions, &data.y, model.target_range())?;
    Ok(Evaluation {
        loss,
        predictions,
        mae: acc.mae,
        ewt: acc.ewt,
    })
}

/// Scales `grads` in place so that its Euclidean norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n_params: usize) -> Self {
        let state = matches!(kind, OptimizerKind::Adam { .. });
        Self {
            kind,
            lr,
            m: if state { vec![0.0; n_params] } else { Vec::new() },
            v: if state { vec![0.0; n_params] } else { Vec::new() },
            step: 0,
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &[f64]) {
        self.step += 1;
        let lr = self.lr;
        let mut offset = 0;
        match self.kind {
            OptimizerKind::Sgd => model.for_each_param_mut(|chunk| {
                for (p, g) in chunk.iter_mut().zip(&grads[offset..]) {
                    *p -= lr * g;
                }
                offset += chunk.len();
            }),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let bc1 = 1.0 - beta1.powi(self.step);
                let bc2 = 1.0 - beta2.powi(self.step);
                let (m, v) = (&mut self.m, &mut self.v);
                model.for_each_param_mut(|chunk| {
                    for (j, p) in chunk.iter_mut().enumerate() {
                        let k = offset + j;
                        let g = grads[k];
                        m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                        v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                        let m_hat = m[k] / bc1;
                        let v_hat = v[k] / bc2;
                        *p -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                    offset += chunk.len();
                });
            }
        }
    }
}

/// Trains `model` on `train`, evaluating on `val` after every epoch.
///
/// One train row (means over the epoch's mini-batches, computed before each
/// update) and one validation row are logged per epoch.
pub fn train(
    mut model: Model,
    train: &Dataset,
    val: &Dataset,
    setup: &LossSetup,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    setup.config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(DmoeError::invalid("train and validation sets must be nonempty"));
    }
    let range = model.target_range();
    for &y in train.y.iter().chain(&val.y) {
        range.check(y)?;
    }
    if setup.mode.is_histogram() != model.layouts().is_some() {
        return Err(DmoeError::invalid(format!(
            "loss mode `{}` does not match the model's output head",
            setup.mode.name()
        )));
    }

    let (train_targets, val_targets) = match model.layouts() {
        Some(layouts) => (
            Some(build_targets(&train.y, layouts, &setup.induced)?),
            Some(build_targets(&val.y, layouts, &setup.induced)?),
        ),
        None => (None, None),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, model.param_count());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainingLog::default();
    let mut best = (f64::INFINITY, 0usize, model.clone());
    let mut since_best = 0usize;

    for epoch in 0..cfg.max_epochs {
        let objective = setup.mode.objective(epoch, &setup.config);
        let (alpha_hl, alpha_dl) = setup.mode.alphas(epoch, &setup.config);
        order.shuffle(&mut rng);

        let mut epoch_loss = BatchLoss::default();
        let mut abs_err = 0.0;
        let mut within = 0usize;
        let threshold = crate::metrics::ewt_threshold(range);
        for chunk in order.chunks(cfg.batch_size) {
            let x = train.x.select(Axis(0), chunk);
            let y: Vec<f64> = chunk.iter().map(|&i| train.y[i]).collect();
            let t = train_targets.as_ref().map(|t| t.select(Axis(0), chunk));
            let cache = model.forward_batch(x.view())?;
            let (loss, dlogits) =
                model.loss_and_logit_grads(&cache, &y, t.as_ref().map(|t| t.view()), &objective)?;
            if !loss.total.is_finite() {
                return Err(DmoeError::Divergence {
                    epoch,
                    partial_log: Box::new(log),
                });
            }
            for (p, yi) in model.predictions(&cache).iter().zip(&y) {
                let e = (p - yi).abs();
                abs_err += e;
                if e <= threshold {
                    within += 1;
                }
            }
            let frac = chunk.len() as f64 / train.len() as f64;
            epoch_loss.total += loss.total * frac;
            epoch_loss.hl += loss.hl * frac;
            epoch_loss.dl += loss.dl * frac;

            let mut grads = model.backward_from_logit_grads(&cache, &dlogits);
            if let Some(max_norm) = cfg.clip_norm {
                clip_global_norm(&mut grads, max_norm);
            }
            optimizer.step(&mut model, &grads);
        }
        log.rows.push(LogRow {
            epoch,
            split: Split::Train,
            loss_total: epoch_loss.total,
            loss_hl: epoch_loss.hl,
            loss_dl: epoch_loss.dl,
            mae: abs_err / train.len() as f64,
            ewt: within as f64 / train.len() as f64,
            alpha_hl,
            alpha_dl,
        });

        let eval = evaluate(&model, val, val_targets.as_ref().map(|t| t.view()), &objective)?;
        if !eval.loss.total.is_finite() || !eval.mae.is_finite() {
            return Err(DmoeError::Divergence {
                epoch,
                partial_log: Box::new(log),
            });
        }
        log.rows.push(LogRow {
            epoch,
            split: Split::Val,
            loss_total: eval.loss.total,
            loss_hl: eval.loss.hl,
            loss_dl: eval.loss.dl,
            mae: eval.mae,
            ewt: eval.ewt,
            alpha_hl,
            alpha_dl,
        });

        if eval.mae < best.0 {
            best = (eval.mae, epoch, model.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience.is_some_and(|p| since_best >= p) {
                break;
            }
        }
    }

    let (best_val_mae, best_epoch, model) = best;
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        best_val_mae,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![3.0, 4.0];
        let before = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        let after = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(after <= 1.0 + 1e-12);
        let mut small = vec![0.1, 0.1];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small, vec![0.1, 0.1]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            clip_norm: Some(0.0),
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            optimizer: OptimizerKind::Adam {
                beta1: 1.0,
                beta2: 0.999,
                eps: 1e-8,
            },
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn mode_alphas() {
        let cfg = LossConfig::new(0.3, 0.7).unwrap();
        assert_eq!(LossMode::HistogramOnly.alphas(5, &cfg), (1.0, 0.0));
        assert_eq!(LossMode::DistanceOnly.alphas(5, &cfg), (0.0, 1.0));
        assert_eq!(LossMode::Dmoe.alphas(5, &cfg), (0.3, 0.7));
        assert_eq!(LossMode::L1.alphas(5, &cfg), (0.0, 0.0));
    }
}
