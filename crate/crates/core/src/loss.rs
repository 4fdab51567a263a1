//! Histogram loss, distance loss and the combined DMoE loss.

use crate::error::{DmoeError, Result};
use crate::hist_targets::{expected_value, BinLayout, MultiLayout, TargetHistogram};

/// Floor applied to predicted probabilities inside `log`.
pub const LOG_CLAMP: f64 = 1e-12;

/// Linear interpolation of both coefficients from `start` to `end` over
/// `duration_epochs`, held at `end` afterwards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoefficientSchedule {
    pub start: (f64, f64),
    pub end: (f64, f64),
    pub duration_epochs: usize,
}

impl CoefficientSchedule {
    /// 0.9/0.1 to 0.05/0.95 over 20 epochs.
    pub fn reference() -> Self {
        Self {
            start: (0.9, 0.1),
            end: (0.05, 0.95),
            duration_epochs: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub alpha_hl: f64,
    pub alpha_dl: f64,
    pub schedule: Option<CoefficientSchedule>,
    pub head_weights: Option<Vec<f64>>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha_hl: 1.0,
            alpha_dl: 1.0,
            schedule: None,
            head_weights: None,
        }
    }
}

fn check_alphas(hl: f64, dl: f64, what: &str) -> Result<()> {
    if !(hl >= 0.0 && dl >= 0.0 && hl.is_finite() && dl.is_finite()) || hl + dl <= 0.0 {
        return Err(DmoeError::invalid(format!(
            "{what}: coefficients must be >= 0 with positive sum, got ({hl}, {dl})"
        )));
    }
    Ok(())
}

impl LossConfig {
    pub fn new(alpha_hl: f64, alpha_dl: f64) -> Result<Self> {
        let cfg = Self {
            alpha_hl,
            alpha_dl,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_schedule(mut self, schedule: CoefficientSchedule) -> Result<Self> {
        self.schedule = Some(schedule);
        self.validate()?;
        Ok(self)
    }

    pub fn with_head_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        self.head_weights = Some(weights);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        check_alphas(self.alpha_hl, self.alpha_dl, "loss coefficients")?;
        if let Some(s) = &self.schedule {
            check_alphas(s.start.0, s.start.1, "schedule start")?;
            check_alphas(s.end.0, s.end.1, "schedule end")?;
            if s.duration_epochs == 0 {
                return Err(DmoeError::invalid("schedule duration must be >= 1 epoch"));
            }
        }
        if let Some(w) = &self.head_weights {
            if w.is_empty() || w.iter().any(|v| !(*v >= 0.0)) {
                return Err(DmoeError::invalid("head weights must be nonnegative"));
            }
            let total: f64 = w.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(DmoeError::invalid(format!(
                    "head weights must sum to 1, got {total}"
                )));
            }
        }
        Ok(())
    }

    /// Per-head weights for `n_heads` heads (uniform unless configured).
    pub fn weights(&self, n_heads: usize) -> Result<Vec<f64>> {
        match &self.head_weights {
            Some(w) if w.len() != n_heads => Err(DmoeError::invalid(format!(
                "{} head weights configured for {n_heads} heads",
                w.len()
            ))),
            Some(w) => Ok(w.clone()),
            None => Ok(vec![1.0 / n_heads as f64; n_heads]),
        }
    }

    /// Same weights and schedule, coefficients replaced.
    pub fn with_alphas(&self, alpha_hl: f64, alpha_dl: f64) -> Self {
        Self {
            alpha_hl,
            alpha_dl,
            ..self.clone()
        }
    }
}

/// Coefficients in effect at `epoch`.
pub fn schedule_coefficients(epoch: usize, cfg: &LossConfig) -> (f64, f64) {
    let Some(s) = cfg.schedule else {
        return (cfg.alpha_hl, cfg.alpha_dl);
    };
    if epoch >= s.duration_epochs {
        return s.end;
    }
    let t = epoch as f64 / s.duration_epochs as f64;
    (
        (1.0 - t) * s.start.0 + t * s.end.0,
        (1.0 - t) * s.start.1 + t * s.end.1,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub hl: f64,
    pub dl: f64,
    pub total: f64,
    pub per_head: Vec<(f64, f64)>,
}

/// Cross entropy `-Σ target_i log(pred_i)`.
pub fn histogram_loss(pred: &[f64], target: &TargetHistogram) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(DmoeError::invalid(format!(
            "prediction has {} bins, target has {}",
            pred.len(),
            target.len()
        )));
    }
    Ok(cross_entropy(pred, &target.probs))
}

pub(crate) fn cross_entropy(pred: &[f64], target: &[f64]) -> f64 {
    let ce: f64 = target
        .iter()
        .zip(pred)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, p)| -t * p.max(LOG_CLAMP).ln())
        .sum();
    // -1 * ln(1) is -0.0
    ce + 0.0
}

/// `|y - E[pred]|`.
pub fn distance_loss(pred: &[f64], layout: &BinLayout, y: f64) -> Result<f64> {
    Ok((y - expected_value(pred, layout)?).abs())
}

/// Weighted mean over heads of the histogram and distance losses, combined
/// with the configured static coefficients.
pub fn dmoe_loss(
    preds: &[Vec<f64>],
    targets: &[TargetHistogram],
    layouts: &MultiLayout,
    y: f64,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let m = layouts.n_heads();
    if preds.len() != m || targets.len() != m {
        return Err(DmoeError::invalid(format!(
            "{} predictions and {} targets for {m} heads",
            preds.len(),
            targets.len()
        )));
    }
    let weights = cfg.weights(m)?;
    let per_head = (0..m)
        .map(|h| {
            Ok((
                histogram_loss(&preds[h], &targets[h])?,
                distance_loss(&preds[h], layouts.layout(h), y)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(combine_heads(per_head, &weights, cfg))
}

pub(crate) fn combine_heads(per_head: Vec<(f64, f64)>, weights: &[f64], cfg: &LossConfig) -> LossBreakdown {
    let (mut hl, mut dl) = (0.0, 0.0);
    for (&(head_hl, head_dl), w) in per_head.iter().zip(weights) {
        hl += w * head_hl;
        dl += w * head_dl;
    }
    LossBreakdown {
        hl,
        dl,
        total: cfg.alpha_hl * hl + cfg.alpha_dl * dl,
        per_head,
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of `α_HL·HL + α_DL·DL` for one head with respect to its logits:
/// `α_HL (f - p) + α_DL sign(E - y) f ⊙ (c - E)`.
pub fn loss_grad_logits(
    logits: &[f64],
    target: &TargetHistogram,
    layout: &BinLayout,
    y: f64,
    cfg: &LossConfig,
) -> Result<Vec<f64>> {
    let n = layout.n_bins();
    if logits.len() != n || target.len() != n {
        return Err(DmoeError::invalid(format!(
            "{} logits and {} target bins for a {n}-bin layout",
            logits.len(),
            target.len()
        )));
    }
    let f = softmax(logits);
    let mut grad = vec![0.0; n];
    grad_from_probs(&f, &target.probs, layout.centers(), y, cfg.alpha_hl, cfg.alpha_dl, &mut grad);
    Ok(grad)
}

/// Writes the per-head logit gradient into `out`, given softmax outputs `f`.
pub(crate) fn grad_from_probs(
    f: &[f64],
    target: &[f64],
    centers: &[f64],
    y: f64,
    alpha_hl: f64,
    alpha_dl: f64,
    out: &mut [f64],
) {
    let e: f64 = f.iter().zip(centers).map(|(p, c)| p * c).sum();
    let s = alpha_dl * sign(e - y);
    for i in 0..f.len() {
        out[i] = alpha_hl * (f[i] - target[i]) + s * f[i] * (centers[i] - e);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hist_targets::{
        build_bin_layout, build_multi_layout, induce_target, BinDistribution,
        InducedDistribution, TargetRange,
    };

    fn uniform(n: usize, lo: f64, hi: f64) -> BinLayout {
        build_bin_layout(
            TargetRange::new(lo, hi).unwrap(),
            n,
            &BinDistribution::Uniform,
            1e-6,
        )
        .unwrap()
    }

    fn hist(p: &[f64]) -> TargetHistogram {
        TargetHistogram { probs: p.to_vec() }
    }

    #[test]
    fn histogram_loss_examples() {
        let one_hot = hist(&[0.0, 1.0, 0.0]);
        assert_eq!(histogram_loss(&[0.0, 1.0, 0.0], &one_hot).unwrap(), 0.0);
        let n = 7;
        let mut t = vec![0.0; n];
        t[2] = 1.0;
        let v = histogram_loss(&vec![1.0 / n as f64; n], &hist(&t)).unwrap();
        assert!((v - (n as f64).ln()).abs() < 1e-12);
        let v = histogram_loss(&[0.9, 0.1], &hist(&[0.5, 0.5])).unwrap();
        let want = -0.5 * (0.9f64.ln() + 0.1f64.ln());
        assert!((v - want).abs() < 1e-15);
        assert!((v - 1.2040).abs() < 1e-4);
        assert!(histogram_loss(&[0.5, 0.5], &hist(&[1.0])).is_err());
    }

    #[test]
    fn zero_prediction_is_clamped() {
        let v = histogram_loss(&[0.0, 1.0], &hist(&[1.0, 0.0])).unwrap();
        assert!((v - (-LOG_CLAMP.ln())).abs() < 1e-9);
        assert!(v.is_finite());
    }

    #[test]
    fn distance_loss_examples() {
        let layout = uniform(10, 0.0, 1.0);
        let mut p = vec![0.0; 10];
        p[3] = 1.0;
        assert!(distance_loss(&p, &layout, layout.centers()[3]).unwrap() < 1e-15);

        let sym = uniform(8, -1.0, 1.0);
        let v = distance_loss(&[0.125; 8], &sym, 0.3).unwrap();
        assert!((v - 0.3).abs() < 1e-15);

        let two = BinLayout::from_endpoints(TargetRange::new(0.0, 1.0).unwrap(), vec![0.0, 0.5, 1.0], 1e-6)
            .unwrap();
        assert_eq!(distance_loss(&[0.25, 0.75], &two, 0.5).unwrap(), 0.125);
    }

    #[test]
    fn dmoe_loss_single_head_reduces_to_components() {
        let layouts = MultiLayout::single(uniform(6, 0.0, 1.0));
        let pred = softmax(&[0.1, -0.3, 0.7, 0.2, 0.0, -1.0]);
        let t = induce_target(0.4, layouts.layout(0), &InducedDistribution::default()).unwrap();
        let cfg = LossConfig::new(0.3, 0.7).unwrap();
        let b = dmoe_loss(std::slice::from_ref(&pred), std::slice::from_ref(&t), &layouts, 0.4, &cfg).unwrap();
        let hl = histogram_loss(&pred, &t).unwrap();
        let dl = distance_loss(&pred, layouts.layout(0), 0.4).unwrap();
        assert_eq!(b.total, 0.3 * hl + 0.7 * dl);
        assert_eq!(b.per_head, vec![(hl, dl)]);
    }

    #[test]
    fn dmoe_loss_perfect_prediction_is_zero() {
        let layouts = build_multi_layout(uniform(10, 0.0, 1.0), 2).unwrap();
        let y = 0.5;
        let targets: Vec<_> = layouts
            .layouts()
            .iter()
            .map(|l| induce_target(y, l, &InducedDistribution::Categorical).unwrap())
            .collect();
        let preds: Vec<_> = targets.iter().map(|t| t.probs.clone()).collect();
        let cfg = LossConfig::new(1.0, 0.0).unwrap();
        let b = dmoe_loss(&preds, &targets, &layouts, y, &cfg).unwrap();
        assert_eq!(b.total, 0.0);
    }

    #[test]
    fn dmoe_loss_two_head_weighted_mean() {
        // arithmetic oracle: hl mean 2.0, dl mean 0.3, total 0.5*2.0 + 0.5*0.3
        let cfg = LossConfig::new(0.5, 0.5).unwrap();
        let b = combine_heads(vec![(1.0, 0.2), (3.0, 0.4)], &[0.5, 0.5], &cfg);
        assert!((b.hl - 2.0).abs() < 1e-15);
        assert!((b.dl - 0.3).abs() < 1e-15);
        assert!((b.total - 1.15).abs() < 1e-15);

        let layouts = build_multi_layout(uniform(2, 0.0, 1.0), 2).unwrap();
        let targets = vec![hist(&[1.0, 0.0]), hist(&[1.0, 0.0])];
        let preds = vec![
            vec![(-1.0f64).exp(), 1.0 - (-1.0f64).exp()],
            vec![(-3.0f64).exp(), 1.0 - (-3.0f64).exp()],
        ];
        let b = dmoe_loss(&preds, &targets, &layouts, 0.3, &cfg).unwrap();
        assert!((b.per_head[0].0 - 1.0).abs() < 1e-12);
        assert!((b.per_head[1].0 - 3.0).abs() < 1e-12);
        assert!((b.hl - 2.0).abs() < 1e-12);
        assert!((b.total - (0.5 * b.hl + 0.5 * b.dl)).abs() < 1e-12);
        assert!(dmoe_loss(&preds[..1], &targets, &layouts, 0.3, &cfg).is_err());
    }

    #[test]
    fn permutation_invariance_with_uniform_weights() {
        let cfg = LossConfig::new(0.7, 0.3).unwrap();
        let heads = vec![(0.4, 0.01), (1.7, 0.2), (2.2, 0.05), (0.9, 0.3)];
        let w = [0.25; 4];
        let a = combine_heads(heads.clone(), &w, &cfg);
        let mut rev = heads;
        rev.reverse();
        let b = combine_heads(rev, &w, &cfg);
        assert!((a.total - b.total).abs() < 1e-12);
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let cfg = LossConfig::default()
            .with_schedule(CoefficientSchedule::reference())
            .unwrap();
        assert_eq!(schedule_coefficients(0, &cfg), (0.9, 0.1));
        assert_eq!(schedule_coefficients(20, &cfg), (0.05, 0.95));
        assert_eq!(schedule_coefficients(500, &cfg), (0.05, 0.95));
        let (a, b) = schedule_coefficients(10, &cfg);
        assert!((a - 0.475).abs() < 1e-15 && (b - 0.525).abs() < 1e-15);
        let plain = LossConfig::new(0.2, 0.8).unwrap();
        assert_eq!(schedule_coefficients(3, &plain), (0.2, 0.8));
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::new(0.0, 0.0).is_err());
        assert!(LossConfig::new(-1.0, 2.0).is_err());
        assert!(LossConfig::default().with_head_weights(vec![0.5, 0.4]).is_err());
        let cfg = LossConfig::default().with_head_weights(vec![0.25, 0.75]).unwrap();
        assert!(cfg.weights(3).is_err());
        assert_eq!(cfg.weights(2).unwrap(), vec![0.25, 0.75]);
        let bad = CoefficientSchedule {
            duration_epochs: 0,
            ..CoefficientSchedule::reference()
        };
        assert!(LossConfig::default().with_schedule(bad).is_err());
    }

    #[test]
    fn gradient_at_stationary_point_is_zero() {
        let layout = uniform(5, 0.0, 1.0);
        let logits = [0.3, -0.2, 0.8, 0.1, -0.5];
        let f = softmax(&logits);
        let y = expected_value(&f, &layout).unwrap();
        let g = loss_grad_logits(&logits, &hist(&f), &layout, y, &LossConfig::default()).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15), "{g:?}");
    }

    #[test]
    fn cross_entropy_gradient_is_f_minus_p() {
        let layout = uniform(4, 0.0, 1.0);
        let logits = [1.0, 2.0, -1.0, 0.5];
        let t = hist(&[0.1, 0.2, 0.3, 0.4]);
        let g = loss_grad_logits(&logits, &t, &layout, 0.9, &LossConfig::new(1.0, 0.0).unwrap())
            .unwrap();
        let f = softmax(&logits);
        for i in 0..4 {
            assert!((g[i] - (f[i] - t.probs[i])).abs() < 1e-15);
        }
    }
}
