//! Uncertainty scores for predicted histograms and calibration metrics.
//!
//! Scores are in nats: the entropy of a head, the mean entropy over heads, or
//! the maximum KL divergence between any two heads after interpolating all of
//! them onto head 0's bins. Scores become predictive standard deviations
//! through an affine fit on held-out absolute errors; predictive CDFs can then
//! be recalibrated with an isotonic map fitted on the same holdout.

use std::io::Write;

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DmoeError, Result};
use crate::hist_targets::{BinLayout, MultiLayout};
use crate::loss::LOG_CLAMP;
use crate::model::PredictionRecord;
use crate::special::normal_cdf;

/// Floor on predictive standard deviations derived from scores.
pub const MIN_STD: f64 = 1e-6;

/// `-Σ p log p`, with `0 log 0 = 0`.
pub fn entropy_score(probs: &[f64]) -> f64 {
    let h: f64 = probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    h.max(0.0)
}

pub fn mean_entropy(head_probs: ArrayView2<f64>) -> Result<f64> {
    if head_probs.nrows() == 0 {
        return Err(DmoeError::invalid("mean entropy needs at least one head"));
    }
    let total: f64 = head_probs
        .rows()
        .into_iter()
        .map(|row| entropy_score(&row.to_vec()))
        .sum();
    Ok(total / head_probs.nrows() as f64)
}

/// `KL(p ‖ q) = Σ p log(p / q)` with both sides floored at the log clamp.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    let kl: f64 = p
        .iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            let pi = pi.max(LOG_CLAMP);
            pi * (pi / qi.max(LOG_CLAMP)).ln()
        })
        .sum();
    kl.max(0.0)
}

/// Re-expresses a histogram on `reference`'s bins: the source density
/// (mass / width) is linearly interpolated between source bin centers at the
/// reference centers, multiplied by the reference widths, floored and renormalized.
pub fn interp_to_support(probs: &[f64], layout: &BinLayout, reference: &BinLayout) -> Result<Vec<f64>> {
    if probs.len() != layout.n_bins() {
        return Err(DmoeError::invalid(format!(
            "{} probabilities for a {}-bin layout",
            probs.len(),
            layout.n_bins()
        )));
    }
    let (src, dst) = (layout.range(), reference.range());
    if src.y_max() <= dst.y_min() || dst.y_max() <= src.y_min() {
        return Err(DmoeError::invalid("layouts cover disjoint target ranges"));
    }
    if layout == reference {
        return Ok(normalize_floored(probs.to_vec()));
    }
    let centers = layout.centers();
    let density: Vec<f64> = probs
        .iter()
        .zip(layout.widths())
        .map(|(p, w)| p / w)
        .collect();
    let last = centers.len() - 1;
    let out: Vec<f64> = reference
        .centers()
        .iter()
        .zip(reference.widths())
        .map(|(&c, &w)| {
            let d = if c <= centers[0] {
                density[0]
            } else if c >= centers[last] {
                density[last]
            } else {
                let j = centers.partition_point(|&x| x <= c) - 1;
                let t = (c - centers[j]) / (centers[j + 1] - centers[j]);
                density[j] + t * (density[j + 1] - density[j])
            };
            d * w
        })
        .collect();
    Ok(normalize_floored(out))
}

fn normalize_floored(mut v: Vec<f64>) -> Vec<f64> {
    for x in v.iter_mut() {
        *x = x.max(LOG_CLAMP);
    }
    let s: f64 = v.iter().sum();
    for x in v.iter_mut() {
        *x /= s;
    }
    v
}

/// Maximum KL divergence over all ordered pairs of heads, after
/// interpolating every head onto head 0's support.
pub fn max_kl_score(head_probs: ArrayView2<f64>, layouts: &MultiLayout) -> Result<f64> {
    let m = head_probs.nrows();
    if m < 2 {
        return Err(DmoeError::invalid(
            "max-KL score needs at least 2 heads; use the entropy score instead",
        ));
    }
    if m != layouts.n_heads() {
        return Err(DmoeError::invalid(format!(
            "{m} heads of probabilities for {} layouts",
            layouts.n_heads()
        )));
    }
    let reference = layouts.layout(0);
    let interpolated = head_probs
        .rows()
        .into_iter()
        .enumerate()
        .map(|(h, row)| interp_to_support(&row.to_vec(), layouts.layout(h), reference))
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0.0f64;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                best = best.max(kl_divergence(&interpolated[i], &interpolated[j]));
            }
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineFit {
    pub gamma: f64,
    pub delta: f64,
    /// Set when the scores were constant and only the shift could be fitted.
    pub degenerate: bool,
}

impl AffineFit {
    /// `max(γ·score + δ, MIN_STD)`.
    pub fn adjusted(&self, score: f64) -> f64 {
        (self.gamma * score + self.delta).max(MIN_STD)
    }
}

/// Ordinary least squares of `abs_errors ≈ γ·scores + δ`.
pub fn fit_affine(scores: &[f64], abs_errors: &[f64]) -> Result<AffineFit> {
    if scores.len() != abs_errors.len() || scores.len() < 2 {
        return Err(DmoeError::invalid(format!(
            "affine fit needs two equal-length vectors of length >= 2, got {} and {}",
            scores.len(),
            abs_errors.len()
        )));
    }
    let n = scores.len() as f64;
    let mean_s = scores.iter().sum::<f64>() / n;
    let mean_e = abs_errors.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (s, e) in scores.iter().zip(abs_errors) {
        sxx += (s - mean_s) * (s - mean_s);
        sxy += (s - mean_s) * (e - mean_e);
    }
    let scale = scores.iter().map(|s| s.abs()).fold(0.0, f64::max).max(1.0);
    if sxx <= (1e-24 * scale * scale) * n {
        return Ok(AffineFit {
            gamma: 0.0,
            delta: mean_e,
            degenerate: true,
        });
    }
    let gamma = sxy / sxx;
    Ok(AffineFit {
        gamma,
        delta: mean_e - gamma * mean_s,
        degenerate: false,
    })
}

/// A predictive distribution over the scalar target.
pub trait PredictiveCdf {
    fn cdf(&self, y: f64) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPredictive {
    pub mean: f64,
    pub std: f64,
}

impl PredictiveCdf for GaussianPredictive {
    fn cdf(&self, y: f64) -> f64 {
        normal_cdf(y, self.mean, self.std.max(MIN_STD))
    }
}

/// Point mass. At the atom the mid-distribution value 1/2 is returned.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointMass(pub f64);

impl PredictiveCdf for PointMass {
    fn cdf(&self, y: f64) -> f64 {
        if y < self.0 {
            0.0
        } else if y > self.0 {
            1.0
        } else {
            0.5
        }
    }
}

/// Piecewise-linear CDF of a histogram (mass spread uniformly inside each bin).
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramPredictive {
    endpoints: Vec<f64>,
    cumulative: Vec<f64>,
}

impl HistogramPredictive {
    pub fn new(probs: &[f64], layout: &BinLayout) -> Result<Self> {
        if probs.len() != layout.n_bins() {
            return Err(DmoeError::invalid("histogram and layout disagree on bin count"));
        }
        let total: f64 = probs.iter().sum();
        let mut cumulative = Vec::with_capacity(probs.len() + 1);
        cumulative.push(0.0);
        let mut acc = 0.0;
        for p in probs {
            acc += p / total;
            cumulative.push(acc.min(1.0));
        }
        *cumulative.last_mut().unwrap() = 1.0;
        Ok(Self {
            endpoints: layout.endpoints().to_vec(),
            cumulative,
        })
    }

    /// Mean of all heads after interpolation onto head 0's support.
    pub fn from_heads(head_probs: ArrayView2<f64>, layouts: &MultiLayout) -> Result<Self> {
        let reference = layouts.layout(0);
        let n = reference.n_bins();
        let mut mean = vec![0.0; n];
        let m = head_probs.nrows();
        for (h, row) in head_probs.rows().into_iter().enumerate() {
            let p = interp_to_support(&row.to_vec(), layouts.layout(h), reference)?;
            for (acc, v) in mean.iter_mut().zip(p) {
                *acc += v / m as f64;
            }
        }
        Self::new(&mean, reference)
    }
}

impl PredictiveCdf for HistogramPredictive {
    fn cdf(&self, y: f64) -> f64 {
        let e = &self.endpoints;
        if y <= e[0] {
            return 0.0;
        }
        if y >= e[e.len() - 1] {
            return 1.0;
        }
        let j = e.partition_point(|&x| x <= y) - 1;
        let t = (y - e[j]) / (e[j + 1] - e[j]);
        self.cumulative[j] + t * (self.cumulative[j + 1] - self.cumulative[j])
    }
}

/// `n` evenly spaced quantile levels covering `[0, 1]`.
pub fn quantile_grid(n: usize) -> Vec<f64> {
    assert!(n >= 2, "quantile grid needs at least two levels");
    (0..n).map(|k| k as f64 / (n - 1) as f64).collect()
}

pub const DEFAULT_GRID_POINTS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub mace: f64,
    pub rmsce: f64,
    pub ma: f64,
    /// `(expected coverage, observed coverage)` per quantile level.
    pub curve: Vec<(f64, f64)>,
}

impl CalibrationReport {
    /// One row per quantile level, then a summary row.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["kind", "expected", "observed", "mace", "rmsce", "ma"])?;
        for (q, o) in &self.curve {
            w.write_record(["level", &q.to_string(), &o.to_string(), "", "", ""])?;
        }
        w.write_record([
            "summary",
            "",
            "",
            &self.mace.to_string(),
            &self.rmsce.to_string(),
            &self.ma.to_string(),
        ])?;
        w.flush()?;
        Ok(())
    }
}

/// Calibration metrics from probability-integral-transform values `F_i(y_i)`.
///
/// Observed coverage at level `q` is the fraction of samples with `F_i(y_i) <= q`.
/// MACE and RMSCE are the mean and root-mean-square of `|q - observed|` over the
/// grid; MA is the trapezoidal area between the coverage curve and the diagonal.
pub fn calibration_report(pit: &[f64], grid: &[f64]) -> Result<CalibrationReport> {
    if pit.is_empty() || grid.is_empty() {
        return Err(DmoeError::invalid("calibration report needs samples and quantile levels"));
    }
    if pit.iter().any(|p| p.is_nan()) {
        return Err(DmoeError::invalid("NaN CDF value"));
    }
    let mut sorted = pit.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let curve: Vec<(f64, f64)> = grid
        .iter()
        .map(|&q| (q, sorted.partition_point(|&p| p <= q) as f64 / n))
        .collect();
    let residuals: Vec<f64> = curve.iter().map(|(q, o)| (q - o).abs()).collect();
    let k = residuals.len() as f64;
    let mace = residuals.iter().sum::<f64>() / k;
    let rmsce = (residuals.iter().map(|r| r * r).sum::<f64>() / k).sqrt();
    let ma = curve
        .windows(2)
        .zip(residuals.windows(2))
        .map(|(c, r)| 0.5 * (r[0] + r[1]) * (c[1].0 - c[0].0))
        .sum();
    Ok(CalibrationReport {
        mace,
        rmsce,
        ma,
        curve,
    })
}

pub fn calibration_report_from_cdfs<C: PredictiveCdf>(
    cdfs: &[C],
    y_true: &[f64],
    grid: &[f64],
) -> Result<CalibrationReport> {
    if cdfs.len() != y_true.len() {
        return Err(DmoeError::invalid(format!(
            "{} predictive CDFs for {} targets",
            cdfs.len(),
            y_true.len()
        )));
    }
    let pit: Vec<f64> = cdfs.iter().zip(y_true).map(|(c, &y)| c.cdf(y)).collect();
    calibration_report(&pit, grid)
}

/// Weighted pool-adjacent-violators: the nondecreasing sequence closest to
/// `values` in weighted least squares.
pub fn pava(values: &[f64], weights: &[f64]) -> Vec<f64> {
    // blocks of (mean, weight, count)
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(values.len());
    for (&v, &w) in values.iter().zip(weights) {
        blocks.push((v, w, 1));
        while blocks.len() > 1 {
            let (m2, w2, c2) = blocks[blocks.len() - 1];
            let (m1, w1, c1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.pop();
            let last = blocks.last_mut().unwrap();
            *last = ((m1 * w1 + m2 * w2) / (w1 + w2), w1 + w2, c1 + c2);
        }
    }
    blocks
        .into_iter()
        .flat_map(|(m, _, c)| std::iter::repeat_n(m, c))
        .collect()
}

/// Nondecreasing piecewise-linear map on `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IsotonicMap {
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl IsotonicMap {
    pub fn identity() -> Self {
        Self {
            xs: vec![0.0, 1.0],
            ys: vec![0.0, 1.0],
        }
    }

    pub fn knots(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.xs.iter().copied().zip(self.ys.iter().copied())
    }

    pub fn apply(&self, p: f64) -> f64 {
        let p = p.clamp(0.0, 1.0);
        let xs = &self.xs;
        let j = xs.partition_point(|&x| x <= p);
        if j == 0 {
            return self.ys[0];
        }
        if j == xs.len() {
            return self.ys[xs.len() - 1];
        }
        let (x0, x1) = (xs[j - 1], xs[j]);
        let (y0, y1) = (self.ys[j - 1], self.ys[j]);
        if x1 == x0 {
            return y1;
        }
        y0 + (p - x0) / (x1 - x0) * (y1 - y0)
    }
}

pub const MIN_RECALIBRATION_POINTS: usize = 10;

/// Fits the recalibration map `R` such that `R(F(y))` is calibrated on the
/// holdout: the empirical coverage `P̂(p) = #{p_j <= p} / n` of each holdout
/// CDF value is regressed isotonically on `p`, anchored at (0, 0) and (1, 1).
pub fn isotonic_recalibrate(pit: &[f64]) -> Result<IsotonicMap> {
    if pit.len() < MIN_RECALIBRATION_POINTS {
        return Err(DmoeError::Recalibration(format!(
            "need at least {MIN_RECALIBRATION_POINTS} holdout points, got {}",
            pit.len()
        )));
    }
    if pit.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(DmoeError::Recalibration("CDF values must lie in [0, 1]".into()));
    }
    let mut sorted = pit.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    // one knot per distinct value, weighted by multiplicity
    let mut xs = Vec::new();
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i];
        let mut j = i;
        while j < sorted.len() && sorted[j] == v {
            j += 1;
        }
        xs.push(v);
        targets.push(j as f64 / n);
        weights.push((j - i) as f64);
        i = j;
    }
    let mut fitted = pava(&targets, &weights);
    if xs[0] > 0.0 {
        xs.insert(0, 0.0);
        fitted.insert(0, 0.0);
    }
    if *xs.last().unwrap() < 1.0 {
        xs.push(1.0);
        fitted.push(1.0);
    }
    let ys: Vec<f64> = fitted.into_iter().map(|y| y.clamp(0.0, 1.0)).collect();
    Ok(IsotonicMap { xs, ys })
}

/// Raw vs recalibrated calibration of a model's predictions.
#[derive(Debug, Clone)]
pub struct CalibrationComparison {
    /// Gaussian with std = raw score (nats), no adjustment.
    pub raw: CalibrationReport,
    /// Gaussian with std = affine-adjusted score.
    pub affine: CalibrationReport,
    /// Affine-adjusted Gaussian followed by the isotonic map.
    pub recalibrated: CalibrationReport,
    /// Native piecewise-linear CDF of the head-averaged histogram.
    pub histogram: CalibrationReport,
    pub histogram_recalibrated: CalibrationReport,
    pub fit: AffineFit,
    pub holdout_size: usize,
}

/// Splits `records` into a disjoint holdout (`holdout_fraction`, shuffled by
/// `seed`) used for the affine fit and isotonic recalibration, and evaluation
/// data on which every report is computed.
pub fn compare_calibration(
    records: &[PredictionRecord],
    layouts: &MultiLayout,
    holdout_fraction: f64,
    seed: u64,
    grid: &[f64],
) -> Result<CalibrationComparison> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(DmoeError::invalid("holdout fraction must lie in (0, 1)"));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_hold = ((records.len() as f64) * holdout_fraction).round() as usize;
    if n_hold < MIN_RECALIBRATION_POINTS || n_hold >= records.len() {
        return Err(DmoeError::Recalibration(format!(
            "holdout of {n_hold} from {} records is unusable",
            records.len()
        )));
    }
    let (hold, eval) = order.split_at(n_hold);

    let scores: Vec<f64> = hold.iter().map(|&i| records[i].uncertainty_raw).collect();
    let errors: Vec<f64> = hold
        .iter()
        .map(|&i| (records[i].y_pred - records[i].y_true).abs())
        .collect();
    let fit = fit_affine(&scores, &errors)?;

    let gaussian = |i: usize, adjusted: bool| {
        let r = &records[i];
        let std = if adjusted {
            fit.adjusted(r.uncertainty_raw)
        } else {
            r.uncertainty_raw.max(MIN_STD)
        };
        GaussianPredictive { mean: r.y_pred, std }.cdf(r.y_true)
    };
    let hist_pit = |i: usize| -> Result<f64> {
        let r = &records[i];
        Ok(HistogramPredictive::from_heads(r.head_probs.view(), layouts)?.cdf(r.y_true))
    };

    let raw_eval: Vec<f64> = eval.iter().map(|&i| gaussian(i, false)).collect();
    let adj_hold: Vec<f64> = hold.iter().map(|&i| gaussian(i, true)).collect();
    let adj_eval: Vec<f64> = eval.iter().map(|&i| gaussian(i, true)).collect();
    let iso = isotonic_recalibrate(&adj_hold)?;
    let recal_eval: Vec<f64> = adj_eval.iter().map(|&p| iso.apply(p)).collect();

    let hist_hold = hold.iter().map(|&i| hist_pit(i)).collect::<Result<Vec<_>>>()?;
    let hist_eval = eval.iter().map(|&i| hist_pit(i)).collect::<Result<Vec<_>>>()?;
    let hist_iso = isotonic_recalibrate(&hist_hold)?;
    let hist_recal: Vec<f64> = hist_eval.iter().map(|&p| hist_iso.apply(p)).collect();

    Ok(CalibrationComparison {
        raw: calibration_report(&raw_eval, grid)?,
        affine: calibration_report(&adj_eval, grid)?,
        recalibrated: calibration_report(&recal_eval, grid)?,
        histogram: calibration_report(&hist_eval, grid)?,
        histogram_recalibrated: calibration_report(&hist_recal, grid)?,
        fit,
        holdout_size: n_hold,
    })
}
