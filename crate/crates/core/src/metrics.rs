//! Point-prediction accuracy: MAE and energy-within-threshold (EwT).

use crate::error::{DmoeError, Result};
use crate::hist_targets::TargetRange;

/// EwT threshold: 0.1% of the maximum possible error.
pub fn ewt_threshold(range: TargetRange) -> f64 {
    0.001 * range.span()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accuracy {
    pub mae: f64,
    pub ewt: f64,
    pub threshold: f64,
}

/// MAE and the fraction of predictions with `|ŷ - y| <= threshold`.
pub fn compute_metrics(preds: &[f64], y_true: &[f64], range: TargetRange) -> Result<Accuracy> {
    accuracy_with_threshold(preds, y_true, ewt_threshold(range))
}

pub fn accuracy_with_threshold(preds: &[f64], y_true: &[f64], threshold: f64) -> Result<Accuracy> {
    if preds.is_empty() {
        return Err(DmoeError::invalid("no predictions"));
    }
    if preds.len() != y_true.len() {
        return Err(DmoeError::invalid(format!(
            "{} predictions for {} targets",
            preds.len(),
            y_true.len()
        )));
    }
    let n = preds.len() as f64;
    let mut abs_sum = 0.0;
    let mut within = 0usize;
    for (p, y) in preds.iter().zip(y_true) {
        let err = (p - y).abs();
        abs_sum += err;
        if err <= threshold {
            within += 1;
        }
    }
    Ok(Accuracy {
        mae: abs_sum / n,
        ewt: within as f64 / n,
        threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let r = TargetRange::new(-5.0, 5.0).unwrap();
        let y = [0.1, -2.0, 4.5];
        let m = compute_metrics(&y, &y, r).unwrap();
        assert_eq!(m.mae, 0.0);
        assert_eq!(m.ewt, 1.0);
        assert_eq!(m.threshold, 0.01);
    }

    #[test]
    fn threshold_boundary_counts() {
        // threshold 2^-10 keeps y + t exact in binary
        let y = [0.0, 0.5, 1.0];
        let t = 1.0 / 1024.0;
        let p: Vec<f64> = y.iter().map(|v| v + t).collect();
        assert_eq!(accuracy_with_threshold(&p, &y, t).unwrap().ewt, 1.0);
    }

    #[test]
    fn mixed_errors() {
        let t = 0.01;
        let y = [1.0, 1.0, 1.0];
        let p = [1.0, 1.0 + 2.0 * t, 1.0 - t / 2.0];
        let m = accuracy_with_threshold(&p, &y, t).unwrap();
        assert!((m.mae - (2.0 * t + t / 2.0) / 3.0).abs() < 1e-15);
        assert!((m.ewt - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_and_mismatch() {
        assert!(accuracy_with_threshold(&[], &[], 0.1).is_err());
        assert!(accuracy_with_threshold(&[1.0], &[1.0, 2.0], 0.1).is_err());
    }
}
