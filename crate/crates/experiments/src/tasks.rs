//! Synthetic bounded-regression tasks.
//!
//! Inputs are drawn uniformly from `[0, 1]^d`; targets are computed in
//! normalized units `t ∈ [0, 1]`, perturbed by Gaussian noise, clamped and
//! mapped onto the task's target range. The mixture generator works the other
//! way round: it draws `t` from a two-component Gaussian mixture and derives the
//! features from it, so the target marginal is far from uniform.

use std::f64::consts::PI;
use std::str::FromStr;

use dmoe_core::train::Dataset;
use dmoe_core::TargetRange;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{ExperimentError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Generator {
    Linear,
    Sinusoid,
    PiecewiseSmooth,
    GaussianMixtureTargets,
}

impl Generator {
    pub fn name(self) -> &'static str {
        match self {
            Generator::Linear => "linear",
            Generator::Sinusoid => "sinusoid",
            Generator::PiecewiseSmooth => "piecewise",
            Generator::GaussianMixtureTargets => "mixture",
        }
    }
}

impl FromStr for Generator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "linear" => Ok(Generator::Linear),
            "sinusoid" => Ok(Generator::Sinusoid),
            "piecewise" => Ok(Generator::PiecewiseSmooth),
            "mixture" => Ok(Generator::GaussianMixtureTargets),
            _ => Err("expected linear, sinusoid, piecewise or mixture".into()),
        }
    }
}

/// Mixture components in normalized target units.
pub const MIXTURE_MEANS: [f64; 2] = [0.42, 0.58];
pub const MIXTURE_STD: f64 = 0.07;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub generator: Generator,
    pub input_dim: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Target noise in normalized units.
    pub noise_std: f64,
    pub range: TargetRange,
    pub seed: u64,
    /// Shift added to test inputs before the target function (0 = none).
    pub test_shift: f64,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self {
            generator: Generator::Sinusoid,
            input_dim: 1,
            n_train: 2000,
            n_val: 500,
            n_test: 1000,
            noise_std: 0.0,
            range: TargetRange::new(0.0, 1.0).expect("unit range"),
            seed: 0,
            test_shift: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(ExperimentError::Invalid("task.input_dim must be >= 1".into()));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(ExperimentError::Invalid("every split needs at least one sample".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(ExperimentError::Invalid("task.noise_std must be >= 0".into()));
        }
        if !self.test_shift.is_finite() {
            return Err(ExperimentError::Invalid("task.test_shift must be finite".into()));
        }
        Ok(())
    }

    /// Normalized clean target for inputs in `[0, 1]^d`.
    fn target(&self, x: &[f64]) -> f64 {
        let u = x.iter().sum::<f64>() / x.len() as f64;
        match self.generator {
            Generator::Linear => 0.8 * u,
            Generator::Sinusoid => 0.5 + 0.4 * (2.0 * PI * u).sin(),
            Generator::PiecewiseSmooth => {
                if u < 0.3 {
                    0.1 + u
                } else if u < 0.7 {
                    0.7 - 0.5 * (u - 0.3)
                } else {
                    0.3 + 2.0 * (u - 0.7) * (u - 0.7) + 0.5 * (u - 0.7)
                }
            }
            Generator::GaussianMixtureTargets => unreachable!("mixture targets are sampled directly"),
        }
    }

    fn mixture_features(&self, t: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..self.input_dim)
            .map(|j| match j {
                0 => t,
                1 => 0.5 + 0.5 * (3.0 * PI * t).sin(),
                _ => rng.random_range(0.0..1.0),
            })
            .collect()
    }

    fn split(&self, n: usize, shift: f64, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
        let d = self.input_dim;
        let noise = Normal::new(0.0, self.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
        let mut xs = Vec::with_capacity(n * d);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let (x, clean) = match self.generator {
                Generator::GaussianMixtureTargets => {
                    let k = usize::from(rng.random_bool(0.5));
                    let comp = Normal::new(MIXTURE_MEANS[k], MIXTURE_STD).expect("valid std");
                    let t = comp.sample(rng).clamp(0.0, 1.0);
                    (self.mixture_features(t, rng), t)
                }
                _ => {
                    let x: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0) + shift).collect();
                    let t = self.target(&x);
                    (x, t)
                }
            };
            let noisy = if self.noise_std > 0.0 {
                clean + noise.sample(rng)
            } else {
                clean
            };
            let t = noisy.clamp(0.0, 1.0);
            ys.push(self.range.y_min() + t * self.range.span());
            xs.extend(x);
        }
        (xs, ys)
    }

    /// Deterministic train/val/test splits with features standardized by the
    /// training-split mean and standard deviation.
    pub fn generate(&self) -> Result<Splits> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let d = self.input_dim;
        let (xtr, ytr) = self.split(self.n_train, 0.0, &mut rng);
        let (xva, yva) = self.split(self.n_val, 0.0, &mut rng);
        let (xte, yte) = self.split(self.n_test, self.test_shift, &mut rng);

        let mut mean = vec![0.0; d];
        let mut sq = vec![0.0; d];
        for row in xtr.chunks(d) {
            for j in 0..d {
                mean[j] += row[j];
                sq[j] += row[j] * row[j];
            }
        }
        let n = self.n_train as f64;
        let std: Vec<f64> = (0..d)
            .map(|j| {
                let m = mean[j] / n;
                let var = (sq[j] / n - m * m).max(0.0);
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        for m in mean.iter_mut() {
            *m /= n;
        }
        let standardize = |xs: Vec<f64>, rows: usize| -> Result<Array2<f64>> {
            let mut a = Array2::from_shape_vec((rows, d), xs)
                .map_err(|e| ExperimentError::Invalid(e.to_string()))?;
            for mut row in a.rows_mut() {
                for j in 0..d {
                    row[j] = (row[j] - mean[j]) / std[j];
                }
            }
            Ok(a)
        };
        Ok(Splits {
            train: Dataset::new(standardize(xtr, self.n_train)?, ytr)?,
            val: Dataset::new(standardize(xva, self.n_val)?, yva)?,
            test: Dataset::new(standardize(xte, self.n_test)?, yte)?,
        })
    }
}

/// Two-sided Kolmogorov–Smirnov test of `sample` against U(0, 1).
/// Returns `(D, asymptotic p-value)`.
pub fn ks_uniform(sample: &[f64]) -> (f64, f64) {
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let d = s
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let v = v.clamp(0.0, 1.0);
            ((i as f64 + 1.0) / n - v).max(v - i as f64 / n)
        })
        .fold(0.0, f64::max);
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        p += 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
    }
    (d, p.clamp(0.0, 1.0))
}
