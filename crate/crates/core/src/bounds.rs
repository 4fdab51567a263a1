//! Numerical checks of the gradient-norm bounds for the DMoE loss.
//!
//! With `g` the logits of a single head, `f = softmax(g)`, `p` the target
//! histogram, `b` the bin centers and `J = ∂g/∂θ`, the checked inequalities are
//!
//! * histogram term: `‖Jᵀ(f - p)‖ ≤ ‖f - p‖ ‖J‖_F`
//! * distance term: `‖∂|p·b - f·b| / ∂θ‖ ≤ √2 ‖f‖ ‖b‖ ‖f - p‖ ‖J‖_F`
//! * full loss: `‖∂(HL + DL)/∂θ‖ ≤ l ‖p - f‖ (1 + √2 ‖f‖ ‖b‖)` with `l = ‖J‖_F`.
//!
//! Vector norms are Euclidean and Jacobian norms Frobenius.

use std::io::Write;

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{DmoeError, Result};
use crate::hist_targets::{
    build_bin_layout, build_multi_layout, induce_target, BinDistribution, BinLayout,
    InducedDistribution, TargetHistogram, TargetRange,
};
use crate::loss::{grad_from_probs, LossConfig};
use crate::model::{Activation, Model, OutputHead};

/// Absolute slack allowed on every inequality.
pub const SLACK: f64 = 1e-9;

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn frobenius(m: &Array2<f64>) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `Jᵀ v` for a `K × P` Jacobian.
fn vjp(jacobian: &Array2<f64>, v: &[f64]) -> Vec<f64> {
    jacobian.t().dot(&ArrayView1::from(v)).to_vec()
}

/// `∂g/∂θ` at a single input: one row per logit, columns in the model's flat
/// parameter order. Each row is one vector-Jacobian product with a one-hot seed.
pub fn logit_jacobian(model: &Model, x: &[f64]) -> Result<Array2<f64>> {
    let xb = Array2::from_shape_vec((1, x.len()), x.to_vec())
        .map_err(|e| DmoeError::invalid(e.to_string()))?;
    let cache = model.forward_batch(xb.view())?;
    let k = model.n_outputs();
    let mut jac = Array2::zeros((k, model.param_count()));
    let mut seed = Array2::zeros((1, k));
    for row in 0..k {
        seed[[0, row]] = 1.0;
        let grad = model.backward_from_logit_grads(&cache, &seed);
        jac.row_mut(row).assign(&ArrayView1::from(&grad[..]));
        seed[[0, row]] = 0.0;
    }
    Ok(jac)
}

/// Local Lipschitz constant `l = ‖∂g/∂θ‖_F` at `x`.
pub fn measure_lipschitz(model: &Model, x: &[f64]) -> Result<f64> {
    Ok(frobenius(&logit_jacobian(model, x)?))
}

/// `diag(f) - f fᵀ`.
pub fn softmax_jacobian(f: &[f64]) -> Array2<f64> {
    let n = f.len();
    Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            f[i] - f[i] * f[j]
        } else {
            -f[i] * f[j]
        }
    })
}

/// `(‖∂f/∂g‖_F, √2 ‖f‖)`.
pub fn check_softmax_jacobian(f: &[f64]) -> (f64, f64) {
    (frobenius(&softmax_jacobian(f)), 2f64.sqrt() * l2_norm(f))
}

/// Measured and bounding value of one inequality.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundCheck {
    pub lhs: f64,
    pub bound: f64,
}

impl BoundCheck {
    pub fn holds(&self) -> bool {
        self.lhs <= self.bound + SLACK
    }

    /// `lhs / bound`, with 0/0 read as 0.
    pub fn ratio(&self) -> f64 {
        if self.lhs == 0.0 {
            0.0
        } else {
            self.lhs / self.bound
        }
    }
}

fn check_shapes(probs: &[f64], target: &TargetHistogram, jacobian: &Array2<f64>) -> Result<()> {
    if probs.len() != target.len() || jacobian.nrows() != probs.len() {
        return Err(DmoeError::invalid(format!(
            "{} probabilities, {} target bins and a Jacobian with {} rows",
            probs.len(),
            target.len(),
            jacobian.nrows()
        )));
    }
    Ok(())
}

/// Cross-entropy term: `∂HL/∂θ = Jᵀ(f - p)`.
pub fn check_histogram_bound(probs: &[f64], target: &TargetHistogram, jacobian: &Array2<f64>) -> Result<BoundCheck> {
    check_shapes(probs, target, jacobian)?;
    let r = diff(probs, &target.probs);
    Ok(BoundCheck {
        lhs: l2_norm(&vjp(jacobian, &r)),
        bound: l2_norm(&r) * frobenius(jacobian),
    })
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

/// Distance term in the form `|p·b - f·b|`, `b` the bin centers:
/// `∂/∂θ = sign(f·b - p·b) Jᵀ (diag(f) - f fᵀ) b`.
pub fn check_distance_bound(
    probs: &[f64],
    target: &TargetHistogram,
    layout: &BinLayout,
    jacobian: &Array2<f64>,
) -> Result<BoundCheck> {
    check_shapes(probs, target, jacobian)?;
    let b = layout.centers();
    let ef: f64 = probs.iter().zip(b).map(|(f, c)| f * c).sum();
    let ep: f64 = target.probs.iter().zip(b).map(|(p, c)| p * c).sum();
    let s = sign(ef - ep);
    let dg: Vec<f64> = probs.iter().zip(b).map(|(f, c)| s * f * (c - ef)).collect();
    let bound = 2f64.sqrt()
        * l2_norm(probs)
        * l2_norm(b)
        * l2_norm(&diff(probs, &target.probs))
        * frobenius(jacobian);
    Ok(BoundCheck {
        lhs: l2_norm(&vjp(jacobian, &dg)),
        bound,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundReport {
    pub grad_norm: f64,
    pub histogram_bound: f64,
    pub distance_bound: f64,
    pub combined_bound: f64,
    pub lipschitz_l: f64,
    pub f_l2: f64,
    pub b_norm: f64,
    pub p_minus_f_norm: f64,
    /// Norm of the histogram-term gradient alone.
    pub hl_grad_norm: f64,
    /// Norm of the distance-term gradient alone.
    pub dl_grad_norm: f64,
    pub satisfied: bool,
}

impl BoundReport {
    pub fn ratio(&self) -> f64 {
        BoundCheck {
            lhs: self.grad_norm,
            bound: self.combined_bound,
        }
        .ratio()
    }
}

/// Checks the full-loss bound for a single-head model at `(x, y)` with
/// `α_HL = α_DL = 1`. The distance term is the training loss `|y - f·b|`.
pub fn check_gradient_bound(
    model: &Model,
    x: &[f64],
    y: f64,
    induced: &InducedDistribution,
) -> Result<BoundReport> {
    let layout = match &model.head {
        OutputHead::Histogram(h) if h.n_heads() == 1 => h.layouts.layout(0).clone(),
        _ => {
            return Err(DmoeError::invalid(
                "the bound is stated for a single histogram head",
            ))
        }
    };
    let target = induce_target(y, &layout, induced)?;
    let jac = logit_jacobian(model, x)?;
    let (_, probs) = model.forward(x)?;
    let f = probs.row(0).to_vec();
    let b = layout.centers();
    let n = f.len();

    let mut hl = vec![0.0; n];
    let mut dl = vec![0.0; n];
    grad_from_probs(&f, &target.probs, b, y, 1.0, 0.0, &mut hl);
    grad_from_probs(&f, &target.probs, b, y, 0.0, 1.0, &mut dl);
    let total: Vec<f64> = hl.iter().zip(&dl).map(|(a, c)| a + c).collect();

    let l = frobenius(&jac);
    let f_l2 = l2_norm(&f);
    let b_norm = l2_norm(b);
    let pf = l2_norm(&diff(&target.probs, &f));
    let grad_norm = l2_norm(&vjp(&jac, &total));
    let combined_bound = l * pf * (1.0 + 2f64.sqrt() * f_l2 * b_norm);
    Ok(BoundReport {
        grad_norm,
        histogram_bound: pf * l,
        distance_bound: 2f64.sqrt() * f_l2 * b_norm * pf * l,
        combined_bound,
        lipschitz_l: l,
        f_l2,
        b_norm,
        p_minus_f_norm: pf,
        hl_grad_norm: l2_norm(&vjp(&jac, &hl)),
        dl_grad_norm: l2_norm(&vjp(&jac, &dl)),
        satisfied: grad_norm <= combined_bound + SLACK,
    })
}

/// Distributions whose discretized ℓ₂ norm is of interest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReferenceDistribution {
    /// Equal mass `1/N` in every bin.
    Uniform,
    /// An induced distribution centered at `y`.
    Induced { dist: InducedDistribution, y: f64 },
}

/// ℓ₂ norm of the probability vector of `dist` discretized on `layout`.
pub fn distribution_l2(dist: &ReferenceDistribution, layout: &BinLayout) -> Result<f64> {
    let probs = match dist {
        // closed form of the ℓ₂ norm of a constant vector
        ReferenceDistribution::Uniform => return Ok((1.0 / layout.n_bins() as f64).sqrt()),
        ReferenceDistribution::Induced { dist, y } => induce_target(*y, layout, dist)?.probs,
    };
    Ok(l2_norm(&probs))
}

/// Which inequality a harness row checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundKind {
    Histogram,
    Distance,
    Combined,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HarnessRow {
    pub kind: BoundKind,
    pub draw: usize,
    pub n_bins: usize,
    pub width_multiple: f64,
    pub lhs: f64,
    pub bound: f64,
    pub ratio: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarnessConfig {
    /// Draws per inequality (the softmax sub-check gets the same count).
    pub draws: usize,
    pub bins: Vec<usize>,
    pub seed: u64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            draws: 1000,
            bins: vec![4, 8, 16, 64],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HarnessSummary {
    pub rows: Vec<HarnessRow>,
}

impl HarnessSummary {
    pub fn count(&self, kind: BoundKind) -> usize {
        self.rows.iter().filter(|r| r.kind == kind).count()
    }

    pub fn violations(&self, kind: BoundKind) -> usize {
        self.rows.iter().filter(|r| r.kind == kind && !r.holds).count()
    }

    pub fn max_ratio(&self, kind: BoundKind) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.kind == kind)
            .map(|r| r.ratio)
            .fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary_line(&self) -> String {
        [BoundKind::Histogram, BoundKind::Distance, BoundKind::Combined, BoundKind::Softmax]
            .iter()
            .map(|&k| {
                format!(
                    "{k:?}: {} draws, {} violations, max ratio {:.6}",
                    self.count(k),
                    self.violations(k),
                    self.max_ratio(k)
                )
            })
            .collect::<Vec<_>>()
            .join("; ")
    }
}

/// A freshly initialized single-head model on a random layout together with
/// a random input and target.
struct Draw {
    model: Model,
    x: Vec<f64>,
    y: f64,
    layout: BinLayout,
    induced: InducedDistribution,
    width_multiple: f64,
}

fn random_draw(rng: &mut ChaCha8Rng, n_bins: usize) -> Result<Draw> {
    let lo = rng.random_range(-2.0..1.0);
    let range = TargetRange::new(lo, lo + rng.random_range(0.1..3.0))?;
    let dist = if rng.random_bool(0.5) {
        BinDistribution::Uniform
    } else {
        BinDistribution::Normal {
            mean: 0.5,
            std: rng.random_range(0.08..0.2),
        }
    };
    let layout = build_bin_layout(range, n_bins, &dist, 1e-6)?;
    let width_multiple = rng.random_range(0.25..3.0);
    let induced = match rng.random_range(0..3) {
        0 => InducedDistribution::Normal { width_multiple },
        1 => InducedDistribution::Laplace { width_multiple },
        _ => InducedDistribution::Categorical,
    };
    let d_in = rng.random_range(1..6);
    let mut widths = vec![d_in];
    for _ in 0..rng.random_range(0..3) {
        widths.push(rng.random_range(2..12));
    }
    let activation = if rng.random_bool(0.5) {
        Activation::Relu
    } else {
        Activation::Tanh
    };
    let mut model = Model::histogram(
        &widths,
        activation,
        build_multi_layout(layout.clone(), 1)?,
        rng,
    )?;
    // occasionally push the head towards confident predictions
    if rng.random_bool(0.25) {
        let gain = rng.random_range(2.0..20.0);
        if let OutputHead::Histogram(h) = &mut model.head {
            h.linear.weights.mapv_inplace(|w| w * gain);
            h.linear.bias.mapv_inplace(|b| b * gain);
        }
    }
    let x = (0..d_in).map(|_| rng.random_range(-2.0..2.0)).collect();
    let y = rng.random_range(range.y_min()..=range.y_max());
    Ok(Draw {
        model,
        x,
        y,
        layout,
        induced,
        width_multiple,
    })
}

fn row(kind: BoundKind, draw: usize, n_bins: usize, width_multiple: f64, c: BoundCheck) -> HarnessRow {
    HarnessRow {
        kind,
        draw,
        n_bins,
        width_multiple,
        lhs: c.lhs,
        bound: c.bound,
        ratio: c.ratio(),
        holds: c.holds(),
    }
}

/// Randomized falsification harness: `draws` independent models, inputs and
/// targets per inequality, plus `draws` random logit vectors for the softmax
/// Jacobian sub-bound. Each draw has its own seed derived from `seed`.
pub fn run_harness(cfg: &HarnessConfig) -> Result<HarnessSummary> {
    if cfg.bins.is_empty() || cfg.bins.iter().any(|&n| n < 2) {
        return Err(DmoeError::invalid("harness needs bin counts >= 2"));
    }
    let mut rows = Vec::with_capacity(4 * cfg.draws);
    for i in 0..cfg.draws {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let n = cfg.bins[i % cfg.bins.len()];

        for kind in [BoundKind::Histogram, BoundKind::Distance] {
            let d = random_draw(&mut rng, n)?;
            let target = induce_target(d.y, &d.layout, &d.induced)?;
            let jac = logit_jacobian(&d.model, &d.x)?;
            let (_, probs) = d.model.forward(&d.x)?;
            let f = probs.row(0).to_vec();
            let check = match kind {
                BoundKind::Histogram => check_histogram_bound(&f, &target, &jac)?,
                _ => check_distance_bound(&f, &target, &d.layout, &jac)?,
            };
            rows.push(row(kind, i, n, d.width_multiple, check));
        }

        let d = random_draw(&mut rng, n)?;
        let rep = check_gradient_bound(&d.model, &d.x, d.y, &d.induced)?;
        rows.push(HarnessRow {
            kind: BoundKind::Combined,
            draw: i,
            n_bins: n,
            width_multiple: d.width_multiple,
            lhs: rep.grad_norm,
            bound: rep.combined_bound,
            ratio: rep.ratio(),
            holds: rep.satisfied,
        });

        let scale = rng.random_range(0.1..10.0);
        let logits: Vec<f64> = (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        let (lhs, bound) = check_softmax_jacobian(&crate::loss::softmax(&logits));
        rows.push(row(BoundKind::Softmax, i, n, 0.0, BoundCheck { lhs, bound }));
    }
    Ok(HarnessSummary { rows })
}

/// Reports the full-loss bound with the coefficients actually used in training,
/// scaling each term by its coefficient. Informational only.
pub fn weighted_gradient_norm(
    model: &Model,
    x: &[f64],
    y: f64,
    induced: &InducedDistribution,
    cfg: &LossConfig,
) -> Result<f64> {
    let layout = model
        .layouts()
        .filter(|l| l.n_heads() == 1)
        .ok_or_else(|| DmoeError::invalid("expected a single histogram head"))?
        .layout(0)
        .clone();
    let target = induce_target(y, &layout, induced)?;
    let jac = logit_jacobian(model, x)?;
    let (_, probs) = model.forward(x)?;
    let f = probs.row(0).to_vec();
    let mut g = vec![0.0; f.len()];
    grad_from_probs(&f, &target.probs, layout.centers(), y, cfg.alpha_hl, cfg.alpha_dl, &mut g);
    Ok(l2_norm(&vjp(&jac, &g)))
}
