//! Central finite differences for checking analytic gradients.

use ndarray::ArrayView2;

use crate::error::Result;
use crate::hist_targets::{BinLayout, MultiLayout, TargetHistogram};
use crate::loss::{dmoe_loss, LossConfig};
use crate::model::{Model, Objective};

/// `max_i |a_i - b_i| / max(‖a‖_∞, ‖b‖_∞)`; zero when both vectors vanish.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Numerical `∂/∂logits` of the single-head DMoE loss.
pub fn numeric_logit_grad(
    logits: &[f64],
    target: &TargetHistogram,
    layout: &BinLayout,
    y: f64,
    cfg: &LossConfig,
    eps: f64,
) -> Result<Vec<f64>> {
    let mut g = logits.to_vec();
    let mut out = Vec::with_capacity(g.len());
    for i in 0..g.len() {
        let orig = g[i];
        g[i] = orig + eps;
        let up = single_head_loss(&g, target, layout, y, cfg)?;
        g[i] = orig - eps;
        let down = single_head_loss(&g, target, layout, y, cfg)?;
        g[i] = orig;
        out.push((up - down) / (2.0 * eps));
    }
    Ok(out)
}

fn single_head_loss(
    logits: &[f64],
    target: &TargetHistogram,
    layout: &BinLayout,
    y: f64,
    cfg: &LossConfig,
) -> Result<f64> {
    let f = crate::loss::softmax(logits);
    let layouts = MultiLayout::single(layout.clone());
    Ok(dmoe_loss(&[f], std::slice::from_ref(target), &layouts, y, cfg)?.total)
}

/// Mean batch loss of `model` under `objective`.
pub fn batch_loss(
    model: &Model,
    x: ArrayView2<f64>,
    y: &[f64],
    targets: Option<ArrayView2<f64>>,
    objective: &Objective,
) -> Result<f64> {
    let cache = model.forward_batch(x)?;
    Ok(model.loss_and_logit_grads(&cache, y, targets, objective)?.0.total)
}

/// Numerical gradient of the mean batch loss with respect to every parameter,
/// in the model's flat parameter order.
pub fn numeric_param_grad(
    model: &Model,
    x: ArrayView2<f64>,
    y: &[f64],
    targets: Option<ArrayView2<f64>>,
    objective: &Objective,
    eps: f64,
) -> Result<Vec<f64>> {
    let mut probe = model.clone();
    let mut flat = model.flat_params();
    let mut out = Vec::with_capacity(flat.len());
    for i in 0..flat.len() {
        let orig = flat[i];
        flat[i] = orig + eps;
        probe.set_flat_params(&flat)?;
        let up = batch_loss(&probe, x, y, targets, objective)?;
        flat[i] = orig - eps;
        probe.set_flat_params(&flat)?;
        let down = batch_loss(&probe, x, y, targets, objective)?;
        flat[i] = orig;
        out.push((up - down) / (2.0 * eps));
    }
    Ok(out)
}
