//! Distributional mixture-of-experts (DMoE) regression.
//!
//! Scalar targets in a bounded range are turned into probability histograms
//! over one or more (shifted) bin layouts. A model predicts one histogram per
//! output head and is trained on a weighted sum of the cross entropy against
//! the induced target histogram and the L1 distance between the predicted
//! expected value and the scalar target.
//!
//! Module map:
//!
//! * [`hist_targets`]: bin layouts, induced target histograms, quantization error.
//! * [`loss`]: histogram loss, distance loss, combined loss and logit gradients.
//! * [`model`] / [`train`]: a small MLP backbone with batched histogram heads and
//!   a deterministic training loop.
//! * [`uncertainty`]: entropy and interpolated-KL scores, recalibration, calibration metrics.
//! * [`bounds`]: numerical checks of the gradient-norm bounds.
//! * [`metrics`]: MAE and energy-within-threshold.
//! * [`gradcheck`]: central finite differences.

#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![cfg_attr(test, allow(clippy::excessive_precision))]

pub mod bounds;
pub mod error;
pub mod gradcheck;
pub mod hist_targets;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod quadrature;
pub mod special;
pub mod train;
pub mod uncertainty;

pub use error::{DmoeError, Result};
pub use hist_targets::{
    BinDistribution, BinLayout, InducedDistribution, MultiLayout, TargetHistogram, TargetRange,
};
pub use loss::{CoefficientSchedule, LossBreakdown, LossConfig};
pub use model::{Activation, Model, PredictionRecord};
pub use train::{LossMode, OptimizerKind, TrainConfig, TrainingLog};
