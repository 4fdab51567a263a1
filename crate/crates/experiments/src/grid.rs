//! Single runs and ablation grids.

use std::io::{Read, Write};

use dmoe_core::metrics::ewt_threshold;
use dmoe_core::model::Objective;
use dmoe_core::train::{build_targets, evaluate, train, TrainOutcome};
use dmoe_core::{DmoeError, Model};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{ExperimentError, Result};
use crate::tasks::Splits;

/// Test-split metrics of one (config, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub fingerprint: String,
    pub seed_index: usize,
    pub seed: u64,
    pub generator: String,
    pub mode: String,
    pub bins: usize,
    pub heads: usize,
    pub bin_distribution: String,
    pub induced: String,
    pub mae: Option<f64>,
    pub ewt: Option<f64>,
    pub ewt_threshold: f64,
    pub loss_total: Option<f64>,
    pub loss_hl: Option<f64>,
    pub loss_dl: Option<f64>,
    pub best_epoch: Option<usize>,
    pub status: String,
    pub error: String,
}

impl MetricRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }

    /// Short label used to group rows in plots.
    pub fn label(&self) -> String {
        format!(
            "{} {} N={} M={}",
            self.mode, self.bin_distribution, self.bins, self.heads
        )
    }
}

/// What a single run produces besides its metric row.
pub struct RunOutput {
    pub row: MetricRow,
    pub outcome: TrainOutcome,
    pub splits: Splits,
}

fn base_row(cfg: &ExperimentConfig, seed_index: usize, seed: u64) -> MetricRow {
    MetricRow {
        fingerprint: cfg.fingerprint(),
        seed_index,
        seed,
        generator: cfg.generator.to_string(),
        mode: cfg.mode.to_string(),
        bins: cfg.bins,
        heads: cfg.heads,
        bin_distribution: cfg.distribution.to_string(),
        induced: cfg.induced.to_string(),
        mae: None,
        ewt: None,
        ewt_threshold: cfg.range().map_or(f64::NAN, ewt_threshold),
        loss_total: None,
        loss_hl: None,
        loss_dl: None,
        best_epoch: None,
        status: "ok".into(),
        error: String::new(),
    }
}

pub fn build_model(cfg: &ExperimentConfig, seed: u64) -> Result<Model> {
    let mut widths = vec![cfg.input_dim];
    widths.extend(&cfg.hidden);
    // the init stream is decorrelated from the shuffling stream seeded with `seed`
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5DEE_CE66_D1CE_5EED);
    Ok(if cfg.mode.is_histogram() {
        Model::histogram(&widths, cfg.activation, cfg.layouts()?, &mut rng)?
    } else {
        Model::scalar(&widths, cfg.activation, cfg.range()?, &mut rng)?
    })
}

/// Trains and evaluates one cell. Errors propagate; see [`run_cell`] for the
/// grid variant that records them.
pub fn run_single(cfg: &ExperimentConfig, seed_index: usize) -> Result<RunOutput> {
    cfg.validate()?;
    let seed = cfg.cell_seed(seed_index);
    let splits = cfg.task(seed_index)?.generate()?;
    let model = build_model(cfg, seed)?;
    let setup = cfg.loss_setup()?;
    let outcome = train(model, &splits.train, &splits.val, &setup, &cfg.train_config(seed))?;

    let final_epoch = outcome.log.rows.last().map_or(0, |r| r.epoch);
    let objective = setup.mode.objective(final_epoch, &setup.config);
    let targets = match (&objective, outcome.model.layouts()) {
        (Objective::Histogram(_), Some(layouts)) => {
            Some(build_targets(&splits.test.y, layouts, &setup.induced)?)
        }
        _ => None,
    };
    let eval = evaluate(&outcome.model, &splits.test, targets.as_ref().map(|t| t.view()), &objective)?;

    let mut row = base_row(cfg, seed_index, seed);
    row.mae = Some(eval.mae);
    row.ewt = Some(eval.ewt);
    row.loss_total = Some(eval.loss.total);
    if cfg.mode.is_histogram() {
        row.loss_hl = Some(eval.loss.hl);
        row.loss_dl = Some(eval.loss.dl);
    }
    row.best_epoch = Some(outcome.best_epoch);
    Ok(RunOutput { row, outcome, splits })
}

/// Like [`run_single`], but a divergence or other failure becomes a failed row.
pub fn run_cell(cfg: &ExperimentConfig, seed_index: usize) -> MetricRow {
    match run_single(cfg, seed_index) {
        Ok(out) => out.row,
        Err(err) => {
            let mut row = base_row(cfg, seed_index, cfg.cell_seed(seed_index));
            row.status = match err {
                ExperimentError::Core(DmoeError::Divergence { .. }) => "diverged".into(),
                _ => "failed".into(),
            };
            row.error = err.to_string();
            row
        }
    }
}

/// Runs every (cell, seed index) pair. Rows come back in cell order, then seed
/// order, whether or not the pool is used.
pub fn run_grid(cells: &[ExperimentConfig], seeds: usize, parallel: bool) -> Vec<MetricRow> {
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..seeds).map(move |s| (c, s)))
        .collect();
    if parallel {
        jobs.par_iter().map(|&(c, s)| run_cell(&cells[c], s)).collect()
    } else {
        jobs.iter().map(|&(c, s)| run_cell(&cells[c], s)).collect()
    }
}

pub fn write_results<W: Write>(rows: &[MetricRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    if rows.is_empty() {
        w.write_record(RESULT_HEADER)?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub const RESULT_HEADER: [&str; 18] = [
    "fingerprint",
    "seed_index",
    "seed",
    "generator",
    "mode",
    "bins",
    "heads",
    "bin_distribution",
    "induced",
    "mae",
    "ewt",
    "ewt_threshold",
    "loss_total",
    "loss_hl",
    "loss_dl",
    "best_epoch",
    "status",
    "error",
];

/// Parses a results CSV; malformed records report their line number.
pub fn read_results<R: Read>(reader: R) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers().map_err(|e| ExperimentError::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    if header.iter().ne(RESULT_HEADER.iter().copied()) {
        return Err(ExperimentError::Parse {
            line: 1,
            message: "unexpected header".into(),
        });
    }
    let mut rows = Vec::new();
    for record in r.deserialize::<MetricRow>() {
        match record {
            Ok(row) => rows.push(row),
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line() as usize);
                return Err(ExperimentError::Parse {
                    line,
                    message: e.to_string(),
                });
            }
        }
    }
    Ok(rows)
}
