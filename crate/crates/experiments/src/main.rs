use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dmoe_core::bounds::{run_harness, HarnessConfig};
use dmoe_core::uncertainty::{compare_calibration, quantile_grid};
use dmoe_experiments::grid::{read_results, run_grid, run_single, write_results};
use dmoe_experiments::plot::{bar_chart, coverage_plot, distance_bias_fixture, distance_bias_plot, Metric};
use dmoe_experiments::ExperimentConfig;

#[derive(Parser)]
#[command(name = "dmoe", version, about = "Histogram regression experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (overrides `output.dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            cfg.apply_text(&text).with_context(|| format!("in {}", path.display()))?;
        }
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the bin layout of every head.
    Layout(Common),
    /// Train and evaluate a single run.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed_index: usize,
    },
    /// Run the ablation grid described by the `grid.*` keys.
    Grid(Common),
    /// Randomized check of the gradient-norm inequalities.
    Bounds {
        #[arg(long, default_value_t = 1000)]
        draws: usize,
        #[arg(long, value_delimiter = ',', default_value = "4,8,16,64")]
        bins: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Train a run and evaluate its uncertainty calibration on the test split.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed_index: usize,
    },
    /// Render SVG plots from a results CSV.
    Plot {
        /// Results CSV written by `grid`.
        results: Option<PathBuf>,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    let mut w = create(dir, name)?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    eprintln!("wrote {}", dir.join(name).display());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Layout(common) => {
            let cfg = common.load()?;
            print!("{}", cfg.layouts()?.to_text());
        }
        Command::Train { common, seed_index } => {
            let cfg = common.load()?;
            let out = run_single(&cfg, seed_index)?;
            let dir = &cfg.output_dir;
            write_text(dir, "config.txt", &cfg.to_text())?;
            write_text(dir, "log.csv", &out.outcome.log.to_csv_string()?)?;
            write_text(dir, "model.txt", &out.outcome.model.to_text())?;
            write_results(std::slice::from_ref(&out.row), create(dir, "metrics.csv")?)?;
            println!(
                "mae={:.6} ewt={:.4} best_epoch={}",
                out.row.mae.unwrap_or(f64::NAN),
                out.row.ewt.unwrap_or(f64::NAN),
                out.outcome.best_epoch
            );
        }
        Command::Grid(common) => {
            let cfg = common.load()?;
            let cells = cfg.expand_grid();
            for cell in &cells {
                cell.validate()?;
            }
            let rows = run_grid(&cells, cfg.grid.seeds, cfg.grid.parallel);
            let dir = &cfg.output_dir;
            write_results(&rows, create(dir, "results.csv")?)?;
            write_text(dir, "mae.svg", &bar_chart(&rows, Metric::Mae))?;
            write_text(dir, "ewt.svg", &bar_chart(&rows, Metric::Ewt))?;
            let failed = rows.iter().filter(|r| !r.ok()).count();
            println!("{} rows, {} failed", rows.len(), failed);
        }
        Command::Bounds { draws, bins, seed, out } => {
            let summary = run_harness(&HarnessConfig { draws, bins, seed })?;
            summary.write_csv(create(&out, "bounds.csv")?)?;
            println!("{}", summary.summary_line());
        }
        Command::Calibrate { common, seed_index } => {
            let cfg = common.load()?;
            if !cfg.mode.is_histogram() {
                bail!("calibration needs a histogram loss mode, got {}", cfg.mode);
            }
            let run = run_single(&cfg, seed_index)?;
            let test = &run.splits.test;
            let records = run.outcome.model.predict_records(test.x.view(), &test.y)?;
            let grid = quantile_grid(cfg.grid_points);
            let cmp = compare_calibration(&records, &cfg.layouts()?, cfg.holdout, cfg.cell_seed(seed_index), &grid)?;
            let dir = &cfg.output_dir;
            let reports = [
                ("raw", &cmp.raw),
                ("affine", &cmp.affine),
                ("recalibrated", &cmp.recalibrated),
                ("histogram", &cmp.histogram),
                ("histogram_recalibrated", &cmp.histogram_recalibrated),
            ];
            for (name, report) in reports {
                report.write_csv(create(dir, &format!("calibration_{name}.csv"))?)?;
                println!("{name}: mace={:.5} rmsce={:.5} ma={:.5}", report.mace, report.rmsce, report.ma);
            }
            let curves: Vec<(&str, &[(f64, f64)])> = reports.iter().map(|(n, r)| (*n, r.curve.as_slice())).collect();
            write_text(dir, "calibration.svg", &coverage_plot(&curves))?;
            println!(
                "affine fit: gamma={:.6} delta={:.6} holdout={}",
                cmp.fit.gamma, cmp.fit.delta, cmp.holdout_size
            );
        }
        Command::Plot { results, out } => {
            if let Some(path) = results {
                let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
                let rows = read_results(io::BufReader::new(file)).with_context(|| format!("in {}", path.display()))?;
                write_text(&out, "mae.svg", &bar_chart(&rows, Metric::Mae))?;
                write_text(&out, "ewt.svg", &bar_chart(&rows, Metric::Ewt))?;
            }
            let fx = distance_bias_fixture()?;
            write_text(&out, "distance_bias.svg", &distance_bias_plot(&fx))?;
            println!(
                "near: HL={:.6} DL={:.6}  far: HL={:.6} DL={:.6}",
                fx.hl_near, fx.dl_near, fx.hl_far, fx.dl_far
            );
        }
    }
    Ok(())
}
