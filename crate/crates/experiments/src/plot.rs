//! Static SVG rendering. Output depends only on the input values, so equal
//! inputs give byte-identical files.

use std::fmt::Write;

use dmoe_core::hist_targets::{build_bin_layout, induce_target, TargetHistogram};
use dmoe_core::loss::{distance_loss, histogram_loss};
use dmoe_core::{BinDistribution, BinLayout, InducedDistribution, TargetRange};

use crate::error::Result;
use crate::grid::MetricRow;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 110.0;
const PALETTE: [&str; 6] = ["#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee", "#aa3377"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

struct Canvas {
    body: String,
    x_range: (f64, f64),
    y_range: (f64, f64),
}

impl Canvas {
    fn new(title: &str, x_range: (f64, f64), y_range: (f64, f64)) -> Self {
        let mut body = String::new();
        let _ = writeln!(
            body,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(body, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            body,
            r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
            WIDTH / 2.0,
            escape(title)
        );
        let y_range = if y_range.1 > y_range.0 { y_range } else { (y_range.0, y_range.0 + 1.0) };
        let x_range = if x_range.1 > x_range.0 { x_range } else { (x_range.0, x_range.0 + 1.0) };
        Self { body, x_range, y_range }
    }

    fn px(&self, x: f64) -> f64 {
        let (lo, hi) = self.x_range;
        MARGIN_LEFT + (x - lo) / (hi - lo) * (WIDTH - MARGIN_LEFT - MARGIN_RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        let (lo, hi) = self.y_range;
        HEIGHT - MARGIN_BOTTOM - (y - lo) / (hi - lo) * (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM)
    }

    fn axes(&mut self, y_label: &str, x_ticks: bool) {
        let (x0, x1) = (self.px(self.x_range.0), self.px(self.x_range.1));
        let (y0, y1) = (self.py(self.y_range.0), self.py(self.y_range.1));
        let _ = writeln!(
            self.body,
            r#"<line x1="{x0:.2}" y1="{y0:.2}" x2="{x1:.2}" y2="{y0:.2}" stroke="black"/>"#
        );
        let _ = writeln!(
            self.body,
            r#"<line x1="{x0:.2}" y1="{y0:.2}" x2="{x0:.2}" y2="{y1:.2}" stroke="black"/>"#
        );
        for k in 0..=4 {
            let v = self.y_range.0 + (self.y_range.1 - self.y_range.0) * k as f64 / 4.0;
            let y = self.py(v);
            let _ = writeln!(
                self.body,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
                x0 - 6.0,
                y + 4.0,
                fmt_tick(v)
            );
        }
        if x_ticks {
            for k in 0..=4 {
                let v = self.x_range.0 + (self.x_range.1 - self.x_range.0) * k as f64 / 4.0;
                let _ = writeln!(
                    self.body,
                    r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                    self.px(v),
                    y0 + 16.0,
                    fmt_tick(v)
                );
            }
        }
        let _ = writeln!(
            self.body,
            r#"<text x="16" y="{:.2}" transform="rotate(-90 16 {:.2})" text-anchor="middle">{}</text>"#,
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            escape(y_label)
        );
    }

    fn finish(mut self) -> String {
        self.body.push_str("</svg>\n");
        self.body
    }
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Mae,
    Ewt,
}

impl Metric {
    fn name(self) -> &'static str {
        match self {
            Metric::Mae => "MAE",
            Metric::Ewt => "EwT",
        }
    }

    fn of(self, row: &MetricRow) -> Option<f64> {
        match self {
            Metric::Mae => row.mae,
            Metric::Ewt => row.ewt,
        }
    }
}

/// Mean of `metric` per row label over successful rows, in first-seen order.
pub fn group_means(rows: &[MetricRow], metric: Metric) -> Vec<(String, f64, usize)> {
    let mut groups: Vec<(String, f64, usize)> = Vec::new();
    for row in rows.iter().filter(|r| r.ok()) {
        let Some(v) = metric.of(row) else { continue };
        let label = row.label();
        match groups.iter_mut().find(|g| g.0 == label) {
            Some(g) => {
                g.1 += v;
                g.2 += 1;
            }
            None => groups.push((label, v, 1)),
        }
    }
    for g in groups.iter_mut() {
        g.1 /= g.2 as f64;
    }
    groups
}

/// One bar per configuration label with the seed-averaged metric.
pub fn bar_chart(rows: &[MetricRow], metric: Metric) -> String {
    let groups = group_means(rows, metric);
    let top = groups.iter().map(|g| g.1).fold(0.0, f64::max);
    let top = if top > 0.0 { top * 1.1 } else { 1.0 };
    let n = groups.len().max(1) as f64;
    let mut c = Canvas::new(&format!("{} by configuration", metric.name()), (0.0, n), (0.0, top));
    c.axes(metric.name(), false);
    for (i, (label, value, count)) in groups.iter().enumerate() {
        let x0 = c.px(i as f64 + 0.15);
        let x1 = c.px(i as f64 + 0.85);
        let y = c.py(*value);
        let base = c.py(0.0);
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            c.body,
            r#"<rect x="{x0:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{color}"><title>{} (n={count}): {value:.6}</title></rect>"#,
            x1 - x0,
            base - y,
            escape(label)
        );
        let cx = (x0 + x1) / 2.0;
        let _ = writeln!(
            c.body,
            r#"<text x="{cx:.2}" y="{:.2}" transform="rotate(40 {cx:.2} {:.2})">{}</text>"#,
            base + 14.0,
            base + 14.0,
            escape(label)
        );
    }
    c.finish()
}

/// Observed vs expected coverage with the diagonal for reference.
pub fn coverage_plot(curves: &[(&str, &[(f64, f64)])]) -> String {
    let mut c = Canvas::new("Calibration", (0.0, 1.0), (0.0, 1.0));
    c.axes("observed coverage", true);
    let _ = writeln!(
        c.body,
        r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="gray" stroke-dasharray="4 3"/>"#,
        c.px(0.0),
        c.py(0.0),
        c.px(1.0),
        c.py(1.0)
    );
    for (i, (name, pts)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|&(q, o)| format!("{:.2},{:.2}", c.px(q), c.py(o)))
            .collect();
        let _ = writeln!(
            c.body,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            path.join(" ")
        );
        let _ = writeln!(
            c.body,
            r#"<text x="{:.2}" y="{:.2}" fill="{color}">{}</text>"#,
            MARGIN_LEFT + 10.0,
            MARGIN_TOP + 14.0 * (i + 1) as f64,
            escape(name)
        );
    }
    c.finish()
}

/// A predicted histogram drawn over a layout, with its loss values.
pub struct OverlaySeries<'a> {
    pub name: &'a str,
    pub probs: &'a [f64],
    pub hl: f64,
    pub dl: f64,
}

/// Target histogram as outlined bars, predictions as translucent filled bars,
/// and the scalar target as a vertical line.
pub fn histogram_overlay(
    layout: &BinLayout,
    target: &TargetHistogram,
    y: f64,
    series: &[OverlaySeries<'_>],
) -> String {
    let r = layout.range();
    let e = layout.endpoints();
    let w = layout.widths();
    let dens = |p: &[f64]| -> Vec<f64> { p.iter().zip(w).map(|(p, w)| p / w).collect() };
    let top = series
        .iter()
        .map(|s| dens(s.probs))
        .chain(std::iter::once(dens(&target.probs)))
        .flatten()
        .fold(0.0, f64::max)
        * 1.1;
    let mut c = Canvas::new("Equal histogram loss, different distance loss", (r.y_min(), r.y_max()), (0.0, top));
    c.axes("density", true);
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        for (i, d) in dens(s.probs).iter().enumerate() {
            if *d <= 0.0 {
                continue;
            }
            let _ = writeln!(
                c.body,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{color}" fill-opacity="0.45"/>"#,
                c.px(e[i]),
                c.py(*d),
                c.px(e[i + 1]) - c.px(e[i]),
                c.py(0.0) - c.py(*d)
            );
        }
        let _ = writeln!(
            c.body,
            r#"<text x="{:.2}" y="{:.2}" fill="{color}">{}: HL = {:.6}, DL = {:.6}</text>"#,
            MARGIN_LEFT + 10.0,
            MARGIN_TOP + 14.0 * (k + 1) as f64,
            escape(s.name),
            s.hl,
            s.dl
        );
    }
    for (i, d) in dens(&target.probs).iter().enumerate() {
        if *d <= 0.0 {
            continue;
        }
        let _ = writeln!(
            c.body,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#,
            c.px(e[i]),
            c.py(*d),
            c.px(e[i + 1]) - c.px(e[i]),
            c.py(0.0) - c.py(*d)
        );
    }
    let _ = writeln!(
        c.body,
        r#"<line x1="{0:.2}" y1="{1:.2}" x2="{0:.2}" y2="{2:.2}" stroke="black" stroke-dasharray="3 2"/>"#,
        c.px(y),
        c.py(0.0),
        c.py(top)
    );
    c.finish()
}

/// Two predictions that put the same mass on the target bin, one with the
/// rest next to it and one with the rest at the far end of the range.
#[derive(Debug, Clone)]
pub struct DistanceBiasFixture {
    pub layout: BinLayout,
    pub y: f64,
    pub target: TargetHistogram,
    pub near: Vec<f64>,
    pub far: Vec<f64>,
    pub hl_near: f64,
    pub hl_far: f64,
    pub dl_near: f64,
    pub dl_far: f64,
}

pub fn distance_bias_fixture() -> Result<DistanceBiasFixture> {
    let layout = build_bin_layout(TargetRange::new(0.0, 1.0)?, 10, &BinDistribution::Uniform, 1e-6)?;
    let y = 0.55;
    let target = induce_target(y, &layout, &InducedDistribution::Categorical)?;
    let k = layout.bin_index(y);
    let mut near = vec![0.0; layout.n_bins()];
    near[k] = 0.4;
    near[k - 1] = 0.6;
    let mut far = vec![0.0; layout.n_bins()];
    far[k] = 0.4;
    far[0] = 0.6;
    Ok(DistanceBiasFixture {
        hl_near: histogram_loss(&near, &target)?,
        hl_far: histogram_loss(&far, &target)?,
        dl_near: distance_loss(&near, &layout, y)?,
        dl_far: distance_loss(&far, &layout, y)?,
        layout,
        y,
        target,
        near,
        far,
    })
}

pub fn distance_bias_plot(fx: &DistanceBiasFixture) -> String {
    histogram_overlay(
        &fx.layout,
        &fx.target,
        fx.y,
        &[
            OverlaySeries { name: "near", probs: &fx.near, hl: fx.hl_near, dl: fx.dl_near },
            OverlaySeries { name: "far", probs: &fx.far, hl: fx.hl_far, dl: fx.dl_far },
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_results_give_axes_only() {
        let svg = bar_chart(&[], Metric::Mae);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("<line"));
        assert!(!svg.contains("<rect x"));
    }

    #[test]
    fn fixture_has_equal_hl_and_ordered_dl() {
        let fx = distance_bias_fixture().unwrap();
        assert!((fx.hl_near - fx.hl_far).abs() < 1e-9);
        assert!(fx.dl_near < fx.dl_far);
        let svg = distance_bias_plot(&fx);
        assert_eq!(svg, distance_bias_plot(&fx));
        assert_eq!(svg.matches("HL = ").count(), 2);
    }

    #[test]
    fn coverage_plot_draws_each_curve() {
        let pts = [(0.0, 0.0), (0.5, 0.6), (1.0, 1.0)];
        let svg = coverage_plot(&[("raw", &pts), ("recalibrated", &pts)]);
        assert_eq!(svg.matches("<polyline").count(), 2);
    }
}
