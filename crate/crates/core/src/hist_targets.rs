//! Bin layouts, induced target histograms and quantization error.
//!
//! A [`BinLayout`] partitions a bounded target range `[y_min, y_max]` into `N`
//! bins. Layouts are built from the quantile function of a "bin distribution"
//! evaluated on the normalized domain `[0, 1]`, so that every bin is equally
//! probable under that distribution. A scalar target `y` becomes a
//! [`TargetHistogram`] by discretizing an induced distribution centered at `y`
//! onto the layout.

use std::fmt;
use std::sync::Arc;

use crate::error::{DmoeError, Result};
use crate::quadrature::adaptive_simpson;
use crate::special;

pub const DEFAULT_EPSILON: f64 = 1e-6;
const QUADRATURE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetRange {
    y_min: f64,
    y_max: f64,
}

impl TargetRange {
    pub fn new(y_min: f64, y_max: f64) -> Result<Self> {
        if !y_min.is_finite() || !y_max.is_finite() {
            return Err(DmoeError::invalid(format!(
                "target range must be finite, got [{y_min}, {y_max}]"
            )));
        }
        if y_min >= y_max {
            return Err(DmoeError::invalid(format!(
                "target range requires y_min < y_max, got [{y_min}, {y_max}]"
            )));
        }
        Ok(Self { y_min, y_max })
    }

    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn span(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn contains(&self, y: f64) -> bool {
        y >= self.y_min && y <= self.y_max
    }

    pub fn clamp(&self, y: f64) -> f64 {
        y.clamp(self.y_min, self.y_max)
    }

    pub fn check(&self, y: f64) -> Result<()> {
        if self.contains(y) {
            Ok(())
        } else {
            Err(DmoeError::OutOfRange {
                value: y,
                min: self.y_min,
                max: self.y_max,
            })
        }
    }
}

pub type QuantileFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Distribution whose quantile function places the bin endpoints.
///
/// Quantiles live on the normalized domain `[0, 1]`; they are mapped onto the
/// target range when the layout is built.
#[derive(Clone)]
pub enum BinDistribution {
    Uniform,
    Normal { mean: f64, std: f64 },
    CustomQuantile(QuantileFn),
}

impl fmt::Debug for BinDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BinDistribution::Uniform => write!(f, "Uniform"),
            BinDistribution::Normal { mean, std } => {
                write!(f, "Normal {{ mean: {mean}, std: {std} }}")
            }
            BinDistribution::CustomQuantile(_) => write!(f, "CustomQuantile(..)"),
        }
    }
}

impl BinDistribution {
    /// Unclamped quantile on the normalized domain.
    pub fn quantile(&self, p: f64) -> f64 {
        match self {
            BinDistribution::Uniform => p,
            BinDistribution::Normal { mean, std } => mean + std * special::std_normal_quantile(p),
            BinDistribution::CustomQuantile(q) => q(p),
        }
    }

    fn validate(&self) -> Result<()> {
        if let BinDistribution::Normal { mean, std } = self {
            if !mean.is_finite() || !std.is_finite() || *std <= 0.0 {
                return Err(DmoeError::invalid(format!(
                    "normal bin distribution needs finite mean and std > 0, got mean={mean} std={std}"
                )));
            }
        }
        Ok(())
    }
}

/// Ordered bin endpoints over a target range.
#[derive(Debug, Clone, PartialEq)]
pub struct BinLayout {
    endpoints: Vec<f64>,
    widths: Vec<f64>,
    centers: Vec<f64>,
    epsilon: f64,
    range: TargetRange,
}

impl BinLayout {
    /// Builds a layout from explicit endpoints. Endpoints must be strictly
    /// increasing and lie inside the range.
    pub fn from_endpoints(range: TargetRange, endpoints: Vec<f64>, epsilon: f64) -> Result<Self> {
        if endpoints.len() < 3 {
            return Err(DmoeError::invalid(format!(
                "a layout needs at least 2 bins (3 endpoints), got {} endpoints",
                endpoints.len()
            )));
        }
        if endpoints.iter().any(|e| !e.is_finite()) {
            return Err(DmoeError::InvalidLayout("non-finite endpoint".into()));
        }
        if let Some(i) = endpoints.windows(2).position(|w| w[1] <= w[0]) {
            return Err(DmoeError::InvalidLayout(format!(
                "endpoints not strictly increasing at index {}: {} >= {}",
                i + 1,
                endpoints[i],
                endpoints[i + 1]
            )));
        }
        let first = endpoints[0];
        let last = *endpoints.last().unwrap();
        if first < range.y_min() || last > range.y_max() {
            return Err(DmoeError::InvalidLayout(format!(
                "endpoints [{first}, {last}] exceed range [{}, {}]",
                range.y_min(),
                range.y_max()
            )));
        }
        let widths: Vec<f64> = endpoints.windows(2).map(|w| w[1] - w[0]).collect();
        let centers: Vec<f64> = endpoints.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        Ok(Self {
            endpoints,
            widths,
            centers,
            epsilon,
            range,
        })
    }

    pub fn n_bins(&self) -> usize {
        self.widths.len()
    }

    pub fn endpoints(&self) -> &[f64] {
        &self.endpoints
    }

    pub fn widths(&self) -> &[f64] {
        &self.widths
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn range(&self) -> TargetRange {
        self.range
    }

    /// E[w], the mean bin width.
    pub fn mean_width(&self) -> f64 {
        (self.endpoints[self.n_bins()] - self.endpoints[0]) / self.n_bins() as f64
    }

    /// Index of the bin containing `y`. Values below the first endpoint fall in
    /// bin 0, values at or above the last endpoint in bin `N - 1`.
    pub fn bin_index(&self, y: f64) -> usize {
        let above = self.endpoints.partition_point(|&e| e <= y);
        above.saturating_sub(1).min(self.n_bins() - 1)
    }

    /// Serializes as a line-oriented text block using shortest round-trip decimals.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# dmoe-layout v1\n");
        out.push_str(&format!("range {} {}\n", self.range.y_min(), self.range.y_max()));
        out.push_str(&format!("epsilon {}\n", self.epsilon));
        out.push_str(&vector_line("endpoints", &self.endpoints));
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut range = None;
        let mut epsilon = None;
        let mut endpoints = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = idx + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, values) = parse_vector_line(line, lineno)?;
            match key {
                "range" => {
                    if values.len() != 2 {
                        return Err(DmoeError::parse(lineno, "range needs two values"));
                    }
                    range = Some(
                        TargetRange::new(values[0], values[1])
                            .map_err(|e| DmoeError::parse(lineno, e.to_string()))?,
                    );
                }
                "epsilon" => {
                    if values.len() != 1 {
                        return Err(DmoeError::parse(lineno, "epsilon needs one value"));
                    }
                    epsilon = Some(values[0]);
                }
                "endpoints" => endpoints = Some(values),
                other => {
                    return Err(DmoeError::parse(lineno, format!("unknown key `{other}`")));
                }
            }
        }
        let range = range.ok_or_else(|| DmoeError::parse(0, "missing `range` line"))?;
        let endpoints = endpoints.ok_or_else(|| DmoeError::parse(0, "missing `endpoints` line"))?;
        BinLayout::from_endpoints(range, endpoints, epsilon.unwrap_or(DEFAULT_EPSILON))
    }
}

pub(crate) fn vector_line(key: &str, values: &[f64]) -> String {
    let mut line = String::from(key);
    for v in values {
        line.push(' ');
        line.push_str(&v.to_string());
    }
    line.push('\n');
    line
}

pub(crate) fn parse_vector_line(line: &str, lineno: usize) -> Result<(&str, Vec<f64>)> {
    let mut parts = line.split_whitespace();
    let key = parts
        .next()
        .ok_or_else(|| DmoeError::parse(lineno, "empty line"))?;
    let values = parts
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|e| DmoeError::parse(lineno, format!("bad number `{tok}`: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((key, values))
}

/// Builds `N` bins that are equally probable under `dist`.
///
/// Interior endpoints are `Q(i/N)` for `i = 1..N-1`, clamped to `[0, 1]` and
/// affinely mapped so that `[Q(0), Q(1)]` covers `[y_min, y_max]`. When `Q(0)`
/// or `Q(1)` is infinite (e.g. a Gaussian) it is replaced by `Q(ε)` or
/// `Q(1 - ε)`. The outermost endpoints are always `y_min` and `y_max`.
pub fn build_bin_layout(
    range: TargetRange,
    n_bins: usize,
    dist: &BinDistribution,
    epsilon: f64,
) -> Result<BinLayout> {
    if n_bins < 2 {
        return Err(DmoeError::invalid(format!("n_bins must be >= 2, got {n_bins}")));
    }
    if !(epsilon > 0.0 && epsilon <= 1e-3) {
        return Err(DmoeError::invalid(format!(
            "epsilon must lie in (0, 1e-3], got {epsilon}"
        )));
    }
    dist.validate()?;

    let endpoint_quantile = |p: f64, substitute: f64| {
        let q = dist.quantile(p);
        if q.is_finite() {
            q
        } else {
            dist.quantile(substitute)
        }
    };
    let lo = endpoint_quantile(0.0, epsilon).clamp(0.0, 1.0);
    let hi = endpoint_quantile(1.0, 1.0 - epsilon).clamp(0.0, 1.0);
    if !(hi > lo) {
        return Err(DmoeError::InvalidLayout(format!(
            "outer quantiles collapse after clamping: lo={lo}, hi={hi}"
        )));
    }

    let n = n_bins as f64;
    let mut endpoints = Vec::with_capacity(n_bins + 1);
    endpoints.push(range.y_min());
    for i in 1..n_bins {
        let q = dist.quantile(i as f64 / n);
        if q.is_nan() {
            return Err(DmoeError::InvalidLayout(format!("quantile Q({i}/{n_bins}) is NaN")));
        }
        let u = (q.clamp(0.0, 1.0) - lo) / (hi - lo);
        endpoints.push(range.y_min() + u * range.span());
    }
    endpoints.push(range.y_max());

    BinLayout::from_endpoints(range, endpoints, epsilon)
}

/// `M` layouts whose endpoints are offset by `i/M · E[w]` from a base layout.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiLayout {
    layouts: Vec<BinLayout>,
    base: BinLayout,
    shift_step: f64,
}

impl MultiLayout {
    pub fn single(base: BinLayout) -> Self {
        Self {
            layouts: vec![base.clone()],
            shift_step: base.mean_width(),
            base,
        }
    }

    pub fn layouts(&self) -> &[BinLayout] {
        &self.layouts
    }

    pub fn layout(&self, head: usize) -> &BinLayout {
        &self.layouts[head]
    }

    pub fn base(&self) -> &BinLayout {
        &self.base
    }

    pub fn shift_step(&self) -> f64 {
        self.shift_step
    }

    pub fn n_heads(&self) -> usize {
        self.layouts.len()
    }

    pub fn n_bins(&self) -> usize {
        self.base.n_bins()
    }

    pub fn range(&self) -> TargetRange {
        self.base.range()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# dmoe-multilayout v1\n");
        out.push_str(&format!("heads {}\n", self.n_heads()));
        out.push_str(&self.base.to_text().replace("# dmoe-layout v1\n", ""));
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut heads = None;
        let mut rest = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if let Some(v) = line.strip_prefix("heads ") {
                heads = Some(
                    v.trim()
                        .parse::<usize>()
                        .map_err(|e| DmoeError::parse(idx + 1, format!("bad head count: {e}")))?,
                );
            } else {
                rest.push_str(raw);
                rest.push('\n');
            }
        }
        let heads = heads.ok_or_else(|| DmoeError::parse(0, "missing `heads` line"))?;
        build_multi_layout(BinLayout::from_text(&rest)?, heads)
    }
}

/// Shifts the base endpoints by `i/M · E[w]` for head `i`. The first endpoint
/// stays at `y_min` and the last is clamped to `y_max`, so the boundary bins
/// absorb the shift.
pub fn build_multi_layout(base: BinLayout, n_heads: usize) -> Result<MultiLayout> {
    if n_heads == 0 {
        return Err(DmoeError::invalid("n_heads must be >= 1"));
    }
    let mean_w = base.mean_width();
    let range = base.range();
    let n = base.n_bins();
    let mut layouts = Vec::with_capacity(n_heads);
    for i in 0..n_heads {
        if i == 0 {
            layouts.push(base.clone());
            continue;
        }
        let shift = i as f64 * mean_w / n_heads as f64;
        let mut endpoints: Vec<f64> = base.endpoints().iter().map(|e| e + shift).collect();
        endpoints[0] = base.endpoints()[0];
        endpoints[n] = endpoints[n].min(range.y_max());
        if endpoints[n - 1] >= endpoints[n] {
            return Err(DmoeError::InvalidLayout(format!(
                "head {i}: shifting by {shift} pushes endpoint {} past the range end",
                endpoints[n - 1]
            )));
        }
        layouts.push(BinLayout::from_endpoints(range, endpoints, base.epsilon())?);
    }
    Ok(MultiLayout {
        layouts,
        shift_step: mean_w / n_heads as f64,
        base,
    })
}

/// Continuous distribution induced around a scalar target, discretized onto a layout.
///
/// Scale parameters are multiples of the layout's mean bin width E[w].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InducedDistribution {
    Normal { width_multiple: f64 },
    Laplace { width_multiple: f64 },
    Categorical,
    KCategorical { k: usize },
}

impl Default for InducedDistribution {
    fn default() -> Self {
        InducedDistribution::Normal { width_multiple: 1.0 }
    }
}

impl InducedDistribution {
    fn scale(width_multiple: f64, layout: &BinLayout) -> Result<f64> {
        let s = width_multiple * layout.mean_width();
        if !(s > 0.0) || !s.is_finite() {
            return Err(DmoeError::invalid(format!(
                "induced distribution scale must be > 0, got {width_multiple} x E[w]"
            )));
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetHistogram {
    pub probs: Vec<f64>,
}

impl TargetHistogram {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn to_text(&self) -> String {
        vector_line("probs", &self.probs)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, probs) = parse_vector_line(line, idx + 1)?;
            if key != "probs" {
                return Err(DmoeError::parse(idx + 1, format!("expected `probs`, got `{key}`")));
            }
            return Ok(Self { probs });
        }
        Err(DmoeError::parse(0, "missing `probs` line"))
    }
}

/// Discretizes a CDF onto the layout. Mass below the first interior endpoint
/// goes to bin 0 and mass above the last interior endpoint to bin `N - 1`.
pub fn histogram_from_cdf<F: Fn(f64) -> f64>(layout: &BinLayout, cdf: F) -> Vec<f64> {
    let n = layout.n_bins();
    let e = layout.endpoints();
    let mut cum = Vec::with_capacity(n + 1);
    cum.push(0.0);
    for &edge in &e[1..n] {
        cum.push(cdf(edge).clamp(0.0, 1.0));
    }
    cum.push(1.0);
    cum.windows(2).map(|w| (w[1] - w[0]).max(0.0)).collect()
}

/// Φ(y): the target histogram for scalar `y` on `layout`.
pub fn induce_target(
    y: f64,
    layout: &BinLayout,
    dist: &InducedDistribution,
) -> Result<TargetHistogram> {
    layout.range().check(y)?;
    let n = layout.n_bins();
    let probs = match *dist {
        InducedDistribution::Normal { width_multiple } => {
            let sigma = InducedDistribution::scale(width_multiple, layout)?;
            histogram_from_cdf(layout, |x| special::normal_cdf(x, y, sigma))
        }
        InducedDistribution::Laplace { width_multiple } => {
            let b = InducedDistribution::scale(width_multiple, layout)?;
            histogram_from_cdf(layout, |x| special::laplace_cdf(x, y, b))
        }
        InducedDistribution::Categorical => {
            let mut p = vec![0.0; n];
            p[layout.bin_index(y)] = 1.0;
            p
        }
        InducedDistribution::KCategorical { k } => {
            if k == 0 || k > n {
                return Err(DmoeError::invalid(format!(
                    "k-categorical needs 1 <= k <= {n}, got {k}"
                )));
            }
            let centers = layout.centers();
            let mut order: Vec<usize> = (0..n).collect();
            // stable sort keeps lower indices first on ties
            order.sort_by(|&a, &b| {
                (centers[a] - y)
                    .abs()
                    .total_cmp(&(centers[b] - y).abs())
            });
            let mut p = vec![0.0; n];
            for &i in &order[..k] {
                p[i] = 1.0 / k as f64;
            }
            p
        }
    };
    Ok(TargetHistogram { probs })
}

/// Expected value of a histogram, using bin midpoints as representative points.
pub fn expected_value(hist: &[f64], layout: &BinLayout) -> Result<f64> {
    if hist.len() != layout.n_bins() {
        return Err(DmoeError::invalid(format!(
            "histogram has {} bins, layout has {}",
            hist.len(),
            layout.n_bins()
        )));
    }
    Ok(hist.iter().zip(layout.centers()).map(|(p, c)| p * c).sum())
}

/// Distribution quantization error of a histogram against a continuous density:
/// `Σ_i ∫_{b_i}^{b_{i+1}} |f(x) - Y_i| f(x) dx` with `Y_i = hist_i / w_i`.
pub fn quantization_error<F: Fn(f64) -> f64>(
    density: F,
    hist: &[f64],
    layout: &BinLayout,
) -> Result<f64> {
    if hist.len() != layout.n_bins() {
        return Err(DmoeError::invalid(format!(
            "histogram has {} bins, layout has {}",
            hist.len(),
            layout.n_bins()
        )));
    }
    let e = layout.endpoints();
    let mut total = 0.0;
    for (i, (&mass, &w)) in hist.iter().zip(layout.widths()).enumerate() {
        let level = mass / w;
        let integrand = |x: f64| {
            let fx = density(x);
            (fx - level).abs() * fx
        };
        total += adaptive_simpson(&integrand, e[i], e[i + 1], QUADRATURE_TOL)?;
    }
    Ok(total.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> TargetRange {
        TargetRange::new(0.0, 1.0).unwrap()
    }

    fn uniform(n: usize) -> BinLayout {
        build_bin_layout(unit(), n, &BinDistribution::Uniform, DEFAULT_EPSILON).unwrap()
    }

    #[test]
    fn range_validation() {
        assert!(TargetRange::new(1.0, 1.0).is_err());
        assert!(TargetRange::new(2.0, 1.0).is_err());
        assert!(TargetRange::new(f64::NEG_INFINITY, 1.0).is_err());
        assert!(TargetRange::new(0.0, f64::NAN).is_err());
    }

    #[test]
    fn uniform_layouts_are_equispaced() {
        assert_eq!(uniform(4).endpoints(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        let sym = build_bin_layout(
            TargetRange::new(-10.0, 10.0).unwrap(),
            2,
            &BinDistribution::Uniform,
            DEFAULT_EPSILON,
        )
        .unwrap();
        assert_eq!(sym.endpoints(), &[-10.0, 0.0, 10.0]);
        assert_eq!(sym.centers(), &[-5.0, 5.0]);
        assert_eq!(sym.widths(), &[10.0, 10.0]);
    }

    #[test]
    fn normal_layout_matches_high_precision_quantiles() {
        // mpmath, 40 digits: 0.5 + 0.125 * sqrt(2) * erfinv(2p - 1)
        let expected = [0.4156887812254897821, 0.5, 0.5843112187745102179];
        let layout = build_bin_layout(
            unit(),
            4,
            &BinDistribution::Normal { mean: 0.5, std: 0.125 },
            DEFAULT_EPSILON,
        )
        .unwrap();
        let e = layout.endpoints();
        assert_eq!(e[0], 0.0);
        assert_eq!(e[4], 1.0);
        for (got, want) in e[1..4].iter().zip(expected) {
            assert!((got - want).abs() < 1e-14, "{got} vs {want}");
        }
        let w = layout.widths();
        assert!(w[1] < w[0] && w[2] < w[3]);
    }

    #[test]
    fn narrow_normal_is_stretched_by_epsilon_quantiles() {
        // std small enough that Q(eps) and Q(1-eps) stay inside (0,1)
        let dist = BinDistribution::Normal { mean: 0.5, std: 0.05 };
        let layout = build_bin_layout(unit(), 8, &dist, 1e-6).unwrap();
        let lo = dist.quantile(1e-6);
        let hi = dist.quantile(1.0 - 1e-6);
        let want = (dist.quantile(0.125) - lo) / (hi - lo);
        assert!((layout.endpoints()[1] - want).abs() < 1e-12);
        // symmetric about the centre
        for i in 0..=8 {
            let a = layout.endpoints()[i];
            let b = layout.endpoints()[8 - i];
            assert!((a + b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layout_errors() {
        assert!(matches!(
            build_bin_layout(unit(), 1, &BinDistribution::Uniform, 1e-6),
            Err(DmoeError::InvalidArgument(_))
        ));
        assert!(build_bin_layout(unit(), 4, &BinDistribution::Uniform, 0.0).is_err());
        assert!(build_bin_layout(unit(), 4, &BinDistribution::Uniform, 0.01).is_err());
        // wide normal clamps interior quantiles onto the boundary
        let wide = BinDistribution::Normal { mean: 0.5, std: 1.0 };
        assert!(matches!(
            build_bin_layout(unit(), 16, &wide, 1e-6),
            Err(DmoeError::InvalidLayout(_))
        ));
        let decreasing = BinDistribution::CustomQuantile(Arc::new(|p| 1.0 - p));
        assert!(matches!(
            build_bin_layout(unit(), 4, &decreasing, 1e-6),
            Err(DmoeError::InvalidLayout(_))
        ));
    }

    #[test]
    fn custom_quantile_layout() {
        let sq = BinDistribution::CustomQuantile(Arc::new(|p: f64| p * p));
        let layout = build_bin_layout(unit(), 4, &sq, 1e-6).unwrap();
        assert_eq!(layout.endpoints(), &[0.0, 0.0625, 0.25, 0.5625, 1.0]);
    }

    #[test]
    fn multi_layout_shifts() {
        let base = uniform(10);
        let one = build_multi_layout(base.clone(), 1).unwrap();
        assert_eq!(one.layouts(), std::slice::from_ref(&base));

        let two = build_multi_layout(base.clone(), 2).unwrap();
        let l1 = two.layout(1);
        assert_eq!(l1.endpoints()[0], 0.0);
        assert_eq!(l1.endpoints()[10], 1.0);
        for j in 1..10 {
            assert!((l1.endpoints()[j] - base.endpoints()[j] - 0.05).abs() < 1e-12);
        }

        let four = build_multi_layout(base.clone(), 4).unwrap();
        for (i, want) in [0.0, 0.025, 0.05, 0.075].into_iter().enumerate() {
            for j in 1..10 {
                let d = four.layout(i).endpoints()[j] - base.endpoints()[j];
                assert!((d - want).abs() < 1e-12, "head {i} endpoint {j}: {d}");
            }
        }
        assert!((four.shift_step() - 0.025).abs() < 1e-15);
        assert!(build_multi_layout(base, 0).is_err());
    }

    #[test]
    fn multi_layout_rejects_overflowing_shift() {
        let range = unit();
        // last bin much narrower than the mean width
        let base = BinLayout::from_endpoints(range, vec![0.0, 0.5, 0.99, 1.0], 1e-6).unwrap();
        assert!(matches!(
            build_multi_layout(base, 2),
            Err(DmoeError::InvalidLayout(_))
        ));
    }

    #[test]
    fn categorical_is_one_hot() {
        let layout = uniform(8);
        let y = layout.centers()[3];
        let t = induce_target(y, &layout, &InducedDistribution::Categorical).unwrap();
        let mut want = vec![0.0; 8];
        want[3] = 1.0;
        assert_eq!(t.probs, want);
        // boundaries belong to the upper bin, y_max to the last
        assert_eq!(layout.bin_index(0.25), 2);
        assert_eq!(layout.bin_index(1.0), 7);
        assert_eq!(layout.bin_index(0.0), 0);
    }

    #[test]
    fn k_categorical_spreads_over_nearest_bins() {
        let layout = uniform(10);
        let y = layout.centers()[4];
        let t = induce_target(y, &layout, &InducedDistribution::KCategorical { k: 3 }).unwrap();
        for (i, p) in t.probs.iter().enumerate() {
            let want = if (3..=5).contains(&i) { 1.0 / 3.0 } else { 0.0 };
            assert_eq!(*p, want, "bin {i}");
        }
        // equidistant between centres of bins 4 and 5: lower index wins
        let t = induce_target(0.5, &layout, &InducedDistribution::KCategorical { k: 1 }).unwrap();
        assert_eq!(t.probs[4], 1.0);
        assert!(induce_target(0.5, &layout, &InducedDistribution::KCategorical { k: 0 }).is_err());
        assert!(induce_target(0.5, &layout, &InducedDistribution::KCategorical { k: 11 }).is_err());
    }

    #[test]
    fn gaussian_target_matches_high_precision_oracle() {
        // mpmath CDF differences, sigma = E[w] = 0.1, tails folded into the end bins
        let want = [
            3.3976731247300604017e-6,
            0.00022923140591079497595,
            0.0059770362467406101306,
            0.060597535943081930838,
            0.24173033745712883036,
            0.38292492254802620728,
            0.24173033745712883036,
            0.060597535943081930838,
            0.0059770362467406101306,
            0.00023262907903552503635,
        ];
        let layout = uniform(10);
        let t = induce_target(0.55, &layout, &InducedDistribution::default()).unwrap();
        for (got, w) in t.probs.iter().zip(want) {
            assert!((got - w).abs() < 1e-14, "{got} vs {w}");
        }
        assert!((t.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let peak = t
            .probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(peak, 5);
    }

    #[test]
    fn laplace_target_is_normalized_and_peaked() {
        let layout = uniform(20);
        let t = induce_target(0.33, &layout, &InducedDistribution::Laplace { width_multiple: 1.0 })
            .unwrap();
        assert!((t.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(layout.bin_index(0.33), 6);
        let peak = t
            .probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(peak, 6);
    }

    #[test]
    fn induce_errors() {
        let layout = uniform(10);
        assert!(matches!(
            induce_target(1.5, &layout, &InducedDistribution::Categorical),
            Err(DmoeError::OutOfRange { .. })
        ));
        assert!(matches!(
            induce_target(0.5, &layout, &InducedDistribution::Normal { width_multiple: 0.0 }),
            Err(DmoeError::InvalidArgument(_))
        ));
        assert!(induce_target(
            0.5,
            &layout,
            &InducedDistribution::Laplace { width_multiple: -1.0 }
        )
        .is_err());
    }

    #[test]
    fn expected_value_examples() {
        let layout = uniform(10);
        let mut one_hot = vec![0.0; 10];
        one_hot[7] = 1.0;
        assert_eq!(expected_value(&one_hot, &layout).unwrap(), layout.centers()[7]);

        let sym = build_bin_layout(
            TargetRange::new(-1.0, 1.0).unwrap(),
            6,
            &BinDistribution::Uniform,
            1e-6,
        )
        .unwrap();
        assert!(expected_value(&[1.0 / 6.0; 6], &sym).unwrap().abs() < 1e-15);

        let two = BinLayout::from_endpoints(unit(), vec![0.0, 0.5, 1.0], 1e-6).unwrap();
        assert_eq!(expected_value(&[0.25, 0.75], &two).unwrap(), 0.625);
        assert!(expected_value(&[1.0], &two).is_err());
    }

    #[test]
    fn quantization_error_vanishes_for_piecewise_constant_density() {
        let layout = BinLayout::from_endpoints(unit(), vec![0.0, 0.2, 0.7, 1.0], 1e-6).unwrap();
        let hist = [0.1, 0.6, 0.3];
        let density = |x: f64| {
            let i = layout.bin_index(x);
            hist[i] / layout.widths()[i]
        };
        let err = quantization_error(density, &hist, &layout).unwrap();
        assert!(err.abs() < 1e-12, "{err}");
    }

    #[test]
    fn quantization_error_does_not_grow_when_bins_halve() {
        let range = TargetRange::new(-4.0, 4.0).unwrap();
        let pdf = |x: f64| special::normal_pdf(x, 0.0, 1.0);
        let cdf = |x: f64| special::normal_cdf(x, 0.0, 1.0);
        let mut prev = f64::INFINITY;
        for n in [8, 16, 32, 64] {
            let layout = build_bin_layout(range, n, &BinDistribution::Uniform, 1e-6).unwrap();
            let hist = histogram_from_cdf(&layout, cdf);
            let err = quantization_error(pdf, &hist, &layout).unwrap();
            assert!(err >= 0.0 && err <= prev, "n={n}: {err} > {prev}");
            prev = err;
        }
    }

    #[test]
    fn text_round_trip() {
        let layout = build_bin_layout(
            TargetRange::new(-3.25, 7.5).unwrap(),
            12,
            &BinDistribution::Normal { mean: 0.5, std: 0.2 },
            1e-6,
        )
        .unwrap();
        let back = BinLayout::from_text(&layout.to_text()).unwrap();
        assert_eq!(back, layout);

        let multi = build_multi_layout(layout.clone(), 3).unwrap();
        assert_eq!(MultiLayout::from_text(&multi.to_text()).unwrap(), multi);

        let t = induce_target(1.1, &layout, &InducedDistribution::default()).unwrap();
        assert_eq!(TargetHistogram::from_text(&t.to_text()).unwrap(), t);

        let err = BinLayout::from_text("range 0 1\nendpoints 0 0.5 x 1\n").unwrap_err();
        assert!(matches!(err, DmoeError::Parse { line: 2, .. }));
    }
}
