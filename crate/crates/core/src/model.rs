//! MLP backbone with batched histogram heads (or a scalar head for baselines),
//! manual forward and backward passes, and a text checkpoint format.
//!
//! All `M` histogram heads share one `hidden × (M·N)` weight matrix, so the
//! head forward and backward passes are single matrix products. Head `h` owns
//! logit columns `h·N .. (h+1)·N`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{DmoeError, Result};
use crate::hist_targets::{
    expected_value, parse_vector_line, vector_line, BinLayout, MultiLayout, TargetRange,
};
use crate::loss::{cross_entropy, grad_from_probs, softmax_in_place, LossConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Relu => z.mapv(|v| v.max(0.0)),
            Activation::Tanh => z.mapv(f64::tanh),
        }
    }

    /// dA/dZ given pre-activation `z` and activation `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// Fully connected layer computing `a · W + b` for row-vector inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weights: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    /// Uniform in `±1/sqrt(fan_in)` for weights and biases.
    pub fn init<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let weights = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..=bound));
        let bias = Array1::from_shape_fn(fan_out, |_| rng.random_range(-bound..=bound));
        Self { weights, bias }
    }

    fn forward(&self, input: ArrayView2<f64>) -> Array2<f64> {
        input.dot(&self.weights) + &self.bias
    }

    fn fan_out(&self) -> usize {
        self.bias.len()
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpBackbone {
    /// `[input_dim, hidden_1, ..., hidden_k]`; `k = 0` makes the backbone the identity.
    pub widths: Vec<usize>,
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

impl MlpBackbone {
    pub fn new<R: Rng>(widths: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) {
            return Err(DmoeError::invalid(format!(
                "layer widths must be nonempty and positive, got {widths:?}"
            )));
        }
        let layers = widths
            .windows(2)
            .map(|w| Dense::init(w[0], w[1], rng))
            .collect();
        Ok(Self {
            widths: widths.to_vec(),
            layers,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadEnsemble {
    pub linear: Dense,
    pub layouts: MultiLayout,
}

impl HeadEnsemble {
    pub fn n_heads(&self) -> usize {
        self.layouts.n_heads()
    }

    pub fn n_bins(&self) -> usize {
        self.layouts.n_bins()
    }
}

/// Scalar regression head: `ŷ = mid + half_span · (h · w + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarHead {
    pub linear: Dense,
    pub range: TargetRange,
}

impl ScalarHead {
    fn mid(&self) -> f64 {
        0.5 * (self.range.y_min() + self.range.y_max())
    }

    pub(crate) fn half_span(&self) -> f64 {
        0.5 * self.range.span()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OutputHead {
    Histogram(HeadEnsemble),
    Scalar(ScalarHead),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub backbone: MlpBackbone,
    pub head: OutputHead,
}

/// Outputs of a batched forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Layer activations; `activations[0]` is the input batch.
    activations: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
    /// `B × (M·N)` for histogram heads, `B × 1` for the scalar head.
    pub logits: Array2<f64>,
    /// Per-head softmax of `logits` (histogram heads only).
    pub probs: Option<Array2<f64>>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.logits.nrows()
    }
}

/// Per-sample loss signal that drives the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    /// Weighted DMoE loss; `alpha_hl`/`alpha_dl` in the config are the values in effect.
    Histogram(LossConfig),
    Scalar(ScalarLoss),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScalarLoss {
    L1,
    L2,
    SmoothL1 { beta: f64 },
}

impl ScalarLoss {
    pub fn value(self, residual: f64) -> f64 {
        match self {
            ScalarLoss::L1 => residual.abs(),
            ScalarLoss::L2 => residual * residual,
            ScalarLoss::SmoothL1 { beta } => {
                let a = residual.abs();
                if a < beta {
                    0.5 * a * a / beta
                } else {
                    a - 0.5 * beta
                }
            }
        }
    }

    pub fn derivative(self, residual: f64) -> f64 {
        match self {
            ScalarLoss::L1 => {
                if residual > 0.0 {
                    1.0
                } else if residual < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            ScalarLoss::L2 => 2.0 * residual,
            ScalarLoss::SmoothL1 { beta } => {
                if residual.abs() < beta {
                    residual / beta
                } else {
                    residual.signum()
                }
            }
        }
    }
}

/// Per-batch mean loss summary.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatchLoss {
    pub total: f64,
    pub hl: f64,
    pub dl: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub y_true: f64,
    pub y_pred: f64,
    /// `M × N` head probabilities (empty for scalar heads).
    pub head_probs: Array2<f64>,
    /// Max pairwise KL for `M >= 2`, else entropy of the single head (nats).
    pub uncertainty_raw: f64,
}

impl Model {
    pub fn histogram<R: Rng>(
        widths: &[usize],
        activation: Activation,
        layouts: MultiLayout,
        rng: &mut R,
    ) -> Result<Self> {
        let backbone = MlpBackbone::new(widths, activation, rng)?;
        let out = layouts.n_heads() * layouts.n_bins();
        let linear = Dense::init(backbone.output_dim(), out, rng);
        Ok(Self {
            backbone,
            head: OutputHead::Histogram(HeadEnsemble { linear, layouts }),
        })
    }

    pub fn scalar<R: Rng>(
        widths: &[usize],
        activation: Activation,
        range: TargetRange,
        rng: &mut R,
    ) -> Result<Self> {
        let backbone = MlpBackbone::new(widths, activation, rng)?;
        let linear = Dense::init(backbone.output_dim(), 1, rng);
        Ok(Self {
            backbone,
            head: OutputHead::Scalar(ScalarHead { linear, range }),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.backbone.input_dim()
    }

    pub fn layouts(&self) -> Option<&MultiLayout> {
        match &self.head {
            OutputHead::Histogram(h) => Some(&h.layouts),
            OutputHead::Scalar(_) => None,
        }
    }

    pub fn target_range(&self) -> TargetRange {
        match &self.head {
            OutputHead::Histogram(h) => h.layouts.range(),
            OutputHead::Scalar(s) => s.range,
        }
    }

    fn head_linear(&self) -> &Dense {
        match &self.head {
            OutputHead::Histogram(h) => &h.linear,
            OutputHead::Scalar(s) => &s.linear,
        }
    }

    fn head_linear_mut(&mut self) -> &mut Dense {
        match &mut self.head {
            OutputHead::Histogram(h) => &mut h.linear,
            OutputHead::Scalar(s) => &mut s.linear,
        }
    }

    /// Number of logits g(x) (`M·N`, or 1 for the scalar head).
    pub fn n_outputs(&self) -> usize {
        self.head_linear().fan_out()
    }

    pub fn param_count(&self) -> usize {
        self.backbone
            .layers
            .iter()
            .map(Dense::param_count)
            .sum::<usize>()
            + self.head_linear().param_count()
    }

    fn dense_layers(&self) -> impl Iterator<Item = &Dense> {
        self.backbone
            .layers
            .iter()
            .chain(std::iter::once(self.head_linear()))
    }

    /// Parameters flattened in canonical order: each backbone layer's weights
    /// (row-major) then bias, then the head's weights and bias.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in self.dense_layers() {
            out.extend(layer.weights.iter());
            out.extend(layer.bias.iter());
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(DmoeError::invalid(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut offset = 0;
        self.for_each_param_mut(|chunk| {
            chunk.copy_from_slice(&flat[offset..offset + chunk.len()]);
            offset += chunk.len();
        });
        Ok(())
    }

    /// Visits parameter slices in canonical order.
    pub fn for_each_param_mut<F: FnMut(&mut [f64])>(&mut self, mut f: F) {
        let mut visit = |layer: &mut Dense| {
            f(layer.weights.as_slice_mut().expect("standard layout"));
            f(layer.bias.as_slice_mut().expect("standard layout"));
        };
        for layer in &mut self.backbone.layers {
            visit(layer);
        }
        visit(self.head_linear_mut());
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<ForwardCache> {
        if x.ncols() != self.input_dim() {
            return Err(DmoeError::invalid(format!(
                "input has {} features, model expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let mut activations = vec![x.to_owned()];
        let mut pre_activations = Vec::with_capacity(self.backbone.layers.len());
        for layer in &self.backbone.layers {
            let z = layer.forward(activations.last().unwrap().view());
            let a = self.backbone.activation.apply(&z);
            pre_activations.push(z);
            activations.push(a);
        }
        let logits = self.head_linear().forward(activations.last().unwrap().view());
        let probs = match &self.head {
            OutputHead::Histogram(h) => {
                let n = h.n_bins();
                let mut p = logits.clone();
                for mut row in p.rows_mut() {
                    let row = row.as_slice_mut().expect("standard layout");
                    for block in row.chunks_mut(n) {
                        softmax_in_place(block);
                    }
                }
                Some(p)
            }
            OutputHead::Scalar(_) => None,
        };
        Ok(ForwardCache {
            activations,
            pre_activations,
            logits,
            probs,
        })
    }

    /// Single-sample forward pass: `(logits, probs)` as `M × N` arrays.
    /// For a scalar head both arrays are `1 × 1` and hold the raw output.
    pub fn forward(&self, x: &[f64]) -> Result<(Array2<f64>, Array2<f64>)> {
        let xb = ArrayView2::from_shape((1, x.len()), x)
            .map_err(|e| DmoeError::invalid(e.to_string()))?;
        let cache = self.forward_batch(xb)?;
        let (m, n) = match &self.head {
            OutputHead::Histogram(h) => (h.n_heads(), h.n_bins()),
            OutputHead::Scalar(_) => (1, 1),
        };
        let logits = cache
            .logits
            .into_shape_with_order((m, n))
            .map_err(|e| DmoeError::invalid(e.to_string()))?;
        let probs = match cache.probs {
            Some(p) => p
                .into_shape_with_order((m, n))
                .map_err(|e| DmoeError::invalid(e.to_string()))?,
            None => logits.clone(),
        };
        Ok((logits, probs))
    }

    /// Scalar predictions for each row of a forward cache.
    pub fn predictions(&self, cache: &ForwardCache) -> Vec<f64> {
        match &self.head {
            OutputHead::Histogram(h) => {
                let probs = cache.probs.as_ref().expect("histogram cache has probs");
                let n = h.n_bins();
                probs
                    .rows()
                    .into_iter()
                    .map(|row| {
                        let row = row.as_slice().expect("standard layout");
                        mean_expected_value(row, n, &h.layouts)
                    })
                    .collect()
            }
            OutputHead::Scalar(s) => cache
                .logits
                .column(0)
                .iter()
                .map(|raw| s.mid() + s.half_span() * raw)
                .collect(),
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        let xb = ArrayView2::from_shape((1, x.len()), x)
            .map_err(|e| DmoeError::invalid(e.to_string()))?;
        let cache = self.forward_batch(xb)?;
        Ok(self.predictions(&cache)[0])
    }

    /// Mean loss over the batch and `∂loss/∂logits` (`B × K`), already divided by `B`.
    ///
    /// `targets` holds the concatenated per-head target histograms of each
    /// sample (`B × M·N`); it is ignored for scalar objectives.
    pub fn loss_and_logit_grads(
        &self,
        cache: &ForwardCache,
        y: &[f64],
        targets: Option<ArrayView2<f64>>,
        objective: &Objective,
    ) -> Result<(BatchLoss, Array2<f64>)> {
        let b = cache.batch_size();
        if y.len() != b {
            return Err(DmoeError::invalid(format!("{} targets for batch of {b}", y.len())));
        }
        let inv_b = 1.0 / b as f64;
        let mut grads = Array2::zeros(cache.logits.raw_dim());
        let mut loss = BatchLoss::default();
        match (&self.head, objective) {
            (OutputHead::Histogram(h), Objective::Histogram(cfg)) => {
                let targets = targets
                    .ok_or_else(|| DmoeError::invalid("histogram objective needs targets"))?;
                let (m, n) = (h.n_heads(), h.n_bins());
                if targets.dim() != (b, m * n) {
                    return Err(DmoeError::invalid(format!(
                        "targets have shape {:?}, expected ({b}, {})",
                        targets.dim(),
                        m * n
                    )));
                }
                let weights = cfg.weights(m)?;
                let probs = cache.probs.as_ref().expect("histogram cache has probs");
                for (i, &yi) in y.iter().enumerate() {
                    let f_row = probs.row(i);
                    let f_row = f_row.as_slice().expect("standard layout");
                    let t_row = targets.row(i);
                    let t_row = t_row.as_slice().expect("standard layout");
                    let mut g_row = grads.row_mut(i);
                    let g_row = g_row.as_slice_mut().expect("standard layout");
                    for (head, &w) in weights.iter().enumerate() {
                        let cols = head * n..(head + 1) * n;
                        let f = &f_row[cols.clone()];
                        let t = &t_row[cols.clone()];
                        let centers = h.layouts.layout(head).centers();
                        let e: f64 = f.iter().zip(centers).map(|(p, c)| p * c).sum();
                        let hl = cross_entropy(f, t);
                        let dl = (yi - e).abs();
                        loss.hl += w * hl * inv_b;
                        loss.dl += w * dl * inv_b;
                        let g = &mut g_row[cols];
                        grad_from_probs(f, t, centers, yi, cfg.alpha_hl, cfg.alpha_dl, g);
                        for v in g.iter_mut() {
                            *v *= w * inv_b;
                        }
                    }
                }
                loss.total = cfg.alpha_hl * loss.hl + cfg.alpha_dl * loss.dl;
            }
            (OutputHead::Scalar(s), Objective::Scalar(kind)) => {
                let preds = self.predictions(cache);
                for (i, (p, yi)) in preds.iter().zip(y).enumerate() {
                    let r = p - yi;
                    loss.total += kind.value(r) * inv_b;
                    grads[[i, 0]] = kind.derivative(r) * s.half_span() * inv_b;
                }
            }
            _ => {
                return Err(DmoeError::invalid(
                    "objective does not match the model's output head",
                ))
            }
        }
        Ok((loss, grads))
    }

    /// Vector-Jacobian product: gradient of `Σ_{b,k} logit_grads[b,k] · g_k(x_b)`
    /// with respect to every parameter, in canonical flat order.
    pub fn backward_from_logit_grads(
        &self,
        cache: &ForwardCache,
        logit_grads: &Array2<f64>,
    ) -> Vec<f64> {
        let n_layers = self.backbone.layers.len();
        // gradients per dense layer, in forward order; head last
        let mut layer_grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(n_layers + 1);

        let head = self.head_linear();
        let last_act = &cache.activations[n_layers];
        layer_grads.push((last_act.t().dot(logit_grads), logit_grads.sum_axis(Axis(0))));
        let mut upstream = logit_grads.dot(&head.weights.t());

        for l in (0..n_layers).rev() {
            let z = &cache.pre_activations[l];
            let a = &cache.activations[l + 1];
            let act = self.backbone.activation;
            let mut dz = upstream;
            ndarray::Zip::from(&mut dz)
                .and(z)
                .and(a)
                .for_each(|d, &zv, &av| *d *= act.derivative(zv, av));
            let input = &cache.activations[l];
            layer_grads.push((input.t().dot(&dz), dz.sum_axis(Axis(0))));
            // the input gradient of the first layer is never needed
            upstream = if l > 0 {
                dz.dot(&self.backbone.layers[l].weights.t())
            } else {
                dz
            };
        }

        let mut flat = Vec::with_capacity(self.param_count());
        // backbone layers were pushed in reverse after the head
        for (w, b) in layer_grads[1..].iter().rev() {
            flat.extend(w.iter());
            flat.extend(b.iter());
        }
        let (hw, hb) = &layer_grads[0];
        flat.extend(hw.iter());
        flat.extend(hb.iter());
        flat
    }

    /// Mean batch loss and its gradient with respect to all parameters.
    pub fn backward(
        &self,
        x: ArrayView2<f64>,
        y: &[f64],
        targets: Option<ArrayView2<f64>>,
        objective: &Objective,
    ) -> Result<(BatchLoss, Vec<f64>)> {
        let cache = self.forward_batch(x)?;
        let (loss, dlogits) = self.loss_and_logit_grads(&cache, y, targets, objective)?;
        Ok((loss, self.backward_from_logit_grads(&cache, &dlogits)))
    }

    /// Per-sample predictions with head probabilities and raw uncertainty.
    pub fn predict_records(&self, x: ArrayView2<f64>, y: &[f64]) -> Result<Vec<PredictionRecord>> {
        let cache = self.forward_batch(x)?;
        let preds = self.predictions(&cache);
        let mut out = Vec::with_capacity(y.len());
        for (i, (&yt, &yp)) in y.iter().zip(&preds).enumerate() {
            let (head_probs, uncertainty_raw) = match &self.head {
                OutputHead::Histogram(h) => {
                    let (m, n) = (h.n_heads(), h.n_bins());
                    let probs = cache.probs.as_ref().expect("histogram cache has probs");
                    let hp = probs
                        .row(i)
                        .to_owned()
                        .into_shape_with_order((m, n))
                        .map_err(|e| DmoeError::invalid(e.to_string()))?;
                    let u = if m >= 2 {
                        crate::uncertainty::max_kl_score(hp.view(), &h.layouts)?
                    } else {
                        crate::uncertainty::entropy_score(hp.row(0).as_slice().unwrap())
                    };
                    (hp, u)
                }
                OutputHead::Scalar(_) => (Array2::zeros((0, 0)), 0.0),
            };
            out.push(PredictionRecord {
                y_true: yt,
                y_pred: yp,
                head_probs,
                uncertainty_raw,
            });
        }
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# dmoe-checkpoint v1\n");
        out.push_str(&format!("activation {}\n", self.backbone.activation.name()));
        let widths: Vec<String> = self.backbone.widths.iter().map(|w| w.to_string()).collect();
        out.push_str(&format!("widths {}\n", widths.join(" ")));
        match &self.head {
            OutputHead::Histogram(h) => {
                out.push_str(&format!("head histogram {}\n", h.n_heads()));
                let base = h.layouts.base();
                out.push_str(&format!(
                    "range {} {}\n",
                    base.range().y_min(),
                    base.range().y_max()
                ));
                out.push_str(&format!("epsilon {}\n", base.epsilon()));
                out.push_str(&vector_line("endpoints", base.endpoints()));
            }
            OutputHead::Scalar(s) => {
                out.push_str("head scalar 1\n");
                out.push_str(&format!("range {} {}\n", s.range.y_min(), s.range.y_max()));
            }
        }
        for (i, layer) in self.dense_layers().enumerate() {
            let w: Vec<f64> = layer.weights.iter().copied().collect();
            out.push_str(&vector_line(&format!("layer{i}.weights"), &w));
            out.push_str(&vector_line(
                &format!("layer{i}.bias"),
                layer.bias.as_slice().unwrap(),
            ));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut activation = None;
        let mut widths: Option<Vec<usize>> = None;
        let mut head_kind: Option<(String, usize)> = None;
        let mut range = None;
        let mut epsilon = crate::hist_targets::DEFAULT_EPSILON;
        let mut endpoints = None;
        let mut tensors: Vec<(String, Vec<f64>, usize)> = Vec::new();
        let mut saw_header = false;

        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('#') {
                if line == "# dmoe-checkpoint v1" {
                    saw_header = true;
                }
                continue;
            }
            let mut parts = line.splitn(2, ' ');
            let key = parts.next().unwrap();
            let rest = parts.next().unwrap_or("").trim();
            match key {
                "activation" => {
                    activation = Some(Activation::from_name(rest).ok_or_else(|| {
                        DmoeError::parse(lineno, format!("unknown activation `{rest}`"))
                    })?)
                }
                "widths" => {
                    widths = Some(
                        rest.split_whitespace()
                            .map(|t| {
                                t.parse::<usize>()
                                    .map_err(|e| DmoeError::parse(lineno, e.to_string()))
                            })
                            .collect::<Result<_>>()?,
                    )
                }
                "head" => {
                    let mut it = rest.split_whitespace();
                    let kind = it.next().unwrap_or("").to_string();
                    let m = it
                        .next()
                        .ok_or_else(|| DmoeError::parse(lineno, "missing head count"))?
                        .parse::<usize>()
                        .map_err(|e| DmoeError::parse(lineno, e.to_string()))?;
                    head_kind = Some((kind, m));
                }
                _ => {
                    let (key, values) = parse_vector_line(line, lineno)?;
                    match key {
                        "range" if values.len() == 2 => {
                            range = Some(
                                TargetRange::new(values[0], values[1])
                                    .map_err(|e| DmoeError::parse(lineno, e.to_string()))?,
                            )
                        }
                        "epsilon" if values.len() == 1 => epsilon = values[0],
                        "endpoints" => endpoints = Some(values),
                        k if k.starts_with("layer") => tensors.push((k.to_string(), values, lineno)),
                        k => return Err(DmoeError::parse(lineno, format!("unexpected key `{k}`"))),
                    }
                }
            }
        }
        if !saw_header {
            return Err(DmoeError::parse(1, "missing `# dmoe-checkpoint v1` header"));
        }
        let activation = activation.ok_or_else(|| DmoeError::parse(0, "missing activation"))?;
        let widths = widths.ok_or_else(|| DmoeError::parse(0, "missing widths"))?;
        let (kind, m) = head_kind.ok_or_else(|| DmoeError::parse(0, "missing head"))?;
        let range = range.ok_or_else(|| DmoeError::parse(0, "missing range"))?;

        let backbone = MlpBackbone {
            layers: widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
            widths,
            activation,
        };
        let hidden = backbone.output_dim();
        let head = match kind.as_str() {
            "histogram" => {
                let endpoints =
                    endpoints.ok_or_else(|| DmoeError::parse(0, "missing endpoints"))?;
                let base = BinLayout::from_endpoints(range, endpoints, epsilon)?;
                let layouts = crate::hist_targets::build_multi_layout(base, m)?;
                let out = layouts.n_heads() * layouts.n_bins();
                OutputHead::Histogram(HeadEnsemble {
                    linear: Dense::zeros(hidden, out),
                    layouts,
                })
            }
            "scalar" => OutputHead::Scalar(ScalarHead {
                linear: Dense::zeros(hidden, 1),
                range,
            }),
            other => return Err(DmoeError::parse(0, format!("unknown head kind `{other}`"))),
        };
        let n_layers = backbone.layers.len();
        let mut model = Model { backbone, head };
        if tensors.len() != 2 * (n_layers + 1) {
            return Err(DmoeError::parse(
                0,
                format!(
                    "expected {} parameter lines, found {}",
                    2 * (n_layers + 1),
                    tensors.len()
                ),
            ));
        }
        let mut flat = Vec::with_capacity(model.param_count());
        for (i, layer) in model.dense_layers().enumerate() {
            for (suffix, len) in [("weights", layer.weights.len()), ("bias", layer.bias.len())] {
                let name = format!("layer{i}.{suffix}");
                let (_, values, lineno) = tensors
                    .iter()
                    .find(|(k, _, _)| *k == name)
                    .ok_or_else(|| DmoeError::parse(0, format!("missing `{name}`")))?;
                if values.len() != len {
                    return Err(DmoeError::parse(
                        *lineno,
                        format!("`{name}` has {} values, expected {len}", values.len()),
                    ));
                }
                flat.extend_from_slice(values);
            }
        }
        model.set_flat_params(&flat)?;
        Ok(model)
    }
}

fn mean_expected_value(row: &[f64], n: usize, layouts: &MultiLayout) -> f64 {
    let m = layouts.n_heads();
    let mut total = 0.0;
    for (head, block) in row.chunks(n).enumerate() {
        total += block
            .iter()
            .zip(layouts.layout(head).centers())
            .map(|(p, c)| p * c)
            .sum::<f64>();
    }
    total / m as f64
}

/// Unweighted mean over heads of each head's expected value.
pub fn predict_scalar(head_probs: ArrayView2<f64>, layouts: &MultiLayout) -> Result<f64> {
    if head_probs.nrows() != layouts.n_heads() {
        return Err(DmoeError::invalid(format!(
            "{} heads of probabilities for {} layouts",
            head_probs.nrows(),
            layouts.n_heads()
        )));
    }
    let mut total = 0.0;
    for (h, row) in head_probs.rows().into_iter().enumerate() {
        total += expected_value(&row.to_vec(), layouts.layout(h))?;
    }
    Ok(total / layouts.n_heads() as f64)
}
