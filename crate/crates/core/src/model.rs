//! Desk-scale differentiable classifiers.
//!
//! Parameters live in a flat `Vec<f64>` tagged with the architecture that
//! decodes it, so the server can average them element-wise without knowing
//! the layer layout. Every architecture implements [`Classifier`]; adding a
//! new one means adding a [`ShapeTag`] variant.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::seed::{child_rng, rng_from};

const PARAMS_MAGIC: &str = "FEDW";
const PARAMS_VERSION: &str = "v1";

/// Per-sample forward/backward for a classifier trained with cross-entropy.
pub trait Classifier {
    fn num_features(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn param_count(&self) -> usize;

    /// Writes fresh weights into `values` (biases zero).
    fn init(&self, values: &mut [f64], rng: &mut ChaCha8Rng);

    /// Computes the logits of one sample into `logits`.
    fn logits(&self, params: &[f64], x: &[f64], logits: &mut [f64]);

    /// Returns the cross-entropy loss of one sample and adds its gradient to `grad`.
    fn accumulate_grad(&self, params: &[f64], x: &[f64], y: usize, grad: &mut [f64]) -> f64;
}

/// Multinomial logistic regression. Layout: `W` (classes × features, row-major), then `b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SoftmaxRegression {
    pub features: usize,
    pub classes: usize,
}

/// One tanh hidden layer. Layout: `W1` (hidden × features), `b1`, `W2` (classes × hidden), `b2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mlp {
    pub features: usize,
    pub hidden: usize,
    pub classes: usize,
}

fn uniform_fill(values: &mut [f64], fan_in: usize, rng: &mut ChaCha8Rng) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    for v in values {
        *v = rng.random_range(-bound..=bound);
    }
}

/// Stable `log(sum(exp(z)))`; overwrites `z` with softmax probabilities.
fn softmax_in_place(z: &mut [f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
    max + sum.ln()
}

impl Classifier for SoftmaxRegression {
    fn num_features(&self) -> usize {
        self.features
    }

    fn num_classes(&self) -> usize {
        self.classes
    }

    fn param_count(&self) -> usize {
        self.classes * self.features + self.classes
    }

    fn init(&self, values: &mut [f64], rng: &mut ChaCha8Rng) {
        let (w, b) = values.split_at_mut(self.classes * self.features);
        uniform_fill(w, self.features, rng);
        b.fill(0.0);
    }

    fn logits(&self, params: &[f64], x: &[f64], logits: &mut [f64]) {
        let (w, b) = params.split_at(self.classes * self.features);
        for (c, out) in logits.iter_mut().enumerate() {
            let row = &w[c * self.features..(c + 1) * self.features];
            *out = b[c] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    fn accumulate_grad(&self, params: &[f64], x: &[f64], y: usize, grad: &mut [f64]) -> f64 {
        let mut z = vec![0.0; self.classes];
        self.logits(params, x, &mut z);
        let zy = z[y];
        let lse = softmax_in_place(&mut z);
        z[y] -= 1.0;
        let (gw, gb) = grad.split_at_mut(self.classes * self.features);
        for (c, &dz) in z.iter().enumerate() {
            for (g, xi) in gw[c * self.features..(c + 1) * self.features].iter_mut().zip(x) {
                *g += dz * xi;
            }
            gb[c] += dz;
        }
        lse - zy
    }
}

impl Mlp {
    fn split<'a>(&self, params: &'a [f64]) -> (&'a [f64], &'a [f64], &'a [f64], &'a [f64]) {
        let (w1, rest) = params.split_at(self.hidden * self.features);
        let (b1, rest) = rest.split_at(self.hidden);
        let (w2, b2) = rest.split_at(self.classes * self.hidden);
        (w1, b1, w2, b2)
    }

    fn hidden_activations(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let (w1, b1, _, _) = self.split(params);
        (0..self.hidden)
            .map(|h| {
                let row = &w1[h * self.features..(h + 1) * self.features];
                (b1[h] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()).tanh()
            })
            .collect()
    }

    fn output_logits(&self, params: &[f64], a: &[f64], logits: &mut [f64]) {
        let (_, _, w2, b2) = self.split(params);
        for (c, out) in logits.iter_mut().enumerate() {
            let row = &w2[c * self.hidden..(c + 1) * self.hidden];
            *out = b2[c] + row.iter().zip(a).map(|(p, q)| p * q).sum::<f64>();
        }
    }
}

impl Classifier for Mlp {
    fn num_features(&self) -> usize {
        self.features
    }

    fn num_classes(&self) -> usize {
        self.classes
    }

    fn param_count(&self) -> usize {
        self.hidden * self.features + self.hidden + self.classes * self.hidden + self.classes
    }

    fn init(&self, values: &mut [f64], rng: &mut ChaCha8Rng) {
        let (w1, rest) = values.split_at_mut(self.hidden * self.features);
        let (b1, rest) = rest.split_at_mut(self.hidden);
        let (w2, b2) = rest.split_at_mut(self.classes * self.hidden);
        uniform_fill(w1, self.features, rng);
        b1.fill(0.0);
        uniform_fill(w2, self.hidden, rng);
        b2.fill(0.0);
    }

    fn logits(&self, params: &[f64], x: &[f64], logits: &mut [f64]) {
        let a = self.hidden_activations(params, x);
        self.output_logits(params, &a, logits);
    }

    fn accumulate_grad(&self, params: &[f64], x: &[f64], y: usize, grad: &mut [f64]) -> f64 {
        let a = self.hidden_activations(params, x);
        let mut z = vec![0.0; self.classes];
        self.output_logits(params, &a, &mut z);
        let zy = z[y];
        let lse = softmax_in_place(&mut z);
        z[y] -= 1.0;

        let (_, _, w2, _) = self.split(params);
        let (gw1, rest) = grad.split_at_mut(self.hidden * self.features);
        let (gb1, rest) = rest.split_at_mut(self.hidden);
        let (gw2, gb2) = rest.split_at_mut(self.classes * self.hidden);

        let mut da = vec![0.0; self.hidden];
        for (c, &dz) in z.iter().enumerate() {
            let w_row = &w2[c * self.hidden..(c + 1) * self.hidden];
            let g_row = &mut gw2[c * self.hidden..(c + 1) * self.hidden];
            for h in 0..self.hidden {
                g_row[h] += dz * a[h];
                da[h] += dz * w_row[h];
            }
            gb2[c] += dz;
        }
        for h in 0..self.hidden {
            let dh = da[h] * (1.0 - a[h] * a[h]);
            for (g, xi) in gw1[h * self.features..(h + 1) * self.features].iter_mut().zip(x) {
                *g += dh * xi;
            }
            gb1[h] += dh;
        }
        lse - zy
    }
}

/// Architecture identifier; renders as `softmax-<F>-<C>` or `mlp-<F>-<H>-<C>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeTag {
    Softmax(SoftmaxRegression),
    Mlp(Mlp),
}

impl ShapeTag {
    pub fn softmax(features: usize, classes: usize) -> Result<Self> {
        if features == 0 || classes == 0 {
            return Err(Error::UnknownShape(format!("softmax-{features}-{classes}")));
        }
        Ok(ShapeTag::Softmax(SoftmaxRegression { features, classes }))
    }

    pub fn mlp(features: usize, hidden: usize, classes: usize) -> Result<Self> {
        if features == 0 || hidden == 0 || classes == 0 {
            return Err(Error::UnknownShape(format!("mlp-{features}-{hidden}-{classes}")));
        }
        Ok(ShapeTag::Mlp(Mlp {
            features,
            hidden,
            classes,
        }))
    }

    pub fn classifier(&self) -> &dyn Classifier {
        match self {
            ShapeTag::Softmax(m) => m,
            ShapeTag::Mlp(m) => m,
        }
    }

    pub fn param_count(&self) -> usize {
        self.classifier().param_count()
    }

    pub fn num_features(&self) -> usize {
        self.classifier().num_features()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier().num_classes()
    }
}

impl fmt::Display for ShapeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ShapeTag::Softmax(m) => write!(f, "softmax-{}-{}", m.features, m.classes),
            ShapeTag::Mlp(m) => write!(f, "mlp-{}-{}-{}", m.features, m.hidden, m.classes),
        }
    }
}

impl FromStr for ShapeTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::UnknownShape(s.to_string());
        let mut parts = s.split('-');
        let kind = parts.next().ok_or_else(unknown)?;
        let dims: Vec<usize> = parts
            .map(|p| p.parse().map_err(|_| unknown()))
            .collect::<Result<_>>()?;
        match (kind, dims.as_slice()) {
            ("softmax", &[f, c]) => ShapeTag::softmax(f, c),
            ("mlp", &[f, h, c]) => ShapeTag::mlp(f, h, c),
            _ => Err(unknown()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    shape: ShapeTag,
    values: Vec<f64>,
}

impl ModelParams {
    pub fn new(shape: ShapeTag, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.param_count() {
            return Err(Error::Dimension {
                expected: shape.param_count(),
                found: values.len(),
            });
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: ShapeTag) -> Self {
        Self {
            values: vec![0.0; shape.param_count()],
            shape,
        }
    }

    pub fn shape(&self) -> ShapeTag {
        self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn ensure_same_shape(&self, other: &ModelParams) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                left: self.shape.to_string(),
                right: other.shape.to_string(),
            });
        }
        Ok(())
    }

    /// Euclidean distance between two parameter vectors of the same shape.
    pub fn distance(&self, other: &ModelParams) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    /// `FEDW v1 <shape_tag> <len>\n` followed by little-endian `f64` values.
    pub fn encode(&self) -> Vec<u8> {
        let header = format!("{PARAMS_MAGIC} {PARAMS_VERSION} {} {}\n", self.shape, self.values.len());
        let mut out = Vec::with_capacity(header.len() + self.values.len() * 8);
        out.extend_from_slice(header.as_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let header_end = bytes
            .iter()
            .take(256)
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::parse(0, "missing header line"))?;
        let header = std::str::from_utf8(&bytes[..header_end])
            .map_err(|_| Error::parse(0, "header is not ASCII"))?;
        let fields: Vec<&str> = header.split(' ').collect();
        if fields.len() != 4 || fields[0] != PARAMS_MAGIC || fields[1] != PARAMS_VERSION {
            return Err(Error::parse(0, format!("bad header `{header}`")));
        }
        let shape: ShapeTag = fields[2].parse()?;
        let len: usize = fields[3]
            .parse()
            .map_err(|_| Error::parse(0, format!("bad length `{}`", fields[3])))?;
        let body = &bytes[header_end + 1..];
        if body.len() != len * 8 {
            return Err(Error::parse(
                (header_end + 1 + (body.len() / 8).min(len) * 8) as u64,
                format!("expected {len} values"),
            ));
        }
        let values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        ModelParams::new(shape, values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub rng_seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        // zero is accepted: it freezes the model, which several checks rely on
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalDetail {
    Summary,
    Losses,
    LossesAndGradNorms,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mean_loss: f64,
    pub accuracy: f64,
    pub per_sample_losses: Option<Vec<f64>>,
    pub per_sample_grad_norms: Option<Vec<f64>>,
}

pub fn init_params(shape: ShapeTag, seed: u64) -> ModelParams {
    let mut params = ModelParams::zeros(shape);
    let mut rng = child_rng(seed, "model-init", 0);
    shape.classifier().init(&mut params.values, &mut rng);
    params
}

fn check_data(params: &ModelParams, data: &LabeledDataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let shape = params.shape();
    if data.num_features() != shape.num_features() {
        return Err(Error::Dimension {
            expected: shape.num_features(),
            found: data.num_features(),
        });
    }
    if data.num_classes() != shape.num_classes() {
        return Err(Error::Dimension {
            expected: shape.num_classes(),
            found: data.num_classes(),
        });
    }
    Ok(())
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy (natural log) and argmax accuracy of `params` on `data`.
pub fn evaluate(params: &ModelParams, data: &LabeledDataset, detail: EvalDetail) -> Result<EvalReport> {
    check_data(params, data)?;
    let shape = params.shape();
    let model = shape.classifier();
    let mut z = vec![0.0; model.num_classes()];
    let mut grad = match detail {
        EvalDetail::LossesAndGradNorms => vec![0.0; model.param_count()],
        _ => Vec::new(),
    };
    let mut losses = Vec::with_capacity(data.len());
    let mut norms = Vec::new();
    let mut correct = 0usize;

    for i in 0..data.len() {
        let x = data.row(i);
        let y = data.label(i);
        model.logits(params.values(), x, &mut z);
        if argmax(&z) == y {
            correct += 1;
        }
        let loss = if detail == EvalDetail::LossesAndGradNorms {
            grad.fill(0.0);
            let loss = model.accumulate_grad(params.values(), x, y, &mut grad);
            norms.push(grad.iter().map(|g| g * g).sum::<f64>().sqrt());
            loss
        } else {
            let zy = z[y];
            softmax_in_place(&mut z) - zy
        };
        losses.push(loss);
    }

    let n = data.len() as f64;
    Ok(EvalReport {
        mean_loss: losses.iter().sum::<f64>() / n,
        accuracy: correct as f64 / n,
        per_sample_losses: (detail != EvalDetail::Summary).then_some(losses),
        per_sample_grad_norms: (detail == EvalDetail::LossesAndGradNorms).then_some(norms),
    })
}

/// Mean loss and mean gradient over the given rows.
fn batch_loss_grad(model: &dyn Classifier, params: &[f64], data: &LabeledDataset, rows: &[usize]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; model.param_count()];
    let mut loss = 0.0;
    for &i in rows {
        loss += model.accumulate_grad(params, data.row(i), data.label(i), &mut grad);
    }
    let scale = 1.0 / rows.len() as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    (loss * scale, grad)
}

/// Mean cross-entropy and its gradient over the whole dataset.
pub fn loss_and_gradient(params: &ModelParams, data: &LabeledDataset) -> Result<(f64, Vec<f64>)> {
    check_data(params, data)?;
    let rows: Vec<usize> = (0..data.len()).collect();
    Ok(batch_loss_grad(params.shape().classifier(), params.values(), data, &rows))
}

/// Mini-batch SGD with a fresh seeded shuffle every epoch.
pub fn sgd_epochs(params: &ModelParams, data: &LabeledDataset, cfg: &TrainConfig) -> Result<ModelParams> {
    cfg.validate()?;
    check_data(params, data)?;
    let shape = params.shape();
    let model = shape.classifier();
    let mut out = params.clone();
    let mut rng = rng_from(cfg.rng_seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let (_, grad) = batch_loss_grad(model, &out.values, data, batch);
            for (w, g) in out.values.iter_mut().zip(&grad) {
                *w -= cfg.learning_rate * g;
            }
        }
    }
    Ok(out)
}

/// Largest `|analytic - central difference| / max(1, |analytic|)` over all parameters.
pub fn grad_check(params: &ModelParams, data: &LabeledDataset, epsilon: f64) -> Result<f64> {
    let (_, analytic) = loss_and_gradient(params, data)?;
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let orig = probe.values[i];
        probe.values[i] = orig + epsilon;
        let plus = evaluate(&probe, data, EvalDetail::Summary)?.mean_loss;
        probe.values[i] = orig - epsilon;
        let minus = evaluate(&probe, data, EvalDetail::Summary)?.mean_loss;
        probe.values[i] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
