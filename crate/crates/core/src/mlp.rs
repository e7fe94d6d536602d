//! One-hidden-layer binary classifier.
//!
//! `input -> hidden (ReLU) -> 1 (logistic)`, trained with class-weighted
//! binary cross-entropy by full-batch gradient descent. Positive and negative
//! examples are weighted `n / (2 * n_class)` so both classes contribute
//! equally. The step size adapts: an accepted step grows it by half, a step
//! that would raise the loss is undone and the step halved, which keeps the
//! loss history non-increasing. `learning_rate` is the initial step.
//!
//! Parameters live in one flat vector:
//! `[w1 (hidden x input, row-major) | b1 (hidden) | w2 (hidden) | b2]`.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { hidden_dim: 128, learning_rate: 0.01, epochs: 100, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainError {
    Empty,
    DimensionMismatch { row: usize, expected: usize, found: usize },
    SingleClass { positives: usize, negatives: usize },
    NonFinite { epoch: usize },
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Empty => f.write_str("no training examples"),
            TrainError::DimensionMismatch { row, expected, found } => {
                write!(f, "feature row {row} has {found} values, expected {expected}")
            }
            TrainError::SingleClass { positives, negatives } => write!(
                f,
                "training needs both classes ({positives} positive, {negatives} negative)"
            ),
            TrainError::NonFinite { epoch } => write!(f, "loss became non-finite at epoch {epoch}"),
        }
    }
}

impl core::error::Error for TrainError {}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    input_dim: usize,
    hidden_dim: usize,
    params: Vec<f64>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

/// `-[y ln s(z) + (1-y) ln(1 - s(z))]` computed from the logit.
fn bce_with_logit(z: f64, y: bool) -> f64 {
    let softplus = z.max(0.0) + libm::log1p(libm::exp(-libm::fabs(z)));
    if y {
        softplus - z
    } else {
        softplus
    }
}

impl Mlp {
    pub fn param_count(input_dim: usize, hidden_dim: usize) -> usize {
        hidden_dim * input_dim + 2 * hidden_dim + 1
    }

    /// Uniform He-style initialisation, zero biases.
    pub fn init(input_dim: usize, hidden_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; Self::param_count(input_dim, hidden_dim)];
        let a1 = libm::sqrt(6.0 / input_dim.max(1) as f64);
        for w in &mut params[..hidden_dim * input_dim] {
            *w = rng.gen_range(-a1..a1);
        }
        let a2 = libm::sqrt(6.0 / (hidden_dim + 1) as f64);
        let w2 = hidden_dim * input_dim + hidden_dim;
        for w in &mut params[w2..w2 + hidden_dim] {
            *w = rng.gen_range(-a2..a2);
        }
        Self { input_dim, hidden_dim, params }
    }

    pub fn from_params(input_dim: usize, hidden_dim: usize, params: Vec<f64>) -> Option<Self> {
        (params.len() == Self::param_count(input_dim, hidden_dim)).then_some(Self { input_dim, hidden_dim, params })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn split(&self) -> (&[f64], &[f64], &[f64], f64) {
        let (h, d) = (self.hidden_dim, self.input_dim);
        let (w1, rest) = self.params.split_at(h * d);
        let (b1, rest) = rest.split_at(h);
        let (w2, rest) = rest.split_at(h);
        (w1, b1, w2, rest[0])
    }

    fn hidden_into(&self, x: &[f64], out: &mut [f64]) {
        let (w1, b1, _, _) = self.split();
        for (j, o) in out.iter_mut().enumerate() {
            let row = &w1[j * self.input_dim..(j + 1) * self.input_dim];
            let z: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b1[j];
            *o = z.max(0.0);
        }
    }

    pub fn logit(&self, x: &[f64]) -> f64 {
        let mut hidden = vec![0.0; self.hidden_dim];
        self.hidden_into(x, &mut hidden);
        let (_, _, w2, b2) = self.split();
        hidden.iter().zip(w2).map(|(h, w)| h * w).sum::<f64>() + b2
    }

    /// Predicted probability of the positive class.
    pub fn probability(&self, x: &[f64]) -> f64 {
        sigmoid(self.logit(x))
    }

    /// Weighted mean loss over the batch.
    pub fn loss(&self, xs: &[Vec<f64>], ys: &[bool], class_weights: (f64, f64)) -> f64 {
        let n = xs.len() as f64;
        xs.iter()
            .zip(ys)
            .map(|(x, &y)| weight_of(y, class_weights) * bce_with_logit(self.logit(x), y))
            .sum::<f64>()
            / n
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn loss_and_gradient(&self, xs: &[Vec<f64>], ys: &[bool], class_weights: (f64, f64)) -> (f64, Vec<f64>) {
        let (h, d) = (self.hidden_dim, self.input_dim);
        let (w1, b1, w2, b2) = self.split();
        let mut grad = vec![0.0; self.params.len()];
        let mut pre = vec![0.0; h];
        let mut loss = 0.0;
        let n = xs.len() as f64;
        for (x, &y) in xs.iter().zip(ys) {
            for j in 0..h {
                let row = &w1[j * d..(j + 1) * d];
                pre[j] = row.iter().zip(x.iter()).map(|(w, v)| w * v).sum::<f64>() + b1[j];
            }
            let z: f64 = pre.iter().zip(w2).map(|(p, w)| p.max(0.0) * w).sum::<f64>() + b2;
            let weight = weight_of(y, class_weights) / n;
            loss += weight * bce_with_logit(z, y);
            let dz = weight * (sigmoid(z) - if y { 1.0 } else { 0.0 });
            let (gw1, rest) = grad.split_at_mut(h * d);
            let (gb1, rest) = rest.split_at_mut(h);
            let (gw2, gb2) = rest.split_at_mut(h);
            gb2[0] += dz;
            for j in 0..h {
                if pre[j] <= 0.0 {
                    continue;
                }
                gw2[j] += dz * pre[j];
                let dh = dz * w2[j];
                gb1[j] += dh;
                for (g, v) in gw1[j * d..(j + 1) * d].iter_mut().zip(x.iter()) {
                    *g += dh * v;
                }
            }
        }
        (loss, grad)
    }
}

fn weight_of(y: bool, (pos, neg): (f64, f64)) -> f64 {
    if y {
        pos
    } else {
        neg
    }
}

/// Inverse-frequency weights `(positive, negative)`.
pub fn class_weights(ys: &[bool]) -> (f64, f64) {
    let n = ys.len() as f64;
    let p = ys.iter().filter(|&&y| y).count() as f64;
    let q = n - p;
    let w = |c: f64| if c > 0.0 { n / (2.0 * c) } else { 0.0 };
    (w(p), w(q))
}

/// A trained model plus the loss recorded before training and after each epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct Trained {
    pub model: Mlp,
    pub losses: Vec<f64>,
}

pub fn train(xs: &[Vec<f64>], ys: &[bool], cfg: &TrainConfig) -> Result<Trained, TrainError> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(TrainError::Empty);
    }
    let dim = xs[0].len();
    for (row, x) in xs.iter().enumerate() {
        if x.len() != dim {
            return Err(TrainError::DimensionMismatch { row, expected: dim, found: x.len() });
        }
    }
    let positives = ys.iter().filter(|&&y| y).count();
    let negatives = ys.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(TrainError::SingleClass { positives, negatives });
    }
    let weights = class_weights(ys);
    let mut model = Mlp::init(dim, cfg.hidden_dim, cfg.seed);
    let mut lr = cfg.learning_rate;
    let (mut loss, mut grad) = model.loss_and_gradient(xs, ys, weights);
    if !loss.is_finite() {
        return Err(TrainError::NonFinite { epoch: 0 });
    }
    let mut losses = Vec::with_capacity(cfg.epochs + 1);
    losses.push(loss);
    for epoch in 1..=cfg.epochs {
        let previous = model.params.clone();
        let mut accepted = false;
        for _ in 0..40 {
            for ((p, g), old) in model.params.iter_mut().zip(&grad).zip(&previous) {
                *p = old - lr * g;
            }
            let (next_loss, next_grad) = model.loss_and_gradient(xs, ys, weights);
            if !next_loss.is_finite() {
                return Err(TrainError::NonFinite { epoch });
            }
            if next_loss <= loss {
                loss = next_loss;
                grad = next_grad;
                accepted = true;
                lr *= 1.5;
                break;
            }
            lr *= 0.5;
        }
        if !accepted {
            model.params = previous;
        }
        losses.push(loss);
    }
    Ok(Trained { model, losses })
}
