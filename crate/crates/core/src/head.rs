//! Single-layer sigmoid classification head trained by full-batch gradient
//! descent on mean binary cross-entropy.
//!
//! Features are stored as `f32`; every dot product and reduction runs in `f64`
//! in a fixed order, so training is bit-reproducible.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{seed, Outcome};

const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Zeros,
    SeededUniform(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub init: Init,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            learning_rate: 1e-5,
            init: Init::SeededUniform(0.01),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if let Init::SeededUniform(s) = self.init {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::Config(format!("init scale must be >= 0, got {s}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub weights: Vec<f64>,
    pub bias: f64,
}

pub fn init_head(input_dim: usize, init: Init, seed_value: u64) -> Head {
    let weights = match init {
        Init::Zeros => vec![0.0; input_dim],
        Init::SeededUniform(scale) => {
            let mut rng = seed::rng(seed_value);
            (0..input_dim)
                .map(|_| if scale > 0.0 { rng.random_range(-scale..=scale) } else { 0.0 })
                .collect()
        }
    };
    Head { weights, bias: 0.0 }
}

/// `1 / (1 + e^-z)` without overflow for large `|z|`.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy with the log arguments clamped to `[1e-12, 1]`.
pub fn loss(p: f64, y: f64) -> f64 {
    let lp = p.max(LOG_CLAMP).ln();
    let lq = (1.0 - p).max(LOG_CLAMP).ln();
    -(y * lp + (1.0 - y) * lq)
}

impl Head {
    pub fn input_dim(&self) -> usize {
        self.weights.len()
    }

    fn logit(&self, x: &[f32]) -> f64 {
        self.weights
            .iter()
            .zip(x)
            .fold(self.bias, |acc, (w, v)| acc + w * f64::from(*v))
    }

    /// Death probability for one feature vector.
    pub fn forward(&self, x: &[f32]) -> Result<f64> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        Ok(sigmoid(self.logit(x)))
    }

    /// Death iff `p >= threshold`.
    pub fn predict(&self, x: &[f32], threshold: f64) -> Result<(Outcome, f64)> {
        let p = self.forward(x)?;
        Ok((classify(p, threshold), p))
    }
}

pub fn classify(p: f64, threshold: f64) -> Outcome {
    if p >= threshold {
        Outcome::Death
    } else {
        Outcome::Survival
    }
}

/// A training batch: feature rows and targets in `[0, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub xs: &'a [&'a [f32]],
    pub ys: &'a [f64],
}

impl<'a> Batch<'a> {
    pub fn new(xs: &'a [&'a [f32]], ys: &'a [f64]) -> Self {
        Batch { xs, ys }
    }

    fn check(&self, dim: usize) -> Result<()> {
        if self.xs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if self.xs.len() != self.ys.len() {
            return Err(Error::DimensionMismatch {
                expected: self.xs.len(),
                actual: self.ys.len(),
            });
        }
        if let Some(x) = self.xs.iter().find(|x| x.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: x.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<f64>,
    pub bias: f64,
}

/// Mean BCE over the batch.
pub fn batch_loss(head: &Head, batch: Batch<'_>) -> Result<f64> {
    batch.check(head.input_dim())?;
    let total: f64 = batch
        .xs
        .iter()
        .zip(batch.ys)
        .map(|(x, y)| loss(sigmoid(head.logit(x)), *y))
        .sum();
    Ok(total / batch.xs.len() as f64)
}

fn gradient_and_loss(head: &Head, batch: Batch<'_>) -> (Gradient, f64) {
    let n = batch.xs.len() as f64;
    let mut gw = vec![0.0; head.input_dim()];
    let mut gb = 0.0;
    let mut total = 0.0;
    for (x, y) in batch.xs.iter().zip(batch.ys) {
        let p = sigmoid(head.logit(x));
        total += loss(p, *y);
        let r = p - y;
        gb += r;
        for (g, v) in gw.iter_mut().zip(x.iter()) {
            *g += r * f64::from(*v);
        }
    }
    gw.iter_mut().for_each(|g| *g /= n);
    (
        Gradient {
            weights: gw,
            bias: gb / n,
        },
        total / n,
    )
}

/// Analytic gradient of the mean BCE: `mean((p - y) x)` and `mean(p - y)`.
pub fn gradient(head: &Head, batch: Batch<'_>) -> Result<Gradient> {
    batch.check(head.input_dim())?;
    Ok(gradient_and_loss(head, batch).0)
}

/// Central finite differences of [`batch_loss`] with step `h`, in the same
/// layout as [`gradient`].
pub fn numerical_gradient(head: &Head, batch: Batch<'_>, h: f64) -> Result<Gradient> {
    batch.check(head.input_dim())?;
    // Parameter `i < dim` is a weight; `i == dim` is the bias.
    let central = |i: usize| -> Result<f64> {
        let mut probe = head.clone();
        let mut at = |delta: f64| {
            match probe.weights.get_mut(i) {
                Some(w) => *w = head.weights[i] + delta,
                None => probe.bias = head.bias + delta,
            }
            batch_loss(&probe, batch)
        };
        Ok((at(h)? - at(-h)?) / (2.0 * h))
    };
    let dim = head.input_dim();
    Ok(Gradient {
        weights: (0..dim).map(central).collect::<Result<_>>()?,
        bias: central(dim)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub head: Head,
    /// Mean loss at the start of each epoch, before that epoch's step.
    pub loss_trace: Vec<f64>,
}

/// `epochs` steps of full-batch gradient descent.
pub fn train(mut head: Head, batch: Batch<'_>, config: &TrainConfig) -> Result<Trained> {
    config.validate()?;
    batch.check(head.input_dim())?;
    let lr = config.learning_rate;
    let mut loss_trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let (grad, l) = gradient_and_loss(&head, batch);
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        loss_trace.push(l);
        for (w, g) in head.weights.iter_mut().zip(&grad.weights) {
            *w -= lr * g;
        }
        head.bias -= lr * grad.bias;
        if !head.bias.is_finite() || head.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFiniteLoss { epoch });
        }
    }
    Ok(Trained { head, loss_trace })
}
