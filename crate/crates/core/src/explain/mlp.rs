//! Two-layer fully connected classifier: standardized input, one rectified
//! hidden layer, softmax output, trained by full-batch gradient descent on
//! mean cross-entropy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Learner, Predictor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub hidden_units: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub zero_init_output: bool,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden_units: 64,
            lr: 0.1,
            epochs: 300,
            seed: 0,
            zero_init_output: false,
        }
    }
}

/// Column statistics from the training rows only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &[Vec<f64>]) -> Self {
        let d = x[0].len();
        let n = x.len() as f64;
        let mut mean = vec![0.0; d];
        for r in x {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n);
        }
        let mut std = vec![0.0; d];
        for r in x {
            std.iter_mut()
                .zip(r)
                .zip(&mean)
                .for_each(|((s, v), m)| *s += (v - m) * (v - m) / n);
        }
        let std = std
            .into_iter()
            .map(|v| if v > 0.0 { v.sqrt() } else { 1.0 })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub inputs: usize,
    pub hidden: usize,
    pub classes: usize,
    /// `[hidden x inputs]`
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `[classes x hidden]`
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub standardizer: Standardizer,
}

/// Gradients with the same layout as [`Mlp`]'s weights.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Mlp {
    fn hidden_and_logits(&self, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let h: Vec<f64> = (0..self.hidden)
            .map(|j| {
                let w = &self.w1[j * self.inputs..(j + 1) * self.inputs];
                (self.b1[j] + w.iter().zip(z).map(|(a, b)| a * b).sum::<f64>()).max(0.0)
            })
            .collect();
        let logits = (0..self.classes)
            .map(|c| {
                let w = &self.w2[c * self.hidden..(c + 1) * self.hidden];
                self.b2[c] + w.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        (h, logits)
    }

    /// Class probabilities for a raw (unstandardized) row.
    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.hidden_and_logits(&self.standardizer.apply(x)).1)
    }

    /// Mean cross-entropy over already-standardized rows and its gradient.
    pub fn loss_and_gradients(&self, z: &[Vec<f64>], y: &[usize]) -> (f64, MlpGradients) {
        let mut g = MlpGradients {
            w1: vec![0.0; self.w1.len()],
            b1: vec![0.0; self.b1.len()],
            w2: vec![0.0; self.w2.len()],
            b2: vec![0.0; self.b2.len()],
        };
        let n = z.len() as f64;
        let mut loss = 0.0;
        for (row, &label) in z.iter().zip(y) {
            let (h, logits) = self.hidden_and_logits(row);
            let p = softmax(&logits);
            loss -= p[label].max(f64::MIN_POSITIVE).ln() / n;
            let mut g_h = vec![0.0; self.hidden];
            for c in 0..self.classes {
                let d = (p[c] - f64::from(u8::from(c == label))) / n;
                g.b2[c] += d;
                for j in 0..self.hidden {
                    g.w2[c * self.hidden + j] += d * h[j];
                    g_h[j] += d * self.w2[c * self.hidden + j];
                }
            }
            for j in 0..self.hidden {
                // rectifier derivative taken as 0 at exactly 0
                if h[j] <= 0.0 {
                    continue;
                }
                g.b1[j] += g_h[j];
                let gw = &mut g.w1[j * self.inputs..(j + 1) * self.inputs];
                gw.iter_mut().zip(row).for_each(|(a, b)| *a += g_h[j] * b);
            }
        }
        (loss, g)
    }

    fn apply_step(&mut self, g: &MlpGradients, lr: f64) {
        for (p, d) in [
            (&mut self.w1, &g.w1),
            (&mut self.b1, &g.b1),
            (&mut self.w2, &g.w2),
            (&mut self.b2, &g.b2),
        ] {
            p.iter_mut().zip(d).for_each(|(a, b)| *a -= lr * b);
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl Predictor for Mlp {
    fn predict(&self, x: &[f64]) -> usize {
        let p = self.probabilities(x);
        let mut best = 0;
        for c in 1..p.len() {
            if p[c] > p[best] {
                best = c;
            }
        }
        best
    }
}

/// Untrained network with standardization fitted to `x`.
pub fn init_mlp(x: &[Vec<f64>], num_classes: usize, cfg: &MlpConfig) -> Mlp {
    let inputs = x[0].len();
    let hidden = cfg.hidden_units;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut uniform = |n: usize, bound: f64| -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
    };
    let w1 = uniform(hidden * inputs, (6.0 / (inputs + hidden) as f64).sqrt());
    let w2 = if cfg.zero_init_output {
        vec![0.0; num_classes * hidden]
    } else {
        uniform(
            num_classes * hidden,
            (6.0 / (hidden + num_classes) as f64).sqrt(),
        )
    };
    Mlp {
        inputs,
        hidden,
        classes: num_classes,
        w1,
        b1: vec![0.0; hidden],
        w2,
        b2: vec![0.0; num_classes],
        standardizer: Standardizer::fit(x),
    }
}

pub fn train_mlp(x: &[Vec<f64>], y: &[usize], num_classes: usize, cfg: &MlpConfig) -> Result<Mlp> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::Shape(format!(
            "{} feature rows for {} labels",
            x.len(),
            y.len()
        )));
    }
    if cfg.hidden_units == 0 || cfg.lr.is_nan() || cfg.lr <= 0.0 {
        return Err(Error::InvalidConfig(
            "hidden_units and lr must be positive".into(),
        ));
    }
    if y.iter().any(|&c| c >= num_classes) {
        return Err(Error::Precondition("label outside [0, num_classes)".into()));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Precondition("non-finite feature".into()));
    }
    let mut model = init_mlp(x, num_classes, cfg);
    let z: Vec<Vec<f64>> = x.iter().map(|r| model.standardizer.apply(r)).collect();
    for epoch in 0..cfg.epochs {
        let (loss, g) = model.loss_and_gradients(&z, y);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: epoch,
                total: loss,
                positive: f64::NAN,
                negatives: Vec::new(),
            });
        }
        model.apply_step(&g, cfg.lr);
    }
    Ok(model)
}

impl Learner for MlpConfig {
    type Model = Mlp;

    fn fit(&self, x: &[Vec<f64>], y: &[usize], num_classes: usize) -> Result<Mlp> {
        train_mlp(x, y, num_classes, self)
    }
}
