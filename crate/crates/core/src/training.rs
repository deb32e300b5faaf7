//! Triplet loss over sampled subseries, its exact gradients through the
//! encoder, the optimization loop and a finite-difference gradient check.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{init_params, save_checkpoint, EncoderConfig, EncoderParams, ForwardCache};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::sampling::{sample_triplets, SamplerConfig, SamplerScheme, TripletBatch};
use crate::signal::SubjectSeries;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub negatives: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    pub scheme: SamplerScheme,
    #[serde(default)]
    pub sampler: SamplerConfig,
    pub seed: u64,
    /// Write a checkpoint every this many iterations; 0 disables.
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl TrainConfig {
    /// Desk-scale defaults: 1500 Adam steps at lr 1e-3.
    pub fn desk(seed: u64) -> Self {
        Self {
            iterations: 1500,
            batch_size: 8,
            negatives: 4,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::default(),
            scheme: SamplerScheme::WithinSubject,
            sampler: SamplerConfig {
                min_length: 16,
                max_length: Some(240),
            },
            seed,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.negatives == 0 {
            return Err(Error::InvalidConfig(
                "batch_size and negatives must be at least 1".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(
                "learning_rate must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Value of the triplet objective with its terms.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub total: f64,
    /// `-log sigmoid(ref . pos)`
    pub positive: f64,
    /// `-log sigmoid(-ref . neg_k)` for each negative.
    pub negatives: Vec<f64>,
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_dims(e_ref: &[f64], others: &[&[f64]]) -> Result<()> {
    for o in others {
        if o.len() != e_ref.len() {
            return Err(Error::Shape(format!(
                "embedding dimensions differ: {} vs {}",
                e_ref.len(),
                o.len()
            )));
        }
    }
    Ok(())
}

/// `-log sigmoid(ref . pos) - sum_k log sigmoid(-ref . neg_k)`.
pub fn triplet_loss(e_ref: &[f64], e_pos: &[f64], e_negs: &[&[f64]]) -> Result<LossValue> {
    if e_negs.is_empty() {
        return Err(Error::Precondition(
            "at least one negative is required".into(),
        ));
    }
    check_dims(e_ref, &[e_pos])?;
    check_dims(e_ref, e_negs)?;
    Ok(loss_from_dots(
        dot(e_ref, e_pos),
        e_negs.iter().map(|n| dot(e_ref, n)),
    ))
}

fn loss_from_dots(pos_dot: f64, neg_dots: impl Iterator<Item = f64>) -> LossValue {
    let positive = softplus(-pos_dot);
    let negatives: Vec<f64> = neg_dots.map(softplus).collect();
    LossValue {
        total: positive + negatives.iter().sum::<f64>(),
        positive,
        negatives,
    }
}

/// Batch-mean loss and its gradient.
#[derive(Clone, Debug)]
pub struct BatchGradient {
    pub loss: f64,
    pub positive_mean: f64,
    pub negative_mean: f64,
    pub items: Vec<LossValue>,
    pub grads: EncoderParams,
}

fn item_gradient(
    params: &EncoderParams,
    sources: &[&Matrix],
    item: &crate::sampling::TripletItem,
    weight: f64,
) -> Result<(LossValue, EncoderParams)> {
    let r = params.forward_cached(&item.reference.extract(sources))?;
    let p = params.forward_cached(&item.positive.extract(sources))?;
    let negs: Vec<ForwardCache> = item
        .negatives
        .iter()
        .map(|n| params.forward_cached(&n.extract(sources)))
        .collect::<Result<_>>()?;

    let e_ref = &r.embedding;
    let pos_dot = dot(e_ref, &p.embedding);
    let neg_dots: Vec<f64> = negs.iter().map(|n| dot(e_ref, &n.embedding)).collect();
    let loss = loss_from_dots(pos_dot, neg_dots.iter().copied());

    // dL/d(ref.pos) = -sigmoid(-ref.pos), dL/d(ref.neg) = sigmoid(ref.neg)
    let c_pos = -sigmoid(-pos_dot) * weight;
    let c_negs: Vec<f64> = neg_dots.iter().map(|&d| sigmoid(d) * weight).collect();

    let mut g_ref: Vec<f64> = p.embedding.iter().map(|v| c_pos * v).collect();
    for (n, c) in negs.iter().zip(&c_negs) {
        g_ref
            .iter_mut()
            .zip(&n.embedding)
            .for_each(|(g, v)| *g += c * v);
    }
    let mut grads = params.zeros_like();
    params.backward_into(&r, &g_ref, &mut grads, false)?;
    let g_pos: Vec<f64> = e_ref.iter().map(|v| c_pos * v).collect();
    params.backward_into(&p, &g_pos, &mut grads, false)?;
    for (n, c) in negs.iter().zip(&c_negs) {
        let g: Vec<f64> = e_ref.iter().map(|v| c * v).collect();
        params.backward_into(n, &g, &mut grads, false)?;
    }
    Ok((loss, grads))
}

/// Gradient of the batch-mean triplet loss. Items are evaluated in parallel
/// and reduced in item order, so results match a serial run bit for bit.
pub fn loss_gradients(
    params: &EncoderParams,
    sources: &[&Matrix],
    batch: &TripletBatch,
) -> Result<BatchGradient> {
    let n = batch.items.len();
    if n == 0 {
        return Err(Error::Precondition("empty triplet batch".into()));
    }
    let weight = 1.0 / n as f64;
    let per_item: Vec<(LossValue, EncoderParams)> = batch
        .items
        .par_iter()
        .map(|item| item_gradient(params, sources, item, weight))
        .collect::<Result<_>>()?;

    let mut grads = params.zeros_like();
    let mut items = Vec::with_capacity(n);
    for (loss, g) in per_item {
        grads.add_scaled(&g, 1.0);
        items.push(loss);
    }
    let loss = items.iter().map(|l| l.total).sum::<f64>() * weight;
    let positive_mean = items.iter().map(|l| l.positive).sum::<f64>() * weight;
    let k = batch.negatives_per_item.max(1) as f64;
    let negative_mean = items
        .iter()
        .map(|l| l.negatives.iter().sum::<f64>())
        .sum::<f64>()
        * weight
        / k;
    Ok(BatchGradient {
        loss,
        positive_mean,
        negative_mean,
        items,
        grads,
    })
}

/// Batch-mean loss only.
pub fn batch_loss(
    params: &EncoderParams,
    sources: &[&Matrix],
    batch: &TripletBatch,
) -> Result<f64> {
    let mut total = 0.0;
    for item in &batch.items {
        let r = params.forward(&item.reference.extract(sources))?.values;
        let p = params.forward(&item.positive.extract(sources))?.values;
        let negs: Vec<Vec<f64>> = item
            .negatives
            .iter()
            .map(|n| params.forward(&n.extract(sources)).map(|e| e.values))
            .collect::<Result<_>>()?;
        let refs: Vec<&[f64]> = negs.iter().map(Vec::as_slice).collect();
        total += triplet_loss(&r, &p, &refs)?.total;
    }
    Ok(total / batch.items.len() as f64)
}

// ---------------------------------------------------------------------------
// Optimizers

/// Stateful first-order optimizer over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, num_params: usize) -> Self {
        let state = match kind {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Adam { .. } => num_params,
        };
        Self {
            kind,
            lr,
            step: 0,
            m: vec![0.0; state],
            v: vec![0.0; state],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len());
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                for i in 0..params.len() {
                    let g = grads[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    params[i] -= self.lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    pub pos_term: f64,
    pub neg_term_mean: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    pub trace: Vec<TraceRow>,
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Indices of the subjects that make up the batch at `iteration`. Distinct
/// subjects when the batch fits, otherwise drawn with replacement.
fn batch_members(num_sources: usize, batch_size: usize, seed: u64, iteration: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 2 * iteration as u64 + 1));
    if batch_size <= num_sources {
        index::sample(&mut rng, num_sources, batch_size).into_vec()
    } else {
        (0..batch_size)
            .map(|_| rng.random_range(0..num_sources))
            .collect()
    }
}

/// Trains an encoder on `sources` (expected to be normalized already).
/// When `checkpoint_dir` is given, snapshots go to
/// `checkpoint_dir/step-XXXXXX/` every `checkpoint_every` iterations.
pub fn train(
    sources: &[SubjectSeries],
    enc_cfg: &EncoderConfig,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    enc_cfg.validate()?;
    if sources.is_empty() {
        return Err(Error::Precondition("no training sources".into()));
    }
    for s in sources {
        if s.num_channels() != enc_cfg.in_channels {
            return Err(Error::Shape(format!(
                "{} has {} channels, encoder expects {}",
                s.subject_id,
                s.num_channels(),
                enc_cfg.in_channels
            )));
        }
        if s.num_timesteps() < 2 * cfg.sampler.min_length {
            return Err(Error::Precondition(format!(
                "{} has {} steps, sampler needs {}",
                s.subject_id,
                s.num_timesteps(),
                2 * cfg.sampler.min_length
            )));
        }
    }
    let mut params = init_params(enc_cfg, cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, params.num_params());
    let mut flat = params.to_flat();
    let mut trace = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let members = batch_members(sources.len(), cfg.batch_size, cfg.seed, it);
        let mats: Vec<&Matrix> = members.iter().map(|&i| &sources[i].values).collect();
        let lengths: Vec<usize> = mats.iter().map(|m| m.cols()).collect();
        let batch = sample_triplets(
            &lengths,
            cfg.negatives,
            cfg.scheme,
            &cfg.sampler,
            mix_seed(cfg.seed, 2 * it as u64 + 2),
        )?;
        let bg = loss_gradients(&params, &mats, &batch)?;
        if !bg.loss.is_finite() {
            let worst = bg
                .items
                .iter()
                .find(|l| !l.total.is_finite())
                .unwrap_or(&bg.items[0]);
            return Err(Error::NonFiniteLoss {
                iteration: it,
                total: bg.loss,
                positive: worst.positive,
                negatives: worst.negatives.clone(),
            });
        }
        trace.push(TraceRow {
            iteration: it,
            loss: bg.loss,
            pos_term: bg.positive_mean,
            neg_term_mean: bg.negative_mean,
        });
        opt.step(&mut flat, &bg.grads.to_flat());
        params.copy_from_flat(&flat)?;

        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 {
                save_checkpoint(&params, cfg.seed, dir.join(format!("step-{:06}", it + 1)))?;
            }
        }
        if it % 100 == 0 {
            log::debug!("iteration {it}: loss {:.6}", bg.loss);
        }
    }
    Ok(TrainOutcome { params, trace })
}

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("iteration,loss,pos_term,neg_term_mean\n");
    for r in trace {
        writeln!(
            out,
            "{},{},{},{}",
            r.iteration, r.loss, r.pos_term, r.neg_term_mean
        )
        .unwrap();
    }
    out
}

pub fn write_trace(trace: &[TraceRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, trace_csv(trace)).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Gradient verification

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub num_params: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_param: usize,
}

pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Relative error with a floor on the denominator so that gradients that
/// are zero on both sides count as exact.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-7 {
        diff / 1e-7
    } else {
        diff / scale
    }
}

/// Compares every analytic parameter gradient of the batch-mean loss with
/// central differences.
pub fn grad_check_params(
    params: &EncoderParams,
    sources: &[&Matrix],
    batch: &TripletBatch,
) -> Result<GradCheckReport> {
    let analytic = loss_gradients(params, sources, batch)?.grads.to_flat();
    let base = params.to_flat();
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        num_params: base.len(),
        checked: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_param: 0,
    };
    let mut work = base.clone();
    for i in 0..base.len() {
        work[i] = base[i] + GRAD_CHECK_STEP;
        probe.copy_from_flat(&work)?;
        let up = batch_loss(&probe, sources, batch)?;
        work[i] = base[i] - GRAD_CHECK_STEP;
        probe.copy_from_flat(&work)?;
        let down = batch_loss(&probe, sources, batch)?;
        work[i] = base[i];
        let numeric = (up - down) / (2.0 * GRAD_CHECK_STEP);
        let rel = relative_error(analytic[i], numeric);
        report.max_abs_error = report.max_abs_error.max((analytic[i] - numeric).abs());
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_param = i;
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Random sources and triplets for a gradient check on `enc_cfg`.
pub fn grad_check_fixture(
    enc_cfg: &EncoderConfig,
    seed: u64,
) -> Result<(Vec<Matrix>, TripletBatch)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sources: Vec<Matrix> = [14usize, 12]
        .iter()
        .map(|&t| {
            Matrix::from_vec(
                enc_cfg.in_channels,
                t,
                (0..enc_cfg.in_channels * t)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect(),
            )
        })
        .collect();
    let lengths: Vec<usize> = sources.iter().map(Matrix::cols).collect();
    let sampler = SamplerConfig {
        min_length: 3,
        max_length: None,
    };
    let batch = sample_triplets(&lengths, 2, SamplerScheme::CrossSubject, &sampler, seed)?;
    Ok((sources, batch))
}

/// Builds an encoder from `enc_cfg` and `seed`, samples a random triplet
/// batch and checks every parameter gradient.
pub fn grad_check(enc_cfg: &EncoderConfig, seed: u64) -> Result<GradCheckReport> {
    let mut params = init_params(enc_cfg, seed)?;
    // non-zero biases so every code path carries signal
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB1A5);
    for layer in &mut params.layers {
        layer
            .bias
            .iter_mut()
            .for_each(|b| *b = rng.random_range(-0.1..0.1));
    }
    params
        .head_bias
        .iter_mut()
        .for_each(|b| *b = rng.random_range(-0.1..0.1));
    let (sources, batch) = grad_check_fixture(enc_cfg, seed)?;
    let refs: Vec<&Matrix> = sources.iter().collect();
    grad_check_params(&params, &refs, &batch)
}
