//! Dilated causal convolutional encoder: a stack of causal convolutions with
//! geometrically growing dilation, a global max over time and a final linear
//! map. Maps a `[channels x T]` window to a fixed-length embedding for any
//! `T >= 1`, with exact reverse-mode gradients.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub num_layers: usize,
    pub kernel_size: usize,
    pub dilation_base: usize,
    pub embedding_dim: usize,
    /// Negative-side slope of the leaky rectifier.
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
    #[serde(default = "default_true")]
    pub residual: bool,
}

fn default_slope() -> f64 {
    0.01
}

fn default_true() -> bool {
    true
}

impl EncoderConfig {
    /// Desk-scale preset: 5 layers of 32 channels, kernel 3, base 2
    /// (receptive field 63), 128-dimensional embeddings.
    pub fn desk(in_channels: usize) -> Self {
        Self {
            in_channels,
            hidden_channels: 32,
            num_layers: 5,
            kernel_size: 3,
            dilation_base: 2,
            embedding_dim: 128,
            leaky_slope: default_slope(),
            residual: true,
        }
    }

    /// Ten layers, for 600-step windows at 250 Hz.
    pub fn full_scale(in_channels: usize) -> Self {
        Self {
            num_layers: 10,
            ..Self::desk(in_channels)
        }
    }

    /// Small enough for exhaustive finite-difference checks.
    pub fn tiny(in_channels: usize) -> Self {
        Self {
            in_channels,
            hidden_channels: 3,
            num_layers: 2,
            kernel_size: 2,
            dilation_base: 2,
            embedding_dim: 4,
            leaky_slope: default_slope(),
            residual: true,
        }
    }

    pub fn dilation(&self, layer: usize) -> usize {
        self.dilation_base.pow(layer as u32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.hidden_channels == 0
            || self.num_layers == 0
            || self.kernel_size == 0
            || self.dilation_base == 0
            || self.embedding_dim == 0
            || !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0)
        {
            return Err(Error::InvalidConfig(format!(
                "encoder dimensions must all be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Number of input timesteps that influence one output of the last layer.
pub fn receptive_field(config: &EncoderConfig) -> usize {
    1 + (config.kernel_size - 1)
        * (0..config.num_layers)
            .map(|l| config.dilation(l))
            .sum::<usize>()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub dilation: usize,
    /// `[out x in x kernel]`; tap `kernel - 1` reads the current timestep.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    /// 1x1 residual projection `[out x in]`, present when the residual path
    /// changes the channel count.
    pub projection: Option<Vec<f64>>,
}

impl ConvLayer {
    #[inline]
    fn w(&self, o: usize, c: usize, j: usize) -> f64 {
        self.weight[(o * self.in_channels + c) * self.kernel_size + j]
    }

    #[inline]
    fn shift(&self, tap: usize) -> usize {
        (self.kernel_size - 1 - tap) * self.dilation
    }
}

/// Full weight set. The same layout doubles as a gradient accumulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub layers: Vec<ConvLayer>,
    /// `[embedding_dim x hidden]`
    pub head_weight: Vec<f64>,
    pub head_bias: Vec<f64>,
}

/// Name, shape and contents of one parameter tensor.
pub struct TensorView<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

impl EncoderParams {
    /// All-zero parameters with the shapes implied by `config`.
    pub fn zeros(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let in_ch = if l == 0 {
                config.in_channels
            } else {
                config.hidden_channels
            };
            let out = config.hidden_channels;
            layers.push(ConvLayer {
                in_channels: in_ch,
                out_channels: out,
                kernel_size: config.kernel_size,
                dilation: config.dilation(l),
                weight: vec![0.0; out * in_ch * config.kernel_size],
                bias: vec![0.0; out],
                projection: (config.residual && in_ch != out).then(|| vec![0.0; out * in_ch]),
            });
        }
        Ok(Self {
            config: config.clone(),
            layers,
            head_weight: vec![0.0; config.embedding_dim * config.hidden_channels],
            head_bias: vec![0.0; config.embedding_dim],
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config).expect("config already validated")
    }

    pub fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            out.push(TensorView {
                name: format!("conv{l}.weight"),
                shape: vec![layer.out_channels, layer.in_channels, layer.kernel_size],
                data: &layer.weight,
            });
            out.push(TensorView {
                name: format!("conv{l}.bias"),
                shape: vec![layer.out_channels],
                data: &layer.bias,
            });
            if let Some(p) = &layer.projection {
                out.push(TensorView {
                    name: format!("conv{l}.projection"),
                    shape: vec![layer.out_channels, layer.in_channels],
                    data: p,
                });
            }
        }
        out.push(TensorView {
            name: "head.weight".into(),
            shape: vec![self.config.embedding_dim, self.config.hidden_channels],
            data: &self.head_weight,
        });
        out.push(TensorView {
            name: "head.bias".into(),
            shape: vec![self.config.embedding_dim],
            data: &self.head_bias,
        });
        out
    }

    /// Mutable views in the same order as [`tensors`](Self::tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for layer in &mut self.layers {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
            if let Some(p) = &mut layer.projection {
                out.push(p);
            }
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// Flat copy in manifest order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        for t in self.tensors() {
            v.extend_from_slice(t.data);
        }
        v
    }

    pub fn copy_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "flat buffer holds {} values, params need {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &EncoderParams, alpha: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b.data) {
                *x += alpha * y;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= alpha);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

/// Kernels uniform in `±sqrt(1 / (in_channels * kernel_size))` per layer,
/// biases zero.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<EncoderParams> {
    let mut p = EncoderParams::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |v: &mut [f64], fan_in: usize| {
        let bound = (1.0 / fan_in as f64).sqrt();
        v.iter_mut()
            .for_each(|x| *x = rng.random_range(-bound..=bound));
    };
    for layer in &mut p.layers {
        fill(&mut layer.weight, layer.in_channels * layer.kernel_size);
        if let Some(proj) = &mut layer.projection {
            fill(proj, layer.in_channels);
        }
    }
    fill(&mut p.head_weight, config.hidden_channels);
    Ok(p)
}

/// Embedding vector with optional window provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub values: Vec<f64>,
    pub provenance: Option<Provenance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub subject_id: String,
    pub window_start: usize,
    pub seconds_from_bleed: f64,
    pub overlaps_draw: bool,
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

/// Intermediates kept by a forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    len: usize,
    /// Input of every layer, `[in x T]` flat.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of every layer, `[out x T]` flat.
    pre: Vec<Vec<f64>>,
    /// Output of the last layer, `[hidden x T]` flat.
    features: Vec<f64>,
    argmax: Vec<usize>,
    pooled: Vec<f64>,
    pub embedding: Vec<f64>,
}

impl ForwardCache {
    /// Output of the last convolutional layer, before pooling.
    pub fn feature_map(&self) -> Matrix {
        Matrix::from_vec(
            self.features.len() / self.len,
            self.len,
            self.features.clone(),
        )
    }
}

fn conv_forward(layer: &ConvLayer, x: &[f64], len: usize) -> Vec<f64> {
    let mut z = vec![0.0; layer.out_channels * len];
    for o in 0..layer.out_channels {
        let zo = &mut z[o * len..(o + 1) * len];
        zo.iter_mut().for_each(|v| *v = layer.bias[o]);
        for c in 0..layer.in_channels {
            let xc = &x[c * len..(c + 1) * len];
            for j in 0..layer.kernel_size {
                let s = layer.shift(j);
                if s >= len {
                    continue;
                }
                let w = layer.w(o, c, j);
                for (zt, xt) in zo[s..].iter_mut().zip(&xc[..len - s]) {
                    *zt += w * xt;
                }
            }
        }
    }
    z
}

impl EncoderParams {
    fn check_input(&self, window: &Matrix) -> Result<()> {
        if window.rows() != self.config.in_channels {
            return Err(Error::Shape(format!(
                "encoder expects {} channels, window has {}",
                self.config.in_channels,
                window.rows()
            )));
        }
        if window.cols() == 0 {
            return Err(Error::Shape(
                "window must have at least one timestep".into(),
            ));
        }
        Ok(())
    }

    pub fn forward_cached(&self, window: &Matrix) -> Result<ForwardCache> {
        self.check_input(window)?;
        let len = window.cols();
        let slope = self.config.leaky_slope;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = window.as_slice().to_vec();
        for layer in &self.layers {
            let z = conv_forward(layer, &h, len);
            let mut out: Vec<f64> = z
                .iter()
                .map(|&v| if v > 0.0 { v } else { slope * v })
                .collect();
            if self.config.residual {
                match &layer.projection {
                    None => out.iter_mut().zip(&h).for_each(|(a, b)| *a += b),
                    Some(p) => {
                        for o in 0..layer.out_channels {
                            let oo = &mut out[o * len..(o + 1) * len];
                            for c in 0..layer.in_channels {
                                let w = p[o * layer.in_channels + c];
                                for (a, b) in oo.iter_mut().zip(&h[c * len..(c + 1) * len]) {
                                    *a += w * b;
                                }
                            }
                        }
                    }
                }
            }
            inputs.push(std::mem::replace(&mut h, out));
            pre.push(z);
        }

        let hidden = self.config.hidden_channels;
        let mut argmax = vec![0usize; hidden];
        let mut pooled = vec![0.0; hidden];
        for o in 0..hidden {
            let row = &h[o * len..(o + 1) * len];
            let mut best = 0;
            for t in 1..len {
                // strict comparison keeps the earliest maximum
                if row[t] > row[best] {
                    best = t;
                }
            }
            argmax[o] = best;
            pooled[o] = row[best];
        }
        let emb_dim = self.config.embedding_dim;
        let embedding = (0..emb_dim)
            .map(|e| {
                let w = &self.head_weight[e * hidden..(e + 1) * hidden];
                self.head_bias[e] + w.iter().zip(&pooled).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        Ok(ForwardCache {
            len,
            inputs,
            pre,
            features: h,
            argmax,
            pooled,
            embedding,
        })
    }

    pub fn forward(&self, window: &Matrix) -> Result<Embedding> {
        Ok(Embedding {
            values: self.forward_cached(window)?.embedding,
            provenance: None,
        })
    }

    /// Accumulates the gradient of `embedding . upstream` into `grads`.
    /// Returns the input gradient when `want_input` is set.
    pub fn backward_into(
        &self,
        cache: &ForwardCache,
        upstream: &[f64],
        grads: &mut EncoderParams,
        want_input: bool,
    ) -> Result<Option<Matrix>> {
        let emb_dim = self.config.embedding_dim;
        let hidden = self.config.hidden_channels;
        if upstream.len() != emb_dim {
            return Err(Error::Shape(format!(
                "upstream gradient has {} entries, embedding has {emb_dim}",
                upstream.len()
            )));
        }
        if grads.config != self.config {
            return Err(Error::Shape(
                "gradient buffer built for another config".into(),
            ));
        }
        let len = cache.len;
        let slope = self.config.leaky_slope;

        let mut g_pool = vec![0.0; hidden];
        for e in 0..emb_dim {
            let g = upstream[e];
            grads.head_bias[e] += g;
            let gw = &mut grads.head_weight[e * hidden..(e + 1) * hidden];
            let w = &self.head_weight[e * hidden..(e + 1) * hidden];
            for o in 0..hidden {
                gw[o] += g * cache.pooled[o];
                g_pool[o] += w[o] * g;
            }
        }
        let mut g_h = vec![0.0; hidden * len];
        for o in 0..hidden {
            g_h[o * len + cache.argmax[o]] = g_pool[o];
        }

        for (l, layer) in self.layers.iter().enumerate().rev() {
            let x = &cache.inputs[l];
            let z = &cache.pre[l];
            let gl = &mut grads.layers[l];
            let need_gx = l > 0 || want_input;
            let mut g_x = vec![0.0; layer.in_channels * len];
            if self.config.residual {
                match &layer.projection {
                    None => {
                        if need_gx {
                            g_x.iter_mut().zip(&g_h).for_each(|(a, b)| *a += b);
                        }
                    }
                    Some(p) => {
                        let gp = gl.projection.as_mut().expect("same config");
                        for o in 0..layer.out_channels {
                            let go = &g_h[o * len..(o + 1) * len];
                            for c in 0..layer.in_channels {
                                let xc = &x[c * len..(c + 1) * len];
                                gp[o * layer.in_channels + c] +=
                                    go.iter().zip(xc).map(|(a, b)| a * b).sum::<f64>();
                                if need_gx {
                                    let w = p[o * layer.in_channels + c];
                                    for (a, b) in g_x[c * len..(c + 1) * len].iter_mut().zip(go) {
                                        *a += w * b;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            let g_z: Vec<f64> = g_h
                .iter()
                .zip(z)
                .map(|(g, &v)| if v > 0.0 { *g } else { slope * g })
                .collect();
            for o in 0..layer.out_channels {
                let gzo = &g_z[o * len..(o + 1) * len];
                gl.bias[o] += gzo.iter().sum::<f64>();
                for c in 0..layer.in_channels {
                    let xc = &x[c * len..(c + 1) * len];
                    for j in 0..layer.kernel_size {
                        let s = layer.shift(j);
                        if s >= len {
                            continue;
                        }
                        let idx = (o * layer.in_channels + c) * layer.kernel_size + j;
                        gl.weight[idx] += gzo[s..]
                            .iter()
                            .zip(&xc[..len - s])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                        if need_gx {
                            let w = layer.weight[idx];
                            for (a, b) in g_x[c * len..(c + 1) * len - s].iter_mut().zip(&gzo[s..])
                            {
                                *a += w * b;
                            }
                        }
                    }
                }
            }
            g_h = g_x;
        }
        Ok(want_input.then(|| Matrix::from_vec(self.config.in_channels, len, g_h)))
    }
}

/// Embeds one window.
pub fn forward(params: &EncoderParams, window: &Matrix) -> Result<Embedding> {
    params.forward(window)
}

/// Gradients of `forward(window) . upstream` with respect to every parameter
/// and to the input.
pub fn backward(
    params: &EncoderParams,
    window: &Matrix,
    upstream: &[f64],
) -> Result<(EncoderParams, Matrix)> {
    let cache = params.forward_cached(window)?;
    let mut grads = params.zeros_like();
    let input = params
        .backward_into(&cache, upstream, &mut grads, true)?
        .expect("input gradient requested");
    Ok((grads, input))
}

// ---------------------------------------------------------------------------
// Checkpoints: JSON manifest plus a little-endian f64 blob.

pub const CHECKPOINT_MANIFEST: &str = "encoder.json";
pub const CHECKPOINT_BLOB: &str = "encoder.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset_bytes: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub config: EncoderConfig,
    pub seed: u64,
    pub blob: String,
    pub dtype: String,
    pub total_params: usize,
    pub tensors: Vec<TensorEntry>,
}

impl EncoderParams {
    pub fn manifest(&self, seed: u64) -> CheckpointManifest {
        let mut off = 0;
        let tensors = self
            .tensors()
            .into_iter()
            .map(|t| {
                let e = TensorEntry {
                    name: t.name,
                    shape: t.shape,
                    offset_bytes: off,
                    len: t.data.len(),
                };
                off += t.data.len() * 8;
                e
            })
            .collect();
        CheckpointManifest {
            format: "hemoembed-encoder-v1".into(),
            config: self.config.clone(),
            seed,
            blob: CHECKPOINT_BLOB.into(),
            dtype: "f64-le".into(),
            total_params: self.num_params(),
            tensors,
        }
    }
}

pub fn save_checkpoint(params: &EncoderParams, seed: u64, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = params.manifest(seed);
    let mut blob = Vec::with_capacity(params.num_params() * 8);
    for v in params.to_flat() {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    let bp = dir.join(CHECKPOINT_BLOB);
    fs::write(&bp, blob).map_err(|e| Error::io(&bp, e))?;
    let mp = dir.join(CHECKPOINT_MANIFEST);
    fs::write(&mp, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mp, e))
}

/// Loads a checkpoint, checking every tensor entry against the config.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(EncoderParams, CheckpointManifest)> {
    let dir = dir.as_ref();
    let mp = dir.join(CHECKPOINT_MANIFEST);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    let bad = |m: String| Error::Format {
        path: mp.clone(),
        message: m,
    };
    if manifest.dtype != "f64-le" {
        return Err(bad(format!("unsupported dtype {}", manifest.dtype)));
    }
    let mut params = EncoderParams::zeros(&manifest.config)?;
    let expected = params.manifest(manifest.seed);
    if expected.tensors != manifest.tensors || expected.total_params != manifest.total_params {
        return Err(bad("tensor table does not match the encoder config".into()));
    }
    let bp = dir.join(&manifest.blob);
    let bytes = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    if bytes.len() != manifest.total_params * 8 {
        return Err(Error::Format {
            path: bp,
            message: format!(
                "expected {} bytes, found {}",
                manifest.total_params * 8,
                bytes.len()
            ),
        });
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    params.copy_from_flat(&flat)?;
    Ok((params, manifest))
}
