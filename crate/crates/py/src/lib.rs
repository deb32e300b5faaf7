//! Python bindings for the hemoembed core library.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyIOError};
use pyo3::prelude::*;

use hemoembed::clustering::{
    adjusted_rand_index as ari, kmeans as core_kmeans, label_repeats as repeats, ward_agglomerative,
};
use hemoembed::encoder::{
    init_params, load_checkpoint, receptive_field, save_checkpoint, EncoderConfig, EncoderParams,
    Provenance,
};
use hemoembed::explain::{extract_features as core_features, feature_names as core_feature_names};
use hemoembed::pipeline::{run_pipeline as core_run, PipelineConfig};
use hemoembed::sampling::SamplerScheme;
use hemoembed::signal::{self, SubjectSeries, SyntheticConfig, Window};
use hemoembed::time_embedding::{
    attach_time as core_attach, sinusoidal_embedding as core_sinusoid, TimeAttachMode,
};
use hemoembed::training::{self, TrainConfig};
use hemoembed::Matrix;

create_exception!(hemoembed, HemoembedError, PyException);

fn py_err(e: hemoembed::Error) -> PyErr {
    match e {
        hemoembed::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => HemoembedError::new_err(other.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for hemoembed::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Matrix> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(HemoembedError::new_err(
            "rows must all have the same length",
        ));
    }
    Ok(Matrix::from_rows(rows))
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn parse<T: std::str::FromStr<Err = hemoembed::Error>>(s: &str) -> PyResult<T> {
    s.parse().py()
}

/// One subject's multichannel record, channels by timesteps.
#[pyclass(name = "SubjectSeries", module = "hemoembed", from_py_object)]
#[derive(Clone)]
struct PySubjectSeries {
    inner: SubjectSeries,
}

#[pymethods]
impl PySubjectSeries {
    #[new]
    #[pyo3(signature = (subject_id, sample_rate_hz, channels, values, bleed_start_idx, draw_events = Vec::new(), regime_labels = None))]
    fn new(
        subject_id: String,
        sample_rate_hz: f64,
        channels: Vec<String>,
        values: Vec<Vec<f64>>,
        bleed_start_idx: usize,
        draw_events: Vec<usize>,
        regime_labels: Option<Vec<u32>>,
    ) -> PyResult<Self> {
        let inner = SubjectSeries::new(
            subject_id,
            sample_rate_hz,
            channels,
            matrix(&values)?,
            bleed_start_idx,
            draw_events,
            regime_labels,
        )
        .py()?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: signal::load_series(path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        signal::save_series(&self.inner, path).py()
    }

    #[getter]
    fn subject_id(&self) -> String {
        self.inner.subject_id.clone()
    }

    #[getter]
    fn sample_rate_hz(&self) -> f64 {
        self.inner.sample_rate_hz
    }

    #[getter]
    fn channels(&self) -> Vec<String> {
        self.inner.channels.clone()
    }

    #[getter]
    fn values(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.values)
    }

    #[getter]
    fn bleed_start_idx(&self) -> usize {
        self.inner.bleed_start_idx
    }

    #[getter]
    fn draw_events(&self) -> Vec<usize> {
        self.inner.draw_events.clone()
    }

    #[getter]
    fn regime_labels(&self) -> Option<Vec<u32>> {
        self.inner.regime_labels.clone()
    }

    #[getter]
    fn num_timesteps(&self) -> usize {
        self.inner.num_timesteps()
    }

    /// Per-channel z-scored copy and the indices of constant channels.
    fn normalize(&self) -> PyResult<(Self, Vec<usize>)> {
        let (inner, report) = signal::normalize(&self.inner).py()?;
        Ok((Self { inner }, report.dead_channels))
    }

    fn windows(&self, length: usize) -> PyResult<Vec<PyWindow>> {
        Ok(signal::make_windows(&self.inner, length)
            .py()?
            .windows
            .into_iter()
            .map(|inner| PyWindow { inner })
            .collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "SubjectSeries('{}', channels={}, timesteps={})",
            self.inner.subject_id,
            self.inner.num_channels(),
            self.inner.num_timesteps()
        )
    }
}

/// Fixed-length slice of a subject series.
#[pyclass(name = "Window", module = "hemoembed", from_py_object)]
#[derive(Clone)]
struct PyWindow {
    inner: Window,
}

#[pymethods]
impl PyWindow {
    #[getter]
    fn subject_id(&self) -> String {
        self.inner.subject_id.clone()
    }

    #[getter]
    fn start_idx(&self) -> usize {
        self.inner.start_idx
    }

    #[getter]
    fn length(&self) -> usize {
        self.inner.length
    }

    #[getter]
    fn values(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.values)
    }

    #[getter]
    fn seconds_from_bleed(&self) -> f64 {
        self.inner.seconds_from_bleed
    }

    #[getter]
    fn overlaps_draw(&self) -> bool {
        self.inner.overlaps_draw
    }

    #[getter]
    fn majority_regime(&self) -> Option<u32> {
        self.inner.majority_regime
    }

    fn features(&self) -> PyResult<Vec<f64>> {
        core_features(&self.inner).py()
    }

    fn __repr__(&self) -> String {
        format!(
            "Window('{}', start={}, length={})",
            self.inner.subject_id, self.inner.start_idx, self.inner.length
        )
    }
}

/// Embedding vector with the window it came from.
#[pyclass(name = "Embedding", module = "hemoembed", from_py_object)]
#[derive(Clone)]
struct PyEmbedding {
    inner: hemoembed::encoder::Embedding,
}

#[pymethods]
impl PyEmbedding {
    #[new]
    #[pyo3(signature = (values, subject_id, window_start, seconds_from_bleed, overlaps_draw = false))]
    fn new(
        values: Vec<f64>,
        subject_id: String,
        window_start: usize,
        seconds_from_bleed: f64,
        overlaps_draw: bool,
    ) -> Self {
        Self {
            inner: hemoembed::encoder::Embedding {
                values,
                provenance: Some(Provenance {
                    subject_id,
                    window_start,
                    seconds_from_bleed,
                    overlaps_draw,
                }),
            },
        }
    }

    #[getter]
    fn values(&self) -> Vec<f64> {
        self.inner.values.clone()
    }

    #[getter]
    fn subject_id(&self) -> Option<String> {
        self.inner.provenance.as_ref().map(|p| p.subject_id.clone())
    }

    #[getter]
    fn window_start(&self) -> Option<usize> {
        self.inner.provenance.as_ref().map(|p| p.window_start)
    }

    #[getter]
    fn seconds_from_bleed(&self) -> Option<f64> {
        self.inner.provenance.as_ref().map(|p| p.seconds_from_bleed)
    }

    #[getter]
    fn overlaps_draw(&self) -> Option<bool> {
        self.inner.provenance.as_ref().map(|p| p.overlaps_draw)
    }

    fn __len__(&self) -> usize {
        self.inner.values.len()
    }
}

/// Dilated causal convolutional encoder.
#[pyclass(name = "Encoder", module = "hemoembed", skip_from_py_object)]
#[derive(Clone)]
struct PyEncoder {
    params: EncoderParams,
}

#[pymethods]
impl PyEncoder {
    #[new]
    #[pyo3(signature = (in_channels, hidden_channels = 32, num_layers = 5, kernel_size = 3, embedding_dim = 128, seed = 0))]
    fn new(
        in_channels: usize,
        hidden_channels: usize,
        num_layers: usize,
        kernel_size: usize,
        embedding_dim: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = EncoderConfig {
            hidden_channels,
            num_layers,
            kernel_size,
            embedding_dim,
            ..EncoderConfig::desk(in_channels)
        };
        Ok(Self {
            params: init_params(&cfg, seed).py()?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (config_json, seed = 0))]
    fn from_config(config_json: &str, seed: u64) -> PyResult<Self> {
        let cfg: EncoderConfig = serde_json::from_str(config_json)
            .map_err(|e| HemoembedError::new_err(e.to_string()))?;
        Ok(Self {
            params: init_params(&cfg, seed).py()?,
        })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            params: load_checkpoint(dir).py()?.0,
        })
    }

    #[pyo3(signature = (dir, seed = 0))]
    fn save(&self, dir: PathBuf, seed: u64) -> PyResult<()> {
        save_checkpoint(&self.params, seed, dir).py()
    }

    #[getter]
    fn config_json(&self) -> String {
        serde_json::to_string(&self.params.config).expect("config serializes")
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.params.num_params()
    }

    #[getter]
    fn receptive_field(&self) -> usize {
        receptive_field(&self.params.config)
    }

    #[getter]
    fn embedding_dim(&self) -> usize {
        self.params.config.embedding_dim
    }

    fn parameters(&self) -> Vec<f64> {
        self.params.to_flat()
    }

    /// Embeds a channels-by-timesteps array.
    fn forward(&self, values: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        Ok(self.params.forward(&matrix(&values)?).py()?.values)
    }

    fn embed(&self, py: Python<'_>, windows: Vec<PyWindow>) -> PyResult<Vec<PyEmbedding>> {
        let set = signal::WindowSet {
            windows: windows.into_iter().map(|w| w.inner).collect(),
        };
        let out = py
            .detach(|| hemoembed::pipeline::embed_all(&self.params, &set))
            .py()?;
        Ok(out.into_iter().map(|inner| PyEmbedding { inner }).collect())
    }
}

/// Synthetic subjects from the desk protocol.
#[pyfunction]
#[pyo3(signature = (num_subjects = 16, num_regimes = 3, seed = 0, config_json = None))]
fn generate_synthetic(
    num_subjects: usize,
    num_regimes: usize,
    seed: u64,
    config_json: Option<&str>,
) -> PyResult<Vec<PySubjectSeries>> {
    let cfg = match config_json {
        Some(text) => {
            serde_json::from_str(text).map_err(|e| HemoembedError::new_err(e.to_string()))?
        }
        None => SyntheticConfig::desk(num_subjects, num_regimes, seed),
    };
    Ok(signal::generate_synthetic(&cfg)
        .py()?
        .into_iter()
        .map(|inner| PySubjectSeries { inner })
        .collect())
}

#[pyfunction]
fn load_dataset(dir: PathBuf) -> PyResult<Vec<PySubjectSeries>> {
    Ok(signal::load_dataset(dir)
        .py()?
        .into_iter()
        .map(|inner| PySubjectSeries { inner })
        .collect())
}

#[pyfunction]
fn write_dataset(series: Vec<PySubjectSeries>, dir: PathBuf) -> PyResult<Vec<PathBuf>> {
    let series: Vec<SubjectSeries> = series.into_iter().map(|s| s.inner).collect();
    signal::write_dataset(&series, dir).py()
}

/// Trains an encoder on normalized series; returns it with the loss trace.
#[pyfunction]
#[pyo3(signature = (series, encoder, iterations = 1500, batch_size = 8, negatives = 4, learning_rate = 1e-3, scheme = "within", seed = 0))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    series: Vec<PySubjectSeries>,
    encoder: &PyEncoder,
    iterations: usize,
    batch_size: usize,
    negatives: usize,
    learning_rate: f64,
    scheme: &str,
    seed: u64,
) -> PyResult<(PyEncoder, Vec<f64>)> {
    let cfg = TrainConfig {
        iterations,
        batch_size,
        negatives,
        learning_rate,
        scheme: parse::<SamplerScheme>(scheme)?,
        ..TrainConfig::desk(seed)
    };
    let series: Vec<SubjectSeries> = series.into_iter().map(|s| s.inner).collect();
    let enc_cfg = encoder.params.config.clone();
    let outcome = py
        .detach(|| training::train(&series, &enc_cfg, &cfg, None))
        .py()?;
    Ok((
        PyEncoder {
            params: outcome.params,
        },
        outcome.trace.iter().map(|r| r.loss).collect(),
    ))
}

#[pyfunction]
fn triplet_loss(
    reference: Vec<f64>,
    positive: Vec<f64>,
    negatives: Vec<Vec<f64>>,
) -> PyResult<f64> {
    let negs: Vec<&[f64]> = negatives.iter().map(Vec::as_slice).collect();
    Ok(training::triplet_loss(&reference, &positive, &negs)
        .py()?
        .total)
}

#[pyfunction]
fn ward(points: Vec<Vec<f64>>, k: usize) -> PyResult<Vec<usize>> {
    Ok(ward_agglomerative(&points, k).py()?.0.labels)
}

/// Lloyd k-means; returns labels and the final within-cluster sum of squares.
#[pyfunction]
#[pyo3(signature = (points, k, seed = 0, max_iter = 300))]
fn kmeans(
    points: Vec<Vec<f64>>,
    k: usize,
    seed: u64,
    max_iter: usize,
) -> PyResult<(Vec<usize>, f64)> {
    let r = core_kmeans(&points, k, seed, max_iter).py()?;
    let obj = r.objective();
    Ok((r.assignment.labels, obj))
}

#[pyfunction]
fn adjusted_rand_index(a: Vec<usize>, b: Vec<usize>) -> PyResult<f64> {
    ari(&a, &b).py()
}

#[pyfunction]
fn label_repeats(labels: Vec<usize>) -> usize {
    repeats(&labels)
}

#[pyfunction]
fn sinusoidal_embedding(position: f64, dim: usize) -> PyResult<Vec<f64>> {
    core_sinusoid(position, dim).py()
}

/// Adds scaled time embeddings; returns the embeddings, the global sigma and the scale.
#[pyfunction]
#[pyo3(signature = (embeddings, mode = "full", scale_factor = 2.0))]
fn attach_time(
    embeddings: Vec<PyEmbedding>,
    mode: &str,
    scale_factor: f64,
) -> PyResult<(Vec<PyEmbedding>, f64, f64)> {
    let embs: Vec<_> = embeddings.into_iter().map(|e| e.inner).collect();
    let (out, report) = core_attach(&embs, parse::<TimeAttachMode>(mode)?, scale_factor).py()?;
    Ok((
        out.into_iter().map(|inner| PyEmbedding { inner }).collect(),
        report.sigma_global,
        report.scale,
    ))
}

#[pyfunction]
fn feature_names(channels: Vec<String>) -> Vec<String> {
    core_feature_names(&channels)
}

/// Default pipeline configuration as JSON.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn default_config(seed: u64) -> String {
    serde_json::to_string_pretty(&PipelineConfig::desk(seed)).expect("config serializes")
}

/// Runs the full pipeline into `out`; returns the run manifest as JSON.
#[pyfunction]
#[pyo3(signature = (config_json, out, seed = None))]
fn run_pipeline(
    py: Python<'_>,
    config_json: &str,
    out: PathBuf,
    seed: Option<u64>,
) -> PyResult<String> {
    let mut cfg = PipelineConfig::from_json(config_json).py()?;
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    let manifest = py.detach(|| core_run(&cfg, &out)).py()?;
    Ok(serde_json::to_string_pretty(&manifest).expect("manifest serializes"))
}

#[pymodule]
#[pyo3(name = "hemoembed")]
pub fn hemoembed_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("HemoembedError", m.py().get_type::<HemoembedError>())?;
    m.add_class::<PySubjectSeries>()?;
    m.add_class::<PyWindow>()?;
    m.add_class::<PyEmbedding>()?;
    m.add_class::<PyEncoder>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(write_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(triplet_loss, m)?)?;
    m.add_function(wrap_pyfunction!(ward, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans, m)?)?;
    m.add_function(wrap_pyfunction!(adjusted_rand_index, m)?)?;
    m.add_function(wrap_pyfunction!(label_repeats, m)?)?;
    m.add_function(wrap_pyfunction!(sinusoidal_embedding, m)?)?;
    m.add_function(wrap_pyfunction!(attach_time, m)?)?;
    m.add_function(wrap_pyfunction!(feature_names, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
