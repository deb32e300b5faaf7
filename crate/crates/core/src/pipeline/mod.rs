//! End-to-end orchestration: data, normalization, encoder training,
//! embedding, optional time attachment, clustering sweeps, explainable
//! features, cross-validated classifiers and reports, all recorded in a
//! run manifest with content digests.

pub mod io;
pub mod report;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use io::{
    embeddings_csv, features_csv, label_rows, labels_csv, read_embeddings, read_features,
    read_labels, write_embeddings, write_features, write_labels, FeatureTable, LabelRow,
};
pub use report::{
    confusion_svg, label_color, render_timeline, timeline_csv, timeline_svg, ClusterTimeline,
    SubjectTimeline, TimelineEntry, PALETTE,
};

use crate::clustering::{adjusted_rand_index, kmeans, ward_linkage, ClusterMethod};
use crate::encoder::{save_checkpoint, Embedding, EncoderConfig, EncoderParams, Provenance};
use crate::error::{Error, Result};
use crate::explain::{
    extract_features_with, feature_names, per_subject_cv, subject_folds, CvReport, MlpConfig,
    RandomForestConfig,
};
use crate::signal::{
    generate_synthetic, load_dataset, make_windows, normalize, write_dataset, SubjectSeries,
    SyntheticConfig, WindowSet,
};
use crate::time_embedding::{attach_time, TimeAttachMode};
use crate::training::{train, write_trace, TrainConfig};

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const TOOL_VERSION: &str = concat!("hemoembed ", env!("CARGO_PKG_VERSION"));

// ---------------------------------------------------------------------------
// Configuration

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Desk-scale synthetic protocol with default channel parameters.
    Preset {
        num_subjects: usize,
        num_regimes: usize,
        seed: u64,
    },
    /// Fully specified synthetic protocol.
    Synthetic(SyntheticConfig),
    /// Directory of series CSVs (with optional `manifest.json`).
    Directory(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeConfig {
    pub mode: TimeAttachMode,
    pub scale_factor: f64,
}

impl Default for TimeConfig {
    fn default() -> Self {
        Self {
            mode: TimeAttachMode::None,
            scale_factor: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusteringConfig {
    pub method: ClusterMethod,
    pub k_values: Vec<usize>,
    /// k-means seeding.
    pub seed: u64,
    pub max_iter: usize,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            method: ClusterMethod::WardAgglomerative,
            k_values: (2..=12).collect(),
            seed: 0,
            max_iter: 300,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    RandomForest,
    Mlp,
}

impl ModelKind {
    pub fn tag(&self) -> &'static str {
        match self {
            Self::RandomForest => "rf",
            Self::Mlp => "mlp",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rf" | "random_forest" => Ok(Self::RandomForest),
            "mlp" => Ok(Self::Mlp),
            other => Err(Error::InvalidConfig(format!("unknown model `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    pub models: Vec<ModelKind>,
    pub folds: usize,
    /// Cluster counts to classify; empty means every clustered k.
    pub k_values: Vec<usize>,
    pub forest: RandomForestConfig,
    pub mlp: MlpConfig,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            models: vec![ModelKind::RandomForest],
            folds: 16,
            k_values: Vec::new(),
            forest: RandomForestConfig::default(),
            mlp: MlpConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossvalConfig {
    pub folds: usize,
    pub k: usize,
    pub method: ClusterMethod,
}

impl Default for CrossvalConfig {
    fn default() -> Self {
        Self {
            folds: 4,
            k: 10,
            method: ClusterMethod::WardAgglomerative,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub data: DataSource,
    #[serde(default = "default_window_length")]
    pub window_length: usize,
    pub encoder: EncoderConfig,
    /// Embedding dimensions to sweep; empty runs `encoder.embedding_dim` only.
    #[serde(default)]
    pub embedding_dims: Vec<usize>,
    pub training: TrainConfig,
    #[serde(default)]
    pub time: TimeConfig,
    #[serde(default)]
    pub clustering: ClusteringConfig,
    #[serde(default)]
    pub explain: ExplainConfig,
    /// Encoder robustness folds; skipped when absent.
    #[serde(default)]
    pub crossval: Option<CrossvalConfig>,
}

fn default_window_length() -> usize {
    120
}

impl PipelineConfig {
    /// Desk-scale run over 16 synthetic subjects with three bleed regimes.
    pub fn desk(seed: u64) -> Self {
        let mut cfg = Self {
            data: DataSource::Preset {
                num_subjects: 16,
                num_regimes: 3,
                seed,
            },
            window_length: default_window_length(),
            encoder: EncoderConfig::desk(6),
            embedding_dims: Vec::new(),
            training: TrainConfig::desk(seed),
            time: TimeConfig::default(),
            clustering: ClusteringConfig::default(),
            explain: ExplainConfig::default(),
            crossval: None,
        };
        cfg.set_seed(seed);
        cfg
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Uses `seed` for every stochastic stage.
    pub fn set_seed(&mut self, seed: u64) {
        match &mut self.data {
            DataSource::Preset { seed: s, .. } => *s = seed,
            DataSource::Synthetic(c) => c.seed = seed,
            DataSource::Directory(_) => {}
        }
        self.training.seed = seed;
        self.clustering.seed = seed;
        self.explain.forest.seed = seed;
        self.explain.mlp.seed = seed;
    }

    /// Every seed in the config, by stage.
    pub fn seeds(&self) -> BTreeMap<String, u64> {
        let mut m = BTreeMap::new();
        match &self.data {
            DataSource::Preset { seed, .. } => {
                m.insert("data".to_string(), *seed);
            }
            DataSource::Synthetic(c) => {
                m.insert("data".to_string(), c.seed);
            }
            DataSource::Directory(_) => {}
        }
        m.insert("training".into(), self.training.seed);
        m.insert("clustering".into(), self.clustering.seed);
        m.insert("forest".into(), self.explain.forest.seed);
        m.insert("mlp".into(), self.explain.mlp.seed);
        m
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.window_length == 0 {
            return bad("window_length must be positive".into());
        }
        self.encoder.validate()?;
        self.training.validate()?;
        if self.clustering.k_values.is_empty() || self.clustering.k_values.contains(&0) {
            return bad("clustering.k_values must be non-empty and positive".into());
        }
        for k in &self.explain.k_values {
            if !self.clustering.k_values.contains(k) {
                return bad(format!("explain k={k} is not among the clustered k values"));
            }
        }
        if !(self.time.scale_factor.is_finite() && self.time.scale_factor > 0.0) {
            return bad("time.scale_factor must be positive".into());
        }
        if self.embedding_dims.contains(&0) {
            return bad("embedding dimensions must be positive".into());
        }
        Ok(())
    }

    fn dims(&self) -> Vec<usize> {
        if self.embedding_dims.is_empty() {
            vec![self.encoder.embedding_dim]
        } else {
            self.embedding_dims.clone()
        }
    }

    fn explain_ks(&self) -> Vec<usize> {
        if self.explain.k_values.is_empty() {
            self.clustering.k_values.clone()
        } else {
            self.explain.k_values.clone()
        }
    }
}

// ---------------------------------------------------------------------------
// Stages

/// Generates or loads the configured subjects.
pub fn load_source(source: &DataSource) -> Result<Vec<SubjectSeries>> {
    match source {
        DataSource::Preset {
            num_subjects,
            num_regimes,
            seed,
        } => generate_synthetic(&SyntheticConfig::desk(*num_subjects, *num_regimes, *seed)),
        DataSource::Synthetic(c) => generate_synthetic(c),
        DataSource::Directory(dir) => load_dataset(dir),
    }
}

pub fn normalize_all(series: &[SubjectSeries]) -> Result<Vec<SubjectSeries>> {
    series
        .iter()
        .map(|s| normalize(s).map(|(n, _)| n))
        .collect()
}

/// Windows of every subject, subject-major and time-ordered.
pub fn window_all(series: &[SubjectSeries], length: usize) -> Result<WindowSet> {
    let mut set = WindowSet::default();
    for s in series {
        set.extend(make_windows(s, length)?);
    }
    Ok(set)
}

/// One embedding per window, in window order, with provenance.
pub fn embed_all(params: &EncoderParams, windows: &WindowSet) -> Result<Vec<Embedding>> {
    windows
        .windows
        .par_iter()
        .map(|w| {
            let mut e = params.forward(&w.values)?;
            e.provenance = Some(Provenance {
                subject_id: w.subject_id.clone(),
                window_start: w.start_idx,
                seconds_from_bleed: w.seconds_from_bleed,
                overlaps_draw: w.overlaps_draw,
            });
            Ok(e)
        })
        .collect()
}

/// Explainable features of every window.
pub fn feature_table(windows: &WindowSet, channels: &[String]) -> Result<FeatureTable> {
    let rows = windows
        .windows
        .par_iter()
        .map_init(FftPlanner::new, |planner, w| {
            extract_features_with(w, planner)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureTable {
        names: feature_names(channels),
        subject_ids: windows
            .windows
            .iter()
            .map(|w| w.subject_id.clone())
            .collect(),
        window_starts: windows.windows.iter().map(|w| w.start_idx).collect(),
        seconds_from_bleed: windows
            .windows
            .iter()
            .map(|w| w.seconds_from_bleed)
            .collect(),
        rows,
    })
}

/// Labels for every requested `k`, each numbered by first appearance. Ward
/// builds one dendrogram and cuts it per `k`; k-means refits per `k`.
pub fn cluster_sweep<P: AsRef<[f64]> + Sync>(
    points: &[P],
    method: ClusterMethod,
    k_values: &[usize],
    seed: u64,
    max_iter: usize,
) -> Result<Vec<(usize, Vec<usize>)>> {
    match method {
        ClusterMethod::WardAgglomerative => {
            let d = ward_linkage(points)?;
            k_values.iter().map(|&k| Ok((k, d.cut(k)?))).collect()
        }
        ClusterMethod::KMeans => k_values
            .iter()
            .map(|&k| Ok((k, kmeans(points, k, seed, max_iter)?.assignment.labels)))
            .collect(),
    }
}

/// Fraction of draw-overlapping windows that sit in clusters whose members
/// are at least `purity` draw-overlapping. `None` when there are no draws.
pub fn draw_concentration(labels: &[usize], overlaps: &[bool], purity: f64) -> Option<f64> {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut total = vec![0usize; k];
    let mut draws = vec![0usize; k];
    for (&l, &d) in labels.iter().zip(overlaps) {
        total[l] += 1;
        draws[l] += usize::from(d);
    }
    let all: usize = draws.iter().sum();
    if all == 0 {
        return None;
    }
    let covered: usize = (0..k)
        .filter(|&c| draws[c] as f64 >= purity * total[c] as f64)
        .map(|c| draws[c])
        .sum();
    Some(covered as f64 / all as f64)
}

/// Cross-validates `model` at predicting `labels` from `features`.
pub fn classify(
    features: &FeatureTable,
    labels: &[usize],
    k: usize,
    model: ModelKind,
    cfg: &ExplainConfig,
) -> Result<CvReport> {
    match model {
        ModelKind::RandomForest => per_subject_cv(
            &features.rows,
            labels,
            &features.subject_ids,
            cfg.folds,
            k,
            &cfg.forest,
        ),
        ModelKind::Mlp => per_subject_cv(
            &features.rows,
            labels,
            &features.subject_ids,
            cfg.folds,
            k,
            &cfg.mlp,
        ),
    }
}

/// Accuracy table with one row per cluster count.
pub fn accuracy_table(reports: &[(usize, CvReport)]) -> String {
    let mut out = String::from("clusters");
    if let Some((_, r)) = reports.first() {
        for (s, _) in &r.per_subject {
            out.push(',');
            out.push_str(s);
        }
    }
    out.push_str(",mean,std\n");
    for (k, r) in reports {
        out.push_str(&k.to_string());
        for (_, a) in &r.per_subject {
            out.push_str(&format!(",{a}"));
        }
        out.push_str(&format!(",{},{}\n", r.mean, r.std));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldTimeline {
    pub fold: usize,
    pub train_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
    pub timeline: ClusterTimeline,
}

/// Trains one encoder per subject fold on the training subjects only, then
/// embeds every subject with it and clusters all embeddings jointly.
/// `series` must already be normalized.
pub fn encoder_cv(
    series: &[SubjectSeries],
    enc_cfg: &EncoderConfig,
    train_cfg: &TrainConfig,
    cv: &CrossvalConfig,
    window_length: usize,
) -> Result<Vec<FoldTimeline>> {
    let ids: Vec<String> = series.iter().map(|s| s.subject_id.clone()).collect();
    let folds = subject_folds(&ids, cv.folds)?;
    let windows = window_all(series, window_length)?;
    folds
        .into_iter()
        .enumerate()
        .map(|(f, test)| {
            let train_series: Vec<SubjectSeries> = series
                .iter()
                .filter(|s| !test.contains(&s.subject_id))
                .cloned()
                .collect();
            let outcome = train(&train_series, enc_cfg, train_cfg, None)?;
            let emb = embed_all(&outcome.params, &windows)?;
            let (_, labels) = cluster_sweep(&emb, cv.method, &[cv.k], train_cfg.seed, 300)?
                .pop()
                .expect("one k requested");
            let rows = label_rows(&emb, &labels)?;
            let mut timeline =
                ClusterTimeline::build(&rows, cv.k, cv.method, series, window_length)?;
            timeline.set_roles(&test);
            Ok(FoldTimeline {
                fold: f,
                train_subjects: train_series.iter().map(|s| s.subject_id.clone()).collect(),
                test_subjects: test,
                timeline,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Run manifest

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FileDigest {
    /// Relative to the run directory (artifacts) or as configured (inputs).
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_sha256: String,
    pub config: PipelineConfig,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileDigest>,
    pub artifacts: Vec<FileDigest>,
    /// How the cross-validated encoders' embeddings were clustered.
    pub crossval_clustering: Option<String>,
}

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn artifact(&self, path: &str) -> Option<&FileDigest> {
        self.artifacts.iter().find(|d| d.path == path)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else if p
            .strip_prefix(root)
            .map_or(true, |r| r != Path::new(RUN_MANIFEST))
        {
            out.push(p);
        }
    }
    Ok(())
}

/// Digests of every file under `dir`, sorted by relative path.
pub fn digest_tree(dir: &Path) -> Result<Vec<FileDigest>> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files
        .iter()
        .map(|p| {
            let rel = p.strip_prefix(dir).unwrap_or(p);
            Ok(FileDigest {
                path: rel.to_string_lossy().replace('\\', "/"),
                sha256: file_digest(p)?,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Full run

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KSummary {
    pub k: usize,
    /// Agreement with the ground-truth window regimes, when known.
    pub ari: Option<f64>,
    pub repeats: usize,
    pub draw_concentration: Option<f64>,
    /// Mean per-subject CV accuracy by model tag.
    pub accuracy: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub embedding_dim: usize,
    pub directory: String,
    pub final_loss: Option<f64>,
    pub per_k: Vec<KSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub num_subjects: usize,
    pub num_windows: usize,
    pub variants: Vec<VariantSummary>,
}

fn json_file(path: &Path, value: &impl Serialize) -> Result<()> {
    io::write_file(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn stage<T>(name: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    log::info!("stage {name}");
    f().map_err(Error::stage(name))
}

/// Runs every stage into `out` and writes `run_manifest.json`. Artifacts
/// written before a failing stage are left in place.
pub fn run_pipeline(cfg: &PipelineConfig, out: impl AsRef<Path>) -> Result<RunManifest> {
    let out = out.as_ref();
    stage("config", || cfg.validate())?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let config_json = serde_json::to_string_pretty(cfg)?;
    io::write_file(&out.join("config.json"), &(config_json.clone() + "\n"))?;

    let (raw, inputs) = stage("data", || {
        let raw = load_source(&cfg.data)?;
        let inputs = match &cfg.data {
            DataSource::Directory(dir) => digest_tree(dir)?
                .into_iter()
                .map(|d| FileDigest {
                    path: dir.join(&d.path).to_string_lossy().into_owned(),
                    sha256: d.sha256,
                })
                .collect(),
            _ => {
                write_dataset(&raw, out.join("data"))?;
                Vec::new()
            }
        };
        Ok((raw, inputs))
    })?;
    let series = stage("normalize", || normalize_all(&raw))?;
    if let Some(s) = series
        .iter()
        .find(|s| s.num_channels() != cfg.encoder.in_channels)
    {
        return Err(Error::stage("config")(Error::InvalidConfig(format!(
            "encoder expects {} channels, {} has {}",
            cfg.encoder.in_channels,
            s.subject_id,
            s.num_channels()
        ))));
    }
    let windows = stage("window", || window_all(&series, cfg.window_length))?;
    if windows.is_empty() {
        return Err(Error::stage("window")(Error::Precondition(
            "window length exceeds every series".into(),
        )));
    }
    let truth: Option<Vec<usize>> = windows
        .windows
        .iter()
        .map(|w| w.majority_regime.map(|r| r as usize))
        .collect();
    let overlaps: Vec<bool> = windows.windows.iter().map(|w| w.overlaps_draw).collect();

    let features = stage("features", || {
        let t = feature_table(&windows, &series[0].channels)?;
        write_features(&t, out.join("features.csv"))?;
        Ok(t)
    })?;

    let dims = cfg.dims();
    let mut variants = Vec::new();
    for &dim in &dims {
        let dir = if dims.len() == 1 {
            out.to_path_buf()
        } else {
            out.join(format!("dim-{dim}"))
        };
        let enc_cfg = EncoderConfig {
            embedding_dim: dim,
            ..cfg.encoder.clone()
        };
        let outcome = stage("train", || {
            let ckpt = (cfg.training.checkpoint_every > 0).then(|| dir.join("checkpoints"));
            let o = train(&series, &enc_cfg, &cfg.training, ckpt.as_deref())?;
            save_checkpoint(&o.params, cfg.training.seed, dir.join("encoder"))?;
            write_trace(&o.trace, dir.join("loss_trace.csv"))?;
            Ok(o)
        })?;
        let embeddings = stage("embed", || {
            let e = embed_all(&outcome.params, &windows)?;
            write_embeddings(&e, dir.join("embeddings.csv"))?;
            Ok(e)
        })?;
        let points = stage("attach-time", || {
            if cfg.time.mode == TimeAttachMode::None {
                return Ok(embeddings.clone());
            }
            let (e, _) = attach_time(&embeddings, cfg.time.mode, cfg.time.scale_factor)?;
            write_embeddings(&e, dir.join("embeddings_time.csv"))?;
            Ok(e)
        })?;
        let method = cfg.clustering.method;
        let sweep = stage("cluster", || {
            let sweep = cluster_sweep(
                &points,
                method,
                &cfg.clustering.k_values,
                cfg.clustering.seed,
                cfg.clustering.max_iter,
            )?;
            for (k, labels) in &sweep {
                let rows = label_rows(&points, labels)?;
                write_labels(
                    &rows,
                    dir.join("clusters")
                        .join(format!("{}-k{k:02}.csv", method.tag())),
                )?;
                let timeline =
                    ClusterTimeline::build(&rows, *k, method, &series, cfg.window_length)?;
                let (svg, csv) = render_timeline(&timeline)?;
                let base = dir.join("timelines");
                io::write_file(&base.join(format!("timeline-k{k:02}.svg")), &svg)?;
                io::write_file(&base.join(format!("timeline-k{k:02}.csv")), &csv)?;
            }
            Ok(sweep)
        })?;

        let explain_ks = cfg.explain_ks();
        let mut accuracy: BTreeMap<(usize, &'static str), f64> = BTreeMap::new();
        stage("classify", || {
            for &model in &cfg.explain.models {
                let mut reports = Vec::new();
                for (k, labels) in sweep.iter().filter(|(k, _)| explain_ks.contains(k)) {
                    let r = classify(&features, labels, *k, model, &cfg.explain)?;
                    let kdir = dir
                        .join("classify")
                        .join(model.tag())
                        .join(format!("k{k:02}"));
                    io::write_file(&kdir.join("confusion.csv"), &r.confusion.to_csv())?;
                    io::write_file(
                        &kdir.join("confusion.svg"),
                        &confusion_svg(&r.confusion, &format!("{} clusters, {}", k, model.tag())),
                    )?;
                    json_file(&kdir.join("report.json"), &r)?;
                    accuracy.insert((*k, model.tag()), r.mean);
                    reports.push((*k, r));
                }
                io::write_file(
                    &dir.join("classify").join(model.tag()).join("accuracy.csv"),
                    &accuracy_table(&reports),
                )?;
            }
            Ok(())
        })?;

        let summary = stage("report", || {
            let per_k = sweep
                .iter()
                .map(|(k, labels)| {
                    let rows = label_rows(&points, labels)?;
                    let timeline =
                        ClusterTimeline::build(&rows, *k, method, &series, cfg.window_length)?;
                    Ok(KSummary {
                        k: *k,
                        ari: truth
                            .as_ref()
                            .map(|t| adjusted_rand_index(labels, t))
                            .transpose()?,
                        repeats: timeline.repeat_count(),
                        draw_concentration: draw_concentration(labels, &overlaps, 0.7),
                        accuracy: accuracy
                            .iter()
                            .filter(|((kk, _), _)| kk == k)
                            .map(|((_, m), a)| (m.to_string(), *a))
                            .collect(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(VariantSummary {
                embedding_dim: dim,
                directory: dir
                    .strip_prefix(out)
                    .map(|p| p.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                final_loss: outcome.trace.last().map(|r| r.loss),
                per_k,
            })
        })?;
        variants.push(summary);
    }

    let mut crossval_clustering = None;
    if let Some(cv) = &cfg.crossval {
        stage("crossval", || {
            let folds = encoder_cv(&series, &cfg.encoder, &cfg.training, cv, cfg.window_length)?;
            write_crossval(&folds, &out.join("crossval"))
        })?;
        crossval_clustering = Some(format!(
            "joint {} clustering at k={} over train and test subjects",
            cv.method.tag(),
            cv.k
        ));
    }

    let summary = RunSummary {
        num_subjects: series.len(),
        num_windows: windows.len(),
        variants,
    };
    json_file(&out.join("summary.json"), &summary)?;

    let manifest = RunManifest {
        tool_version: TOOL_VERSION.to_string(),
        config_sha256: sha256_hex(config_json.as_bytes()),
        config: cfg.clone(),
        seeds: cfg.seeds(),
        inputs,
        artifacts: digest_tree(out)?,
        crossval_clustering,
    };
    json_file(&out.join(RUN_MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Writes one timeline pair per fold plus `folds.json`.
pub fn write_crossval(folds: &[FoldTimeline], dir: &Path) -> Result<()> {
    for f in folds {
        let (svg, csv) = render_timeline(&f.timeline)?;
        let fdir = dir.join(format!("fold-{}", f.fold + 1));
        io::write_file(&fdir.join("timeline.svg"), &svg)?;
        io::write_file(&fdir.join("timeline.csv"), &csv)?;
    }
    #[derive(Serialize)]
    struct FoldEntry<'a> {
        fold: usize,
        train_subjects: &'a [String],
        test_subjects: &'a [String],
    }
    let entries: Vec<FoldEntry> = folds
        .iter()
        .map(|f| FoldEntry {
            fold: f.fold + 1,
            train_subjects: &f.train_subjects,
            test_subjects: &f.test_subjects,
        })
        .collect();
    json_file(&dir.join("folds.json"), &entries)
}

/// Reruns the configuration recorded in a manifest into `out`.
pub fn rerun_from_manifest(manifest: &RunManifest, out: impl AsRef<Path>) -> Result<RunManifest> {
    run_pipeline(&manifest.config, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draw_concentration_counts_pure_clusters() {
        let labels = [0, 0, 0, 1, 1, 2, 2, 2];
        let draws = [false, false, false, true, true, true, false, false];
        assert_eq!(draw_concentration(&labels, &draws, 0.7), Some(2.0 / 3.0));
        assert_eq!(draw_concentration(&labels, &[false; 8], 0.7), None);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let mut v = serde_json::to_value(PipelineConfig::desk(1)).unwrap();
        v["clustering"]["bogus"] = serde_json::json!(1);
        assert!(serde_json::from_value::<PipelineConfig>(v.clone()).is_err());
        let mut v = serde_json::to_value(PipelineConfig::desk(1)).unwrap();
        v["extra"] = serde_json::json!(true);
        assert!(serde_json::from_value::<PipelineConfig>(v).is_err());
    }

    #[test]
    fn desk_config_round_trips_through_json() {
        let cfg = PipelineConfig::desk(7);
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(PipelineConfig::from_json(&text).unwrap(), cfg);
        assert!(cfg.seeds().values().all(|&s| s == 7));
    }

    #[test]
    fn explain_ks_must_be_clustered() {
        let mut cfg = PipelineConfig::desk(1);
        cfg.explain.k_values = vec![20];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn accuracy_table_shape() {
        let r = CvReport {
            folds: vec![],
            per_subject: vec![("a".into(), 1.0), ("b".into(), 0.5)],
            mean: 0.75,
            std: 0.25,
            confusion: crate::explain::ConfusionMatrix::new(2),
        };
        assert_eq!(
            accuracy_table(&[(2, r)]),
            "clusters,a,b,mean,std\n2,1,0.5,0.75,0.25\n"
        );
    }
}
