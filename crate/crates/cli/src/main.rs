use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use hemoembed::clustering::ClusterMethod;
use hemoembed::encoder::{load_checkpoint, save_checkpoint, EncoderConfig};
use hemoembed::explain::{MlpConfig, RandomForestConfig};
use hemoembed::pipeline::{
    self, accuracy_table, classify, cluster_sweep, confusion_svg, embed_all, encoder_cv,
    feature_table, label_rows, normalize_all, read_embeddings, read_features, read_labels,
    render_timeline, window_all, write_crossval, write_embeddings, write_features, write_labels,
    ClusterTimeline, CrossvalConfig, ExplainConfig, ModelKind, PipelineConfig, RunManifest,
};
use hemoembed::sampling::SamplerScheme;
use hemoembed::signal::{
    generate_synthetic, load_dataset, write_dataset, SubjectSeries, SyntheticConfig,
};
use hemoembed::time_embedding::{attach_time, TimeAttachMode};
use hemoembed::training::{train, write_trace, TrainConfig};

#[derive(Parser, Debug)]
#[command(
    name = "hemoembed",
    version,
    about = "Unsupervised embeddings and clustering of physiological time series"
)]
struct Cli {
    /// Seed for every stochastic stage (overrides config files).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic labeled dataset.
    GenData(GenData),
    /// Train an encoder and write a checkpoint directory.
    Train(Train),
    /// Embed every window of a dataset.
    Embed(Embed),
    /// Add sinusoidal time embeddings to an embeddings file.
    AttachTime(AttachTime),
    /// Cluster an embeddings file.
    Cluster(Cluster),
    /// Extract explainable window features.
    Features(Features),
    /// Cross-validate a classifier predicting cluster labels from features.
    Classify(Classify),
    /// Per-fold encoder training with joint clustering of all subjects.
    Crossval(Crossval),
    /// Render a cluster timeline.
    Report(Report),
    /// Run the full pipeline.
    Run(Run),
}

#[derive(Args, Debug)]
struct GenData {
    /// Synthetic protocol JSON; the desk preset is used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    subjects: usize,
    #[arg(long, default_value_t = 3)]
    regimes: usize,
}

#[derive(Args, Debug)]
struct TrainOpts {
    /// Training config JSON; desk defaults when omitted.
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    negatives: Option<usize>,
    /// cross | within
    #[arg(long)]
    scheme: Option<SamplerScheme>,
    #[arg(long)]
    min_length: Option<usize>,
}

#[derive(Args, Debug)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    /// Encoder config JSON; desk preset sized to the data when omitted.
    #[arg(long)]
    enc_config: Option<PathBuf>,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args, Debug)]
struct Embed {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 120)]
    window_length: usize,
}

#[derive(Args, Debug)]
struct AttachTime {
    #[arg(long)]
    embeddings: PathBuf,
    /// none | full | from-bleed
    #[arg(long, default_value = "full")]
    mode: TimeAttachMode,
    #[arg(long, default_value_t = 2.0)]
    scale: f64,
}

#[derive(Args, Debug)]
struct Cluster {
    #[arg(long)]
    embeddings: PathBuf,
    /// ward | kmeans
    #[arg(long, default_value = "ward")]
    method: ClusterMethod,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 300)]
    max_iter: usize,
}

#[derive(Args, Debug)]
struct Features {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 120)]
    window_length: usize,
}

#[derive(Args, Debug)]
struct Classify {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// rf | mlp
    #[arg(long, default_value = "rf")]
    model: ModelKind,
    #[arg(long, default_value_t = 16)]
    folds: usize,
    #[arg(long)]
    trees: Option<usize>,
}

#[derive(Args, Debug)]
struct Crossval {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    enc_config: Option<PathBuf>,
    #[command(flatten)]
    opts: TrainOpts,
    #[arg(long, default_value_t = 4)]
    folds: usize,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value = "ward")]
    method: ClusterMethod,
    #[arg(long, default_value_t = 120)]
    window_length: usize,
}

#[derive(Args, Debug)]
struct Report {
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 120)]
    window_length: usize,
    /// Method tag shown on the plot.
    #[arg(long, default_value = "ward")]
    method: ClusterMethod,
}

#[derive(Args, Debug)]
struct Run {
    /// Pipeline config JSON; desk defaults when omitted.
    #[arg(long, conflicts_with = "manifest")]
    config: Option<PathBuf>,
    /// Rerun the configuration recorded in a run manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Print the effective config and exit.
    #[arg(long)]
    dump_config: bool,
}

fn out_path(cli: &Cli) -> Result<&Path> {
    cli.out
        .as_deref()
        .context("--out is required for this command")
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_normalized(dir: &Path) -> Result<Vec<SubjectSeries>> {
    let raw = load_dataset(dir)?;
    if raw.is_empty() {
        bail!("no series found in {}", dir.display());
    }
    Ok(normalize_all(&raw)?)
}

fn encoder_config(path: Option<&Path>, series: &[SubjectSeries]) -> Result<EncoderConfig> {
    match path {
        Some(p) => read_json(p),
        None => Ok(EncoderConfig::desk(series[0].num_channels())),
    }
}

fn train_config(opts: &TrainOpts, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match &opts.train_config {
        Some(p) => read_json(p)?,
        None => TrainConfig::desk(0),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = opts.iterations {
        cfg.iterations = n;
    }
    if let Some(k) = opts.negatives {
        cfg.negatives = k;
    }
    if let Some(s) = opts.scheme {
        cfg.scheme = s;
    }
    if let Some(m) = opts.min_length {
        cfg.sampler.min_length = m;
    }
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => {
            let mut cfg: SyntheticConfig = match &a.config {
                Some(p) => read_json(p)?,
                None => SyntheticConfig::desk(a.subjects, a.regimes, 0),
            };
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let series = generate_synthetic(&cfg)?;
            let files = write_dataset(&series, out_path(cli)?)?;
            log::info!("wrote {} subjects", files.len());
        }
        Command::Train(a) => {
            let out = out_path(cli)?;
            let series = load_normalized(&a.data)?;
            let enc = encoder_config(a.enc_config.as_deref(), &series)?;
            let tc = train_config(&a.opts, cli.seed)?;
            let ckpt = (tc.checkpoint_every > 0).then(|| out.join("checkpoints"));
            let outcome = train(&series, &enc, &tc, ckpt.as_deref())?;
            save_checkpoint(&outcome.params, tc.seed, out)?;
            write_trace(&outcome.trace, out.join("loss_trace.csv"))?;
            if let Some(last) = outcome.trace.last() {
                log::info!("final loss {:.6}", last.loss);
            }
        }
        Command::Embed(a) => {
            let (params, _) = load_checkpoint(&a.checkpoint)?;
            let series = load_normalized(&a.data)?;
            let windows = window_all(&series, a.window_length)?;
            let emb = embed_all(&params, &windows)?;
            write_embeddings(&emb, out_path(cli)?)?;
        }
        Command::AttachTime(a) => {
            let emb = read_embeddings(&a.embeddings)?;
            let (out, report) = attach_time(&emb, a.mode, a.scale)?;
            log::info!(
                "sigma {:.6}, scale {:.6}",
                report.sigma_global,
                report.scale
            );
            write_embeddings(&out, out_path(cli)?)?;
        }
        Command::Cluster(a) => {
            let emb = read_embeddings(&a.embeddings)?;
            let (_, labels) =
                cluster_sweep(&emb, a.method, &[a.k], cli.seed.unwrap_or(0), a.max_iter)?
                    .pop()
                    .expect("one k requested");
            write_labels(&label_rows(&emb, &labels)?, out_path(cli)?)?;
        }
        Command::Features(a) => {
            let series = load_normalized(&a.data)?;
            let windows = window_all(&series, a.window_length)?;
            let table = feature_table(&windows, &series[0].channels)?;
            write_features(&table, out_path(cli)?)?;
        }
        Command::Classify(a) => {
            let out = out_path(cli)?;
            let features = read_features(&a.features)?;
            let labels = features.align_labels(&read_labels(&a.labels)?)?;
            let k = labels.iter().max().map_or(1, |m| m + 1);
            let seed = cli.seed.unwrap_or(0);
            let mut forest = RandomForestConfig {
                seed,
                ..Default::default()
            };
            if let Some(t) = a.trees {
                forest.num_trees = t;
            }
            let cfg = ExplainConfig {
                models: vec![a.model],
                folds: a.folds,
                k_values: vec![k],
                forest,
                mlp: MlpConfig {
                    seed,
                    ..Default::default()
                },
            };
            let report = classify(&features, &labels, k, a.model, &cfg)?;
            write(
                &out.join("accuracy.csv"),
                &accuracy_table(&[(k, report.clone())]),
            )?;
            write(&out.join("confusion.csv"), &report.confusion.to_csv())?;
            write(
                &out.join("confusion.svg"),
                &confusion_svg(
                    &report.confusion,
                    &format!("{k} clusters, {}", a.model.tag()),
                ),
            )?;
            write(
                &out.join("report.json"),
                &serde_json::to_string_pretty(&report)?,
            )?;
            println!("mean accuracy {:.4} (std {:.4})", report.mean, report.std);
        }
        Command::Crossval(a) => {
            let series = load_normalized(&a.data)?;
            let enc = encoder_config(a.enc_config.as_deref(), &series)?;
            let tc = train_config(&a.opts, cli.seed)?;
            let cv = CrossvalConfig {
                folds: a.folds,
                k: a.k,
                method: a.method,
            };
            let folds = encoder_cv(&series, &enc, &tc, &cv, a.window_length)?;
            write_crossval(&folds, out_path(cli)?)?;
        }
        Command::Report(a) => {
            let out = out_path(cli)?;
            let rows = read_labels(&a.labels)?;
            let series = load_dataset(&a.data)?;
            let k = rows.iter().map(|r| r.label + 1).max().unwrap_or(1);
            let timeline = ClusterTimeline::build(&rows, k, a.method, &series, a.window_length)?;
            let (svg, csv) = render_timeline(&timeline)?;
            write(&out.join("timeline.svg"), &svg)?;
            write(&out.join("timeline.csv"), &csv)?;
            println!(
                "{} windows, {} label repeats",
                timeline.num_windows(),
                timeline.repeat_count()
            );
        }
        Command::Run(a) => {
            let mut cfg = match (&a.manifest, &a.config) {
                (Some(m), _) => RunManifest::load(m)?.config,
                (None, Some(c)) => PipelineConfig::load(c)?,
                (None, None) => PipelineConfig::desk(0),
            };
            if let Some(s) = cli.seed {
                cfg.set_seed(s);
            }
            if a.dump_config {
                println!("{}", serde_json::to_string_pretty(&cfg)?);
                return Ok(());
            }
            let manifest = pipeline::run_pipeline(&cfg, out_path(cli)?)?;
            println!(
                "{} artifacts, config {}",
                manifest.artifacts.len(),
                manifest.config_sha256
            );
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot configure {n} threads: {e}");
            std::process::exit(2);
        }
    }
    if let Err(e) = run(&cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
