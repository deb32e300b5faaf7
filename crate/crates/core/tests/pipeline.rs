mod common;

use hemoembed::encoder::{init_params, EncoderConfig};
use hemoembed::pipeline::{
    embed_all, feature_table, label_rows, normalize_all, read_embeddings, read_features,
    read_labels, rerun_from_manifest, run_pipeline, window_all, write_embeddings, write_features,
    write_labels, DataSource, PipelineConfig, RunSummary,
};
use hemoembed::signal::{generate_synthetic, SyntheticConfig};
use hemoembed::training::{train, TrainConfig};

fn small_data(seed: u64) -> SyntheticConfig {
    let mut cfg = SyntheticConfig::desk(4, 2, seed);
    cfg.baseline_minutes = 2.0;
    cfg.bleed_minutes = 4.0;
    cfg
}

fn small_pipeline(seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig::desk(seed);
    cfg.data = DataSource::Synthetic(small_data(seed));
    cfg.encoder = EncoderConfig {
        hidden_channels: 8,
        num_layers: 3,
        embedding_dim: 8,
        ..EncoderConfig::desk(6)
    };
    cfg.training.iterations = 10;
    cfg.training.batch_size = 4;
    cfg.clustering.k_values = vec![2, 3];
    cfg.explain.folds = 2;
    cfg.explain.forest.num_trees = 5;
    cfg
}

#[test]
fn cv_folds_never_leak_test_subjects() {
    common::check_cv_hygiene(16, 16, 5).unwrap();
    common::check_cv_hygiene(16, 4, 5).unwrap();
    common::check_cv_hygiene(5, 2, 3).unwrap();
}

#[test]
fn stage_tables_round_trip_through_csv() {
    let series = normalize_all(&generate_synthetic(&small_data(1)).unwrap()).unwrap();
    let windows = window_all(&series, 120).unwrap();
    let params = init_params(&EncoderConfig::tiny(6), 2).unwrap();
    let embeddings = embed_all(&params, &windows).unwrap();
    let dir = tempfile::tempdir().unwrap();

    let path = dir.path().join("e.csv");
    write_embeddings(&embeddings, &path).unwrap();
    assert_eq!(read_embeddings(&path).unwrap(), embeddings);

    let labels: Vec<usize> = (0..embeddings.len()).map(|i| i % 3).collect();
    let rows = label_rows(&embeddings, &labels).unwrap();
    let path = dir.path().join("l.csv");
    write_labels(&rows, &path).unwrap();
    assert_eq!(read_labels(&path).unwrap(), rows);

    let table = feature_table(&windows, &series[0].channels).unwrap();
    let path = dir.path().join("f.csv");
    write_features(&table, &path).unwrap();
    let back = read_features(&path).unwrap();
    assert_eq!(back, table);
    assert_eq!(back.align_labels(&rows).unwrap(), labels);
}

#[test]
fn malformed_csv_reports_its_location() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(
        &path,
        "subject_id,window_start,seconds_from_bleed,label\ns1,0,-1.0,x\n",
    )
    .unwrap();
    let err = read_labels(&path).unwrap_err().to_string();
    assert!(err.contains("line 2") && err.contains("column 4"), "{err}");
}

#[test]
fn training_reduces_loss_on_most_seeds() {
    let data = SyntheticConfig::desk(8, 3, 0);
    let series = normalize_all(&generate_synthetic(&data).unwrap()).unwrap();
    let enc = EncoderConfig::desk(6);
    let improved = (0..3)
        .filter(|&seed| {
            let cfg = TrainConfig {
                iterations: 150,
                ..TrainConfig::desk(seed)
            };
            let trace = train(&series, &enc, &cfg, None).unwrap().trace;
            let tenth = trace.len() / 10;
            let mean = |rows: &[hemoembed::training::TraceRow]| {
                rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64
            };
            mean(&trace[trace.len() - tenth..]) < mean(&trace[..tenth])
        })
        .count();
    assert!(improved >= 2, "loss fell on {improved} of 3 seeds");
}

#[test]
fn rerun_from_manifest_reproduces_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let first = run_pipeline(&small_pipeline(5), dir.path().join("a")).unwrap();
    let second = rerun_from_manifest(&first, dir.path().join("b")).unwrap();
    assert_eq!(first.artifacts, second.artifacts);
    assert!(first.artifact("embeddings.csv").is_some());
    assert!(first.artifact("clusters/ward-k03.csv").is_some());
    let summary: RunSummary =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a/summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary.num_subjects, 4);
    assert_eq!(summary.variants[0].per_k.len(), 2);
    assert!(summary.variants[0].per_k[0].accuracy.contains_key("rf"));
}

#[test]
fn failing_stage_is_named() {
    let mut cfg = small_pipeline(0);
    cfg.window_length = 1_000_000;
    let err = run_pipeline(&cfg, tempfile::tempdir().unwrap().path()).unwrap_err();
    assert!(err.to_string().contains("window"), "{err}");
}
