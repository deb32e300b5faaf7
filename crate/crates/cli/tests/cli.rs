use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hemoembed::encoder::EncoderConfig;
use hemoembed::pipeline::{DataSource, PipelineConfig, RunManifest};
use hemoembed::signal::SyntheticConfig;
use hemoembed::training::TrainConfig;

fn hemoembed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hemoembed"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = hemoembed(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn small_data() -> SyntheticConfig {
    let mut cfg = SyntheticConfig::desk(4, 2, 0);
    cfg.baseline_minutes = 2.0;
    cfg.bleed_minutes = 4.0;
    cfg
}

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        hidden_channels: 8,
        num_layers: 3,
        embedding_dim: 8,
        ..EncoderConfig::desk(6)
    }
}

fn small_training() -> TrainConfig {
    TrainConfig {
        iterations: 10,
        batch_size: 4,
        ..TrainConfig::desk(0)
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> String {
    fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn stage_by_stage_commands_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let data_cfg = write_json(&d.join("data.json"), &small_data());
    let enc_cfg = write_json(&d.join("enc.json"), &small_encoder());
    let train_cfg = write_json(&d.join("train.json"), &small_training());
    let data = d.join("data");
    let model = d.join("model");

    ok(&[
        "gen-data",
        "--config",
        &data_cfg,
        "--seed",
        "3",
        "--out",
        s(&data),
    ]);
    assert!(data.join("subject-04.csv").is_file());

    ok(&[
        "train",
        "--data",
        s(&data),
        "--enc-config",
        &enc_cfg,
        "--train-config",
        &train_cfg,
        "--iterations",
        "5",
        "--out",
        s(&model),
    ]);
    let trace = fs::read_to_string(model.join("loss_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 6);

    let emb = d.join("emb.csv");
    ok(&[
        "embed",
        "--checkpoint",
        s(&model),
        "--data",
        s(&data),
        "--out",
        s(&emb),
    ]);
    let emb_time = d.join("emb_time.csv");
    ok(&[
        "attach-time",
        "--embeddings",
        s(&emb),
        "--mode",
        "full",
        "--out",
        s(&emb_time),
    ]);
    let header = |p: &Path| {
        fs::read_to_string(p)
            .unwrap()
            .lines()
            .next()
            .unwrap()
            .split(',')
            .count()
    };
    assert_eq!(header(&emb), 4 + 8);
    assert_eq!(header(&emb_time), 4 + 8);
    assert_ne!(
        fs::read_to_string(&emb).unwrap(),
        fs::read_to_string(&emb_time).unwrap()
    );

    let labels = d.join("labels.csv");
    ok(&[
        "cluster",
        "--embeddings",
        s(&emb_time),
        "--k",
        "3",
        "--out",
        s(&labels),
    ]);
    let n_rows = fs::read_to_string(&labels).unwrap().lines().count() - 1;
    assert_eq!(
        n_rows,
        fs::read_to_string(&emb).unwrap().lines().count() - 1
    );

    let feats = d.join("features.csv");
    ok(&["features", "--data", s(&data), "--out", s(&feats)]);
    let cls = d.join("classify");
    let stdout = ok(&[
        "classify",
        "--features",
        s(&feats),
        "--labels",
        s(&labels),
        "--folds",
        "2",
        "--trees",
        "5",
        "--out",
        s(&cls),
    ]);
    assert!(stdout.starts_with("mean accuracy"));
    for f in [
        "accuracy.csv",
        "confusion.csv",
        "confusion.svg",
        "report.json",
    ] {
        assert!(cls.join(f).is_file(), "{f}");
    }

    let rep = d.join("report");
    ok(&[
        "report",
        "--labels",
        s(&labels),
        "--data",
        s(&data),
        "--out",
        s(&rep),
    ]);
    assert!(fs::read_to_string(rep.join("timeline.svg"))
        .unwrap()
        .starts_with("<svg"));

    let cv = d.join("cv");
    ok(&[
        "crossval",
        "--data",
        s(&data),
        "--enc-config",
        &enc_cfg,
        "--train-config",
        &train_cfg,
        "--folds",
        "2",
        "--k",
        "3",
        "--out",
        s(&cv),
    ]);
    assert!(cv.join("folds.json").is_file());
}

#[test]
fn run_and_rerun_from_manifest_match() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let mut cfg = PipelineConfig::desk(0);
    cfg.data = DataSource::Synthetic(small_data());
    cfg.encoder = small_encoder();
    cfg.training = small_training();
    cfg.clustering.k_values = vec![2, 3];
    cfg.explain.folds = 2;
    cfg.explain.forest.num_trees = 5;
    let cfg_path = write_json(&d.join("pipeline.json"), &cfg);
    let a = d.join("a");
    let b = d.join("b");
    ok(&[
        "run",
        "--config",
        &cfg_path,
        "--seed",
        "9",
        "--threads",
        "1",
        "--out",
        s(&a),
    ]);
    let manifest = a.join("run_manifest.json");
    ok(&["run", "--manifest", s(&manifest), "--out", s(&b)]);
    let ma = RunManifest::load(&manifest).unwrap();
    let mb = RunManifest::load(b.join("run_manifest.json")).unwrap();
    assert_eq!(ma.config.training.seed, 9);
    assert_eq!(ma.config_sha256, mb.config_sha256);
    assert_eq!(ma.artifacts, mb.artifacts);
}

#[test]
fn dump_config_applies_seed() {
    let stdout = ok(&["run", "--seed", "42", "--dump-config"]);
    let cfg = PipelineConfig::from_json(&stdout).unwrap();
    assert_eq!(cfg.training.seed, 42);
    assert_eq!(cfg.clustering.seed, 42);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("bad.json");
    let mut v = serde_json::to_value(PipelineConfig::desk(0)).unwrap();
    v["clustering"]["linkage"] = serde_json::json!("single");
    fs::write(&p, v.to_string()).unwrap();
    let out = hemoembed(&["run", "--config", s(&p), "--out", s(tmp.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("linkage"));
}

#[test]
fn missing_out_is_an_error() {
    let out = hemoembed(&["gen-data", "--subjects", "2"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--out"));
}

#[test]
fn bad_enum_value_is_reported() {
    let out = hemoembed(&[
        "cluster",
        "--embeddings",
        "x.csv",
        "--method",
        "single",
        "--out",
        "y.csv",
    ]);
    assert_eq!(out.status.code(), Some(2));
}
