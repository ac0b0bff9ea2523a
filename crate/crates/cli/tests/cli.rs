use std::path::Path;
use std::process::{Command, Output};

use dsnt_core::data::{CoordinateRegion, Dataset, DatasetConfig};
use dsnt_core::harness::{EvalSplit, ExperimentConfig, MetricsReport};
use dsnt_core::model::{BackboneConfig, HeadKind};

fn dsnt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsnt"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn tiny() -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetConfig {
            sample_count: 24,
            image_size: 16,
            ..DatasetConfig::default()
        },
        backbone: BackboneConfig {
            input_size: 16,
            stage_widths: vec![4, 4],
            downsample_count: 1,
            ..BackboneConfig::default()
        },
        epochs: 2,
        batch_size: 8,
        eval_splits: vec![EvalSplit::new("test", CoordinateRegion::Full, 16, 99)],
        ..ExperimentConfig::default()
    }
}

fn write_config(dir: &Path, config: &ExperimentConfig) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string(config).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_outputs_and_replays_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny());
    let first = dir.path().join("first");
    let out = dsnt(&["train", "--config", &cfg, "--out", path(&first), "--seed", "3", "--head", "fc"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["report.csv", "config.echo.json", "model.ckpt", "timing.json"] {
        assert!(first.join(f).exists(), "{f} missing");
    }
    let echo: ExperimentConfig =
        serde_json::from_str(&std::fs::read_to_string(first.join("config.echo.json")).unwrap()).unwrap();
    assert_eq!(echo.seed, 3);
    assert_eq!(echo.head, HeadKind::fc());

    let second = dir.path().join("second");
    let out = dsnt(&["train", "--config", path(&first.join("config.echo.json")), "--out", path(&second)]);
    assert!(out.status.success());
    let a = std::fs::read(first.join("report.csv")).unwrap();
    let b = std::fs::read(second.join("report.csv")).unwrap();
    assert_eq!(a, b);
    let report = MetricsReport::from_csv(std::str::from_utf8(&a).unwrap()).unwrap();
    assert_eq!(report.epoch_losses.len(), 2);
    assert_eq!(report.head, "FC");
}

#[test]
fn eval_reuses_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny());
    let trained = dir.path().join("trained");
    assert!(dsnt(&["train", "--config", &cfg, "--out", path(&trained)]).status.success());
    let evaluated = dir.path().join("eval");
    let ckpt = trained.join("model.ckpt");
    let out = dsnt(&["eval", "--config", &cfg, "--out", path(&evaluated), "--checkpoint", path(&ckpt)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let train_report =
        MetricsReport::from_csv(&std::fs::read_to_string(trained.join("report.csv")).unwrap()).unwrap();
    let eval_report =
        MetricsReport::from_csv(&std::fs::read_to_string(evaluated.join("report.csv")).unwrap()).unwrap();
    assert_eq!(train_report.splits, eval_report.splits);

    let hm_cfg = write_config(dir.path(), &ExperimentConfig { head: HeadKind::hm(), ..tiny() });
    let out = dsnt(&["eval", "--config", &hm_cfg, "--out", path(&evaluated), "--checkpoint", path(&ckpt)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn validation_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &ExperimentConfig { batch_size: 0, ..tiny() });
    let out = dsnt(&["train", "--config", &cfg, "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(1));

    std::fs::write(dir.path().join("bad.json"), "{\"epochz\": 3}").unwrap();
    let out = dsnt(&["train", "--config", path(&dir.path().join("bad.json")), "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(1));

    assert_eq!(dsnt(&["train"]).status.code(), Some(1));
    assert_eq!(dsnt(&["gradcheck", "--scope", "nope"]).status.code(), Some(1));
}

#[test]
fn divergence_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &ExperimentConfig {
            learning_rate: 1e300,
            epochs: 3,
            head: HeadKind::fc(),
            ..tiny()
        },
    );
    let out = dsnt(&["train", "--config", &cfg, "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_dsnt_only_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dsnt(&["gradcheck", "--scope", "dsnt-only", "--out", path(dir.path())]);
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("PASS") && !stdout.contains("FAIL"));
    assert!(dir.path().join("report.csv").exists());
}

#[test]
fn sweep_and_spatialgen_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &ExperimentConfig { epochs: 1, ..tiny() });
    let sweep = dir.path().join("sweep");
    let out = dsnt(&[
        "sweep-resolution", "--config", &cfg, "--out", path(&sweep), "--resolutions", "4,8", "--heads", "hm,dsnt",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(sweep.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);

    let spatial = dir.path().join("spatial");
    assert!(dsnt(&["spatialgen", "--config", &cfg, "--out", path(&spatial)]).status.success());
    let csv = std::fs::read_to_string(spatial.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6);

    let out = dsnt(&["sweep-resolution", "--config", &cfg, "--out", path(&sweep), "--resolutions", "3"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gen_data_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny());
    let out = dsnt(&["gen-data", "--config", &cfg, "--out", path(dir.path()), "--seed", "11"]);
    assert!(out.status.success());
    let ds = Dataset::load(&dir.path().join("dataset.bin")).unwrap();
    assert_eq!(ds.len(), 24);
    assert_eq!(ds.config.seed, 11);
    let expected = dsnt_core::data::generate(&DatasetConfig { seed: 11, ..tiny().dataset }).unwrap();
    assert_eq!(ds, expected);
}
