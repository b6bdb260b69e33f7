//! End-to-end runs of the `ucorr` binary on a tiny dataset.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ucorr::commands::{evaluate_with, LOG_HEADER};
use ucorr::dataset::{frame_path, read_split, Manifest};
use ucorr_core::metrics::{EvalOptions, MetricAccumulator};

const TINY: &str = r#"
[data]
train_flights = 2
val_flights = 1
test_flights = 1
frames_per_flight = 4

[train]
epochs = 2
batch_size = 2
max_steps = 3

[train.model]
variant = "ucorr_deep"
base_channels = 4
"#;

fn ucorr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ucorr"))
        .arg("--config")
        .arg(dir.join("tiny.toml"))
        .arg("--deterministic")
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = ucorr(dir, args);
    assert!(o.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let data = dir.path().join("data");
    ok(dir.path(), &["gen-data", "--out", data.to_str().unwrap()]);
    (dir, data)
}

#[test]
fn gen_train_eval_infer() {
    let (dir, data) = setup();
    let d = dir.path();
    let data_s = data.to_str().unwrap();

    let again = ucorr(d, &["gen-data", "--out", data_s]);
    assert!(!again.status.success(), "existing dataset overwritten without --force");
    ok(d, &["gen-data", "--out", data_s, "--force"]);

    let run = d.join("run");
    let run_s = run.to_str().unwrap();
    ok(d, &["train", "--data", data_s, "--out", run_s]);
    let log = std::fs::read_to_string(run.join("logs/train.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some(LOG_HEADER));
    assert_eq!(lines.count(), 3);
    assert!(run.join("checkpoints/final.uckp").exists());

    let stdout = ok(d, &["eval", "--run", run_s, "--data", data_s]);
    assert!(stdout.contains("iou"));
    let kv = std::fs::read_to_string(run.join("reports/test.kv")).unwrap();
    assert!(kv.contains("n_samples=") && kv.contains("threshold=0.5"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("reports/test.json")).unwrap()).unwrap();
    assert!(json["f1"].is_number());

    let manifest = Manifest::load(&data).unwrap();
    let flight = &manifest.split("test").unwrap()[0];
    let fdir = data.join("test").join(&flight.id);
    let (f0, f1) = (frame_path(&fdir, 0), frame_path(&fdir, 1));
    let out = d.join("infer");
    let printed = ok(
        d,
        &["infer", "--run", run_s, "--frames", f0.to_str().unwrap(), f1.to_str().unwrap(), "--out", out.to_str().unwrap()],
    );
    assert_eq!(printed.lines().count(), 3);
    for f in ["wire.png", "depth.utf", "panel.png"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let panel = image::open(out.join("panel.png")).unwrap();
    assert_eq!((panel.width(), panel.height()), (3 * manifest.width as u32, manifest.height as u32));

    let wrong_arity = ucorr(d, &["infer", "--run", run_s, "--frames", f0.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(!wrong_arity.status.success());
}

#[test]
fn eval_pipeline_scores_ground_truth_perfectly() {
    let (_dir, data) = setup();
    let samples = read_split(&data, "test", 2).unwrap();
    let opts = EvalOptions::default();
    let r = evaluate_with(&samples, &opts, |s| Ok((s.wire_mask.data.clone(), s.depth.data.clone()))).unwrap();
    assert_eq!(r.n_samples, samples.len());
    if r.flags.is_empty() {
        assert_eq!((r.iou, r.precision, r.recall, r.f1), (1.0, 1.0, 1.0, 1.0));
        assert_eq!(r.auc, Some(1.0));
        assert_eq!(r.ap, Some(1.0));
    }
    assert_eq!(r.abs_rel, Some(0.0));
    assert_eq!(r.depth_mae, Some(0.0));

    // merging per-image accumulators in order matches one pass
    let mut acc = MetricAccumulator::new();
    for s in &samples {
        acc.add_image(&s.wire_mask.data, &s.wire_mask.data, &s.depth.data, &s.depth.data, (s.height(), s.width()), &opts)
            .unwrap();
    }
    assert_eq!(acc.finish(&opts).unwrap(), r);
}
