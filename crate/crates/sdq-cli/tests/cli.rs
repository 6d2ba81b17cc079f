//! End-to-end checks of the `sdq` binary: each subcommand is driven the way
//! a user would, against temp directories and tiny configs.

use std::path::Path;
use std::process::{Command, Output};

fn sdq(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sdq"));
    cmd.args(args);
    cmd.env_remove("SDQ_DATA_DIR");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        stdout(out),
        stderr(out)
    );
}

/// Tiny fully-connected setup on Gaussian blobs; trains in well under a
/// second and exposes the full quantized pipeline (full -> input_only).
fn point_config(out_dir: &Path) -> String {
    format!(
        r#"
seed = 11
out_dir = "{}"

[dataset]
kind = "gaussian"
per_class = 60
spread = 0.2

[model]
input = [2]
classes = 3

[[model.layer]]
kind = "linear"
out = 20
quant = "full"

[[model.layer]]
kind = "linear"
out = 3
quant = "input_only"

[train]
batch_size = 16
weight_decay = 1e-4

[[train.stage]]
bits = 3
grad_scale = 1.0
epochs = 3
lr = 0.1
"#,
        out_dir.display()
    )
}

#[test]
fn train_writes_metrics_and_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("run");
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, point_config(&out_dir)).unwrap();

    let out = sdq(&["train", "--config", cfg.to_str().unwrap()], &[]);
    assert_ok(&out);
    let text = stdout(&out);
    assert!(text.contains("best val acc"), "missing summary: {text}");
    assert!(text.contains("test acc"));
    assert!(out_dir.join("metrics.csv").is_file());
    assert!(out_dir.join("model.ckpt").is_file());
    // 3 epochs, train + val rows each.
    assert_eq!(text.lines().filter(|l| l.starts_with("epoch ")).count(), 6);
}

#[test]
fn bits_override_runs_a_single_stage_at_that_width() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("run");
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, point_config(&out_dir)).unwrap();

    let out = sdq(
        &["train", "--config", cfg.to_str().unwrap(), "--bits", "2", "--gradient-scale", "0.1"],
        &[],
    );
    assert_ok(&out);
    let metrics = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    // Same epochs as the (only) configured stage, inherited for the new width.
    assert_eq!(metrics.lines().count(), 1 + 6);
}

#[test]
fn identical_runs_produce_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("base");
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, point_config(&out_dir)).unwrap();

    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        let out =
            sdq(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()], &[]);
        assert_ok(&out);
    }
    assert_eq!(
        std::fs::read(a.join("metrics.csv")).unwrap(),
        std::fs::read(b.join("metrics.csv")).unwrap()
    );
    assert_eq!(
        std::fs::read(a.join("model.ckpt")).unwrap(),
        std::fs::read(b.join("model.ckpt")).unwrap()
    );
}

#[test]
fn progressive_continues_at_lower_width() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("run3");
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, point_config(&out_dir)).unwrap();
    assert_ok(&sdq(&["train", "--config", cfg.to_str().unwrap()], &[]));
    let ckpt = out_dir.join("model.ckpt");

    let out2 = tmp.path().join("run2");
    let out = sdq(
        &[
            "progressive",
            "--config",
            cfg.to_str().unwrap(),
            "--from",
            ckpt.to_str().unwrap(),
            "--bits",
            "2",
            "--rescale",
            "--gradient-scale",
            "0",
            "--out",
            out2.to_str().unwrap(),
        ],
        &[],
    );
    assert_ok(&out);
    let text = stdout(&out);
    assert!(text.contains("transferred 3 -> 2 bits"), "{text}");
    assert!(text.contains("thresholds rescaled"));
    assert!(out2.join("model.ckpt").is_file());

    // Widening is not a transfer the checkpoint supports.
    let out = sdq(
        &[
            "progressive",
            "--config",
            cfg.to_str().unwrap(),
            "--from",
            ckpt.to_str().unwrap(),
            "--bits",
            "8",
        ],
        &[],
    );
    assert!(!out.status.success());
    assert!(stderr(&out).contains("below the target"), "{}", stderr(&out));
}

#[test]
fn export_then_verify_stays_within_the_bound() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("run");
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, point_config(&out_dir)).unwrap();
    assert_ok(&sdq(&["train", "--config", cfg.to_str().unwrap()], &[]));

    let ckpt = out_dir.join("model.ckpt");
    let model = out_dir.join("model.sdqi");
    let out = sdq(
        &["export", "--ckpt", ckpt.to_str().unwrap(), "--out", model.to_str().unwrap()],
        &[],
    );
    assert_ok(&out);
    assert!(stdout(&out).contains("quantized layer(s)"));
    assert!(model.is_file());

    let out = sdq(
        &[
            "verify",
            "--config",
            cfg.to_str().unwrap(),
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--model",
            model.to_str().unwrap(),
            "--samples",
            "50",
        ],
        &[],
    );
    assert_ok(&out);
    let text = stdout(&out);
    assert!(text.contains("max normalized deviation"), "{text}");
    assert!(text.contains("argmax agreement"));
}

#[test]
fn report_summarizes_a_finished_run() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("run");
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, point_config(&out_dir)).unwrap();
    assert_ok(&sdq(&["train", "--config", cfg.to_str().unwrap()], &[]));

    let out = sdq(&["report", "--metrics", out_dir.to_str().unwrap()], &[]);
    assert_ok(&out);
    let text = stdout(&out);
    assert!(text.contains("best val acc"), "{text}");
    assert!(text.contains("threshold"));
    let report = std::fs::read_to_string(out_dir.join("report.csv")).unwrap();
    assert!(report.starts_with("layer,threshold,prune_ratio\n"));
    assert!(report.lines().count() > 1);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    let text = point_config(&tmp.path().join("run")).replace("seed = 11", "seed = 11\nbogus = 1");
    std::fs::write(&cfg, text).unwrap();

    let out = sdq(&["train", "--config", cfg.to_str().unwrap()], &[]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("bogus"), "{}", stderr(&out));
}

#[test]
fn data_dir_env_var_redirects_file_datasets() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("run");
    let data_dir = tmp.path().join("digit-data");
    let cfg = tmp.path().join("c.toml");
    std::fs::write(
        &cfg,
        format!(
            r#"
seed = 5
out_dir = "{}"

[dataset]
kind = "digits"
dir = "this/path/is/ignored"
train = 48
test = 16

[model]
input = [1, 28, 28]
classes = 10

[[model.layer]]
kind = "conv"
out = 2
k = 3
stride = 4
pad = 1
quant = "off"

[[model.layer]]
kind = "linear"
out = 10
quant = "input_only"

[train]
batch_size = 16

[[train.stage]]
bits = 3
epochs = 1
lr = 0.05
"#,
            out_dir.display()
        ),
    )
    .unwrap();

    let out = sdq(
        &["train", "--config", cfg.to_str().unwrap()],
        &[("SDQ_DATA_DIR", data_dir.to_str().unwrap())],
    );
    assert_ok(&out);
    // The corpus was rendered into the override directory as IDX files.
    assert!(data_dir.join("train-images-idx3-ubyte").is_file());
    assert!(data_dir.join("t10k-labels-idx1-ubyte").is_file());
    assert!(out_dir.join("metrics.csv").is_file());
}
