//! Drives the compiled binary through the full workflow on a scratch
//! directory: synth, prepare, train, eval, explain, plus the failure paths.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use somnivit::cli::RunConfig;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_somnivit")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary spawns")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        stdout(out),
        stderr(out)
    );
}

/// Small cohort, small model, two epochs; everything under `root`.
fn write_config(root: &Path) -> PathBuf {
    let text = format!(
        r#"
seed = 5

[paths]
raw_dir = "{root}/raw"
archive_dir = "{root}/archive"
train_dir = "{root}/train"
eval_dir = "{root}/eval"
explain_dir = "{root}/explain"

[generator]
n_subjects = 8
epochs_per_subject = [3, 4]
sampling_rate_hz = 128.0

[model]
d_model = 16
n_layers = 1
n_heads = 2
mlp_hidden = 16
head_hidden = 8
branch_hidden = 8
dropout_rate = 0.0
stochastic_depth_survival = 1.0

[train]
epochs = 2
batch_size = 8
"#,
        root = root.display()
    );
    let path = root.join("config.toml");
    fs::write(&path, text).unwrap();
    path
}

fn read_split_ids(archive: &Path, split: &str) -> Vec<String> {
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(archive.join("split.json")).unwrap()).unwrap();
    json[split]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect()
}

#[test]
fn example_config_is_the_library_default() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/example.toml");
    let cfg: RunConfig = toml::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(cfg, RunConfig::default());
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = write_config(root);
    let config = config.to_str().unwrap();

    let out = run(&["--config", config, "synth"]);
    assert_ok(&out, "synth");
    assert!(stdout(&out).starts_with("synth: wrote 8 subjects"));

    let out = run(&["--config", config, "prepare"]);
    assert_ok(&out, "prepare");
    assert!(stdout(&out).contains("split 6/1/1"));

    let out = run(&["--config", config, "train"]);
    assert_ok(&out, "train");
    assert!(stdout(&out).starts_with("train: completed after 2 epochs"));

    let out = run(&["--config", config, "eval"]);
    assert_ok(&out, "eval");
    assert!(stdout(&out).contains("== overall =="));

    // every command records the configuration it resolved
    for sub in ["raw", "archive", "train", "eval"] {
        let resolved = root.join(sub).join("resolved_config.toml");
        assert!(resolved.is_file(), "missing {}", resolved.display());
    }
    for name in ["best.ckpt", "history.csv", "summary.json"] {
        assert!(root.join("train").join(name).is_file(), "missing train/{name}");
    }
    for name in [
        "eval_stage.json",
        "eval_apnea.json",
        "confusion_stage.csv",
        "confusion_apnea.csv",
        "report.txt",
    ] {
        assert!(root.join("eval").join(name).is_file(), "missing eval/{name}");
    }

    // scoring the same checkpoint twice gives byte-identical reports
    let again = root.join("eval_again");
    let out = run(&["--config", config, "--out", again.to_str().unwrap(), "eval"]);
    assert_ok(&out, "second eval");
    for name in [
        "resolved_config.toml",
        "eval_stage.json",
        "eval_apnea.json",
        "confusion_stage.csv",
        "confusion_apnea.csv",
        "report.txt",
    ] {
        let a = fs::read(root.join("eval").join(name)).unwrap();
        let b = fs::read(again.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical eval runs");
    }

    let subject = read_split_ids(&root.join("archive"), "test").remove(0);
    let selector = format!("{subject}/0");
    let out = run(&[
        "--config", config, "explain", "--segment", &selector, "--channels", "ppg,rf",
    ]);
    assert_ok(&out, "explain");
    let seg_dir = root.join("explain").join(format!("{subject}_0"));
    assert!(seg_dir.join("importance.csv").is_file());
    assert!(seg_dir.join("overlay_ppg.svg").is_file());
    assert!(seg_dir.join("overlay_rf.svg").is_file());
    assert!(!seg_dir.join("overlay_rc.svg").exists());
}

#[test]
fn root_seed_reproduces_the_cohort() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = write_config(root);
    let config = config.to_str().unwrap();

    let outs: Vec<PathBuf> =
        ["a", "b", "c"].iter().map(|n| root.join(format!("raw_{n}"))).collect();
    for (path, seed) in outs.iter().zip(["1", "1", "2"]) {
        let out = run(&[
            "--config", config, "--seed", seed, "--out", path.to_str().unwrap(), "synth",
        ]);
        assert_ok(&out, "synth");
    }

    let manifest = |p: &Path| fs::read(p.join("cohort.json")).unwrap();
    let raw = |p: &Path| fs::read(p.join("raw").join("s000.f32")).unwrap();
    assert_eq!(manifest(&outs[0]), manifest(&outs[1]));
    assert_eq!(raw(&outs[0]), raw(&outs[1]));
    assert_ne!(manifest(&outs[0]), manifest(&outs[2]));
}

#[test]
fn missing_inputs_fail_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = write_config(root);
    let config = config.to_str().unwrap();

    for args in [
        vec!["--config", config, "prepare"],
        vec!["--config", config, "eval"],
        vec!["--config", config, "explain", "--segment", "s000/0"],
    ] {
        let out = run(&args);
        assert!(!out.status.success(), "{args:?} should fail");
        let err = stderr(&out);
        let err = err.trim_end();
        assert!(err.starts_with("error: "), "unexpected stderr {err:?}");
        assert!(!err.contains('\n'), "multi-line stderr {err:?}");
        assert!(err.contains(&root.display().to_string()), "no path in {err:?}");
    }
}

#[test]
fn quiet_silences_the_summary() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = write_config(root);

    let out = run(&["--config", config.to_str().unwrap(), "--quiet", "synth"]);
    assert_ok(&out, "quiet synth");
    assert_eq!(stdout(&out), "");
}
