use std::path::Path;
use std::process::{Command, Output};

fn endomap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_endomap")).args(args).output().unwrap()
}

fn synth(dir: &Path) {
    let out = endomap(&["--out", dir.to_str().unwrap(), "--seed", "3", "synth", "--frames", "3", "--size", "64"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("config.toml").is_file());
}

#[test]
fn help_lists_every_subcommand() {
    let out = endomap(&["--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for c in ["synth", "preprocess", "features", "stitch", "sfs", "evaluate", "pipeline", "--config", "--out", "--seed", "--threads"] {
        assert!(text.contains(c), "{c}");
    }
}

#[test]
fn stitch_before_preprocess_names_missing_manifest() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let cfg = dir.path().join("config.toml");
    let out = endomap(&["--config", cfg.to_str().unwrap(), "stitch"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("manifest") && err.contains("preprocess"), "{err}");
}

#[test]
fn empty_input_directory_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("frames")).unwrap();
    std::fs::write(dir.path().join("config.toml"), "schema = \"endomap.config/1\"\ninput = \"frames\"\noutput = \"run\"\n").unwrap();
    let cfg = dir.path().join("config.toml");
    let out = endomap(&["--config", cfg.to_str().unwrap(), "pipeline"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    assert!(!dir.path().join("run/preprocess").exists());
}

#[test]
fn staged_run_then_ceiling_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let cfg = dir.path().join("config.toml");
    let c = cfg.to_str().unwrap();
    for stage in ["preprocess", "features", "stitch", "sfs", "evaluate"] {
        let out = endomap(&["--config", c, "--threads", "1", stage]);
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert!(dir.path().join("run/evaluate/report.json").is_file());

    let text = std::fs::read_to_string(&cfg).unwrap();
    std::fs::write(&cfg, text.replace("rms_ceiling = 100.0", "rms_ceiling = 0.0")).unwrap();
    let out = endomap(&["--config", c, "evaluate"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
