use endomap::pipeline::{
    hash_bytes, list_frames, run_pipeline, run_stage, synth_dataset, PipelineConfig, StageManifest, CONFIG_SCHEMA, MANIFEST_SCHEMA,
};
use endomap::synthkit::DatasetParams;
use std::path::Path;

fn small_dataset(dir: &Path) -> PipelineConfig {
    let p = DatasetParams { frames: 3, size: 64, seed: 5, ..Default::default() };
    synth_dataset(&p, dir).unwrap();
    PipelineConfig::load(dir.join("config.toml")).unwrap()
}

#[test]
fn config_round_trip_and_schema() {
    let c = PipelineConfig::default();
    let back = PipelineConfig::from_toml_str(&c.to_toml_string()).unwrap();
    assert_eq!(back, c);
    assert!(c.to_toml_string().contains(CONFIG_SCHEMA));
    let bad = c.to_toml_string().replace(CONFIG_SCHEMA, "endomap.config/99");
    assert!(matches!(PipelineConfig::from_toml_str(&bad), Err(endomap::Error::Config(_))));
    let partial = PipelineConfig::from_toml_str("schema = \"endomap.config/1\"\nseed = 9\n[sfs]\niters = 50\n").unwrap();
    assert_eq!((partial.seed, partial.sfs.iters), (9, 50));
    assert_eq!(partial.stitch, c.stitch);
}

#[test]
fn config_validation() {
    let mut c = PipelineConfig::default();
    assert!(c.validate(false).is_ok());
    c.preprocess.percentile = 100.0;
    assert!(c.validate(false).is_err());
    let mut c = PipelineConfig::default();
    c.sfs.iters = 0;
    assert!(c.validate(false).is_err());
    let mut c = PipelineConfig::default();
    c.evaluation.group_sizes = vec![0];
    assert!(c.validate(false).is_err());
    let mut c = PipelineConfig::default();
    c.input = "/nonexistent/frames".into();
    assert!(matches!(c.validate(true), Err(endomap::Error::Config(_))));
}

#[test]
fn empty_input_directory_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("frames")).unwrap();
    std::fs::write(dir.path().join("frames/readme.txt"), "x").unwrap();
    assert!(list_frames(&dir.path().join("frames")).unwrap().is_empty());
    let c = PipelineConfig { input: dir.path().join("frames"), output: dir.path().join("out"), ..Default::default() };
    assert!(matches!(run_pipeline(&c), Err(endomap::Error::Config(_))));
}

#[test]
fn load_resolves_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_dataset(dir.path());
    assert_eq!(c.input, dir.path().join("frames"));
    assert_eq!(c.output, dir.path().join("run"));
    assert_eq!(list_frames(&c.input).unwrap().len(), 3);
}

#[test]
fn stage_needs_its_dependency() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_dataset(dir.path());
    for stage in ["features", "stitch", "sfs"] {
        let e = run_stage(stage, &c).unwrap_err();
        assert!(matches!(e, endomap::Error::Dependency(_) | endomap::Error::Stage { .. }), "{stage}: {e}");
        assert!(e.to_string().contains("first"), "{e}");
    }
    assert!(run_stage("bogus", &c).is_err());
}

#[test]
fn stages_write_hashed_outputs_and_detect_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_dataset(dir.path());
    let m = run_stage("preprocess", &c).unwrap();
    assert_eq!(m.schema, MANIFEST_SCHEMA);
    assert_eq!(m.outputs.len(), 9);
    assert_eq!(m.inputs.len(), 4);
    let loaded = StageManifest::load(&c.output, "preprocess").unwrap();
    assert_eq!(loaded.outputs, m.outputs);
    let f = &m.outputs[0];
    let bytes = std::fs::read(c.output.join(&f.path)).unwrap();
    assert_eq!(hash_bytes(&bytes), f.sha256);
    loaded.verify(&c.output).unwrap();

    run_stage("features", &c).unwrap();
    std::fs::write(c.output.join(&f.path), b"tampered").unwrap();
    let e = run_stage("stitch", &c).unwrap_err();
    assert!(e.to_string().contains("changed"), "{e}");
}

#[test]
fn pipeline_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_dataset(dir.path());
    let (a, ra) = run_pipeline(&c).unwrap();
    let (b, rb) = run_pipeline(&c).unwrap();
    assert_eq!(a.content_hash(), b.content_hash());
    assert_eq!(a.artifact_hashes(), b.artifact_hashes());
    assert_eq!(a.stages.len(), 5);
    for f in ["preprocess/manifest.json", "stitch/canvas.pfm", "stitch/poses.json", "stitch/graph.json", "sfs/depth.pfm", "evaluate/report.json", "evaluate/cloud.ply", "manifest.json"] {
        assert!(c.output.join(f).is_file(), "{f}");
    }
    let poses: serde_json::Value = serde_json::from_slice(&std::fs::read(c.output.join("stitch/poses.json")).unwrap()).unwrap();
    assert_eq!(poses["schema"], endomap::pipeline::STITCH_POSES_SCHEMA);
    assert_eq!(poses["poses"][0]["rotation"].as_array().unwrap().len(), 9);
    let (ra, rb) = (ra.unwrap(), rb.unwrap());
    assert_eq!(ra[0].rms_percent, rb[0].rms_percent);
}
