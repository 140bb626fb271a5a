//! Stage orchestration: configuration, per-stage runs communicating through
//! files, and run manifests with content hashes.

use crate::calibration::{undistort_image, CameraIntrinsics};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_groups, export_ply, rms_error, EvalReport, GroupResult, ReferenceScene};
use crate::features::{extract_dense, match_descriptors, write_descriptors, write_matches};
use crate::geometry::Homography33;
use crate::image::{percentile, to_grayscale, ImageBuffer};
use crate::io::{load_image, load_mask, read_pfm, read_pfm_image, save_image, save_mask, write_ascii_matrix, write_bytes, write_pfm, write_pfm_image};
use crate::mask::BinaryMask;
use crate::preprocess::{correct_vignetting, detect_reflections_masked, fit_vignette, inpaint, unsharp_mask, ReflectionParams, VignetteModel};
use crate::sfs::{depth_to_pointcloud, estimate_light, tsai_shah, DepthMap, LightEstimate, LightModel, SfsMethod, SfsParams};
use crate::stitcher::{stitch, StitchConfig, StitchReport, StitchResult};
use crate::synthkit::{standard_dataset, Dataset, DatasetParams};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const CONFIG_SCHEMA: &str = "endomap.config/1";
pub const MANIFEST_SCHEMA: &str = "endomap.manifest/1";
pub const POSES_SCHEMA: &str = "endomap.poses/1";
pub const STITCH_POSES_SCHEMA: &str = "endomap.stitch-poses/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub reflection: bool,
    pub vignette: bool,
    pub unsharp: bool,
    pub percentile: f64,
    pub close_radius: usize,
    pub halo: usize,
    pub inpaint_tol: f64,
    pub inpaint_iters: usize,
    pub unsharp_sigma: f64,
    pub unsharp_amount: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        let r = ReflectionParams::default();
        Self {
            reflection: true,
            vignette: true,
            unsharp: true,
            percentile: r.percentile,
            close_radius: r.close_radius,
            halo: r.halo,
            inpaint_tol: 1e-5,
            inpaint_iters: 5000,
            unsharp_sigma: 1.5,
            unsharp_amount: 0.5,
        }
    }
}

impl PreprocessConfig {
    pub fn reflection_params(&self) -> ReflectionParams {
        ReflectionParams { percentile: self.percentile, close_radius: self.close_radius, halo: self.halo }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LightMode {
    /// Moment-based estimate from the canvas.
    Estimate,
    /// Slant, tilt and albedo taken from the config.
    Fixed,
    /// Light along the view axis, albedo from an intensity percentile.
    Frontal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SfsConfig {
    pub iters: usize,
    pub method: SfsMethod,
    pub smoothness: f64,
    pub flat_tolerance: f64,
    pub light: LightMode,
    pub slant: f64,
    pub tilt: f64,
    pub albedo: f64,
    pub albedo_percentile: f64,
    pub ascii: bool,
}

impl Default for SfsConfig {
    fn default() -> Self {
        let p = SfsParams::default();
        Self {
            iters: p.iters,
            method: p.method,
            smoothness: p.smoothness,
            flat_tolerance: 0.35,
            light: LightMode::Frontal,
            slant: 0.0,
            tilt: 0.0,
            albedo: 1.0,
            albedo_percentile: 98.0,
            ascii: false,
        }
    }
}

impl SfsConfig {
    pub fn params(&self) -> SfsParams {
        SfsParams { iters: self.iters, method: self.method, smoothness: self.smoothness, flat_tolerance: self.flat_tolerance }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationConfig {
    pub align: bool,
    /// Additional group sizes evaluated in memory (each must divide into the sequence).
    pub group_sizes: Vec<usize>,
    /// Fail when any RMS percentage exceeds this.
    pub rms_ceiling: f64,
    pub export_cloud: bool,
    pub cloud_scale: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { align: true, group_sizes: Vec::new(), rms_ceiling: 100.0, export_cloud: true, cloud_scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub schema: String,
    /// Directory of input frames (png, pgm, ppm or pfm), processed in name order.
    pub input: PathBuf,
    pub calibration: Option<PathBuf>,
    /// Dataset directory holding `reference/depth.pfm` and `reference/poses.json`.
    pub reference: Option<PathBuf>,
    pub output: PathBuf,
    pub seed: u64,
    pub preprocess: PreprocessConfig,
    pub stitch: StitchConfig,
    pub sfs: SfsConfig,
    pub evaluation: EvaluationConfig,
    pub synth: DatasetParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            schema: CONFIG_SCHEMA.into(),
            input: PathBuf::from("frames"),
            calibration: None,
            reference: None,
            output: PathBuf::from("out"),
            seed: 0,
            preprocess: PreprocessConfig::default(),
            stitch: StitchConfig::default(),
            sfs: SfsConfig::default(),
            evaluation: EvaluationConfig::default(),
            synth: DatasetParams::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: PipelineConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        if c.schema != CONFIG_SCHEMA {
            return Err(Error::Config(format!("unsupported schema {:?}, expected {CONFIG_SCHEMA:?}", c.schema)));
        }
        Ok(c)
    }

    /// Loads a config; relative paths are resolved against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::from_toml_str(&s)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut c.input);
        fix(&mut c.output);
        if let Some(p) = c.calibration.as_mut() {
            fix(p);
        }
        if let Some(p) = c.reference.as_mut() {
            fix(p);
        }
        Ok(c)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Stitch parameters with the global seed folded in.
    pub fn stitch_config(&self) -> StitchConfig {
        StitchConfig { seed: self.seed ^ self.stitch.seed, ..self.stitch }
    }

    /// Checks numeric ranges; with `check_paths`, that referenced paths exist.
    pub fn validate(&self, check_paths: bool) -> Result<()> {
        let p = &self.preprocess;
        if !(p.percentile > 0.0 && p.percentile < 100.0) {
            return Err(Error::Config("preprocess.percentile must be in (0, 100)".into()));
        }
        if p.close_radius == 0 {
            return Err(Error::Config("preprocess.close_radius must be >= 1".into()));
        }
        if !(p.inpaint_tol > 0.0) || p.inpaint_iters == 0 {
            return Err(Error::Config("preprocess.inpaint_tol must be > 0 and inpaint_iters >= 1".into()));
        }
        if !(p.unsharp_sigma > 0.0) || !(p.unsharp_amount >= 0.0) {
            return Err(Error::Config("preprocess.unsharp_sigma must be > 0 and unsharp_amount >= 0".into()));
        }
        self.stitch.validate()?;
        let s = &self.sfs;
        if s.iters == 0 {
            return Err(Error::Config("sfs.iters must be >= 1".into()));
        }
        if !(s.smoothness >= 0.0) || !(s.flat_tolerance >= 0.0) {
            return Err(Error::Config("sfs.smoothness and sfs.flat_tolerance must be >= 0".into()));
        }
        if !(s.albedo_percentile > 0.0 && s.albedo_percentile <= 100.0) {
            return Err(Error::Config("sfs.albedo_percentile must be in (0, 100]".into()));
        }
        if s.light == LightMode::Fixed {
            LightModel::new(s.slant, s.tilt, s.albedo).map_err(|e| Error::Config(format!("sfs light: {e}")))?;
        }
        if self.evaluation.group_sizes.contains(&0) {
            return Err(Error::Config("evaluation.group_sizes must be >= 1".into()));
        }
        if !(self.evaluation.cloud_scale > 0.0) {
            return Err(Error::Config("evaluation.cloud_scale must be > 0".into()));
        }
        if check_paths {
            if !self.input.is_dir() {
                return Err(Error::Config(format!("input directory {} does not exist", self.input.display())));
            }
            if list_frames(&self.input)?.is_empty() {
                return Err(Error::Config(format!("input directory {} holds no frames", self.input.display())));
            }
            if let Some(c) = &self.calibration {
                if !c.is_file() {
                    return Err(Error::Config(format!("calibration file {} does not exist", c.display())));
                }
            }
            if let Some(r) = &self.reference {
                if !r.join("reference/depth.pfm").is_file() {
                    return Err(Error::Config(format!("reference {} has no reference/depth.pfm", r.display())));
                }
            }
        }
        Ok(())
    }
}

/// Frame files of a directory sorted by name.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "pgm" | "ppm" | "pfm"))
        })
        .collect();
    v.sort();
    Ok(v)
}

fn load_frame(path: &Path) -> Result<ImageBuffer> {
    if path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("pfm")) {
        read_pfm_image(path)
    } else {
        load_image(path)
    }
}

// ---------------------------------------------------------------------------
// In-memory processing
// ---------------------------------------------------------------------------

/// A frame after reflection suppression, vignetting correction, sharpening
/// and undistortion.
#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub image: ImageBuffer,
    pub specular: BinaryMask,
    /// Pixels without data after undistortion.
    pub invalid: BinaryMask,
    pub vignette: VignetteModel,
    pub warnings: Vec<String>,
}

pub fn preprocess_frame(img: &ImageBuffer, k: Option<&CameraIntrinsics>, cfg: &PreprocessConfig) -> Result<Preprocessed> {
    let (w, h) = (img.width(), img.height());
    let mut warnings = Vec::new();
    let mut cur = img.clone();
    let mut specular = BinaryMask::new(w, h);
    if cfg.reflection {
        let gray = to_grayscale(&cur);
        specular = detect_reflections_masked(&gray, None, &cfg.reflection_params())?;
        if specular.count() * 2 > w * h {
            warnings.push(format!("specular mask covers {:.0}% of the frame", 100.0 * specular.count() as f64 / (w * h) as f64));
        }
        if !specular.is_empty() {
            cur = inpaint(&cur, &specular, cfg.inpaint_tol, cfg.inpaint_iters)?;
        }
    }
    let mut vignette = VignetteModel::identity(w, h);
    if cfg.vignette {
        vignette = fit_vignette(&to_grayscale(&cur))?;
        if vignette.rejected {
            warnings.push("vignette fit rejected; identity model used".into());
        }
        if !vignette.is_identity() {
            cur = correct_vignetting(&cur, &vignette)?;
        }
    }
    if cfg.unsharp {
        cur = unsharp_mask(&cur, cfg.unsharp_sigma, cfg.unsharp_amount)?;
    }
    let mut invalid = BinaryMask::new(w, h);
    if let Some(k) = k {
        if k.has_distortion() {
            let (u, m) = undistort_image(&cur, k)?;
            cur = u;
            invalid = m;
        }
    }
    Ok(Preprocessed { image: cur, specular, invalid, vignette, warnings })
}

pub fn preprocess_frames(frames: &[ImageBuffer], k: Option<&CameraIntrinsics>, cfg: &PreprocessConfig) -> Result<Vec<Preprocessed>> {
    frames
        .par_iter()
        .enumerate()
        .map(|(i, f)| preprocess_frame(f, k, cfg).map_err(|e| Error::Degenerate(format!("frame {i}: {e}"))))
        .collect()
}

/// Light used for the canvas according to the configured mode.
pub fn choose_light(canvas_gray: &ImageBuffer, invalid: &BinaryMask, cfg: &SfsConfig) -> Result<LightEstimate> {
    match cfg.light {
        LightMode::Fixed => Ok(LightEstimate { light: LightModel::new(cfg.slant, cfg.tilt, cfg.albedo)?, fallback: false }),
        LightMode::Estimate => estimate_light(canvas_gray, invalid),
        LightMode::Frontal => {
            let vals: Vec<f64> = canvas_gray
                .data()
                .iter()
                .zip(invalid.bits())
                .filter(|(_, b)| !**b)
                .map(|(v, _)| *v)
                .collect();
            let a = percentile(&vals, cfg.albedo_percentile).ok_or_else(|| Error::Degenerate("canvas has no valid pixels".into()))?;
            Ok(LightEstimate { light: LightModel::new(0.0, 0.0, a.clamp(1e-3, 1.5))?, fallback: false })
        }
    }
}

/// Output of stitching plus shape from shading on a group of frames.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub stitch: StitchResult,
    pub report: StitchReport,
    /// Anchor index within the group.
    pub anchor: usize,
    pub light: LightEstimate,
    pub depth: DepthMap,
    pub candidate: String,
}

pub fn depth_from_canvas(canvas: &ImageBuffer, uncovered: &BinaryMask, cfg: &SfsConfig) -> Result<(DepthMap, LightEstimate, String)> {
    let gray = to_grayscale(canvas);
    let light = choose_light(&gray, uncovered, cfg)?;
    let out = tsai_shah(&gray, Some(uncovered), &light.light, &cfg.params())?;
    Ok((out.depth, light, out.candidate))
}

pub fn reconstruct(frames: &[Preprocessed], k: &CameraIntrinsics, cfg: &PipelineConfig) -> Result<Reconstruction> {
    let imgs: Vec<ImageBuffer> = frames.iter().map(|f| f.image.clone()).collect();
    let (st, report) = stitch(&imgs, k, &cfg.stitch_config()).map_err(|e| e.in_stage("stitch"))?;
    let (depth, light, candidate) = depth_from_canvas(&st.canvas, &st.uncovered, &cfg.sfs).map_err(|e| e.in_stage("sfs"))?;
    let anchor = report.anchor;
    Ok(Reconstruction { stitch: st, report, anchor, light, depth, candidate })
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub schema: String,
    pub stage: String,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub params: serde_json::Value,
    pub records: serde_json::Value,
    pub warnings: Vec<String>,
    pub timing_ms: f64,
}

impl StageManifest {
    fn new(stage: &str, params: serde_json::Value) -> Self {
        Self {
            schema: MANIFEST_SCHEMA.into(),
            stage: stage.into(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            params,
            records: serde_json::Value::Null,
            warnings: Vec::new(),
            timing_ms: 0.0,
        }
    }

    pub fn path(out: &Path, stage: &str) -> PathBuf {
        out.join(stage).join("manifest.json")
    }

    pub fn load(out: &Path, stage: &str) -> Result<Self> {
        let p = Self::path(out, stage);
        if !p.is_file() {
            return Err(Error::Dependency(format!("{} not found; run `{stage}` first", p.display())));
        }
        let s = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let m: StageManifest = serde_json::from_str(&s).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
        if m.schema != MANIFEST_SCHEMA {
            return Err(Error::Format(format!("{}: unsupported schema {}", p.display(), m.schema)));
        }
        Ok(m)
    }

    /// Checks every listed output still matches its hash.
    pub fn verify(&self, out: &Path) -> Result<()> {
        for f in &self.outputs {
            let p = out.join(&f.path);
            if hash_file(&p)? != f.sha256 {
                return Err(Error::Dependency(format!("{} changed since stage `{}` wrote it", p.display(), self.stage)));
            }
        }
        Ok(())
    }

    fn save(&self, out: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_bytes(&Self::path(out, &self.stage), s.as_bytes())
    }
}

/// All stage manifests of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub config_sha256: String,
    pub stages: BTreeMap<String, StageManifest>,
}

impl RunManifest {
    /// Hash over everything except timings.
    pub fn content_hash(&self) -> String {
        let mut c = self.clone();
        for s in c.stages.values_mut() {
            s.timing_ms = 0.0;
        }
        hex(&Sha256::digest(serde_json::to_vec(&c).expect("manifest serializes")))
    }

    /// `(path, sha256)` of every output artifact.
    pub fn artifact_hashes(&self) -> Vec<(String, String)> {
        self.stages.values().flat_map(|s| s.outputs.iter().map(|f| (f.path.clone(), f.sha256.clone()))).collect()
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_bytes(b: &[u8]) -> String {
    hex(&Sha256::digest(b))
}

pub fn hash_file(path: &Path) -> Result<String> {
    let b = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hash_bytes(&b))
}

fn rel(out: &Path, p: &Path) -> String {
    p.strip_prefix(out).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

fn record(out: &Path, p: &Path) -> Result<FileRecord> {
    Ok(FileRecord { path: rel(out, p), sha256: hash_file(p)? })
}

fn input_record(p: &Path) -> Result<FileRecord> {
    Ok(FileRecord { path: p.to_string_lossy().into_owned(), sha256: hash_file(p)? })
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

pub const STAGES: [&str; 5] = ["preprocess", "features", "stitch", "sfs", "evaluate"];

/// Runs one stage, reading its dependencies from the output directory.
pub fn run_stage(name: &str, cfg: &PipelineConfig) -> Result<StageManifest> {
    let t = Instant::now();
    let mut m = match name {
        "preprocess" => stage_preprocess(cfg),
        "features" => stage_features(cfg),
        "stitch" => stage_stitch(cfg),
        "sfs" => stage_sfs(cfg),
        "evaluate" => stage_evaluate(cfg).map(|(m, _)| m),
        other => return Err(Error::Config(format!("unknown stage {other:?}"))),
    }
    .map_err(|e| e.in_stage(name))?;
    m.timing_ms = t.elapsed().as_secs_f64() * 1e3;
    m.save(&cfg.output)?;
    Ok(m)
}

fn intrinsics_for(cfg: &PipelineConfig, w: usize, h: usize) -> Result<CameraIntrinsics> {
    match &cfg.calibration {
        Some(p) => CameraIntrinsics::load(p),
        None => {
            // Without calibration: a 60 degree horizontal field of view.
            let f = w as f64 / (2.0 * (30f64).to_radians().tan());
            Ok(CameraIntrinsics::pinhole(w, h, f, f, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0))
        }
    }
}

fn stage_preprocess(cfg: &PipelineConfig) -> Result<StageManifest> {
    cfg.validate(true)?;
    let out = &cfg.output;
    let files = list_frames(&cfg.input)?;
    let frames: Vec<ImageBuffer> = files.iter().map(|p| load_frame(p)).collect::<Result<_>>()?;
    let k = match &cfg.calibration {
        Some(p) => Some(CameraIntrinsics::load(p)?),
        None => None,
    };
    let pre = preprocess_frames(&frames, k.as_ref(), &cfg.preprocess)?;
    let mut m = StageManifest::new("preprocess", serde_json::to_value(&cfg.preprocess).expect("serializable"));
    for p in &files {
        m.inputs.push(input_record(p)?);
    }
    if let Some(c) = &cfg.calibration {
        m.inputs.push(input_record(c)?);
    }
    let dir = out.join("preprocess");
    let mut models = Vec::new();
    for (i, p) in pre.iter().enumerate() {
        let fp = dir.join(format!("frame_{i:04}.pfm"));
        write_pfm_image(&p.image, &fp)?;
        let mp = dir.join(format!("specular_{i:04}.pgm"));
        save_mask(&p.specular, &mp)?;
        let ip = dir.join(format!("invalid_{i:04}.pgm"));
        save_mask(&p.invalid, &ip)?;
        for f in [&fp, &mp, &ip] {
            m.outputs.push(record(out, f)?);
        }
        for w in &p.warnings {
            m.warnings.push(format!("frame {i}: {w}"));
        }
        models.push(p.vignette);
    }
    m.records = serde_json::json!({ "frames": pre.len(), "vignette": models });
    Ok(m)
}

fn load_preprocessed(cfg: &PipelineConfig) -> Result<(StageManifest, Vec<Preprocessed>)> {
    let out = &cfg.output;
    let pm = StageManifest::load(out, "preprocess")?;
    pm.verify(out)?;
    let n = pm.records["frames"].as_u64().ok_or_else(|| Error::Format("preprocess manifest lacks frame count".into()))? as usize;
    let models: Vec<VignetteModel> = serde_json::from_value(pm.records["vignette"].clone()).map_err(|e| Error::Format(e.to_string()))?;
    let dir = out.join("preprocess");
    let frames = (0..n)
        .map(|i| {
            let image = read_pfm_image(dir.join(format!("frame_{i:04}.pfm")))?;
            let specular = load_mask(dir.join(format!("specular_{i:04}.pgm")))?;
            let invalid = load_mask(dir.join(format!("invalid_{i:04}.pgm")))?;
            Ok(Preprocessed { image, specular, invalid, vignette: models[i], warnings: vec![] })
        })
        .collect::<Result<_>>()?;
    Ok((pm, frames))
}

fn stage_features(cfg: &PipelineConfig) -> Result<StageManifest> {
    cfg.validate(false)?;
    let out = &cfg.output;
    let (pm, frames) = load_preprocessed(cfg)?;
    let st = cfg.stitch_config();
    let descs = frames
        .par_iter()
        .map(|f| extract_dense(&to_grayscale(&f.image), st.grid_step, st.patch_size))
        .collect::<Result<Vec<_>>>()?;
    let mut m = StageManifest::new("features", serde_json::json!({ "grid_step": st.grid_step, "patch_size": st.patch_size, "ratio": st.ratio }));
    m.inputs = pm.outputs.iter().filter(|r| r.path.contains("frame_")).cloned().collect();
    let dir = out.join("features");
    let mut counts = Vec::new();
    for (i, d) in descs.iter().enumerate() {
        let p = dir.join(format!("desc_{i:04}.emds"));
        write_descriptors(d, &p)?;
        m.outputs.push(record(out, &p)?);
        if d.usable_count() == 0 {
            m.warnings.push(format!("frame {i}: no usable descriptors"));
        }
    }
    for i in 1..descs.len() {
        let ms = match_descriptors(&descs[i - 1], &descs[i], st.ratio)?;
        let p = dir.join(format!("matches_{:04}_{i:04}.emmt", i - 1));
        write_matches(&ms, &p)?;
        m.outputs.push(record(out, &p)?);
        counts.push(ms.len());
    }
    m.records = serde_json::json!({ "descriptors": descs.iter().map(|d| d.usable_count()).collect::<Vec<_>>(), "consecutive_matches": counts });
    Ok(m)
}

/// Stitch output record kept in the stage manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StitchRecord {
    pub report: StitchReport,
    /// Frame-to-canvas warps as row-major 3x3, `None` for unrendered frames.
    pub warps: Vec<Option<[f64; 9]>>,
    pub width: usize,
    pub height: usize,
}

/// One refined camera pose relative to the anchor frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseEntry {
    pub frame: usize,
    /// Row-major rotation.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

/// Contents of `stitch/poses.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StitchPoses {
    pub schema: String,
    pub poses: Vec<PoseEntry>,
}

fn stage_stitch(cfg: &PipelineConfig) -> Result<StageManifest> {
    cfg.validate(false)?;
    let out = &cfg.output;
    let (pm, frames) = load_preprocessed(cfg)?;
    let k = intrinsics_for(cfg, frames[0].image.width(), frames[0].image.height())?;
    let imgs: Vec<ImageBuffer> = frames.iter().map(|f| f.image.clone()).collect();
    let (st, report) = stitch(&imgs, &k, &cfg.stitch_config())?;
    let dir = out.join("stitch");
    let cp = dir.join("canvas.pfm");
    write_pfm_image(&st.canvas, &cp)?;
    let pp = dir.join("canvas.png");
    save_image(&st.canvas, &pp)?;
    let up = dir.join("uncovered.pgm");
    save_mask(&st.uncovered, &up)?;
    let poses = StitchPoses {
        schema: STITCH_POSES_SCHEMA.into(),
        poses: st
            .poses
            .iter()
            .enumerate()
            .filter_map(|(frame, p)| {
                p.map(|p| {
                    let r = p.rotation;
                    PoseEntry {
                        frame,
                        rotation: [r[(0, 0)], r[(0, 1)], r[(0, 2)], r[(1, 0)], r[(1, 1)], r[(1, 2)], r[(2, 0)], r[(2, 1)], r[(2, 2)]],
                        translation: [p.translation.x, p.translation.y, p.translation.z],
                    }
                })
            })
            .collect(),
    };
    let posep = dir.join("poses.json");
    write_bytes(&posep, serde_json::to_string_pretty(&poses).expect("serializable").as_bytes())?;
    let mut m = StageManifest::new("stitch", serde_json::to_value(cfg.stitch_config()).expect("serializable"));
    m.inputs = pm.outputs.iter().filter(|r| r.path.contains("frame_")).cloned().collect();
    m.warnings = report.warnings.clone();
    let rec = StitchRecord {
        warps: st.warps.iter().map(|w| w.map(|h| h.to_rows())).collect(),
        width: st.canvas.width(),
        height: st.canvas.height(),
        report,
    };
    let gp = dir.join("graph.json");
    write_bytes(&gp, serde_json::to_string_pretty(&rec).expect("serializable").as_bytes())?;
    for p in [&cp, &pp, &up, &posep, &gp] {
        m.outputs.push(record(out, p)?);
    }
    m.records = serde_json::to_value(&rec).expect("serializable");
    Ok(m)
}

fn stage_sfs(cfg: &PipelineConfig) -> Result<StageManifest> {
    cfg.validate(false)?;
    let out = &cfg.output;
    let sm = StageManifest::load(out, "stitch")?;
    sm.verify(out)?;
    let canvas = read_pfm_image(out.join("stitch/canvas.pfm"))?;
    let uncovered = load_mask(out.join("stitch/uncovered.pgm"))?;
    let (depth, light, candidate) = depth_from_canvas(&canvas, &uncovered, &cfg.sfs)?;
    let dir = out.join("sfs");
    let dp = dir.join("depth.pfm");
    write_pfm(&depth.to_nan_raster(), &dp)?;
    let mut m = StageManifest::new("sfs", serde_json::to_value(&cfg.sfs).expect("serializable"));
    m.inputs = sm.outputs.iter().filter(|r| !r.path.ends_with(".png")).cloned().collect();
    m.outputs.push(record(out, &dp)?);
    if cfg.sfs.ascii {
        let ap = dir.join("depth.txt");
        write_ascii_matrix(&depth.to_nan_raster(), &ap)?;
        m.outputs.push(record(out, &ap)?);
    }
    if light.fallback {
        m.warnings.push("light estimation fell back to frontal light".into());
    }
    m.records = serde_json::json!({ "light": light.light, "light_fallback": light.fallback, "candidate": candidate });
    Ok(m)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PoseFile {
    schema: String,
    canvas_to_frame: Vec<[f64; 9]>,
}

/// Loads `reference/depth.pfm` and `reference/poses.json` from a dataset directory.
pub fn load_reference(dir: &Path) -> Result<ReferenceScene> {
    let depth = read_pfm(dir.join("reference/depth.pfm"))?;
    let pp = dir.join("reference/poses.json");
    let s = std::fs::read_to_string(&pp).map_err(|e| Error::io(&pp, e))?;
    let pf: PoseFile = serde_json::from_str(&s).map_err(|e| Error::Format(format!("{}: {e}", pp.display())))?;
    if pf.schema != POSES_SCHEMA {
        return Err(Error::Format(format!("{}: unsupported schema {}", pp.display(), pf.schema)));
    }
    let frame_homographies = pf.canvas_to_frame.iter().map(Homography33::from_rows).collect::<Result<_>>()?;
    Ok(ReferenceScene { depth, frame_homographies })
}

/// Evaluates the whole-sequence depth from files, then any extra group
/// sizes in memory.
fn stage_evaluate(cfg: &PipelineConfig) -> Result<(StageManifest, Vec<EvalReport>)> {
    cfg.validate(false)?;
    let out = &cfg.output;
    let refdir = cfg.reference.as_ref().ok_or_else(|| Error::Config("evaluate needs `reference`".into()))?;
    let reference = load_reference(refdir)?;
    let sm = StageManifest::load(out, "stitch")?;
    let fm = StageManifest::load(out, "sfs")?;
    fm.verify(out)?;
    let rec: StitchRecord = serde_json::from_value(sm.records.clone()).map_err(|e| Error::Format(e.to_string()))?;
    let depth = DepthMap::from_nan_raster(read_pfm(out.join("sfs/depth.pfm"))?);
    let anchor = rec.report.anchor;
    let warp = rec.warps[anchor].ok_or_else(|| Error::Format("anchor warp missing".into()))?;
    let to_anchor = Homography33::from_rows(&warp)?.inverse()?;
    let refd = reference.depth_on_canvas(anchor, &to_anchor, depth.width(), depth.height())?;
    let valid = depth.valid_count().max(1);
    let joint = (0..depth.z.data.len()).filter(|&i| !depth.invalid.bits()[i] && !refd.invalid.bits()[i]).count();
    let coverage = joint as f64 / valid as f64;
    let mut g = GroupResult { index: 0, first_frame: 0, frames: rec.warps.len(), rms: None, coverage, skipped: None };
    if coverage < 0.1 {
        g.skipped = Some(format!("reference covers {:.1}% of the canvas", coverage * 100.0));
    } else {
        g.rms = Some(rms_error(&depth, &refd)?);
    }
    let mut reports = vec![EvalReport::from_groups(rec.warps.len(), cfg.evaluation.align, vec![g])];
    if !cfg.evaluation.group_sizes.is_empty() {
        let (_, frames) = load_preprocessed(cfg)?;
        let k = intrinsics_for(cfg, frames[0].image.width(), frames[0].image.height())?;
        for &gs in &cfg.evaluation.group_sizes {
            reports.push(evaluate_groups(&frames, &k, cfg, &reference, gs)?);
        }
    }
    let dir = out.join("evaluate");
    let mut m = StageManifest::new("evaluate", serde_json::to_value(&cfg.evaluation).expect("serializable"));
    m.inputs = fm.outputs.clone();
    let rp = dir.join("report.json");
    write_bytes(&rp, serde_json::to_string_pretty(&reports).expect("serializable").as_bytes())?;
    m.outputs.push(record(out, &rp)?);
    if cfg.evaluation.export_cloud {
        let k = match &cfg.calibration {
            Some(p) => CameraIntrinsics::load(p)?,
            None => CameraIntrinsics::pinhole(depth.width(), depth.height(), 1.0, 1.0, 0.0, 0.0),
        };
        let cloud = depth_to_pointcloud(&depth, &k, cfg.evaluation.cloud_scale)?;
        if !cloud.is_empty() {
            let cp = dir.join("cloud.ply");
            export_ply(&cloud, &cp)?;
            m.outputs.push(record(out, &cp)?);
        }
    }
    for r in &reports {
        for g in &r.groups {
            if let Some(s) = &g.skipped {
                m.warnings.push(format!("group size {} #{}: skipped ({s})", r.group_size, g.index));
            }
        }
    }
    m.records = serde_json::to_value(&reports).expect("serializable");
    Ok((m, reports))
}

/// True when any evaluated group exceeds the configured RMS ceiling.
pub fn exceeds_ceiling(reports: &[EvalReport], ceiling: f64) -> bool {
    reports.iter().any(|r| r.rms_percent.iter().any(|v| *v > ceiling))
}

/// Runs every stage in order; the evaluation stage only with a reference.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<(RunManifest, Option<Vec<EvalReport>>)> {
    cfg.validate(true)?;
    let mut stages = BTreeMap::new();
    for name in ["preprocess", "features", "stitch", "sfs"] {
        stages.insert(name.to_string(), run_stage(name, cfg)?);
    }
    let mut reports = None;
    if cfg.reference.is_some() {
        let t = Instant::now();
        let (mut m, r) = stage_evaluate(cfg).map_err(|e| e.in_stage("evaluate"))?;
        m.timing_ms = t.elapsed().as_secs_f64() * 1e3;
        m.save(&cfg.output)?;
        stages.insert("evaluate".into(), m);
        reports = Some(r);
    }
    let manifest = RunManifest { schema: MANIFEST_SCHEMA.into(), config_sha256: hash_bytes(cfg.to_toml_string().as_bytes()), stages };
    let s = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_bytes(&cfg.output.join("manifest.json"), s.as_bytes())?;
    Ok((manifest, reports))
}

/// Writes a dataset: 8-bit frames, truth masks, reference depth and poses,
/// calibration and a ready-to-run config.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (i, f) in ds.frames.iter().enumerate() {
        let p = dir.join(format!("frames/frame_{i:04}.png"));
        save_image(f, &p)?;
        written.push(p);
        let mp = dir.join(format!("truth/specular_{i:04}.pgm"));
        save_mask(&ds.specular_masks[i], &mp)?;
        written.push(mp);
    }
    let dp = dir.join("reference/depth.pfm");
    write_pfm(&ds.reference.depth, &dp)?;
    written.push(dp);
    let tp = dir.join("reference/texture.png");
    save_image(&ds.texture, &tp)?;
    written.push(tp);
    let poses = PoseFile { schema: POSES_SCHEMA.into(), canvas_to_frame: ds.reference.frame_homographies.iter().map(|h| h.to_rows()).collect() };
    let pp = dir.join("reference/poses.json");
    write_bytes(&pp, serde_json::to_string_pretty(&poses).expect("serializable").as_bytes())?;
    written.push(pp);
    let cp = dir.join("calibration.toml");
    write_bytes(&cp, ds.intrinsics.to_toml_string().as_bytes())?;
    written.push(cp);
    let cfg = PipelineConfig {
        input: "frames".into(),
        calibration: Some("calibration.toml".into()),
        reference: Some(".".into()),
        output: "run".into(),
        seed: ds.params.seed,
        synth: ds.params,
        ..PipelineConfig::default()
    };
    let fp = dir.join("config.toml");
    write_bytes(&fp, cfg.to_toml_string().as_bytes())?;
    written.push(fp);
    Ok(written)
}

/// Generates and writes the standard dataset described by `params`.
pub fn synth_dataset(params: &DatasetParams, dir: &Path) -> Result<(Dataset, Vec<PathBuf>)> {
    let ds = standard_dataset(params)?;
    let files = write_dataset(&ds, dir)?;
    Ok((ds, files))
}
