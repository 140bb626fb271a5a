//! Depth error metrics, the frame-group protocol and point-cloud export.

use crate::error::{Error, Result};
use crate::geometry::{project, Homography33};
use crate::image::Raster;
use crate::io::write_bytes;
use crate::mask::BinaryMask;
use crate::pipeline::{reconstruct, PipelineConfig, Preprocessed};
use crate::sfs::DepthMap;
use crate::calibration::CameraIntrinsics;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// RMS depth error between a reconstruction and a reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmsResult {
    /// RMS after mean shift and least-squares scale.
    pub rms: f64,
    pub percent: f64,
    /// RMS of the plain difference, no alignment.
    pub raw_rms: f64,
    pub raw_percent: f64,
    pub scale: f64,
    pub offset: f64,
    pub pixels: usize,
    pub range: f64,
}

impl RmsResult {
    pub fn headline(&self, aligned: bool) -> f64 {
        if aligned {
            self.percent
        } else {
            self.raw_percent
        }
    }
}

/// Compares `z` against `reference` over jointly valid pixels.
pub fn rms_error(z: &DepthMap, reference: &DepthMap) -> Result<RmsResult> {
    if z.width() != reference.width() || z.height() != reference.height() {
        return Err(Error::dim("depth maps differ in size"));
    }
    let pairs: Vec<(f64, f64)> = (0..z.z.data.len())
        .filter(|&i| !z.invalid.bits()[i] && !reference.invalid.bits()[i])
        .map(|i| (z.z.data[i], reference.z.data[i]))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Degenerate("no jointly valid pixels".into()));
    }
    let n = pairs.len() as f64;
    let (lo, hi) = pairs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| (l.min(p.1), h.max(p.1)));
    let range = hi - lo;
    if !(range > 0.0) {
        return Err(Error::Degenerate("reference depth range is zero".into()));
    }
    let zm = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let rm = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut szz, mut szr) = (0.0, 0.0);
    for (a, b) in &pairs {
        szz += (a - zm) * (a - zm);
        szr += (a - zm) * (b - rm);
    }
    let scale = if szz > 0.0 { szr / szz } else { 0.0 };
    let (mut se, mut raw) = (0.0, 0.0);
    for (a, b) in &pairs {
        let d = scale * (a - zm) - (b - rm);
        se += d * d;
        raw += (a - b) * (a - b);
    }
    let rms = (se / n).sqrt();
    let raw_rms = (raw / n).sqrt();
    Ok(RmsResult {
        rms,
        percent: 100.0 * rms / range,
        raw_rms,
        raw_percent: 100.0 * raw_rms / range,
        scale,
        offset: rm - scale * zm,
        pixels: pairs.len(),
        range,
    })
}

fn sample_raster(r: &Raster, x: f64, y: f64) -> Option<f64> {
    if !(x >= 0.0 && y >= 0.0 && x <= (r.width - 1) as f64 && y <= (r.height - 1) as f64) {
        return None;
    }
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(r.width - 1), (y0 + 1).min(r.height - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let v = r.get(x0, y0) * (1.0 - fx) * (1.0 - fy)
        + r.get(x1, y0) * fx * (1.0 - fy)
        + r.get(x0, y1) * (1.0 - fx) * fy
        + r.get(x1, y1) * fx * fy;
    v.is_finite().then_some(v)
}

/// Ground truth for a frame sequence: a depth panorama and, per frame, the
/// homography from panorama pixels to frame pixels.
#[derive(Debug, Clone)]
pub struct ReferenceScene {
    pub depth: Raster,
    pub frame_homographies: Vec<Homography33>,
}

impl ReferenceScene {
    /// Reference depth resampled on a canvas whose pixels map to pixels of
    /// frame `anchor` through `canvas_to_anchor`.
    pub fn depth_on_canvas(&self, anchor: usize, canvas_to_anchor: &Homography33, width: usize, height: usize) -> Result<DepthMap> {
        let g = self
            .frame_homographies
            .get(anchor)
            .ok_or_else(|| Error::param(format!("no reference pose for frame {anchor}")))?;
        let m = *g.inverse()?.compose(canvas_to_anchor)?.matrix();
        let mut z = Raster::zeros(width, height);
        let mut bits = vec![true; width * height];
        for y in 0..height {
            for x in 0..width {
                if let Some(d) = project(&m, (x as f64, y as f64)).and_then(|(u, v)| sample_raster(&self.depth, u, v)) {
                    z.set(x, y, d);
                    bits[y * width + x] = false;
                }
            }
        }
        DepthMap::new(z, BinaryMask::from_bits(width, height, bits)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupResult {
    pub index: usize,
    pub first_frame: usize,
    pub frames: usize,
    pub rms: Option<RmsResult>,
    /// Fraction of valid canvas pixels that have reference depth.
    pub coverage: f64,
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub group_size: usize,
    pub aligned: bool,
    pub groups: Vec<GroupResult>,
    /// Per-group RMS in percent of the reference depth range.
    pub rms_percent: Vec<f64>,
    pub mean: f64,
    pub stddev: f64,
    pub raw_mean: f64,
}

impl EvalReport {
    pub fn from_groups(group_size: usize, aligned: bool, groups: Vec<GroupResult>) -> Self {
        let ok: Vec<&RmsResult> = groups.iter().filter_map(|g| g.rms.as_ref()).collect();
        let rms_percent: Vec<f64> = ok.iter().map(|r| r.headline(aligned)).collect();
        let raw: Vec<f64> = ok.iter().map(|r| r.raw_percent).collect();
        let (mean, stddev) = mean_std(&rms_percent);
        let (raw_mean, _) = mean_std(&raw);
        Self { group_size, aligned, groups, rms_percent, mean, stddev, raw_mean }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Population mean and standard deviation; NaN for an empty list.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Reconstructs and scores one group of already preprocessed frames.
pub fn evaluate_group(
    frames: &[Preprocessed],
    first_frame: usize,
    k: &CameraIntrinsics,
    config: &PipelineConfig,
    reference: &ReferenceScene,
) -> Result<(GroupResult, Option<DepthMap>)> {
    let rec = reconstruct(frames, k, config)?;
    let anchor_local = rec.anchor;
    let to_canvas = rec.stitch.warps[anchor_local].ok_or_else(|| Error::Degenerate("anchor has no warp".into()))?;
    let depth = rec.depth;
    let refd = reference.depth_on_canvas(first_frame + anchor_local, &to_canvas.inverse()?, depth.width(), depth.height())?;
    let valid = depth.valid_count().max(1);
    let joint = (0..depth.z.data.len()).filter(|&i| !depth.invalid.bits()[i] && !refd.invalid.bits()[i]).count();
    let coverage = joint as f64 / valid as f64;
    let mut g = GroupResult { index: 0, first_frame, frames: frames.len(), rms: None, coverage, skipped: None };
    if coverage < 0.1 {
        g.skipped = Some(format!("reference covers {:.1}% of the canvas", coverage * 100.0));
        return Ok((g, Some(depth)));
    }
    match rms_error(&depth, &refd) {
        Ok(r) => g.rms = Some(r),
        Err(e) => g.skipped = Some(e.to_string()),
    }
    Ok((g, Some(depth)))
}

/// Splits the sequence into consecutive groups of `group_size`, runs the
/// reconstruction on each and aggregates the RMS figures.
pub fn evaluate_groups(
    frames: &[Preprocessed],
    k: &CameraIntrinsics,
    config: &PipelineConfig,
    reference: &ReferenceScene,
    group_size: usize,
) -> Result<EvalReport> {
    if group_size == 0 || frames.len() < group_size {
        return Err(Error::param(format!("group size {group_size} needs at least that many frames (have {})", frames.len())));
    }
    let count = frames.len() / group_size;
    let groups: Vec<GroupResult> = (0..count)
        .into_par_iter()
        .map(|gi| {
            let start = gi * group_size;
            let (mut g, _) = evaluate_group(&frames[start..start + group_size], start, k, config, reference)?;
            g.index = gi;
            Ok(g)
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport::from_groups(group_size, config.evaluation.align, groups))
}

/// Formats like C's `%g` with 6 significant digits.
pub fn fmt_g6(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    // Decide notation from the exponent after rounding to 6 digits.
    let sci = format!("{:.5e}", v);
    let (m, e) = sci.split_once('e').expect("exponent");
    let exp: i32 = e.parse().expect("exponent digits");
    if !(-4..6).contains(&exp) {
        format!("{}e{}{:02}", trim_zeros(m), if exp < 0 { '-' } else { '+' }, exp.abs())
    } else {
        let prec = (5 - exp).max(0) as usize;
        trim_zeros(&format!("{:.*}", prec, v)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Writes an ASCII PLY with float x, y, z per vertex.
pub fn export_ply(cloud: &[[f64; 3]], path: impl AsRef<Path>) -> Result<()> {
    if cloud.is_empty() {
        return Err(Error::param("point cloud is empty"));
    }
    let mut s = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        cloud.len()
    );
    for p in cloud {
        let f = |v: f64| fmt_g6(v as f32 as f64);
        s.push_str(&format!("{} {} {}\n", f(p[0]), f(p[1]), f(p[2])));
    }
    write_bytes(path.as_ref(), s.as_bytes())
}

/// Reads the vertices of an ASCII PLY written by [`export_ply`].
pub fn parse_ply(path: impl AsRef<Path>) -> Result<Vec<[f64; 3]>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("ply") {
        return Err(Error::Format("missing ply magic".into()));
    }
    let mut count = None;
    for line in lines.by_ref() {
        if line == "end_header" {
            break;
        }
        if let Some(n) = line.strip_prefix("element vertex ") {
            count = Some(n.trim().parse::<usize>().map_err(|_| Error::Format("bad vertex count".into()))?);
        } else if line.starts_with("format") && line != "format ascii 1.0" {
            return Err(Error::Format("only ascii PLY is supported".into()));
        }
    }
    let count = count.ok_or_else(|| Error::Format("no vertex element".into()))?;
    let mut out = Vec::with_capacity(count);
    for line in lines.take(count) {
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| Error::Format(format!("bad coordinate {t:?}"))))
            .collect::<Result<_>>()?;
        if v.len() < 3 {
            return Err(Error::Format("vertex line has fewer than 3 values".into()));
        }
        out.push([v[0], v[1], v[2]]);
    }
    if out.len() != count {
        return Err(Error::Format("truncated vertex list".into()));
    }
    Ok(out)
}
