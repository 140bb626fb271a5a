//! Dense upright SURF-style descriptors, mutual nearest-neighbour matching
//! and the reprojection-error metric for descriptor evaluation.

use crate::error::{Error, Result};
use crate::geometry::Homography33;
use crate::image::{integral_raw, ImageBuffer, IntegralImage};
use rayon::prelude::*;
use std::io::{Read, Write};
use std::path::Path;

pub const DESCRIPTOR_DIM: usize = 64;

/// Descriptors sampled on a regular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseDescriptorSet {
    pub points: Vec<(usize, usize)>,
    /// Row-major `points.len() x 64`.
    pub descriptors: Vec<f64>,
    /// `false` for patches without any wavelet response.
    pub usable: Vec<bool>,
    pub grid_step: usize,
    pub patch_size: usize,
    pub width: usize,
    pub height: usize,
}

impl DenseDescriptorSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn descriptor(&self, i: usize) -> &[f64] {
        &self.descriptors[i * DESCRIPTOR_DIM..(i + 1) * DESCRIPTOR_DIM]
    }

    pub fn usable_count(&self) -> usize {
        self.usable.iter().filter(|u| **u).count()
    }

    /// Distance kept clear of the image border by every grid point.
    pub fn margin(patch_size: usize) -> usize {
        patch_size / 2 + (patch_size as f64 / 8.0).ceil() as usize
    }
}

/// Upright dense descriptors: 4x4 subregions of Haar responses at spacing
/// `patch_size/8`, each contributing `(Σdx, Σ|dx|, Σdy, Σ|dy|)` with Gaussian
/// weighting about the patch center.
pub fn extract_dense(gray: &ImageBuffer, grid_step: usize, patch_size: usize) -> Result<DenseDescriptorSet> {
    gray.require_gray("extract_dense")?;
    if patch_size < 8 || patch_size % 4 != 0 {
        return Err(Error::param(format!("patch_size must be >= 8 and divisible by 4, got {patch_size}")));
    }
    if grid_step == 0 {
        return Err(Error::param("grid_step must be >= 1"));
    }
    let (w, h) = (gray.width(), gray.height());
    let m = DenseDescriptorSet::margin(patch_size);
    if w < 2 * m + 1 || h < 2 * m + 1 {
        return Err(Error::dim(format!("image {w}x{h} is smaller than patch {patch_size} plus margin")));
    }
    let ii = integral_raw(gray.data(), w, h);
    let mut points = Vec::new();
    let mut y = m;
    while y + m <= h {
        let mut x = m;
        while x + m <= w {
            points.push((x, y));
            x += grid_step;
        }
        y += grid_step;
    }
    let sampler = HaarSampler::new(patch_size);
    let per_point: Vec<Option<[f64; DESCRIPTOR_DIM]>> =
        points.par_iter().map(|&(x, y)| sampler.describe(&ii, x as f64, y as f64)).collect();
    let mut descriptors = Vec::with_capacity(points.len() * DESCRIPTOR_DIM);
    let mut usable = Vec::with_capacity(points.len());
    for d in per_point {
        match d {
            Some(v) => {
                descriptors.extend_from_slice(&v);
                usable.push(true);
            }
            None => {
                descriptors.extend_from_slice(&[0.0; DESCRIPTOR_DIM]);
                usable.push(false);
            }
        }
    }
    Ok(DenseDescriptorSet { points, descriptors, usable, grid_step, patch_size, width: w, height: h })
}

/// Sample layout shared by all grid points of one patch size.
struct HaarSampler {
    spacing: f64,
    offsets: [f64; 8],
    weights: [[f64; 8]; 8],
}

impl HaarSampler {
    fn new(patch: usize) -> Self {
        let s = patch as f64 / 8.0;
        let sigma = patch as f64 / 4.0;
        let mut offsets = [0.0; 8];
        for (k, o) in offsets.iter_mut().enumerate() {
            *o = -(patch as f64) / 2.0 + s * (k as f64 + 0.5);
        }
        let mut weights = [[0.0; 8]; 8];
        for ky in 0..8 {
            for kx in 0..8 {
                let d2 = offsets[kx] * offsets[kx] + offsets[ky] * offsets[ky];
                weights[ky][kx] = (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
        Self { spacing: s, offsets, weights }
    }

    fn describe(&self, ii: &IntegralImage, x: f64, y: f64) -> Option<[f64; DESCRIPTOR_DIM]> {
        // Equal half-boxes about the rounded sample centre.
        let r = (self.spacing.round() as usize).max(1);
        let area = (4 * r * r) as f64;
        let mut d = [0.0; DESCRIPTOR_DIM];
        for ky in 0..8 {
            let ym = (y + self.offsets[ky]).round() as usize;
            let (y0, y1) = (ym - r, ym + r);
            for kx in 0..8 {
                let xm = (x + self.offsets[kx]).round() as usize;
                let (x0, x1) = (xm - r, xm + r);
                let dx = (ii.box_sum(xm, y0, x1, y1) - ii.box_sum(x0, y0, xm, y1)) / area;
                let dy = (ii.box_sum(x0, ym, x1, y1) - ii.box_sum(x0, y0, x1, ym)) / area;
                let wgt = self.weights[ky][kx];
                let base = ((ky / 2) * 4 + kx / 2) * 4;
                d[base] += wgt * dx;
                d[base + 1] += wgt * dx.abs();
                d[base + 2] += wgt * dy;
                d[base + 3] += wgt * dy.abs();
            }
        }
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-8 {
            return None;
        }
        d.iter_mut().for_each(|v| *v /= norm);
        Some(d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub index_a: usize,
    pub index_b: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchSet {
    pub pairs: Vec<Match>,
    pub source_dims: (usize, usize),
    pub target_dims: (usize, usize),
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Ratio-test matching with a mutual nearest-neighbour check.
pub fn match_descriptors(a: &DenseDescriptorSet, b: &DenseDescriptorSet, ratio: f64) -> Result<MatchSet> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::param(format!("ratio must be in (0,1], got {ratio}")));
    }
    let mut out = MatchSet { pairs: Vec::new(), source_dims: (a.width, a.height), target_dims: (b.width, b.height) };
    let ia: Vec<usize> = (0..a.len()).filter(|i| a.usable[*i]).collect();
    let ib: Vec<usize> = (0..b.len()).filter(|i| b.usable[*i]).collect();
    if ia.is_empty() || ib.is_empty() {
        return Ok(out);
    }
    // Distance rows for every usable query.
    let rows: Vec<Vec<f64>> = ia
        .par_iter()
        .map(|&i| ib.iter().map(|&j| dist2(a.descriptor(i), b.descriptor(j))).collect())
        .collect();
    let mut best_for_b = vec![(f64::INFINITY, usize::MAX); ib.len()];
    for (r, row) in rows.iter().enumerate() {
        for (c, d) in row.iter().enumerate() {
            if *d < best_for_b[c].0 {
                best_for_b[c] = (*d, r);
            }
        }
    }
    for (r, row) in rows.iter().enumerate() {
        let (mut d1, mut d2, mut c1) = (f64::INFINITY, f64::INFINITY, usize::MAX);
        for (c, d) in row.iter().enumerate() {
            if *d < d1 {
                d2 = d1;
                d1 = *d;
                c1 = c;
            } else if *d < d2 {
                d2 = *d;
            }
        }
        let (d1, d2) = (d1.sqrt(), d2.sqrt());
        if c1 == usize::MAX || !(d1 < ratio * d2) {
            continue;
        }
        if best_for_b[c1].1 != r {
            continue;
        }
        out.pairs.push(Match { index_a: ia[r], index_b: ib[c1], distance: d1 });
    }
    Ok(out)
}

/// Per-match transfer errors under `h`; `None` marks points sent to infinity.
#[derive(Debug, Clone, PartialEq)]
pub struct ReprojectionReport {
    pub errors: Vec<Option<f64>>,
    pub mean: f64,
}

pub fn reprojection_error(
    matches: &MatchSet,
    pts_a: &[(f64, f64)],
    pts_b: &[(f64, f64)],
    h: &Homography33,
) -> Result<ReprojectionReport> {
    if h.determinant().abs() < 1e-15 {
        return Err(Error::Degenerate("homography is singular".into()));
    }
    let mut errors = Vec::with_capacity(matches.len());
    let (mut sum, mut n) = (0.0, 0usize);
    for m in &matches.pairs {
        let (pa, pb) = (pts_a[m.index_a], pts_b[m.index_b]);
        let e = h.project(pa).map(|q| (q.0 - pb.0).hypot(q.1 - pb.1));
        if let Some(v) = e {
            sum += v;
            n += 1;
        }
        errors.push(e);
    }
    Ok(ReprojectionReport { errors, mean: if n > 0 { sum / n as f64 } else { 0.0 } })
}

/// Grid points as float coordinates.
pub fn point_coords(set: &DenseDescriptorSet) -> Vec<(f64, f64)> {
    set.points.iter().map(|&(x, y)| (x as f64, y as f64)).collect()
}

const DESC_MAGIC: &[u8; 4] = b"EMDS";
const MATCH_MAGIC: &[u8; 4] = b"EMMT";
pub const DUMP_VERSION: u32 = 1;

fn put(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Binary descriptor dump.
///
/// Header: magic `EMDS`, version, count, dims, grid_step, patch_size,
/// width, height (all u32 LE). Records: x u32, y u32, usable u8, dims f32.
pub fn write_descriptors(set: &DenseDescriptorSet, path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::with_capacity(32 + set.len() * (9 + 4 * DESCRIPTOR_DIM));
    out.extend_from_slice(DESC_MAGIC);
    for v in [DUMP_VERSION, set.len() as u32, DESCRIPTOR_DIM as u32, set.grid_step as u32, set.patch_size as u32, set.width as u32, set.height as u32] {
        put(&mut out, v);
    }
    for (i, &(x, y)) in set.points.iter().enumerate() {
        put(&mut out, x as u32);
        put(&mut out, y as u32);
        out.push(set.usable[i] as u8);
        for v in set.descriptor(i) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    crate::io::write_bytes(path.as_ref(), &out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("truncated dump".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

pub fn read_descriptors(path: impl AsRef<Path>) -> Result<DenseDescriptorSet> {
    let buf = read_all(path.as_ref())?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4)? != DESC_MAGIC {
        return Err(Error::Format("bad descriptor magic".into()));
    }
    let version = c.u32()?;
    if version != DUMP_VERSION {
        return Err(Error::Format(format!("unsupported descriptor dump version {version}")));
    }
    let n = c.u32()? as usize;
    let dims = c.u32()? as usize;
    if dims != DESCRIPTOR_DIM {
        return Err(Error::Format(format!("descriptor dims {dims} != {DESCRIPTOR_DIM}")));
    }
    let (grid_step, patch_size, width, height) = (c.u32()? as usize, c.u32()? as usize, c.u32()? as usize, c.u32()? as usize);
    let mut set = DenseDescriptorSet {
        points: Vec::with_capacity(n),
        descriptors: Vec::with_capacity(n * dims),
        usable: Vec::with_capacity(n),
        grid_step,
        patch_size,
        width,
        height,
    };
    for _ in 0..n {
        set.points.push((c.u32()? as usize, c.u32()? as usize));
        set.usable.push(c.take(1)?[0] != 0);
        for _ in 0..dims {
            set.descriptors.push(c.f32()? as f64);
        }
    }
    Ok(set)
}

/// Binary match dump.
///
/// Header: magic `EMMT`, version, count, dims (fields per record, 3),
/// source width/height, target width/height. Records: index_a u32,
/// index_b u32, distance f32.
pub fn write_matches(m: &MatchSet, path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::with_capacity(32 + m.len() * 12);
    out.extend_from_slice(MATCH_MAGIC);
    for v in [DUMP_VERSION, m.len() as u32, 3, m.source_dims.0 as u32, m.source_dims.1 as u32, m.target_dims.0 as u32, m.target_dims.1 as u32] {
        put(&mut out, v);
    }
    for p in &m.pairs {
        put(&mut out, p.index_a as u32);
        put(&mut out, p.index_b as u32);
        out.extend_from_slice(&(p.distance as f32).to_le_bytes());
    }
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_matches(path: impl AsRef<Path>) -> Result<MatchSet> {
    let buf = read_all(path.as_ref())?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4)? != MATCH_MAGIC {
        return Err(Error::Format("bad match magic".into()));
    }
    let version = c.u32()?;
    if version != DUMP_VERSION {
        return Err(Error::Format(format!("unsupported match dump version {version}")));
    }
    let n = c.u32()? as usize;
    if c.u32()? != 3 {
        return Err(Error::Format("unexpected match record layout".into()));
    }
    let source_dims = (c.u32()? as usize, c.u32()? as usize);
    let target_dims = (c.u32()? as usize, c.u32()? as usize);
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        pairs.push(Match { index_a: c.u32()? as usize, index_b: c.u32()? as usize, distance: c.f32()? as f64 });
    }
    Ok(MatchSet { pairs, source_dims, target_dims })
}
