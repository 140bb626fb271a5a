//! Shape from shading under a distant point light and Lambertian reflectance.

use crate::calibration::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::image::{ImageBuffer, Raster};
use crate::mask::BinaryMask;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Distant light: slant from the optical axis, tilt in the image plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LightModel {
    pub slant: f64,
    pub tilt: f64,
    pub albedo: f64,
}

impl LightModel {
    pub fn new(slant: f64, tilt: f64, albedo: f64) -> Result<Self> {
        let l = Self { slant, tilt, albedo };
        l.validate()?;
        Ok(l)
    }

    pub fn frontal(albedo: f64) -> Self {
        Self { slant: 0.0, tilt: 0.0, albedo }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..PI / 2.0).contains(&self.slant) {
            return Err(Error::param(format!("slant {} outside [0, pi/2)", self.slant)));
        }
        if !(-PI - 1e-9..=PI + 1e-9).contains(&self.tilt) {
            return Err(Error::param(format!("tilt {} outside [-pi, pi]", self.tilt)));
        }
        if !(self.albedo > 0.0 && self.albedo <= 1.5) {
            return Err(Error::param(format!("albedo {} outside (0, 1.5]", self.albedo)));
        }
        Ok(())
    }

    /// Same light with the tilt wrapped into [-pi, pi].
    pub fn with_tilt(&self, tilt: f64) -> Self {
        let t = (tilt + PI).rem_euclid(2.0 * PI) - PI;
        Self { tilt: t, ..*self }
    }

    pub fn ix(&self) -> f64 {
        self.tilt.cos() * self.slant.tan()
    }

    pub fn iy(&self) -> f64 {
        self.tilt.sin() * self.slant.tan()
    }

    fn coeffs(&self) -> (f64, f64, f64) {
        let s = self.slant.sin();
        (self.tilt.cos() * s, self.tilt.sin() * s, self.slant.cos())
    }
}

/// Lambertian reflectance of a surface with gradient `(p, q)`; shadowed
/// orientations give 0.
pub fn reflectance(p: f64, q: f64, light: &LightModel) -> f64 {
    let (a, b, c) = light.coeffs();
    let n = c + p * a + q * b;
    if n <= 0.0 {
        return 0.0;
    }
    light.albedo * n / (p * p + q * q + 1.0).sqrt()
}

/// Partial derivatives of [`reflectance`] with respect to `p` and `q`.
pub fn reflectance_grad(p: f64, q: f64, light: &LightModel) -> (f64, f64) {
    let (a, b, c) = light.coeffs();
    let n = c + p * a + q * b;
    if n <= 0.0 {
        return (0.0, 0.0);
    }
    let d = (p * p + q * q + 1.0).sqrt();
    let d3 = d * d * d;
    (light.albedo * (a / d - n * p / d3), light.albedo * (b / d - n * q / d3))
}

/// Pointwise residual `I - R(Z - Z_left, Z - Z_up)`.
pub fn residual(i: f64, z: f64, z_left: f64, z_up: f64, light: &LightModel) -> f64 {
    i - reflectance(z - z_left, z - z_up, light)
}

/// Derivative of [`residual`] with respect to the centre depth `z`.
pub fn residual_dz(z: f64, z_left: f64, z_up: f64, light: &LightModel) -> f64 {
    let (rp, rq) = reflectance_grad(z - z_left, z - z_up, light);
    -(rp + rq)
}

/// Backward-difference surface gradients; first column/row are 0.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientPair {
    pub p: Raster,
    pub q: Raster,
}

impl GradientPair {
    pub fn from_depth(z: &Raster) -> Self {
        let (w, h) = (z.width, z.height);
        let p = Raster::from_fn(w, h, |x, y| if x == 0 { 0.0 } else { z.get(x, y) - z.get(x - 1, y) });
        let q = Raster::from_fn(w, h, |x, y| if y == 0 { 0.0 } else { z.get(x, y) - z.get(x, y - 1) });
        Self { p, q }
    }
}

/// Relative depth plus a mask of invalid pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub z: Raster,
    pub invalid: BinaryMask,
}

impl DepthMap {
    pub fn new(z: Raster, invalid: BinaryMask) -> Result<Self> {
        if z.width != invalid.width() || z.height != invalid.height() {
            return Err(Error::dim("depth and mask sizes differ"));
        }
        Ok(Self { z, invalid })
    }

    pub fn all_valid(z: Raster) -> Self {
        let invalid = BinaryMask::new(z.width, z.height);
        Self { z, invalid }
    }

    pub fn width(&self) -> usize {
        self.z.width
    }

    pub fn height(&self) -> usize {
        self.z.height
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        !self.invalid.get(x, y)
    }

    pub fn valid_count(&self) -> usize {
        self.invalid.bits().iter().filter(|b| !**b).count()
    }

    pub fn mean(&self) -> f64 {
        let (mut s, mut n) = (0.0, 0usize);
        for (v, bad) in self.z.data.iter().zip(self.invalid.bits()) {
            if !bad {
                s += v;
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }

    /// Subtracts the valid-pixel mean; invalid pixels become 0.
    pub fn mean_center(&mut self) {
        let m = self.mean();
        for (v, bad) in self.z.data.iter_mut().zip(self.invalid.bits()) {
            *v = if *bad { 0.0 } else { *v - m };
        }
    }

    /// Depth with invalid pixels as NaN (the PFM convention).
    pub fn to_nan_raster(&self) -> Raster {
        let mut r = self.z.clone();
        for (v, bad) in r.data.iter_mut().zip(self.invalid.bits()) {
            if *bad {
                *v = f64::NAN;
            }
        }
        r
    }

    pub fn from_nan_raster(r: Raster) -> Self {
        let bits = r.data.iter().map(|v| !v.is_finite()).collect();
        let invalid = BinaryMask::from_bits(r.width, r.height, bits).expect("sizes agree");
        let mut z = r;
        z.data.iter_mut().for_each(|v| {
            if !v.is_finite() {
                *v = 0.0
            }
        });
        Self { z, invalid }
    }
}

// ---------------------------------------------------------------------------
// Light estimation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LightEstimate {
    pub light: LightModel,
    /// True when the moment equations had no root and the fallback was used.
    pub fallback: bool,
}

/// First two moments of `max(n.l, 0)` for normals of a sphere sampled
/// uniformly over its image disc.
fn sphere_moments(slant: f64) -> (f64, f64) {
    let n = 160;
    let (s, c) = slant.sin_cos();
    let (mut m1, mut m2, mut cnt) = (0.0, 0.0, 0usize);
    for j in 0..n {
        for i in 0..n {
            let x = (i as f64 + 0.5) / n as f64 * 2.0 - 1.0;
            let y = (j as f64 + 0.5) / n as f64 * 2.0 - 1.0;
            let r2 = x * x + y * y;
            if r2 >= 1.0 {
                continue;
            }
            let v = (x * s + (1.0 - r2).sqrt() * c).max(0.0);
            m1 += v;
            m2 += v * v;
            cnt += 1;
        }
    }
    (m1 / cnt as f64, m2 / cnt as f64)
}

/// Moment-based estimate of slant, tilt and albedo from unmasked pixels
/// (`mask` set = excluded).
pub fn estimate_light(gray: &ImageBuffer, mask: &BinaryMask) -> Result<LightEstimate> {
    gray.require_gray("sfs")?;
    let (w, h) = (gray.width(), gray.height());
    if mask.width() != w || mask.height() != h {
        return Err(Error::dim("mask size differs from image"));
    }
    let valid = w * h - mask.count();
    if valid * 2 < w * h || valid == 0 {
        return Err(Error::param("fewer than 50% of the pixels are unmasked"));
    }
    let (mut m1, mut m2) = (0.0, 0.0);
    let (mut ux, mut uy) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) {
                continue;
            }
            let v = gray.get(x, y);
            m1 += v;
            m2 += v * v;
            if x > 0 && y > 0 && x + 1 < w && y + 1 < h {
                let gx = 0.5 * (gray.get(x + 1, y) - gray.get(x - 1, y));
                let gy = 0.5 * (gray.get(x, y + 1) - gray.get(x, y - 1));
                let n = (gx * gx + gy * gy).sqrt();
                if n > 1e-9 {
                    ux += gx / n;
                    uy += gy / n;
                }
            }
        }
    }
    m1 /= valid as f64;
    m2 /= valid as f64;
    // A raised surface brightens against the tilt under this reflectance convention.
    let tilt = if ux.abs() + uy.abs() > 1e-9 { (-uy).atan2(-ux) } else { 0.0 };
    let fallback = |m1: f64| LightEstimate { light: LightModel { slant: 0.0, tilt, albedo: (2.0 * m1).clamp(1e-6, 1.5) }, fallback: true };
    if m1 <= 0.0 {
        return Ok(fallback(m1.max(0.0)));
    }
    let ratio = m2 / (m1 * m1);
    let f = |s: f64| {
        let (a, b) = sphere_moments(s);
        b / (a * a)
    };
    let (lo, hi) = (0.0, 85f64.to_radians());
    let (r_lo, r_hi) = (f(lo), f(hi));
    let slant = if ratio <= r_lo {
        if ratio >= r_lo * 0.98 {
            0.0
        } else {
            return Ok(fallback(m1));
        }
    } else if ratio >= r_hi {
        return Ok(fallback(m1));
    } else {
        let (mut a, mut b) = (lo, hi);
        for _ in 0..40 {
            let mid = 0.5 * (a + b);
            if f(mid) < ratio {
                a = mid;
            } else {
                b = mid;
            }
        }
        0.5 * (a + b)
    };
    let albedo = m1 / sphere_moments(slant).0;
    if !(albedo > 0.0 && albedo <= 1.5) {
        return Ok(fallback(m1));
    }
    Ok(LightEstimate { light: LightModel { slant, tilt, albedo }, fallback: false })
}

// ---------------------------------------------------------------------------
// Depth recovery
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SfsMethod {
    /// Per-pixel Jacobi Newton iteration on the backward-difference residual.
    Newton,
    /// Eikonal fast sweeping plus joint Gauss-Newton, best residual wins.
    Robust,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SfsParams {
    pub iters: usize,
    pub method: SfsMethod,
    /// Laplacian weight in the joint solve.
    pub smoothness: f64,
    /// Slopes below this are treated as flat by the sweeping solver.
    pub flat_tolerance: f64,
}

impl Default for SfsParams {
    fn default() -> Self {
        Self { iters: 200, method: SfsMethod::Robust, smoothness: 1e-3, flat_tolerance: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub struct SfsOutput {
    pub depth: DepthMap,
    /// Mean |f| over valid pixels, first entry after the first iteration.
    pub residual_history: Vec<f64>,
    /// Pixels frozen after a non-finite update.
    pub frozen: usize,
    pub candidate: String,
}

fn check_input(gray: &ImageBuffer, invalid: Option<&BinaryMask>) -> Result<BinaryMask> {
    gray.require_gray("sfs")?;
    let (w, h) = (gray.width(), gray.height());
    match invalid {
        Some(m) if m.width() != w || m.height() != h => Err(Error::dim("mask size differs from image")),
        Some(m) => Ok(m.clone()),
        None => Ok(BinaryMask::new(w, h)),
    }
}

/// Mean |I - R| with backward differences over valid pixels whose stencil is valid.
pub fn mean_residual(gray: &ImageBuffer, z: &Raster, invalid: &BinaryMask, light: &LightModel) -> f64 {
    let (w, h) = (z.width, z.height);
    let (mut s, mut n) = (0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            if invalid.get(x, y) {
                continue;
            }
            let zl = if x > 0 && !invalid.get(x - 1, y) { z.get(x - 1, y) } else { z.get(x, y) };
            let zu = if y > 0 && !invalid.get(x, y - 1) { z.get(x, y - 1) } else { z.get(x, y) };
            s += residual(gray.get(x, y), z.get(x, y), zl, zu, light).abs();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Mean |I - R| with central differences over pixels whose 4-neighbourhood is valid.
pub fn central_residual(gray: &ImageBuffer, z: &Raster, invalid: &BinaryMask, light: &LightModel) -> f64 {
    let (w, h) = (z.width, z.height);
    let (mut s, mut n) = (0.0, 0usize);
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            if invalid.get(x, y) || invalid.get(x - 1, y) || invalid.get(x + 1, y) || invalid.get(x, y - 1) || invalid.get(x, y + 1) {
                continue;
            }
            let p = 0.5 * (z.get(x + 1, y) - z.get(x - 1, y));
            let q = 0.5 * (z.get(x, y + 1) - z.get(x, y - 1));
            s += (gray.get(x, y) - reflectance(p, q, light)).abs();
            n += 1;
        }
    }
    if n == 0 {
        f64::INFINITY
    } else {
        s / n as f64
    }
}

/// Per-pixel Newton iteration `Z <- Z - f / (df/dZ)` from `Z = 0`, all
/// pixels reading the previous iterate. Invalid neighbours read the centre value.
pub fn tsai_shah_newton(gray: &ImageBuffer, invalid: Option<&BinaryMask>, light: &LightModel, iters: usize) -> Result<SfsOutput> {
    if iters < 1 {
        return Err(Error::param("iters must be >= 1"));
    }
    light.validate()?;
    let invalid = check_input(gray, invalid)?;
    let (w, h) = (gray.width(), gray.height());
    let mut z = Raster::zeros(w, h);
    let mut frozen = vec![false; w * h];
    let mut history = Vec::with_capacity(iters);
    for _ in 0..iters {
        let prev = z.clone();
        let updates: Vec<(f64, bool)> = (0..w * h)
            .into_par_iter()
            .map(|i| {
                let (x, y) = (i % w, i / w);
                let zc = prev.data[i];
                if invalid.get(x, y) || frozen[i] {
                    return (zc, frozen[i]);
                }
                let zl = if x > 0 && !invalid.get(x - 1, y) { prev.get(x - 1, y) } else { zc };
                let zu = if y > 0 && !invalid.get(x, y - 1) { prev.get(x, y - 1) } else { zc };
                let f = residual(gray.get(x, y), zc, zl, zu, light);
                let mut d = residual_dz(zc, zl, zu, light);
                if d.abs() < 1e-6 {
                    d = if d < 0.0 { -1e-6 } else { 1e-6 };
                }
                let n = zc - f / d;
                if n.is_finite() {
                    (n, false)
                } else {
                    (zc, true)
                }
            })
            .collect();
        for (i, (v, fr)) in updates.into_iter().enumerate() {
            z.data[i] = v;
            frozen[i] = fr;
        }
        history.push(mean_residual(gray, &z, &invalid, light));
    }
    let mut depth = DepthMap::new(z, invalid)?;
    depth.mean_center();
    let frozen = frozen.iter().filter(|f| **f).count();
    Ok(SfsOutput { depth, residual_history: history, frozen, candidate: "newton".into() })
}

/// Solves `|grad Z| = g` by fast sweeping with `Z = 0` on `fixed` pixels.
fn eikonal(g: &[f64], w: usize, h: usize, invalid: &BinaryMask, fixed: &[bool]) -> Vec<f64> {
    const BIG: f64 = 1e9;
    let mut z: Vec<f64> = (0..w * h).map(|i| if fixed[i] { 0.0 } else { BIG }).collect();
    let valid = |x: usize, y: usize| !invalid.get(x, y);
    for _round in 0..200 {
        let mut change = 0.0f64;
        for order in 0..4 {
            for jj in 0..h {
                let y = if order < 2 { jj } else { h - 1 - jj };
                for ii in 0..w {
                    let x = if order % 2 == 0 { ii } else { w - 1 - ii };
                    let i = y * w + x;
                    if fixed[i] || !valid(x, y) {
                        continue;
                    }
                    let mut a = BIG;
                    if x > 0 && valid(x - 1, y) {
                        a = a.min(z[i - 1]);
                    }
                    if x + 1 < w && valid(x + 1, y) {
                        a = a.min(z[i + 1]);
                    }
                    let mut b = BIG;
                    if y > 0 && valid(x, y - 1) {
                        b = b.min(z[i - w]);
                    }
                    if y + 1 < h && valid(x, y + 1) {
                        b = b.min(z[i + w]);
                    }
                    let (lo, hi) = (a.min(b), a.max(b));
                    if lo >= BIG {
                        continue;
                    }
                    let gi = g[i];
                    let mut v = lo + gi;
                    if v > hi {
                        v = 0.5 * (a + b + (2.0 * gi * gi - (a - b) * (a - b)).max(0.0).sqrt());
                    }
                    if v < z[i] {
                        change = change.max(if z[i] >= BIG { 1.0 } else { z[i] - v });
                        z[i] = v;
                    }
                }
            }
        }
        if change < 1e-12 {
            break;
        }
    }
    z.iter_mut().for_each(|v| {
        if *v >= BIG {
            *v = 0.0
        }
    });
    z
}

fn slope_field(gray: &ImageBuffer, shading: &[f64], albedo: f64, tol: f64) -> Vec<f64> {
    gray.data()
        .iter()
        .zip(shading)
        .map(|(i, s)| {
            let i = i.max(1e-3);
            let g = ((albedo * s / i).powi(2) - 1.0).max(0.0).sqrt().min(50.0);
            if g < tol {
                0.0
            } else {
                g
            }
        })
        .collect()
}

fn central_pq(z: &[f64], w: usize, h: usize, invalid: &BinaryMask, x: usize, y: usize) -> (f64, f64) {
    let i = y * w + x;
    let ok = |xx: usize, yy: usize| !invalid.get(xx, yy);
    let p = match (x > 0 && ok(x - 1, y), x + 1 < w && ok(x + 1, y)) {
        (true, true) => 0.5 * (z[i + 1] - z[i - 1]),
        (true, false) => z[i] - z[i - 1],
        (false, true) => z[i + 1] - z[i],
        _ => 0.0,
    };
    let q = match (y > 0 && ok(x, y - 1), y + 1 < h && ok(x, y + 1)) {
        (true, true) => 0.5 * (z[i + w] - z[i - w]),
        (true, false) => z[i] - z[i - w],
        (false, true) => z[i + w] - z[i],
        _ => 0.0,
    };
    (p, q)
}

/// Dome-shaped solution of the shading equation by fast sweeping, with the
/// obliqueness of the light handled by an outer fixed point.
fn sweep_solution(gray: &ImageBuffer, invalid: &BinaryMask, light: &LightModel, tol: f64) -> Vec<f64> {
    let (w, h) = (gray.width(), gray.height());
    let (a, b, c) = light.coeffs();
    let mut shading = vec![1.0; w * h];
    let mut g = slope_field(gray, &shading, light.albedo, tol);
    let border = |x: usize, y: usize| {
        x == 0
            || y == 0
            || x + 1 == w
            || y + 1 == h
            || invalid.get(x - 1, y)
            || invalid.get(x + 1, y)
            || invalid.get(x, y - 1)
            || invalid.get(x, y + 1)
    };
    let outer = if light.slant.abs() < 1e-9 { 1 } else { 12 };
    let mut z = vec![0.0; w * h];
    for _ in 0..outer {
        let mut fixed = vec![false; w * h];
        let mut any = false;
        for y in 0..h {
            for x in 0..w {
                if !invalid.get(x, y) && border(x, y) && g[y * w + x] < 1e-3 {
                    fixed[y * w + x] = true;
                    any = true;
                }
            }
        }
        if !any {
            for y in 0..h {
                for x in 0..w {
                    if !invalid.get(x, y) && border(x, y) {
                        fixed[y * w + x] = true;
                    }
                }
            }
        }
        z = eikonal(&g, w, h, invalid, &fixed);
        if outer == 1 {
            break;
        }
        for y in 0..h {
            for x in 0..w {
                let (p, q) = central_pq(&z, w, h, invalid, x, y);
                shading[y * w + x] = (c + a * p + b * q).max(0.05);
            }
        }
        let g_new = slope_field(gray, &shading, light.albedo, tol);
        for (gi, gn) in g.iter_mut().zip(&g_new) {
            *gi = 0.5 * *gi + 0.5 * gn;
        }
    }
    z
}

struct Term {
    idx: [usize; 3],
    coef: [f64; 3],
    r: f64,
}

fn build_terms(gray: &ImageBuffer, z: &[f64], invalid: &BinaryMask, light: &LightModel, lambda: f64) -> Vec<Term> {
    let (w, h) = (gray.width(), gray.height());
    let ok = |x: usize, y: usize| !invalid.get(x, y);
    let sl = lambda.sqrt();
    let mut terms = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !ok(x, y) {
                continue;
            }
            let i = y * w + x;
            let iv = gray.data()[i];
            // Backward stencil.
            if x > 0 && y > 0 && ok(x - 1, y) && ok(x, y - 1) {
                let (p, q) = (z[i] - z[i - 1], z[i] - z[i - w]);
                let (rp, rq) = reflectance_grad(p, q, light);
                terms.push(Term { idx: [i, i - 1, i - w], coef: [-(rp + rq), rp, rq], r: iv - reflectance(p, q, light) });
            }
            // Forward stencil.
            if x + 1 < w && y + 1 < h && ok(x + 1, y) && ok(x, y + 1) {
                let (p, q) = (z[i + 1] - z[i], z[i + w] - z[i]);
                let (rp, rq) = reflectance_grad(p, q, light);
                terms.push(Term { idx: [i, i + 1, i + w], coef: [rp + rq, -rp, -rq], r: iv - reflectance(p, q, light) });
            }
            if sl > 0.0 {
                if x + 1 < w && ok(x + 1, y) {
                    terms.push(Term { idx: [i, i + 1, i], coef: [sl, -sl, 0.0], r: sl * (z[i] - z[i + 1]) });
                }
                if y + 1 < h && ok(x, y + 1) {
                    terms.push(Term { idx: [i, i + w, i], coef: [sl, -sl, 0.0], r: sl * (z[i] - z[i + w]) });
                }
            }
        }
    }
    terms
}

/// Joint Gauss-Newton (Levenberg damped) on all shading residuals from Z = 0.
fn joint_solution(gray: &ImageBuffer, invalid: &BinaryMask, light: &LightModel, lambda: f64, iters: usize) -> Vec<f64> {
    let n = gray.width() * gray.height();
    let mut z = vec![0.0; n];
    let cost = |t: &[Term]| t.iter().map(|t| t.r * t.r).sum::<f64>();
    let mut terms = build_terms(gray, &z, invalid, light, lambda);
    let mut c = cost(&terms);
    let mut mu = 1e-2;
    for _ in 0..iters {
        // Jᵀr and diagonal of JᵀJ.
        let mut g = vec![0.0; n];
        let mut diag = vec![0.0; n];
        for t in &terms {
            for k in 0..3 {
                g[t.idx[k]] += t.coef[k] * t.r;
                diag[t.idx[k]] += t.coef[k] * t.coef[k];
            }
        }
        if g.iter().fold(0.0f64, |m, v| m.max(v.abs())) < 1e-12 {
            break;
        }
        let mut accepted = false;
        for _ in 0..8 {
            let delta = cg_solve(&terms, &diag, mu, &g, n);
            let trial: Vec<f64> = z.iter().zip(&delta).map(|(a, d)| a - d).collect();
            let tt = build_terms(gray, &trial, invalid, light, lambda);
            let tc = cost(&tt);
            if tc < c {
                let rel = (c - tc) / c.max(1e-300);
                z = trial;
                terms = tt;
                c = tc;
                mu = (mu / 3.0).max(1e-9);
                accepted = rel > 1e-9;
                break;
            }
            mu *= 4.0;
        }
        if !accepted {
            break;
        }
    }
    z
}

/// Conjugate gradients on `(JᵀJ + mu diag) x = b`.
fn cg_solve(terms: &[Term], diag: &[f64], mu: f64, b: &[f64], n: usize) -> Vec<f64> {
    let apply = |v: &[f64]| {
        let mut out: Vec<f64> = (0..n).map(|i| mu * (diag[i] + 1e-6) * v[i]).collect();
        for t in terms {
            let jv = t.coef[0] * v[t.idx[0]] + t.coef[1] * v[t.idx[1]] + t.coef[2] * v[t.idx[2]];
            for k in 0..3 {
                out[t.idx[k]] += t.coef[k] * jv;
            }
        }
        out
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let stop = rr * 1e-16;
    for _ in 0..300 {
        if rr <= stop {
            break;
        }
        let ap = apply(&p);
        let alpha = rr / dot(&p, &ap).max(1e-300);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr2 = dot(&r, &r);
        let beta = rr2 / rr;
        rr = rr2;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    x
}

/// Recovers relative depth from shading; the result is mean-centred.
pub fn tsai_shah(gray: &ImageBuffer, invalid: Option<&BinaryMask>, light: &LightModel, params: &SfsParams) -> Result<SfsOutput> {
    if params.iters < 1 {
        return Err(Error::param("iters must be >= 1"));
    }
    if params.method == SfsMethod::Newton {
        return tsai_shah_newton(gray, invalid, light, params.iters);
    }
    light.validate()?;
    let invalid = check_input(gray, invalid)?;
    let (w, h) = (gray.width(), gray.height());
    let initial = mean_residual(gray, &Raster::zeros(w, h), &invalid, light);
    let mut candidates: Vec<(String, Vec<f64>)> = Vec::new();
    candidates.push(("dome".into(), sweep_solution(gray, &invalid, light, params.flat_tolerance)));
    if light.slant > 1e-9 {
        let flipped = light.with_tilt(light.tilt + PI);
        let bowl = sweep_solution(gray, &invalid, &flipped, params.flat_tolerance);
        candidates.push(("bowl".into(), bowl.iter().map(|v| -v).collect()));
        let gn_iters = params.iters.clamp(1, 60);
        candidates.push(("joint".into(), joint_solution(gray, &invalid, light, params.smoothness, gn_iters)));
    }
    candidates.push(("flat".into(), vec![0.0; w * h]));
    let scored: Vec<(f64, usize)> = candidates
        .iter()
        .enumerate()
        .map(|(k, (_, z))| (central_residual(gray, &Raster { width: w, height: h, data: z.clone() }, &invalid, light), k))
        .collect();
    let best = scored
        .iter()
        .filter(|s| s.0.is_finite())
        .min_by(|a, b| a.0.partial_cmp(&b.0).expect("finite").then(a.1.cmp(&b.1)))
        .map(|s| s.1)
        .unwrap_or(0);
    let (name, z) = candidates.swap_remove(best);
    let z = Raster { width: w, height: h, data: z };
    let fin = mean_residual(gray, &z, &invalid, light);
    let mut depth = DepthMap::new(z, invalid)?;
    depth.mean_center();
    Ok(SfsOutput { depth, residual_history: vec![initial, fin], frozen: 0, candidate: name })
}

/// Back-projects valid pixels after shifting depth so its minimum is 1.
pub fn depth_to_pointcloud(depth: &DepthMap, k: &CameraIntrinsics, scale: f64) -> Result<Vec<[f64; 3]>> {
    if !(scale > 0.0) {
        return Err(Error::param("scale must be positive"));
    }
    let min = depth
        .z
        .data
        .iter()
        .zip(depth.invalid.bits())
        .filter(|(_, b)| !**b)
        .map(|(v, _)| *v)
        .fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return Ok(Vec::new());
    }
    let mut out = Vec::with_capacity(depth.valid_count());
    for y in 0..depth.height() {
        for x in 0..depth.width() {
            if !depth.is_valid(x, y) {
                continue;
            }
            let z = scale * (depth.z.get(x, y) - min + 1.0);
            out.push([z * (x as f64 - k.cx) / k.fx, z * (y as f64 - k.cy) / k.fy, z]);
        }
    }
    Ok(out)
}
