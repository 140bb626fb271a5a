//! Specular reflection suppression, vignetting correction and sharpening.

use crate::error::{Error, Result};
use crate::image::{gaussian_blur, gradient, image_stats, percentile, GradientField, ImageBuffer, ImageStats};
use crate::mask::BinaryMask;
use serde::{Deserialize, Serialize};

/// Marks pixels whose gradient magnitude exceeds the given percentile of
/// all magnitudes.
pub fn gradient_threshold_mask(grad: &GradientField, pct: f64) -> Result<BinaryMask> {
    if !(pct > 0.0 && pct < 100.0) {
        return Err(Error::param(format!("percentile must be in (0,100), got {pct}")));
    }
    let mag = &grad.magnitude;
    let thr = percentile(&mag.data, pct).unwrap_or(0.0);
    Ok(BinaryMask::from_bits(mag.width, mag.height, mag.data.iter().map(|m| *m > thr).collect())
        .expect("same dimensions"))
}

/// Closing with a disc followed by 4-connected hole filling.
pub fn morphological_close_and_fill(mask: &BinaryMask, radius: usize) -> Result<BinaryMask> {
    if radius < 1 {
        return Err(Error::param("closing radius must be >= 1"));
    }
    Ok(mask.dilate(radius).erode(radius).fill_holes())
}

/// Marks pixels with `I >= mean + stddev`.
pub fn illumination_mask(gray: &ImageBuffer, stats: &ImageStats) -> Result<BinaryMask> {
    gray.require_gray("illumination_mask")?;
    let thr = stats.mean + stats.stddev;
    Ok(BinaryMask::from_bits(gray.width(), gray.height(), gray.data().iter().map(|v| *v >= thr).collect())
        .expect("same dimensions"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReflectionParams {
    /// Gradient magnitude percentile used as the edge threshold.
    pub percentile: f64,
    pub close_radius: usize,
    /// Final dilation covering specular halos.
    pub halo: usize,
}

impl Default for ReflectionParams {
    fn default() -> Self {
        Self { percentile: 95.0, close_radius: 3, halo: 2 }
    }
}

/// Specular mask: closed-and-filled gradient mask AND illumination mask,
/// dilated by the halo radius.
pub fn detect_reflections(gray: &ImageBuffer, cfg: &ReflectionParams) -> Result<BinaryMask> {
    detect_reflections_masked(gray, None, cfg)
}

/// Same as [`detect_reflections`] with statistics restricted to pixels not
/// set in `invalid`.
pub fn detect_reflections_masked(gray: &ImageBuffer, invalid: Option<&BinaryMask>, cfg: &ReflectionParams) -> Result<BinaryMask> {
    gray.require_gray("detect_reflections")?;
    let grad = gradient(gray)?;
    let edges = morphological_close_and_fill(&gradient_threshold_mask(&grad, cfg.percentile)?, cfg.close_radius)?;
    let stats = image_stats(gray, invalid)?;
    let bright = illumination_mask(gray, &stats)?;
    let mut m = edges.and(&bright)?;
    if let Some(inv) = invalid {
        m = m.and(&inv.not())?;
    }
    Ok(if cfg.halo > 0 { m.dilate(cfg.halo) } else { m })
}

/// Harmonic inpainting: masked pixels solve the discrete Laplace equation
/// with unmasked neighbours as boundary values (Gauss-Seidel).
pub fn inpaint(img: &ImageBuffer, mask: &BinaryMask, tol: f64, max_iters: usize) -> Result<ImageBuffer> {
    if mask.width() != img.width() || mask.height() != img.height() {
        return Err(Error::dim("mask does not match image"));
    }
    if mask.count() == mask.bits().len() {
        return Err(Error::Degenerate("mask covers the whole image".into()));
    }
    if mask.is_empty() {
        return Ok(img.clone());
    }
    let comps = mask.components();
    img.map_planes(|plane| {
        let (w, h) = (plane.width(), plane.height());
        let mut v = plane.data().to_vec();
        let bits = mask.bits();
        for comp in &comps {
            let (mut s, mut n) = (0.0, 0usize);
            for &i in comp {
                for j in neighbours(i, w, h) {
                    if !bits[j] {
                        s += v[j];
                        n += 1;
                    }
                }
            }
            let init = if n > 0 { s / n as f64 } else { 0.0 };
            for &i in comp {
                v[i] = init;
            }
        }
        let order: Vec<usize> = comps.iter().flatten().copied().collect();
        for _ in 0..max_iters {
            let mut change: f64 = 0.0;
            for &i in &order {
                let (mut s, mut n) = (0.0, 0usize);
                for j in neighbours(i, w, h) {
                    s += v[j];
                    n += 1;
                }
                let nv = s / n as f64;
                change = change.max((nv - v[i]).abs());
                v[i] = nv;
            }
            if change < tol {
                break;
            }
        }
        ImageBuffer::new(w, h, 1, v)
    })
}

fn neighbours(i: usize, w: usize, h: usize) -> impl Iterator<Item = usize> {
    let (x, y) = (i % w, i / w);
    [
        (x > 0).then(|| i - 1),
        (x + 1 < w).then(|| i + 1),
        (y > 0).then(|| i - w),
        (y + 1 < h).then(|| i + w),
    ]
    .into_iter()
    .flatten()
}

/// Radial attenuation `g(r) = 1 + a r² + b r⁴ + c r⁶`, with `r` the distance
/// from the center normalized by the half-diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VignetteModel {
    pub center: (f64, f64),
    pub half_diagonal: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// Set when a fit was rejected and the identity returned instead.
    #[serde(default)]
    pub rejected: bool,
}

impl VignetteModel {
    pub fn new(width: usize, height: usize, a: f64, b: f64, c: f64) -> Self {
        let cx = (width as f64 - 1.0) / 2.0;
        let cy = (height as f64 - 1.0) / 2.0;
        Self { center: (cx, cy), half_diagonal: cx.hypot(cy).max(1e-12), a, b, c, rejected: false }
    }

    pub fn identity(width: usize, height: usize) -> Self {
        Self::new(width, height, 0.0, 0.0, 0.0)
    }

    pub fn is_identity(&self) -> bool {
        self.a == 0.0 && self.b == 0.0 && self.c == 0.0
    }

    #[inline]
    pub fn gain_at(&self, r: f64) -> f64 {
        let u = r * r;
        1.0 + u * (self.a + u * (self.b + u * self.c))
    }

    #[inline]
    pub fn normalized_radius(&self, x: f64, y: f64) -> f64 {
        (x - self.center.0).hypot(y - self.center.1) / self.half_diagonal
    }

    pub fn gain(&self, x: f64, y: f64) -> f64 {
        self.gain_at(self.normalized_radius(x, y))
    }

    /// Smallest gain over `r ∈ [0,1]`.
    pub fn min_gain(&self) -> f64 {
        min_cubic(self.a, self.b, self.c)
    }

    pub fn is_valid(&self) -> bool {
        self.min_gain() > 0.05
    }
}

/// Minimum of `1 + a u + b u² + c u³` over `u ∈ [0,1]`.
fn min_cubic(a: f64, b: f64, c: f64) -> f64 {
    let g = |u: f64| 1.0 + u * (a + u * (b + u * c));
    let mut m = g(0.0).min(g(1.0));
    // g'(u) = a + 2b u + 3c u²
    let (qa, qb, qc) = (3.0 * c, 2.0 * b, a);
    let mut roots = Vec::new();
    if qa.abs() < 1e-15 {
        if qb.abs() > 1e-15 {
            roots.push(-qc / qb);
        }
    } else {
        let disc = qb * qb - 4.0 * qa * qc;
        if disc >= 0.0 {
            let s = disc.sqrt();
            roots.push((-qb + s) / (2.0 * qa));
            roots.push((-qb - s) / (2.0 * qa));
        }
    }
    for u in roots {
        if (0.0..=1.0).contains(&u) {
            m = m.min(g(u));
        }
    }
    m
}

/// Precomputed geometry for repeated asymmetry evaluations.
struct RadialFrame {
    w: usize,
    h: usize,
    u: Vec<f64>,
    ex: Vec<f64>,
    ey: Vec<f64>,
}

impl RadialFrame {
    fn new(w: usize, h: usize, model: &VignetteModel) -> Self {
        let n = w * h;
        let (mut u, mut ex, mut ey) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let dx = x as f64 - model.center.0;
                let dy = y as f64 - model.center.1;
                let r = dx.hypot(dy);
                let rn = r / model.half_diagonal;
                u[i] = rn * rn;
                if r > 1e-12 {
                    ex[i] = dx / r;
                    ey[i] = dy / r;
                }
            }
        }
        Self { w, h, u, ex, ey }
    }

    /// Asymmetry of the radial gradients of `data / g`.
    fn asymmetry(&self, data: &[f64], a: f64, b: f64, c: f64, buf: &mut Vec<f64>) -> f64 {
        buf.clear();
        buf.extend(data.iter().zip(&self.u).map(|(v, u)| v / (1.0 + u * (a + u * (b + u * c)))));
        radial_asymmetry_raw(buf, self.w, self.h, &self.ex, &self.ey)
    }
}

fn radial_asymmetry_raw(v: &[f64], w: usize, h: usize, ex: &[f64], ey: &[f64]) -> f64 {
    let (mut signed, mut total) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let gx = if x == 0 {
                v[i + 1] - v[i]
            } else if x == w - 1 {
                v[i] - v[i - 1]
            } else {
                0.5 * (v[i + 1] - v[i - 1])
            };
            let gy = if y == 0 {
                v[i + w] - v[i]
            } else if y == h - 1 {
                v[i] - v[i - w]
            } else {
                0.5 * (v[i + w] - v[i - w])
            };
            let phi = gx * ex[i] + gy * ey[i];
            signed += phi;
            total += phi.abs();
        }
    }
    if total <= 1e-12 * (w * h) as f64 {
        0.0
    } else {
        signed.abs() / total
    }
}

/// `|Σ positive + Σ negative| / Σ |·|` of radial gradients about the image center.
pub fn radial_asymmetry(gray: &ImageBuffer) -> Result<f64> {
    gray.require_gray("radial_asymmetry")?;
    let m = VignetteModel::identity(gray.width(), gray.height());
    let f = RadialFrame::new(gray.width(), gray.height(), &m);
    Ok(radial_asymmetry_raw(gray.data(), f.w, f.h, &f.ex, &f.ey))
}

/// Fits the attenuation polynomial by minimizing radial-gradient asymmetry
/// of the corrected image: coordinate descent over a grid on `[-1,1]³`,
/// then pattern-search refinement.
pub fn fit_vignette(gray: &ImageBuffer) -> Result<VignetteModel> {
    gray.require_gray("fit_vignette")?;
    let (w, h) = (gray.width(), gray.height());
    if w.min(h) < 32 {
        return Err(Error::dim("fit_vignette needs at least 32x32 pixels"));
    }
    let base = VignetteModel::identity(w, h);
    let frame = RadialFrame::new(w, h, &base);
    let data = gray.data();
    let mut buf = Vec::with_capacity(data.len());
    let mut eval = |p: &[f64; 3]| -> f64 {
        if min_cubic(p[0], p[1], p[2]) <= 0.05 {
            return f64::INFINITY;
        }
        frame.asymmetry(data, p[0], p[1], p[2], &mut buf)
    };

    let mut p = [0.0; 3];
    let start = eval(&p);
    let mut best = start;
    const STEPS: usize = 20;
    for _sweep in 0..2 {
        for k in 0..3 {
            for s in 0..=STEPS {
                let v = -1.0 + 2.0 * s as f64 / STEPS as f64;
                let mut q = p;
                q[k] = v;
                let f = eval(&q);
                if f < best {
                    best = f;
                    p = q;
                }
            }
        }
        if best == 0.0 {
            break;
        }
    }
    let mut step = 0.05;
    while step > 1e-4 && best > 0.0 {
        let mut improved = false;
        for k in 0..3 {
            for dir in [-1.0, 1.0] {
                let mut q = p;
                q[k] = (q[k] + dir * step).clamp(-1.0, 1.0);
                let f = eval(&q);
                if f < best {
                    best = f;
                    p = q;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }

    let model = VignetteModel::new(w, h, p[0], p[1], p[2]);
    if !model.is_valid() {
        return Ok(VignetteModel { rejected: true, ..base });
    }
    // The search objective ignores output clamping; keep the identity if the
    // clamped result is no better.
    let after = radial_asymmetry(&correct_vignetting(gray, &model)?)?;
    let before = radial_asymmetry(gray)?;
    if after > before {
        return Ok(base);
    }
    Ok(model)
}

/// Divides every pixel by the model gain at its radius, clamping to `[0,1]`.
pub fn correct_vignetting(img: &ImageBuffer, model: &VignetteModel) -> Result<ImageBuffer> {
    if !model.is_valid() {
        return Err(Error::param("vignette model has non-positive gain"));
    }
    scale_by_gain(img, model, true)
}

pub(crate) fn scale_by_gain(img: &ImageBuffer, model: &VignetteModel, divide: bool) -> Result<ImageBuffer> {
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let mut data = img.data().to_vec();
    for y in 0..h {
        for x in 0..w {
            let g = model.gain(x as f64, y as f64);
            let f = if divide { 1.0 / g } else { g };
            for ch in 0..c {
                data[(y * w + x) * c + ch] *= f;
            }
        }
    }
    ImageBuffer::new(w, h, c, data)
}

/// `clamp(img + amount * (img - blur(img, sigma)))`.
pub fn unsharp_mask(img: &ImageBuffer, sigma: f64, amount: f64) -> Result<ImageBuffer> {
    if !(amount >= 0.0) {
        return Err(Error::param("unsharp amount must be >= 0"));
    }
    let blurred = gaussian_blur(img, sigma)?;
    let data = img
        .data()
        .iter()
        .zip(blurred.data())
        .map(|(v, b)| v + amount * (v - b))
        .collect();
    ImageBuffer::new(img.width(), img.height(), img.channels(), data)
}
