//! Synthetic fixtures with known ground truth: Lambertian renders of
//! analytic surfaces, vignetting, specular blobs and rotation sequences.

use crate::calibration::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::evaluation::ReferenceScene;
use crate::geometry::{project, Homography33};
use crate::image::{gaussian_blur, ImageBuffer, Raster};
use crate::mask::BinaryMask;
use crate::preprocess::{scale_by_gain, VignetteModel};
use crate::sfs::{reflectance, DepthMap, LightModel};
use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Compact bump `h (1 - d²/r²)²` centred at `(cx, cy)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnalyticSurface {
    Flat,
    /// Upper half of a sphere; zero outside its disc.
    Hemisphere { cx: f64, cy: f64, radius: f64 },
    Ramp { slope_x: f64, slope_y: f64 },
    Sinusoid { amplitude: f64, period_x: f64, period_y: f64 },
    /// Interior of a tube with its axis along y, seen from inside, plus bumps.
    CylinderInterior { cx: f64, radius: f64, bumps: Vec<Bump> },
    /// Flat floor carrying bumps.
    Bumps { bumps: Vec<Bump> },
}

fn bump_eval(b: &Bump, x: f64, y: f64) -> (f64, f64, f64) {
    let (dx, dy) = (x - b.cx, y - b.cy);
    let r2 = b.radius * b.radius;
    let u = (dx * dx + dy * dy) / r2;
    if u >= 1.0 {
        return (0.0, 0.0, 0.0);
    }
    let s = 1.0 - u;
    let k = -4.0 * b.height * s / r2;
    (b.height * s * s, k * dx, k * dy)
}

impl AnalyticSurface {
    /// Depth and exact gradients `(Z, dZ/dx, dZ/dy)` at `(x, y)`.
    pub fn eval(&self, x: f64, y: f64) -> (f64, f64, f64) {
        match self {
            Self::Flat => (0.0, 0.0, 0.0),
            Self::Hemisphere { cx, cy, radius } => {
                let (dx, dy) = (x - cx, y - cy);
                let r2 = radius * radius - dx * dx - dy * dy;
                if r2 <= 0.0 {
                    return (0.0, 0.0, 0.0);
                }
                let z = r2.sqrt();
                (z, -dx / z, -dy / z)
            }
            Self::Ramp { slope_x, slope_y } => (slope_x * x + slope_y * y, *slope_x, *slope_y),
            Self::Sinusoid { amplitude, period_x, period_y } => {
                let (wx, wy) = (2.0 * std::f64::consts::PI / period_x, 2.0 * std::f64::consts::PI / period_y);
                let (sx, cx) = (wx * x).sin_cos();
                let (sy, cy) = (wy * y).sin_cos();
                (amplitude * sx * cy, amplitude * wx * cx * cy, -amplitude * wy * sx * sy)
            }
            Self::CylinderInterior { cx, radius, bumps } => {
                let dx = (x - cx).clamp(-0.95 * radius, 0.95 * radius);
                let s = (radius * radius - dx * dx).sqrt();
                let (mut z, mut p, mut q) = (-s, dx / s, 0.0);
                for b in bumps {
                    let (bz, bp, bq) = bump_eval(b, x, y);
                    z += bz;
                    p += bp;
                    q += bq;
                }
                (z, p, q)
            }
            Self::Bumps { bumps } => bumps.iter().fold((0.0, 0.0, 0.0), |acc, b| {
                let (z, p, q) = bump_eval(b, x, y);
                (acc.0 + z, acc.1 + p, acc.2 + q)
            }),
        }
    }

    pub fn depth(&self, x: f64, y: f64) -> f64 {
        self.eval(x, y).0
    }

    /// Pixels whose normal makes less than ~73 degrees with the view axis.
    pub fn interior(&self, x: f64, y: f64) -> bool {
        let (_, p, q) = self.eval(x, y);
        match self {
            Self::Hemisphere { cx, cy, radius } => {
                let r2 = (x - cx).powi(2) + (y - cy).powi(2);
                r2 < radius * radius && 1.0 / (1.0 + p * p + q * q).sqrt() > 0.3
            }
            _ => 1.0 / (1.0 + p * p + q * q).sqrt() > 0.3,
        }
    }

    /// Seeded non-overlapping bumps covering roughly `coverage` of the area.
    pub fn random_bumps(width: f64, height: f64, radius: (f64, f64), coverage: f64, height_ratio: f64, seed: u64) -> Vec<Bump> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bumps: Vec<Bump> = Vec::new();
        let (mut area, target) = (0.0, coverage * width * height);
        let mut tries = 0;
        while area < target && tries < 200_000 {
            tries += 1;
            let r = rng.gen_range(radius.0..=radius.1);
            let (cx, cy) = (rng.gen_range(0.0..width), rng.gen_range(0.0..height));
            if bumps.iter().any(|b| (b.cx - cx).hypot(b.cy - cy) < b.radius + r + 1.0) {
                continue;
            }
            let sign = 1.0;
            bumps.push(Bump { cx, cy, radius: r, height: sign * height_ratio * r });
            area += std::f64::consts::PI * r * r;
        }
        bumps
    }
}

/// Renders `surface` on a `width x height` grid; returns the image and the
/// ground-truth depth.
pub fn render_lambertian(surface: &AnalyticSurface, light: &LightModel, width: usize, height: usize) -> Result<(ImageBuffer, DepthMap)> {
    light.validate()?;
    if width == 0 || height == 0 {
        return Err(Error::dim("zero-size render"));
    }
    let mut data = Vec::with_capacity(width * height);
    let mut z = Raster::zeros(width, height);
    for y in 0..height {
        for x in 0..width {
            let (d, p, q) = surface.eval(x as f64, y as f64);
            data.push(reflectance(p, q, light));
            z.set(x, y, d);
        }
    }
    Ok((ImageBuffer::new(width, height, 1, data)?, DepthMap::all_valid(z)))
}

/// Multiplies by the vignetting gain and clamps.
pub fn apply_vignette(img: &ImageBuffer, model: &VignetteModel) -> Result<ImageBuffer> {
    scale_by_gain(img, model, false)
}

const SPEC_PEAK: f64 = 1.3;

/// Blob profile: exceeds 0.95 exactly inside distance `radius`.
pub fn specular_profile(d: f64, radius: f64) -> f64 {
    SPEC_PEAK * (-(SPEC_PEAK / 0.95f64).ln() * (d / radius).powi(4)).exp()
}

/// Adds saturated blobs at seeded positions, each fully inside the frame
/// when it fits. The truth mask holds pixels the profile raises above 0.95.
pub fn inject_speculars(img: &ImageBuffer, count: usize, radius: (f64, f64), seed: u64) -> Result<(ImageBuffer, BinaryMask)> {
    if !(radius.0 > 0.0 && radius.1 >= radius.0) {
        return Err(Error::param("radius range must be positive and ordered"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (img.width(), img.height());
    let blobs: Vec<(f64, f64, f64)> = (0..count)
        .map(|_| {
            let r = if radius.1 > radius.0 { rng.gen_range(radius.0..=radius.1) } else { radius.0 };
            let (mx, my) = ((1.6 * r).min(w as f64 / 2.0), (1.6 * r).min(h as f64 / 2.0));
            (rng.gen_range(mx..=w as f64 - mx), rng.gen_range(my..=h as f64 - my), r)
        })
        .collect();
    Ok(stamp_speculars(img, &blobs))
}

/// Stamps blobs `(cx, cy, radius)`.
pub fn stamp_speculars(img: &ImageBuffer, blobs: &[(f64, f64, f64)]) -> (ImageBuffer, BinaryMask) {
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let mut data = img.data().to_vec();
    let mut mask = BinaryMask::new(w, h);
    for &(cx, cy, r) in blobs {
        let ext = 1.6 * r;
        let (x0, x1) = (((cx - ext).floor().max(0.0)) as usize, ((cx + ext).ceil().min((w - 1) as f64)) as usize);
        let (y0, y1) = (((cy - ext).floor().max(0.0)) as usize, ((cy + ext).ceil().min((h - 1) as f64)) as usize);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = (x as f64 - cx).hypot(y as f64 - cy);
                let p = specular_profile(d, r);
                for ch in 0..c {
                    let v = &mut data[(y * w + x) * c + ch];
                    *v = v.max(p).min(1.0);
                }
                if p > 0.95 {
                    mask.set(x, y, true);
                }
            }
        }
    }
    (ImageBuffer::new(w, h, c, data).expect("same shape"), mask)
}

/// Rotation by `yaw` about the camera y axis followed by `pitch` about x.
pub fn yaw_pitch(yaw: f64, pitch: f64) -> Matrix3<f64> {
    let ry = Rotation3::from_axis_angle(&Vector3::y_axis(), yaw);
    let rx = Rotation3::from_axis_angle(&Vector3::x_axis(), pitch);
    (ry * rx).into_inner()
}

/// Frames rendered from a texture canvas by rotating cameras.
#[derive(Debug, Clone)]
pub struct RotationSequence {
    pub frames: Vec<ImageBuffer>,
    /// Camera-to-canvas rotation per frame.
    pub rotations: Vec<Matrix3<f64>>,
    /// Canvas pixel -> frame pixel per frame.
    pub canvas_to_frame: Vec<Homography33>,
    /// Canvas intrinsics (same focal length, principal point moved).
    pub canvas_k: Matrix3<f64>,
    /// Landmark grid in canvas pixels and its projection into each frame.
    pub landmarks: Vec<(f64, f64)>,
    pub projections: Vec<Vec<Option<(f64, f64)>>>,
}

/// Canvas intrinsics whose principal point puts the frame's central crop at
/// an integer offset.
pub fn canvas_intrinsics(texture_w: usize, texture_h: usize, k: &CameraIntrinsics) -> Matrix3<f64> {
    let ox = ((texture_w as f64 - k.image_width as f64) / 2.0).floor();
    let oy = ((texture_h as f64 - k.image_height as f64) / 2.0).floor();
    Matrix3::new(k.fx, 0.0, k.cx + ox, 0.0, k.fy, k.cy + oy, 0.0, 0.0, 1.0)
}

/// Renders one frame per rotation by sampling `texture` through
/// `K_canvas R K⁻¹`; pixels mapping outside the texture are 0.
pub fn render_rotations(texture: &ImageBuffer, k: &CameraIntrinsics, rotations: &[Matrix3<f64>]) -> Result<RotationSequence> {
    k.validate()?;
    let kc = canvas_intrinsics(texture.width(), texture.height(), k);
    let km = k.matrix();
    let kinv = km.try_inverse().ok_or_else(|| Error::param("singular intrinsics"))?;
    let kcinv = kc.try_inverse().ok_or_else(|| Error::param("singular intrinsics"))?;
    let (w, h, c) = (k.image_width, k.image_height, texture.channels());
    let step = 16.0;
    let mut landmarks = Vec::new();
    let mut y = step / 2.0;
    while y < texture.height() as f64 {
        let mut x = step / 2.0;
        while x < texture.width() as f64 {
            landmarks.push((x, y));
            x += step;
        }
        y += step;
    }
    let mut frames = Vec::with_capacity(rotations.len());
    let mut c2f = Vec::with_capacity(rotations.len());
    let mut projections = Vec::with_capacity(rotations.len());
    for r in rotations {
        let f2c = kc * r * kinv;
        let mut data = vec![0.0; w * h * c];
        for v in 0..h {
            for u in 0..w {
                if let Some((sx, sy)) = project(&f2c, (u as f64, v as f64)) {
                    for ch in 0..c {
                        data[(v * w + u) * c + ch] = texture.sample(sx, sy, ch).unwrap_or(0.0);
                    }
                }
            }
        }
        frames.push(ImageBuffer::new(w, h, c, data)?);
        let g = km * r.transpose() * kcinv;
        projections.push(
            landmarks
                .iter()
                .map(|p| project(&g, *p).filter(|q| q.0 >= 0.0 && q.1 >= 0.0 && q.0 <= (w - 1) as f64 && q.1 <= (h - 1) as f64))
                .collect(),
        );
        c2f.push(Homography33::new(g)?);
    }
    Ok(RotationSequence { frames, rotations: rotations.to_vec(), canvas_to_frame: c2f, canvas_k: kc, landmarks, projections })
}

/// `n` seeded rotations sweeping yaw over `[-max, max]` with a pitch wobble
/// of `0.35 max` plus small jitter.
pub fn sweep_rotations(n: usize, max_angle: f64, seed: u64) -> Vec<Matrix3<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            if n == 1 {
                return yaw_pitch(0.0, 0.0);
            }
            let t = i as f64 / (n - 1) as f64;
            let jitter = if max_angle > 0.0 { rng.gen_range(-0.02..0.02) * max_angle } else { 0.0 };
            let yaw = -max_angle + 2.0 * max_angle * t;
            let pitch = 0.35 * max_angle * (2.0 * std::f64::consts::PI * t).sin() + jitter;
            yaw_pitch(yaw, pitch)
        })
        .collect()
}

/// Seeded rotation sweep over a texture canvas.
pub fn rotation_sequence(texture: &ImageBuffer, k: &CameraIntrinsics, n: usize, max_angle: f64, seed: u64) -> Result<RotationSequence> {
    if n == 0 {
        return Err(Error::param("need at least one frame"));
    }
    render_rotations(texture, k, &sweep_rotations(n, max_angle, seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetParams {
    pub frames: usize,
    pub size: usize,
    pub focal: f64,
    pub seed: u64,
    pub max_yaw_deg: f64,
    pub albedo: f64,
    pub bump_coverage: f64,
    pub specular_count: (usize, usize),
    pub specular_radius: (f64, f64),
    /// Vignetting gain at the corners is `1 - vignette`.
    pub vignette: f64,
    pub blur_sigma: f64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            frames: 100,
            size: 128,
            focal: 600.0,
            seed: 7,
            max_yaw_deg: 7.0,
            albedo: 0.75,
            bump_coverage: 0.36,
            specular_count: (3, 6),
            specular_radius: (4.0, 8.0),
            vignette: 0.4,
            blur_sigma: 2.0,
        }
    }
}

/// Rendered sequence with clean frames, corrupted frames and ground truth.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub params: DatasetParams,
    pub intrinsics: CameraIntrinsics,
    pub light: LightModel,
    pub surface: AnalyticSurface,
    pub texture: ImageBuffer,
    pub clean_frames: Vec<ImageBuffer>,
    pub frames: Vec<ImageBuffer>,
    pub specular_masks: Vec<BinaryMask>,
    pub vignette: VignetteModel,
    pub sequence: RotationSequence,
    pub reference: ReferenceScene,
}

/// The standard benchmark: a bumpy floor under frontal light, swept by a
/// rotating camera, then blurred, vignetted and given specular highlights.
pub fn standard_dataset(params: &DatasetParams) -> Result<Dataset> {
    let p = *params;
    if p.frames == 0 || p.size < 32 {
        return Err(Error::param("dataset needs >= 1 frame of at least 32 px"));
    }
    let s = p.size as f64;
    let k = CameraIntrinsics::pinhole(p.size, p.size, p.focal, p.focal, (s - 1.0) / 2.0, (s - 1.0) / 2.0);
    let max = p.max_yaw_deg.to_radians();
    let tw = p.size + 2 * (p.focal * max.tan()).ceil() as usize + 24;
    let th = p.size + 2 * (p.focal * (0.4 * max).tan()).ceil() as usize + 24;
    let bumps = AnalyticSurface::random_bumps(tw as f64, th as f64, (4.0, 9.0), p.bump_coverage, 0.35, p.seed ^ 0xB0B);
    let surface = AnalyticSurface::Bumps { bumps };
    let light = LightModel::new(0.0, 0.0, p.albedo)?;
    let (texture, depth) = render_lambertian(&surface, &light, tw, th)?;
    let sequence = rotation_sequence(&texture, &k, p.frames, max, p.seed)?;
    let vignette = VignetteModel::new(p.size, p.size, -p.vignette, 0.0, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed ^ 0x5EC);
    let mut frames = Vec::with_capacity(p.frames);
    let mut masks = Vec::with_capacity(p.frames);
    for f in &sequence.frames {
        let blurred = if p.blur_sigma > 0.0 { gaussian_blur(f, p.blur_sigma)? } else { f.clone() };
        let vig = apply_vignette(&blurred, &vignette)?;
        let n = rng.gen_range(p.specular_count.0..=p.specular_count.1);
        let (img, m) = inject_speculars(&vig, n, p.specular_radius, rng.gen())?;
        frames.push(img);
        masks.push(m);
    }
    let reference = ReferenceScene { depth: depth.z, frame_homographies: sequence.canvas_to_frame.clone() };
    Ok(Dataset {
        params: p,
        intrinsics: k,
        light,
        surface,
        texture,
        clean_frames: sequence.frames.clone(),
        frames,
        specular_masks: masks,
        vignette,
        sequence,
        reference,
    })
}
