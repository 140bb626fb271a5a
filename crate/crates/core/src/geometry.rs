//! Planar homographies, normalized DLT, RANSAC and pose decomposition.

use crate::calibration::CameraIntrinsics;
use crate::error::{Error, Result};
use nalgebra::{Matrix3, SymmetricEigen, Vector3, SMatrix};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// 3x3 projective transform, stored with unit Frobenius norm and `h33 >= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography33(Matrix3<f64>);

impl Homography33 {
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        let n = m.norm();
        if !n.is_finite() || n == 0.0 {
            return Err(Error::Degenerate("homography has zero or non-finite norm".into()));
        }
        let mut h = m / n;
        if h[(2, 2)] < 0.0 || (h[(2, 2)] == 0.0 && first_nonzero(&h) < 0.0) {
            h = -h;
        }
        if h.determinant().abs() <= 1e-12 {
            return Err(Error::Degenerate("homography is singular".into()));
        }
        Ok(Self(h))
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity()).expect("identity is regular")
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self::new(Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0)).expect("translation is regular")
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Matrix scaled so that `h33 = 1` when possible.
    pub fn unit_h33(&self) -> Matrix3<f64> {
        if self.0[(2, 2)].abs() > 1e-300 {
            self.0 / self.0[(2, 2)]
        } else {
            self.0
        }
    }

    pub fn determinant(&self) -> f64 {
        self.0.determinant()
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self.0.try_inverse().ok_or_else(|| Error::Degenerate("homography not invertible".into()))?;
        Self::new(inv)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Homography33) -> Result<Self> {
        Self::new(self.0 * other.0)
    }

    /// Homogeneous transform plus perspective divide; `None` near infinity.
    #[inline]
    pub fn project(&self, p: (f64, f64)) -> Option<(f64, f64)> {
        project(&self.0, p)
    }

    /// Relative Frobenius distance between the normalized matrices.
    pub fn distance(&self, other: &Homography33) -> f64 {
        (self.0 - other.0).norm()
    }

    pub fn to_rows(&self) -> [f64; 9] {
        let m = self.unit_h33();
        [m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 0)], m[(1, 1)], m[(1, 2)], m[(2, 0)], m[(2, 1)], m[(2, 2)]]
    }

    pub fn from_rows(r: &[f64; 9]) -> Result<Self> {
        Self::new(Matrix3::from_row_slice(r))
    }
}

fn first_nonzero(m: &Matrix3<f64>) -> f64 {
    m.as_slice().iter().copied().find(|v| *v != 0.0).unwrap_or(0.0)
}

#[inline]
pub(crate) fn project(m: &Matrix3<f64>, p: (f64, f64)) -> Option<(f64, f64)> {
    let x = m[(0, 0)] * p.0 + m[(0, 1)] * p.1 + m[(0, 2)];
    let y = m[(1, 0)] * p.0 + m[(1, 1)] * p.1 + m[(1, 2)];
    let w = m[(2, 0)] * p.0 + m[(2, 1)] * p.1 + m[(2, 2)];
    let scale = m[(2, 0)].abs() * p.0.abs() + m[(2, 1)].abs() * p.1.abs() + m[(2, 2)].abs();
    if w.abs() <= 1e-12 * scale.max(1e-300) {
        return None;
    }
    Some((x / w, y / w))
}

/// Similarity moving the centroid to the origin with mean distance √2.
fn normalizer(pts: &[(f64, f64)]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let (mx, my) = (mx / n, my / n);
    let md = pts.iter().map(|p| (p.0 - mx).hypot(p.1 - my)).sum::<f64>() / n;
    let s = if md > 1e-12 { std::f64::consts::SQRT_2 / md } else { 1.0 };
    Matrix3::new(s, 0.0, -s * mx, 0.0, s, -s * my, 0.0, 0.0, 1.0)
}

/// Normalized direct linear transform over `n >= 4` correspondences.
pub fn dlt_homography(pa: &[(f64, f64)], pb: &[(f64, f64)]) -> Result<Homography33> {
    if pa.len() != pb.len() {
        return Err(Error::dim("point lists differ in length"));
    }
    if pa.len() < 4 {
        return Err(Error::Degenerate("need at least 4 correspondences".into()));
    }
    let (ta, tb) = (normalizer(pa), normalizer(pb));
    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    for (a, b) in pa.iter().zip(pb) {
        let (x, y) = norm_pt(&ta, *a);
        let (u, v) = norm_pt(&tb, *b);
        let r1 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r2 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for i in 0..9 {
            for j in i..9 {
                ata[(i, j)] += r1[i] * r1[j] + r2[i] * r2[j];
            }
        }
    }
    for i in 0..9 {
        for j in 0..i {
            ata[(i, j)] = ata[(j, i)];
        }
    }
    let eig = SymmetricEigen::new(ata);
    let k = eig.eigenvalues.imin();
    let hv = eig.eigenvectors.column(k);
    let hn = Matrix3::new(hv[0], hv[1], hv[2], hv[3], hv[4], hv[5], hv[6], hv[7], hv[8]);
    let tb_inv = tb.try_inverse().ok_or_else(|| Error::Degenerate("degenerate point spread".into()))?;
    Homography33::new(tb_inv * hn * ta)
}

#[inline]
fn norm_pt(t: &Matrix3<f64>, p: (f64, f64)) -> (f64, f64) {
    (t[(0, 0)] * p.0 + t[(0, 2)], t[(1, 1)] * p.1 + t[(1, 2)])
}

/// `sqrt((d_fwd² + d_bwd²) / 2)`, or infinity if either side degenerates.
pub fn symmetric_transfer_error(h: &Matrix3<f64>, hinv: &Matrix3<f64>, a: (f64, f64), b: (f64, f64)) -> f64 {
    match (project(h, a), project(hinv, b)) {
        (Some(pb), Some(pa)) => {
            let df = (pb.0 - b.0).powi(2) + (pb.1 - b.1).powi(2);
            let db = (pa.0 - a.0).powi(2) + (pa.1 - a.1).powi(2);
            (0.5 * (df + db)).sqrt()
        }
        _ => f64::INFINITY,
    }
}

#[derive(Debug, Clone)]
pub struct RansacResult {
    pub homography: Homography33,
    pub inliers: Vec<usize>,
    /// Largest inlier count among the sampled minimal models.
    pub best_sample_inliers: usize,
    pub iterations: usize,
}

fn collinear(p: &[(f64, f64); 4]) -> bool {
    let tri = |a: (f64, f64), b: (f64, f64), c: (f64, f64)| {
        let area = ((b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)).abs();
        let scale = ((b.0 - a.0).hypot(b.1 - a.1)).max((c.0 - a.0).hypot(c.1 - a.1));
        area <= 1e-6 * scale * scale + 1e-12
    };
    tri(p[0], p[1], p[2]) || tri(p[0], p[1], p[3]) || tri(p[0], p[2], p[3]) || tri(p[1], p[2], p[3])
}

fn inliers_of(h: &Homography33, pa: &[(f64, f64)], pb: &[(f64, f64)], thr: f64) -> Vec<usize> {
    let Ok(inv) = h.inverse() else { return Vec::new() };
    (0..pa.len())
        .filter(|&i| symmetric_transfer_error(h.matrix(), inv.matrix(), pa[i], pb[i]) < thr)
        .collect()
}

/// RANSAC over 4-point normalized DLT models with symmetric transfer error;
/// the winner is refit on its inliers. Deterministic for a given seed.
pub fn estimate_homography_ransac(
    pa: &[(f64, f64)],
    pb: &[(f64, f64)],
    iters: usize,
    inlier_px: f64,
    seed: u64,
) -> Result<RansacResult> {
    if pa.len() != pb.len() {
        return Err(Error::dim("point lists differ in length"));
    }
    let n = pa.len();
    if n < 4 {
        return Err(Error::Degenerate(format!("RANSAC needs >= 4 correspondences, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Homography33, Vec<usize>)> = None;
    let mut needed = iters;
    let mut it = 0;
    while it < needed.min(iters) {
        it += 1;
        let idx = sample(&mut rng, n, 4);
        let sa = [pa[idx.index(0)], pa[idx.index(1)], pa[idx.index(2)], pa[idx.index(3)]];
        let sb = [pb[idx.index(0)], pb[idx.index(1)], pb[idx.index(2)], pb[idx.index(3)]];
        if collinear(&sa) || collinear(&sb) {
            continue;
        }
        let Ok(h) = dlt_homography(&sa, &sb) else { continue };
        let inl = inliers_of(&h, pa, pb, inlier_px);
        if inl.len() >= 4 && best.as_ref().map_or(true, |b| inl.len() > b.1.len()) {
            let w = inl.len() as f64 / n as f64;
            let miss = 1.0 - w.powi(4);
            needed = if miss <= 1e-12 {
                it
            } else {
                ((1e-4f64).ln() / miss.ln()).ceil().max(it as f64) as usize
            };
            best = Some((h, inl));
        }
    }
    let (h, inl) = best.ok_or_else(|| Error::Degenerate("no homography with >= 4 inliers".into()))?;
    let sampled = inl.len();
    let (mut h_best, mut inl_best) = (h, inl);
    for _ in 0..5 {
        let sa: Vec<_> = inl_best.iter().map(|&i| pa[i]).collect();
        let sb: Vec<_> = inl_best.iter().map(|&i| pb[i]).collect();
        let Ok(h2) = dlt_homography(&sa, &sb) else { break };
        let inl2 = inliers_of(&h2, pa, pb, inlier_px);
        if inl2.len() < inl_best.len() {
            break;
        }
        let same = inl2 == inl_best;
        h_best = h2;
        inl_best = inl2;
        if same {
            break;
        }
    }
    Ok(RansacResult { homography: h_best, inliers: inl_best, best_sample_inliers: sampled, iterations: it })
}

/// Rigid camera pose; translation is defined up to scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for CameraPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl CameraPose {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn rotation_angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }
}

pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// Closest rotation in the Frobenius sense.
pub fn project_to_so3(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut d = Matrix3::identity();
        d[(2, 2)] = -1.0;
        r = u * d * vt;
    }
    r
}

/// Rodrigues formula for an axis-angle vector.
pub fn exp_so3(w: &Vector3<f64>) -> Matrix3<f64> {
    let th = w.norm();
    let k = skew(w);
    if th < 1e-12 {
        return Matrix3::identity() + k;
    }
    Matrix3::identity() + k * (th.sin() / th) + k * k * ((1.0 - th.cos()) / (th * th))
}

pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Decomposes `K⁻¹ H K` of a plane-induced homography into rotation and
/// unit translation. Among the solutions reproducing `H` with the plane in
/// front of the camera, the one with the smallest rotation angle wins.
pub fn pose_from_homography(h: &Homography33, k: &CameraIntrinsics) -> Result<CameraPose> {
    let km = k.matrix();
    let kinv = km.try_inverse().ok_or_else(|| Error::param("singular intrinsics"))?;
    let mut hc = kinv * h.matrix() * km;
    if hc.determinant() < 0.0 {
        hc = -hc;
    }
    let svd = hc.svd(true, true);
    let (u0, vt0) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut order = [0usize, 1, 2];
    order.sort_by(|a, b| svd.singular_values[*b].total_cmp(&svd.singular_values[*a]));
    let d: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let u = Matrix3::from_columns(&[u0.column(order[0]), u0.column(order[1]), u0.column(order[2])]);
    let v = Matrix3::from_columns(&[
        vt0.row(order[0]).transpose(),
        vt0.row(order[1]).transpose(),
        vt0.row(order[2]).transpose(),
    ]);
    let (d1, d2, d3) = (d[0] / d[1], 1.0, d[2] / d[1]);
    let hn = hc / d[1];
    if d1 - d3 < 1e-7 {
        return Ok(CameraPose { rotation: project_to_so3(&hn), translation: Vector3::zeros() });
    }
    let s = u.determinant() * v.determinant();
    let den = d1 * d1 - d3 * d3;
    let x1 = ((d1 * d1 - d2 * d2) / den).max(0.0).sqrt();
    let x3 = ((d2 * d2 - d3 * d3) / den).max(0.0).sqrt();
    let mut cands: Vec<(Matrix3<f64>, Vector3<f64>, Vector3<f64>)> = Vec::new();
    for e1 in [1.0, -1.0] {
        for e3 in [1.0, -1.0] {
            // d' = +d2
            let st = (d1 - d3) * x1 * x3 * e1 * e3 / d2;
            let ct = (d1 * x3 * x3 + d3 * x1 * x1) / d2;
            let rp = Matrix3::new(ct, 0.0, -st, 0.0, 1.0, 0.0, st, 0.0, ct);
            let tp = Vector3::new(e1 * x1, 0.0, -e3 * x3) * (d1 - d3);
            let np = Vector3::new(e1 * x1, 0.0, e3 * x3);
            cands.push((s * u * rp * v.transpose(), u * tp, v * np));
            // d' = -d2
            let sp = (d1 + d3) * x1 * x3 * e1 * e3 / d2;
            let cp = (d3 * x1 * x1 - d1 * x3 * x3) / d2;
            let rm = Matrix3::new(cp, 0.0, sp, 0.0, -1.0, 0.0, sp, 0.0, -cp);
            let tm = Vector3::new(e1 * x1, 0.0, e3 * x3) * (d1 + d3);
            cands.push((s * u * rm * v.transpose(), u * tm, v * np));
        }
    }
    let mut best: Option<(f64, CameraPose)> = None;
    for (r, t, n) in cands {
        if (r.determinant() - 1.0).abs() > 1e-6 {
            continue;
        }
        // Accept either overall sign of the reconstruction.
        let rec = r + t * n.transpose();
        let err = (rec - hn).norm().min((rec + hn).norm());
        if err > 1e-6 * hn.norm().max(1.0) || n.z <= 0.0 {
            continue;
        }
        let ang = rotation_angle(&r);
        if best.as_ref().map_or(true, |b| ang < b.0) {
            let tn = t.norm();
            let translation = if tn > 1e-6 { t / tn } else { Vector3::zeros() };
            best = Some((ang, CameraPose { rotation: project_to_so3(&r), translation }));
        }
    }
    best.map(|b| b.1).ok_or_else(|| Error::Degenerate("no admissible homography decomposition".into()))
}
