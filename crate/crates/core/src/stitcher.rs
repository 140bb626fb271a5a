//! Frame stitching: candidate selection, RANSAC edges, bundle adjustment
//! over a plane-induced pose model, and multi-band blending.

use crate::calibration::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::features::{extract_dense, match_descriptors, DenseDescriptorSet};
use crate::geometry::{
    estimate_homography_ransac, exp_so3, pose_from_homography, project, project_to_so3, skew, symmetric_transfer_error,
    CameraPose, Homography33,
};
use crate::image::{convolve_separable, to_grayscale, ImageBuffer};
use crate::mask::BinaryMask;
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, VecDeque};

/// Top-`m` pool frames by match count; ties go to the lower frame id.
/// `pool` holds `(frame id, match count)`.
pub fn select_candidates(pool: &[(usize, usize)], m: usize) -> Vec<usize> {
    let mut v = pool.to_vec();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    v.into_iter().take(m).map(|p| p.0).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphEdge {
    pub i: usize,
    pub j: usize,
    /// Maps pixels of frame `i` to frame `j`.
    #[serde(with = "hrows")]
    pub homography: Homography33,
    pub raw_matches: usize,
    pub inlier_count: usize,
    /// Inlier correspondences (frame `i`, frame `j`).
    #[serde(skip)]
    pub points: Vec<((f64, f64), (f64, f64))>,
}

mod hrows {
    use crate::geometry::Homography33;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(h: &Homography33, s: S) -> Result<S::Ok, S::Error> {
        h.to_rows().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Homography33, D::Error> {
        let r = <[f64; 9]>::deserialize(d)?;
        Homography33::from_rows(&r).map_err(serde::de::Error::custom)
    }
}

/// Frames joined by edges that passed the inlier threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchGraph {
    pub nodes: Vec<usize>,
    pub edges: Vec<GraphEdge>,
    pub components: Vec<Vec<usize>>,
    pub min_inliers: usize,
}

impl MatchGraph {
    /// Drops edges under `min_inliers` and computes connected components,
    /// each sorted, ordered by smallest member.
    pub fn new(mut nodes: Vec<usize>, edges: Vec<GraphEdge>, min_inliers: usize) -> Self {
        nodes.sort_unstable();
        nodes.dedup();
        let edges: Vec<GraphEdge> = edges.into_iter().filter(|e| e.inlier_count >= min_inliers).collect();
        let pos: HashMap<usize, usize> = nodes.iter().enumerate().map(|(k, n)| (*n, k)).collect();
        let mut parent: Vec<usize> = (0..nodes.len()).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for e in &edges {
            if let (Some(&a), Some(&b)) = (pos.get(&e.i), pos.get(&e.j)) {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for k in 0..nodes.len() {
            let r = find(&mut parent, k);
            groups.entry(r).or_default().push(nodes[k]);
        }
        let mut components: Vec<Vec<usize>> = groups.into_values().collect();
        components.sort_by_key(|c| c[0]);
        Self { nodes, edges, components, min_inliers }
    }

    /// Largest component; ties go to the one holding the lowest id.
    pub fn largest_component(&self) -> Option<&Vec<usize>> {
        self.components.iter().fold(None, |best: Option<&Vec<usize>>, c| match best {
            Some(b) if b.len() >= c.len() => Some(b),
            _ => Some(c),
        })
    }
}

// ---------------------------------------------------------------------------
// Bundle adjustment
// ---------------------------------------------------------------------------

/// Homography from the anchor image to frame `k` for the plane `z = 1` of
/// the anchor camera: `K (R + t e3ᵀ) K⁻¹`.
pub fn anchor_homography(pose: &CameraPose, k: &Matrix3<f64>, kinv: &Matrix3<f64>) -> Matrix3<f64> {
    let mut m = pose.rotation;
    for r in 0..3 {
        m[(r, 2)] += pose.translation[r];
    }
    k * m * kinv
}

/// Pose whose anchor homography best matches `g` (exact for model-consistent input).
pub fn pose_from_anchor_homography(g: &Matrix3<f64>, k: &Matrix3<f64>, kinv: &Matrix3<f64>) -> CameraPose {
    let mut m = kinv * g * k;
    let s = 0.5 * (m.column(0).norm() + m.column(1).norm());
    if s > 0.0 {
        m /= s;
    }
    if m.determinant() < 0.0 {
        m = -m;
    }
    let mut a = m;
    let c3 = m.column(0).cross(&m.column(1));
    a.set_column(2, &c3);
    let r = project_to_so3(&a);
    let t = m.column(2) - r.column(2);
    CameraPose { rotation: r, translation: t.into() }
}

struct FrameState {
    g: Matrix3<f64>,
    ginv: Matrix3<f64>,
    dg: [Matrix3<f64>; 6],
}

fn frame_state(pose: &CameraPose, k: &Matrix3<f64>, kinv: &Matrix3<f64>) -> FrameState {
    let g = anchor_homography(pose, k, kinv);
    let ginv = g.try_inverse().unwrap_or_else(Matrix3::identity);
    let e = [Vector3::x(), Vector3::y(), Vector3::z()];
    let mut dg = [Matrix3::zeros(); 6];
    for a in 0..3 {
        dg[a] = k * skew(&e[a]) * pose.rotation * kinv;
        let mut m = Matrix3::zeros();
        m[(a, 2)] = 1.0;
        dg[3 + a] = k * m * kinv;
    }
    FrameState { g, ginv, dg }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BundleParams {
    pub max_iters: usize,
    pub initial_lambda: f64,
    pub rel_tol: f64,
    pub grad_tol: f64,
    pub max_lambda: f64,
    /// Optimize the plane-induced translation `t` as well as `R`. Off gives
    /// the pure-rotation camera model.
    pub translation: bool,
}

impl Default for BundleParams {
    fn default() -> Self {
        Self { max_iters: 100, initial_lambda: 1e-3, rel_tol: 1e-8, grad_tol: 1e-10, max_lambda: 1e10, translation: false }
    }
}

/// Freezes the translation block of every frame so the solve leaves it unchanged.
fn pin_translation(jtj: &mut DMatrix<f64>, jtr: &mut DVector<f64>) {
    let n = jtr.len();
    for row in (0..n).filter(|r| r % 6 >= 3) {
        jtj.row_mut(row).fill(0.0);
        jtj.column_mut(row).fill(0.0);
        jtj[(row, row)] = 1.0;
        jtr[row] = 0.0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Gradient,
    RelativeDecrease,
    MaxIterations,
    DampingOverflow,
    NoFreeFrames,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BundleResult {
    #[serde(skip)]
    pub poses: Vec<CameraPose>,
    /// Cost before optimization followed by the cost after every accepted step.
    pub cost_history: Vec<f64>,
    pub iterations: usize,
    pub termination: Vec<Termination>,
}

impl BundleResult {
    pub fn final_cost(&self) -> f64 {
        *self.cost_history.last().unwrap_or(&0.0)
    }
}

/// Sum of squared forward and backward transfer errors over edges whose
/// endpoints are both in `members`.
pub fn bundle_cost(graph: &MatchGraph, k: &CameraIntrinsics, poses: &[CameraPose], members: &[usize]) -> f64 {
    let km = k.matrix();
    let kinv = km.try_inverse().expect("valid intrinsics");
    let set: std::collections::HashSet<usize> = members.iter().copied().collect();
    let mut cost = 0.0;
    for e in graph.edges.iter().filter(|e| set.contains(&e.i) && set.contains(&e.j)) {
        let gi = anchor_homography(&poses[e.i], &km, &kinv);
        let gj = anchor_homography(&poses[e.j], &km, &kinv);
        let (Some(gii), Some(gji)) = (gi.try_inverse(), gj.try_inverse()) else { return f64::INFINITY };
        let (hij, hji) = (gj * gii, gi * gji);
        for (a, b) in &e.points {
            match (project(&hij, *a), project(&hji, *b)) {
                (Some(pb), Some(pa)) => {
                    cost += (pb.0 - b.0).powi(2) + (pb.1 - b.1).powi(2) + (pa.0 - a.0).powi(2) + (pa.1 - a.1).powi(2)
                }
                _ => return f64::INFINITY,
            }
        }
    }
    cost
}

/// Mean symmetric transfer error (pixels) over all correspondences.
pub fn mean_transfer_error(graph: &MatchGraph, k: &CameraIntrinsics, poses: &[CameraPose], members: &[usize]) -> f64 {
    let km = k.matrix();
    let kinv = km.try_inverse().expect("valid intrinsics");
    let set: std::collections::HashSet<usize> = members.iter().copied().collect();
    let (mut s, mut n) = (0.0, 0usize);
    for e in graph.edges.iter().filter(|e| set.contains(&e.i) && set.contains(&e.j)) {
        let gi = anchor_homography(&poses[e.i], &km, &kinv);
        let gj = anchor_homography(&poses[e.j], &km, &kinv);
        let h = gj * gi.try_inverse().unwrap_or_else(Matrix3::identity);
        let hinv = h.try_inverse().unwrap_or_else(Matrix3::identity);
        for (a, b) in &e.points {
            s += symmetric_transfer_error(&h, &hinv, *a, *b);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Normal equations `JᵀJ`, gradient `Jᵀr` and cost for the free frames of a
/// component (`slot[frame]` = parameter block index).
fn normal_equations(
    graph: &MatchGraph,
    edges: &[usize],
    states: &HashMap<usize, FrameState>,
    slot: &HashMap<usize, usize>,
    nparams: usize,
) -> (DMatrix<f64>, DVector<f64>, f64) {
    let mut jtj = DMatrix::<f64>::zeros(nparams, nparams);
    let mut jtr = DVector::<f64>::zeros(nparams);
    let mut cost = 0.0;
    for &ei in edges {
        let e = &graph.edges[ei];
        let (si, sj) = (&states[&e.i], &states[&e.j]);
        let (bi, bj) = (slot.get(&e.i).copied(), slot.get(&e.j).copied());
        let hij = sj.g * si.ginv;
        let hji = si.g * sj.ginv;
        for (a, b) in &e.points {
            // Forward a -> b and backward b -> a; `jac[k]` holds d(residual)/d(param k)
            // with params [frame i (6), frame j (6)].
            for dir in 0..2 {
                let (src, dst, s_from, s_to, h) = if dir == 0 { (*a, *b, si, sj, &hij) } else { (*b, *a, sj, si, &hji) };
                let xs = Vector3::new(src.0, src.1, 1.0);
                let v = s_from.ginv * xs;
                let y = s_to.g * v;
                if y.z.abs() < 1e-12 {
                    continue;
                }
                let (px, py) = (y.x / y.z, y.y / y.z);
                let r = [px - dst.0, py - dst.1];
                cost += r[0] * r[0] + r[1] * r[1];
                let mut jac = [[0.0f64; 2]; 12];
                let dproj = |dy: Vector3<f64>| [(dy.x - px * dy.z) / y.z, (dy.y - py * dy.z) / y.z];
                for p in 0..6 {
                    let d_to = dproj(s_to.dg[p] * v);
                    let d_from = dproj(-(h * (s_from.dg[p] * v)));
                    // `from` is frame i for the forward direction.
                    let (ji, jj) = if dir == 0 { (d_from, d_to) } else { (d_to, d_from) };
                    jac[p] = ji;
                    jac[6 + p] = jj;
                }
                let blocks = [(bi, 0usize), (bj, 6usize)];
                for (ba, oa) in blocks {
                    let Some(ba) = ba else { continue };
                    for p in 0..6 {
                        let row = ba * 6 + p;
                        let jp = jac[oa + p];
                        jtr[row] += jp[0] * r[0] + jp[1] * r[1];
                        for (bb, ob) in blocks {
                            let Some(bb) = bb else { continue };
                            for q in 0..6 {
                                let jq = jac[ob + q];
                                jtj[(row, bb * 6 + q)] += jp[0] * jq[0] + jp[1] * jq[1];
                            }
                        }
                    }
                }
            }
        }
    }
    (jtj, jtr, cost)
}

/// Gradient of [`bundle_cost`] with respect to the local parameters
/// `(δω, δt)` of every non-anchor member, in member order.
pub fn bundle_gradient(graph: &MatchGraph, k: &CameraIntrinsics, poses: &[CameraPose], members: &[usize]) -> Vec<f64> {
    let km = k.matrix();
    let kinv = km.try_inverse().expect("valid intrinsics");
    let (edges, states, slot, n) = component_setup(graph, &km, &kinv, poses, members);
    let (_, jtr, _) = normal_equations(graph, &edges, &states, &slot, n);
    jtr.iter().map(|v| 2.0 * v).collect()
}

type Setup = (Vec<usize>, HashMap<usize, FrameState>, HashMap<usize, usize>, usize);

fn component_setup(graph: &MatchGraph, km: &Matrix3<f64>, kinv: &Matrix3<f64>, poses: &[CameraPose], members: &[usize]) -> Setup {
    let mut sorted = members.to_vec();
    sorted.sort_unstable();
    let set: std::collections::HashSet<usize> = sorted.iter().copied().collect();
    let edges: Vec<usize> =
        (0..graph.edges.len()).filter(|&i| set.contains(&graph.edges[i].i) && set.contains(&graph.edges[i].j)).collect();
    let states = sorted.iter().map(|&f| (f, frame_state(&poses[f], km, kinv))).collect();
    let slot: HashMap<usize, usize> = sorted.iter().skip(1).enumerate().map(|(k, f)| (*f, k)).collect();
    let n = slot.len() * 6;
    (edges, states, slot, n)
}

/// Applies a local update `(δω, δt)` to a pose and re-orthonormalizes.
pub fn retract(pose: &CameraPose, delta: &[f64]) -> CameraPose {
    let w = Vector3::new(delta[0], delta[1], delta[2]);
    let r = project_to_so3(&(exp_so3(&w) * pose.rotation));
    CameraPose { rotation: r, translation: pose.translation + Vector3::new(delta[3], delta[4], delta[5]) }
}

/// Levenberg-Marquardt over every component; the lowest id of each
/// component is the fixed anchor. `poses` is indexed by frame id.
pub fn bundle_adjust(graph: &MatchGraph, k: &CameraIntrinsics, initial: &[CameraPose], params: &BundleParams) -> Result<BundleResult> {
    if let Some(max) = graph.nodes.iter().max() {
        if *max >= initial.len() {
            return Err(Error::dim("initial pose list shorter than the frame ids"));
        }
    }
    let parts: Vec<Result<(Vec<(usize, CameraPose)>, Vec<f64>, usize, Termination)>> = graph
        .components
        .par_iter()
        .map(|comp| adjust_component(graph, k, initial, comp, params))
        .collect();
    let mut poses = initial.to_vec();
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut termination = Vec::new();
    let mut total0 = 0.0;
    let mut total1 = 0.0;
    for part in parts {
        let (ps, hist, it, term) = part?;
        for (f, p) in ps {
            poses[f] = p;
        }
        total0 += hist.first().copied().unwrap_or(0.0);
        total1 += hist.last().copied().unwrap_or(0.0);
        iterations += it;
        termination.push(term);
        if history.is_empty() || hist.len() > history.len() {
            history = hist;
        }
    }
    // Single-component graphs report their own history; otherwise summarize.
    if graph.components.len() != 1 {
        history = vec![total0, total1];
    }
    Ok(BundleResult { poses, cost_history: history, iterations, termination })
}

type ComponentOut = (Vec<(usize, CameraPose)>, Vec<f64>, usize, Termination);

fn adjust_component(
    graph: &MatchGraph,
    k: &CameraIntrinsics,
    initial: &[CameraPose],
    comp: &[usize],
    params: &BundleParams,
) -> Result<ComponentOut> {
    let km = k.matrix();
    let kinv = km.try_inverse().ok_or_else(|| Error::param("singular intrinsics"))?;
    let mut sorted = comp.to_vec();
    sorted.sort_unstable();
    let mut poses: Vec<CameraPose> = initial.to_vec();
    let members = sorted.clone();
    let (edges, mut states, slot, n) = component_setup(graph, &km, &kinv, &poses, &members);
    if n == 0 {
        return Ok((vec![], vec![0.0], 0, Termination::NoFreeFrames));
    }
    let (mut jtj, mut jtr, mut cost) = normal_equations(graph, &edges, &states, &slot, n);
    if !params.translation {
        pin_translation(&mut jtj, &mut jtr);
    }
    let mut history = vec![cost];
    let mut lambda = params.initial_lambda;
    let mut termination = Termination::MaxIterations;
    let mut it = 0;
    while it < params.max_iters {
        if jtr.amax() * 2.0 < params.grad_tol {
            termination = Termination::Gradient;
            break;
        }
        it += 1;
        let maxdiag = (0..n).map(|i| jtj[(i, i)]).fold(0.0f64, f64::max).max(1e-300);
        let mut accepted = false;
        while !accepted {
            let mut a = jtj.clone();
            for i in 0..n {
                a[(i, i)] += lambda * jtj[(i, i)].max(1e-9 * maxdiag);
            }
            let step = a.cholesky().map(|c| c.solve(&(-&jtr)));
            if let Some(delta) = step {
                let mut trial = poses.clone();
                for (&f, &s) in &slot {
                    trial[f] = retract(&poses[f], &delta.as_slice()[s * 6..s * 6 + 6]);
                }
                let trial_states: HashMap<usize, FrameState> =
                    members.iter().map(|&f| (f, frame_state(&trial[f], &km, &kinv))).collect();
                let (mut tj, mut tr, tc) = normal_equations(graph, &edges, &trial_states, &slot, n);
                if !params.translation {
                    pin_translation(&mut tj, &mut tr);
                }
                if tc.is_finite() && tc < cost {
                    let rel = (cost - tc) / cost.max(1e-300);
                    poses = trial;
                    states = trial_states;
                    jtj = tj;
                    jtr = tr;
                    cost = tc;
                    history.push(cost);
                    lambda = (lambda / 10.0).max(1e-15);
                    accepted = true;
                    if rel < params.rel_tol {
                        termination = Termination::RelativeDecrease;
                    }
                    continue;
                }
            }
            lambda *= 10.0;
            if lambda > params.max_lambda {
                termination = Termination::DampingOverflow;
                break;
            }
        }
        if !accepted || termination == Termination::RelativeDecrease {
            break;
        }
    }
    let _ = &states;
    let out = members.iter().map(|&f| (f, poses[f])).collect();
    Ok((out, history, it, termination))
}

// ---------------------------------------------------------------------------
// Multi-band blending
// ---------------------------------------------------------------------------

const PYR_KERNEL: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

#[derive(Debug, Clone)]
struct Plane {
    w: usize,
    h: usize,
    d: Vec<f64>,
}

fn reduce(p: &Plane) -> Plane {
    let blurred = convolve_separable(&p.d, p.w, p.h, &PYR_KERNEL);
    let (w2, h2) = (p.w.div_ceil(2), p.h.div_ceil(2));
    let mut d = vec![0.0; w2 * h2];
    for y in 0..h2 {
        for x in 0..w2 {
            d[y * w2 + x] = blurred[(2 * y) * p.w + 2 * x];
        }
    }
    Plane { w: w2, h: h2, d }
}

fn expand(p: &Plane, w: usize, h: usize) -> Plane {
    // Zero insertion followed by the 5-tap kernel scaled by 2 per axis.
    let mut tmp = vec![0.0; w * p.h];
    for y in 0..p.h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kv) in PYR_KERNEL.iter().enumerate() {
                let sx = x as i64 + t as i64 - 2;
                if sx.rem_euclid(2) != 0 {
                    continue;
                }
                let i = (sx / 2).clamp(0, p.w as i64 - 1) as usize;
                acc += 2.0 * kv * p.d[y * p.w + i];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut d = vec![0.0; w * h];
    for y in 0..h {
        for (t, kv) in PYR_KERNEL.iter().enumerate() {
            let sy = y as i64 + t as i64 - 2;
            if sy.rem_euclid(2) != 0 {
                continue;
            }
            let j = (sy / 2).clamp(0, p.h as i64 - 1) as usize;
            for x in 0..w {
                d[y * w + x] += 2.0 * kv * tmp[j * w + x];
            }
        }
    }
    Plane { w, h, d }
}

fn gaussian_pyramid(p: Plane, levels: usize) -> Vec<Plane> {
    let mut v = vec![p];
    while v.len() < levels {
        let next = reduce(v.last().expect("non-empty"));
        v.push(next);
    }
    v
}

fn laplacian_pyramid(p: Plane, levels: usize) -> Vec<Plane> {
    let g = gaussian_pyramid(p, levels);
    let mut l = Vec::with_capacity(levels);
    for k in 0..levels {
        if k + 1 == levels {
            l.push(g[k].clone());
        } else {
            let up = expand(&g[k + 1], g[k].w, g[k].h);
            l.push(Plane { w: g[k].w, h: g[k].h, d: g[k].d.iter().zip(&up.d).map(|(a, b)| a - b).collect() });
        }
    }
    l
}

/// Canvas produced by [`multiband_blend`].
#[derive(Debug, Clone)]
pub struct BlendOutput {
    pub canvas: ImageBuffer,
    /// Set where no frame covers the canvas.
    pub uncovered: BinaryMask,
    /// Index of the frame with the largest weight per pixel, -1 if uncovered.
    pub seams: Vec<i32>,
}

fn border_weight(x: f64, y: f64, w: usize, h: usize) -> f64 {
    if x < 0.0 || y < 0.0 || x > (w - 1) as f64 || y > (h - 1) as f64 {
        return 0.0;
    }
    (x + 1.0).min(y + 1.0).min(w as f64 - x).min(h as f64 - y)
}

/// True when `m` keeps the frame outline convex with the same orientation
/// and scales its area by a factor within `[1/4, 4]`.
pub fn warp_is_plausible(m: &Matrix3<f64>, w: usize, h: usize) -> bool {
    let (w, h) = ((w - 1) as f64, (h - 1) as f64);
    let mut q = Vec::with_capacity(4);
    for c in [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)] {
        let z = m[(2, 0)] * c.0 + m[(2, 1)] * c.1 + m[(2, 2)];
        if z <= 1e-9 * m.abs().max() {
            return false;
        }
        match project(m, c) {
            Some(p) => q.push(p),
            None => return false,
        }
    }
    let cross = |a: (f64, f64), b: (f64, f64), c: (f64, f64)| (b.0 - a.0) * (c.1 - b.1) - (b.1 - a.1) * (c.0 - b.0);
    if !(0..4).all(|i| cross(q[i], q[(i + 1) % 4], q[(i + 2) % 4]) > 0.0) {
        return false;
    }
    let area = 0.5 * (0..4).map(|i| q[i].0 * q[(i + 1) % 4].1 - q[(i + 1) % 4].0 * q[i].1).sum::<f64>();
    let ratio = area / (w * h);
    (0.25..=4.0).contains(&ratio)
}

/// Blends frames warped into a `canvas_w x canvas_h` canvas. `warps[k]` maps
/// frame pixels to canvas pixels. Weights are distance-to-frame-border maps
/// normalized to sum to 1; each Laplacian level is blended with the
/// Gaussian pyramid of the weights.
pub fn multiband_blend(
    frames: &[&ImageBuffer],
    warps: &[Homography33],
    canvas_w: usize,
    canvas_h: usize,
    bands: usize,
) -> Result<BlendOutput> {
    if bands < 1 {
        return Err(Error::param("bands must be >= 1"));
    }
    if frames.len() != warps.len() || frames.is_empty() {
        return Err(Error::param("need one warp per frame and at least one frame"));
    }
    let channels = frames[0].channels();
    if frames.iter().any(|f| f.channels() != channels) {
        return Err(Error::param("frames differ in channel count"));
    }
    let n = canvas_w * canvas_h;
    let inv: Vec<Matrix3<f64>> = warps.iter().map(|w| w.inverse().map(|h| *h.matrix())).collect::<Result<_>>()?;
    // Per-frame data is recomputed on demand so memory stays O(canvas).
    let source = |k: usize, i: usize| project(&inv[k], ((i % canvas_w) as f64, (i / canvas_w) as f64));
    let raw = |k: usize| -> Vec<f64> {
        let (fw, fh) = (frames[k].width(), frames[k].height());
        (0..n).map(|i| source(k, i).map_or(0.0, |p| border_weight(p.0, p.1, fw, fh))).collect()
    };
    let chunk = rayon::current_num_threads().max(1);
    let mut wsum = vec![0.0; n];
    let mut best = vec![(0.0f64, -1i32); n];
    for start in (0..frames.len()).step_by(chunk) {
        let ks: Vec<usize> = (start..(start + chunk).min(frames.len())).collect();
        let rs: Vec<Vec<f64>> = ks.par_iter().map(|&k| raw(k)).collect();
        for (&k, r) in ks.iter().zip(&rs) {
            for i in 0..n {
                wsum[i] += r[i];
                if r[i] > best[i].0 {
                    best[i] = (r[i], k as i32);
                }
            }
        }
    }
    if wsum.iter().all(|w| *w <= 0.0) {
        return Err(Error::Degenerate("no frame covers the canvas".into()));
    }
    let levels = bands;
    let mut out_planes = Vec::with_capacity(channels);
    for c in 0..channels {
        let mut acc: Vec<Plane> = Vec::new();
        let mut wacc: Vec<Plane> = Vec::new();
        for start in (0..frames.len()).step_by(chunk) {
            let ks: Vec<usize> = (start..(start + chunk).min(frames.len())).collect();
            let contribs: Vec<(Vec<Plane>, Vec<Plane>)> = ks
                .par_iter()
                .map(|&k| {
                    let f = frames[k];
                    let img: Vec<f64> = (0..n).map(|i| source(k, i).map_or(0.0, |p| f.sample_clamped(p.0, p.1, c))).collect();
                    let wn: Vec<f64> = raw(k).iter().zip(&wsum).map(|(r, s)| if *s > 0.0 { r / s } else { 0.0 }).collect();
                    let lp = laplacian_pyramid(Plane { w: canvas_w, h: canvas_h, d: img }, levels);
                    let gp = gaussian_pyramid(Plane { w: canvas_w, h: canvas_h, d: wn }, levels);
                    (lp, gp)
                })
                .collect();
            for (lp, gp) in contribs {
                if acc.is_empty() {
                    acc = lp.iter().map(|p| Plane { w: p.w, h: p.h, d: vec![0.0; p.d.len()] }).collect();
                    wacc = acc.clone();
                }
                for l in 0..levels {
                    for i in 0..lp[l].d.len() {
                        acc[l].d[i] += lp[l].d[i] * gp[l].d[i];
                        wacc[l].d[i] += gp[l].d[i];
                    }
                }
            }
        }
        let blended: Vec<Plane> = acc
            .into_iter()
            .zip(wacc)
            .map(|(a, w)| Plane {
                w: a.w,
                h: a.h,
                d: a.d.iter().zip(&w.d).map(|(v, s)| if *s > 1e-12 { v / s } else { 0.0 }).collect(),
            })
            .collect();
        let mut cur = blended[levels - 1].clone();
        for l in (0..levels - 1).rev() {
            let up = expand(&cur, blended[l].w, blended[l].h);
            cur = Plane { w: up.w, h: up.h, d: blended[l].d.iter().zip(&up.d).map(|(a, b)| a + b).collect() };
        }
        for i in 0..n {
            if wsum[i] <= 0.0 {
                cur.d[i] = 0.0;
            }
        }
        out_planes.push(ImageBuffer::new(canvas_w, canvas_h, 1, cur.d)?);
    }
    let canvas = if channels == 1 { out_planes.pop().expect("one plane") } else { ImageBuffer::from_channels(&out_planes)? };
    let uncovered = BinaryMask::from_bits(canvas_w, canvas_h, wsum.iter().map(|w| *w <= 0.0).collect())?;
    Ok(BlendOutput { canvas, uncovered, seams: best.iter().map(|b| b.1).collect() })
}

/// Normalized blend weights of every frame at every canvas pixel (level 0).
pub fn blend_weights(frames: &[(usize, usize)], warps: &[Homography33], canvas_w: usize, canvas_h: usize) -> Result<Vec<Vec<f64>>> {
    let n = canvas_w * canvas_h;
    let mut raw = Vec::with_capacity(frames.len());
    for (&(fw, fh), w) in frames.iter().zip(warps) {
        let m = *w.inverse()?.matrix();
        raw.push(
            (0..n)
                .map(|i| {
                    project(&m, ((i % canvas_w) as f64, (i / canvas_w) as f64))
                        .map_or(0.0, |p| border_weight(p.0, p.1, fw, fh))
                })
                .collect::<Vec<f64>>(),
        );
    }
    let mut sum = vec![0.0; n];
    for r in &raw {
        for i in 0..n {
            sum[i] += r[i];
        }
    }
    Ok(raw.into_iter().map(|r| r.iter().zip(&sum).map(|(v, s)| if *s > 0.0 { v / s } else { 0.0 }).collect()).collect())
}

// ---------------------------------------------------------------------------
// Pairwise registration
// ---------------------------------------------------------------------------

/// Zero-mean, unit-norm patch of half-size `r` sampled at `(x, y)`.
fn patch(img: &ImageBuffer, x: f64, y: f64, r: i64) -> Option<Vec<f64>> {
    let (w, h) = (img.width() as f64, img.height() as f64);
    if x - (r as f64) < 0.0 || y - (r as f64) < 0.0 || x + (r as f64) > w - 1.0 || y + (r as f64) > h - 1.0 {
        return None;
    }
    let mut v = Vec::with_capacity(((2 * r + 1) * (2 * r + 1)) as usize);
    for dy in -r..=r {
        for dx in -r..=r {
            v.push(img.sample_clamped(x + dx as f64, y + dy as f64, 0));
        }
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|a| *a -= mean);
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n < 1e-9 {
        return None;
    }
    v.iter_mut().for_each(|a| *a /= n);
    Some(v)
}

/// Refines the location in `b` matching the patch of `a` at `pa`: integer
/// ZNCC search within `search` pixels of `pb`, then Lucas-Kanade on
/// normalized patches for the sub-pixel offset.
pub fn refine_correspondence(a: &ImageBuffer, b: &ImageBuffer, pa: (f64, f64), pb: (f64, f64), half: usize, search: usize) -> Option<(f64, f64)> {
    let r = half as i64;
    let ta = patch(a, pa.0, pa.1, r)?;
    let s = search as i64;
    let mut best = (f64::NEG_INFINITY, 0i64, 0i64);
    for dy in -s..=s {
        for dx in -s..=s {
            if let Some(tb) = patch(b, pb.0 + dx as f64, pb.1 + dy as f64, r) {
                let z: f64 = ta.iter().zip(&tb).map(|(u, v)| u * v).sum();
                if z > best.0 {
                    best = (z, dx, dy);
                }
            }
        }
    }
    if best.0 < 0.5 {
        return None;
    }
    let (mut x, mut y) = (pb.0 + best.1 as f64, pb.1 + best.2 as f64);
    // Gauss-Newton on the normalized residual.
    for _ in 0..8 {
        let tb = patch(b, x, y, r)?;
        let (mut h11, mut h12, mut h22, mut g1, mut g2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let gx = patch_gradient(b, x, y, r, true);
        let gy = patch_gradient(b, x, y, r, false);
        // Scale gradients by the same normalization as the patch.
        let raw = raw_patch(b, x, y, r);
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        let nrm = raw.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>().sqrt().max(1e-12);
        let mgx = gx.iter().sum::<f64>() / gx.len() as f64;
        let mgy = gy.iter().sum::<f64>() / gy.len() as f64;
        for k in 0..ta.len() {
            let jx = (gx[k] - mgx) / nrm;
            let jy = (gy[k] - mgy) / nrm;
            let e = tb[k] - ta[k];
            h11 += jx * jx;
            h12 += jx * jy;
            h22 += jy * jy;
            g1 += jx * e;
            g2 += jy * e;
        }
        let det = h11 * h22 - h12 * h12;
        if det.abs() < 1e-18 {
            break;
        }
        let sx = -(h22 * g1 - h12 * g2) / det;
        let sy = -(h11 * g2 - h12 * g1) / det;
        let (sx, sy) = (sx.clamp(-1.0, 1.0), sy.clamp(-1.0, 1.0));
        x += sx;
        y += sy;
        if sx.abs() < 1e-4 && sy.abs() < 1e-4 {
            break;
        }
    }
    if (x - pb.0).abs() > search as f64 + 1.0 || (y - pb.1).abs() > search as f64 + 1.0 {
        return None;
    }
    Some((x, y))
}

fn raw_patch(img: &ImageBuffer, x: f64, y: f64, r: i64) -> Vec<f64> {
    let mut v = Vec::with_capacity(((2 * r + 1) * (2 * r + 1)) as usize);
    for dy in -r..=r {
        for dx in -r..=r {
            v.push(img.sample_clamped(x + dx as f64, y + dy as f64, 0));
        }
    }
    v
}

fn patch_gradient(img: &ImageBuffer, x: f64, y: f64, r: i64, along_x: bool) -> Vec<f64> {
    let mut v = Vec::with_capacity(((2 * r + 1) * (2 * r + 1)) as usize);
    let h = 0.5;
    for dy in -r..=r {
        for dx in -r..=r {
            let (px, py) = (x + dx as f64, y + dy as f64);
            let g = if along_x {
                img.sample_clamped(px + h, py, 0) - img.sample_clamped(px - h, py, 0)
            } else {
                img.sample_clamped(px, py + h, 0) - img.sample_clamped(px, py - h, 0)
            };
            v.push(g / (2.0 * h));
        }
    }
    v
}

// ---------------------------------------------------------------------------
// Full stitch
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StitchConfig {
    pub grid_step: usize,
    pub patch_size: usize,
    pub ratio: f64,
    /// Candidates kept per frame.
    pub candidates: usize,
    /// How many preceding frames form the candidate pool.
    pub window: usize,
    pub ransac_iters: usize,
    pub inlier_px: f64,
    pub seed: u64,
    pub min_inliers: usize,
    pub bands: usize,
    pub canvas_cap: usize,
    /// Sub-pixel refinement of grid matches before RANSAC.
    pub refine: bool,
    pub max_points_per_edge: usize,
    /// Plane-induced translation in the camera model (rotation only when off).
    pub translation: bool,
}

impl Default for StitchConfig {
    fn default() -> Self {
        Self {
            grid_step: 6,
            patch_size: 32,
            ratio: 0.75,
            candidates: 5,
            window: 8,
            ransac_iters: 1000,
            inlier_px: 2.0,
            seed: 0,
            min_inliers: 20,
            bands: 4,
            canvas_cap: 2048,
            refine: true,
            max_points_per_edge: 40,
            translation: false,
        }
    }
}

impl StitchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 8 || self.patch_size % 4 != 0 {
            return Err(Error::Config("stitch.patch_size must be >= 8 and divisible by 4".into()));
        }
        if self.grid_step == 0 || self.candidates == 0 || self.bands == 0 || self.ransac_iters == 0 {
            return Err(Error::Config("stitch.grid_step, candidates, bands and ransac_iters must be >= 1".into()));
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) || !(self.inlier_px > 0.0) {
            return Err(Error::Config("stitch.ratio must be in (0,1] and inlier_px > 0".into()));
        }
        if self.canvas_cap < 16 {
            return Err(Error::Config("stitch.canvas_cap must be >= 16".into()));
        }
        Ok(())
    }
}

/// Registers a frame pair: match, refine, RANSAC. Returns an edge when at
/// least four inliers were found (threshold filtering happens in the graph).
pub fn register_pair(
    fa: &ImageBuffer,
    fb: &ImageBuffer,
    da: &DenseDescriptorSet,
    db: &DenseDescriptorSet,
    cfg: &StitchConfig,
    seed: u64,
) -> Result<Option<GraphEdge>> {
    let m = match_descriptors(da, db, cfg.ratio)?;
    let raw = m.len();
    let (mut pa, mut pb) = (Vec::with_capacity(raw), Vec::with_capacity(raw));
    for p in &m.pairs {
        let a = da.points[p.index_a];
        let b = db.points[p.index_b];
        let (a, b) = ((a.0 as f64, a.1 as f64), (b.0 as f64, b.1 as f64));
        if cfg.refine {
            if let Some(r) = refine_correspondence(fa, fb, a, b, (cfg.patch_size / 2).min(8), cfg.grid_step / 2 + 1) {
                pa.push(a);
                pb.push(r);
            }
        } else {
            pa.push(a);
            pb.push(b);
        }
    }
    if pa.len() < 4 {
        return Ok(None);
    }
    let Ok(res) = estimate_homography_ransac(&pa, &pb, cfg.ransac_iters, cfg.inlier_px, seed) else {
        return Ok(None);
    };
    let points = res.inliers.iter().map(|&i| (pa[i], pb[i])).collect();
    Ok(Some(GraphEdge { i: 0, j: 0, homography: res.homography, raw_matches: raw, inlier_count: res.inliers.len(), points }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdgeReport {
    pub i: usize,
    pub j: usize,
    pub raw_matches: usize,
    pub inliers: usize,
    /// Relative rotation angle (degrees) from homography decomposition.
    pub rotation_deg: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StitchReport {
    pub frames: usize,
    pub unique_frames: usize,
    pub edges: Vec<EdgeReport>,
    pub components: Vec<Vec<usize>>,
    pub rendered_component: Vec<usize>,
    pub anchor: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub mean_transfer_error_px: f64,
    pub ba_iterations: usize,
    pub canvas_scale: f64,
    pub warnings: Vec<String>,
}

/// Global map of the largest connected component.
#[derive(Debug, Clone)]
pub struct StitchResult {
    pub canvas: ImageBuffer,
    /// Frame-to-canvas warp per input frame; `None` when not rendered.
    pub warps: Vec<Option<Homography33>>,
    pub uncovered: BinaryMask,
    pub seams: Vec<i32>,
    /// Canvas position of the anchor frame's origin.
    pub offset: (f64, f64),
    pub poses: Vec<Option<CameraPose>>,
}

/// Runs candidate selection, pairwise registration, graph construction,
/// bundle adjustment and blending of the largest component.
pub fn stitch(frames: &[ImageBuffer], k: &CameraIntrinsics, cfg: &StitchConfig) -> Result<(StitchResult, StitchReport)> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(Error::param("stitch needs at least one frame"));
    }
    let km = k.matrix();
    let kinv = km.try_inverse().ok_or_else(|| Error::param("singular intrinsics"))?;
    let mut warnings = Vec::new();

    // Identical frames collapse onto their first occurrence.
    let mut rep = vec![0usize; frames.len()];
    let mut unique: Vec<usize> = Vec::new();
    for (i, f) in frames.iter().enumerate() {
        rep[i] = unique.iter().copied().find(|&u| frames[u] == *f).unwrap_or_else(|| {
            unique.push(i);
            i
        });
    }
    let grays: Vec<ImageBuffer> = frames.iter().map(to_grayscale).collect();

    let passthrough = |warnings: Vec<String>, anchor: usize, edges: Vec<EdgeReport>, comps: Vec<Vec<usize>>| -> Result<(StitchResult, StitchReport)> {
        let f = &frames[anchor];
        let id = Homography33::identity();
        let warps = (0..frames.len()).map(|i| (rep[i] == anchor).then_some(id)).collect();
        let poses = (0..frames.len()).map(|i| (rep[i] == anchor).then(CameraPose::identity)).collect();
        let out = multiband_blend(&[f], &[id], f.width(), f.height(), cfg.bands)?;
        Ok((
            StitchResult { canvas: out.canvas, warps, uncovered: out.uncovered, seams: out.seams, offset: (0.0, 0.0), poses },
            StitchReport {
                frames: frames.len(),
                unique_frames: unique.len(),
                edges,
                components: comps,
                rendered_component: vec![anchor],
                anchor,
                initial_cost: 0.0,
                final_cost: 0.0,
                mean_transfer_error_px: 0.0,
                ba_iterations: 0,
                canvas_scale: 1.0,
                warnings,
            },
        ))
    };
    if unique.len() == 1 {
        return passthrough(warnings, unique[0], vec![], vec![vec![unique[0]]]);
    }

    let descs: Vec<DenseDescriptorSet> = unique
        .par_iter()
        .map(|&u| extract_dense(&grays[u], cfg.grid_step, cfg.patch_size))
        .collect::<Result<_>>()?;
    // Match counts against the preceding window.
    let pairs: Vec<(usize, usize)> =
        (0..unique.len()).flat_map(|p| (p.saturating_sub(cfg.window)..p).map(move |q| (p, q))).collect();
    let counts: Vec<usize> = pairs
        .par_iter()
        .map(|&(p, q)| match_descriptors(&descs[p], &descs[q], cfg.ratio).map(|m| m.len()))
        .collect::<Result<_>>()?;
    let mut chosen: Vec<(usize, usize)> = Vec::new();
    for p in 0..unique.len() {
        let pool: Vec<(usize, usize)> =
            pairs.iter().zip(&counts).filter(|((a, _), _)| *a == p).map(|((_, q), c)| (unique[*q], *c)).collect();
        for c in select_candidates(&pool, cfg.candidates) {
            let q = unique.iter().position(|u| *u == c).expect("pool frame is unique");
            chosen.push((q, p));
        }
    }
    let edges: Vec<Option<GraphEdge>> = chosen
        .par_iter()
        .map(|&(q, p)| {
            let (i, j) = (unique[q], unique[p]);
            let seed = cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add((i as u64) << 32 | j as u64);
            register_pair(&grays[i], &grays[j], &descs[q], &descs[p], cfg, seed).map(|e| {
                e.map(|mut e| {
                    e.i = i;
                    e.j = j;
                    e
                })
            })
        })
        .collect::<Result<_>>()?;
    let mut edges: Vec<GraphEdge> = edges.into_iter().flatten().collect();
    for e in &mut edges {
        if e.points.len() > cfg.max_points_per_edge && cfg.max_points_per_edge > 0 {
            let n = e.points.len();
            let keep = cfg.max_points_per_edge;
            e.points = (0..keep).map(|t| e.points[t * n / keep]).collect();
        }
    }
    let graph = MatchGraph::new(unique.clone(), edges, cfg.min_inliers);
    let edge_reports: Vec<EdgeReport> = graph
        .edges
        .iter()
        .map(|e| EdgeReport {
            i: e.i,
            j: e.j,
            raw_matches: e.raw_matches,
            inliers: e.inlier_count,
            rotation_deg: pose_from_homography(&e.homography, k).map(|p| p.rotation_angle().to_degrees()).unwrap_or(f64::NAN),
        })
        .collect();
    let comp = graph.largest_component().cloned().unwrap_or_default();
    if comp.len() < 2 {
        warnings.push("no component with >= 2 frames; passing the first frame through".into());
        return passthrough(warnings, unique[0], edge_reports, graph.components.clone());
    }
    let anchor = comp[0];

    // Initial poses by chaining edge homographies breadth-first from the anchor.
    let mut g_init: HashMap<usize, Matrix3<f64>> = HashMap::new();
    g_init.insert(anchor, Matrix3::identity());
    let mut queue = VecDeque::from([anchor]);
    while let Some(f) = queue.pop_front() {
        let gf = g_init[&f];
        let mut next: Vec<(usize, Matrix3<f64>)> = Vec::new();
        for e in &graph.edges {
            if e.i == f && !g_init.contains_key(&e.j) {
                next.push((e.j, e.homography.matrix() * gf));
            } else if e.j == f && !g_init.contains_key(&e.i) {
                if let Ok(inv) = e.homography.inverse() {
                    next.push((e.i, inv.matrix() * gf));
                }
            }
        }
        next.sort_by_key(|n| n.0);
        for (n, g) in next {
            if let std::collections::hash_map::Entry::Vacant(v) = g_init.entry(n) {
                v.insert(g);
                queue.push_back(n);
            }
        }
    }
    let mut poses = vec![CameraPose::identity(); frames.len()];
    for (&f, g) in &g_init {
        poses[f] = if f == anchor { CameraPose::identity() } else { pose_from_anchor_homography(g, &km, &kinv) };
        if !cfg.translation {
            poses[f].translation = Vector3::zeros();
        }
    }
    let ba = bundle_adjust(&graph, k, &poses, &BundleParams { translation: cfg.translation, ..Default::default() })?;
    if ba.termination.contains(&Termination::DampingOverflow) {
        warnings.push("bundle adjustment stopped on damping overflow".into());
    }
    let mean_err = mean_transfer_error(&graph, k, &ba.poses, &comp);
    let (initial_cost, final_cost) = (ba.cost_history.first().copied().unwrap_or(0.0), ba.final_cost());

    // Frame -> anchor warps, then canvas placement.
    let mut to_anchor: BTreeMap<usize, Matrix3<f64>> = BTreeMap::new();
    for &f in &comp {
        let g = anchor_homography(&ba.poses[f], &km, &kinv);
        to_anchor.insert(f, g.try_inverse().ok_or_else(|| Error::Degenerate(format!("frame {f} warp is singular")))?);
    }
    // A warp that folds the frame or scales its area by more than 4x is a
    // failed registration; such frames are left out of the canvas.
    to_anchor.retain(|&f, m| {
        let ok = warp_is_plausible(m, frames[f].width(), frames[f].height());
        if !ok {
            warnings.push(format!("frame {f} dropped: implausible warp"));
        }
        ok
    });
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (&f, m) in &to_anchor {
        let (w, h) = ((frames[f].width() - 1) as f64, (frames[f].height() - 1) as f64);
        for c in [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)] {
            let p = project(m, c).ok_or_else(|| Error::Degenerate(format!("frame {f} corner maps to infinity")))?;
            x0 = x0.min(p.0);
            y0 = y0.min(p.1);
            x1 = x1.max(p.0);
            y1 = y1.max(p.1);
        }
    }
    let (x0, y0) = (x0.floor(), y0.floor());
    let (mut cw, mut ch) = ((x1.ceil() - x0) as usize + 1, (y1.ceil() - y0) as usize + 1);
    let mut scale = 1.0;
    if cw.max(ch) > cfg.canvas_cap {
        scale = (cfg.canvas_cap - 1) as f64 / (cw.max(ch) - 1) as f64;
        warnings.push(format!("canvas {cw}x{ch} exceeds cap {}; downscaled by {scale:.4}", cfg.canvas_cap));
        cw = ((cw - 1) as f64 * scale).floor() as usize + 1;
        ch = ((ch - 1) as f64 * scale).floor() as usize + 1;
    }
    let place = Matrix3::new(scale, 0.0, -x0 * scale, 0.0, scale, -y0 * scale, 0.0, 0.0, 1.0);
    let mut warps_u: BTreeMap<usize, Homography33> = BTreeMap::new();
    for (&f, m) in &to_anchor {
        warps_u.insert(f, Homography33::new(place * m)?);
    }
    let order: Vec<usize> = warps_u.keys().copied().collect();
    let fr: Vec<&ImageBuffer> = order.iter().map(|f| &frames[*f]).collect();
    let ws: Vec<Homography33> = order.iter().map(|f| warps_u[f]).collect();
    let out = multiband_blend(&fr, &ws, cw, ch, cfg.bands)?;
    let seams = out.seams.iter().map(|s| if *s < 0 { -1 } else { order[*s as usize] as i32 }).collect();
    let warps = (0..frames.len()).map(|i| warps_u.get(&rep[i]).copied()).collect();
    let pose_out = (0..frames.len()).map(|i| warps_u.contains_key(&rep[i]).then(|| ba.poses[rep[i]])).collect();
    let rendered: Vec<usize> = (0..frames.len()).filter(|i| warps_u.contains_key(&rep[*i])).collect();
    let offset = (-x0 * scale, -y0 * scale);
    Ok((
        StitchResult { canvas: out.canvas, warps, uncovered: out.uncovered, seams, offset, poses: pose_out },
        StitchReport {
            frames: frames.len(),
            unique_frames: unique.len(),
            edges: edge_reports,
            components: graph.components.clone(),
            rendered_component: rendered,
            anchor,
            initial_cost,
            final_cost,
            mean_transfer_error_px: mean_err,
            ba_iterations: ba.iterations,
            canvas_scale: scale,
            warnings,
        },
    ))
}
