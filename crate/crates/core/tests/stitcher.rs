use endomap::calibration::CameraIntrinsics;
use endomap::geometry::{estimate_homography_ransac, exp_so3, pose_from_homography, rotation_angle, CameraPose, Homography33};
use endomap::image::{gaussian_blur, ImageBuffer};
use endomap::stitcher::{
    anchor_homography, bundle_adjust, bundle_cost, bundle_gradient, mean_transfer_error, multiband_blend, retract,
    select_candidates, stitch, warp_is_plausible, BundleParams, GraphEdge, MatchGraph, StitchConfig,
};
use endomap::synthkit::{render_rotations, yaw_pitch};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn texture(w: usize, h: usize, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = ImageBuffer::new(w, h, 1, (0..w * h).map(|_| rng.gen::<f64>()).collect()).unwrap();
    let b = gaussian_blur(&raw, 2.0).unwrap();
    let (lo, hi) = b.data().iter().fold((1.0f64, 0.0f64), |(l, h), v| (l.min(*v), h.max(*v)));
    ImageBuffer::from_fn(w, h, |x, y| 0.1 + 0.8 * (b.get(x, y) - lo) / (hi - lo))
}

fn random_homography(rng: &mut ChaCha8Rng) -> Homography33 {
    Homography33::from_rows(&[
        1.0 + rng.gen_range(-0.1..0.1),
        rng.gen_range(-0.1..0.1),
        rng.gen_range(-20.0..20.0),
        rng.gen_range(-0.1..0.1),
        1.0 + rng.gen_range(-0.1..0.1),
        rng.gen_range(-20.0..20.0),
        rng.gen_range(-1e-4..1e-4),
        rng.gen_range(-1e-4..1e-4),
        1.0,
    ])
    .unwrap()
}

#[test]
fn candidates_sorted_by_count_then_id() {
    assert_eq!(select_candidates(&[(3, 10), (1, 10), (7, 50), (2, 5)], 3), vec![7, 1, 3]);
    assert_eq!(select_candidates(&[(0, 1)], 5), vec![0]);
    assert!(select_candidates(&[], 5).is_empty());
}

#[test]
fn ransac_exact_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = random_homography(&mut rng);
    let pa: Vec<(f64, f64)> = (0..40).map(|_| (rng.gen_range(0.0..200.0), rng.gen_range(0.0..200.0))).collect();
    let pb: Vec<(f64, f64)> = pa.iter().map(|p| h.project(*p).unwrap()).collect();
    let r = estimate_homography_ransac(&pa, &pb, 500, 1.0, 3).unwrap();
    assert_eq!(r.inliers.len(), 40);
    assert!(r.homography.distance(&h) < 1e-6);
}

#[test]
fn ransac_four_points_and_errors() {
    let pa = vec![(0.0, 0.0), (10.0, 0.0), (10.0, 10.0), (0.0, 10.0)];
    let pb: Vec<_> = pa.iter().map(|p: &(f64, f64)| (p.0 * 2.0 + 1.0, p.1 * 2.0 - 3.0)).collect();
    let r = estimate_homography_ransac(&pa, &pb, 50, 1.0, 0).unwrap();
    assert_eq!(r.inliers.len(), 4);
    assert!(estimate_homography_ransac(&pa[..3], &pb[..3], 50, 1.0, 0).is_err());
    assert!(estimate_homography_ransac(&pa, &pb[..3], 50, 1.0, 0).is_err());
}

/// 70 noisy inliers plus 30 outliers; returns the mean true-inlier error.
fn contaminated_trial(seed: u64) -> (f64, RansacOutcome) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = random_homography(&mut rng);
    let noise = Normal::new(0.0, 0.5).unwrap();
    let (mut pa, mut pb) = (Vec::new(), Vec::new());
    for _ in 0..70 {
        let a = (rng.gen_range(0.0..256.0), rng.gen_range(0.0..256.0));
        let b = h.project(a).unwrap();
        pa.push(a);
        pb.push((b.0 + noise.sample(&mut rng), b.1 + noise.sample(&mut rng)));
    }
    for _ in 0..30 {
        pa.push((rng.gen_range(0.0..256.0), rng.gen_range(0.0..256.0)));
        pb.push((rng.gen_range(-20.0..276.0), rng.gen_range(-20.0..276.0)));
    }
    let r = estimate_homography_ransac(&pa, &pb, 2000, 3.0, seed).unwrap();
    let err = (0..70)
        .map(|i| {
            let q = r.homography.project(pa[i]).unwrap();
            let t = h.project(pa[i]).unwrap();
            (q.0 - t.0).hypot(q.1 - t.1)
        })
        .sum::<f64>()
        / 70.0;
    (err, RansacOutcome { inliers: r.inliers, rows: r.homography.to_rows() })
}

#[derive(PartialEq, Debug)]
struct RansacOutcome {
    inliers: Vec<usize>,
    rows: [f64; 9],
}

#[test]
fn ransac_contaminated_recovers() {
    let ok = (0..20).filter(|s| contaminated_trial(*s).0 < 1.0).count();
    assert_eq!(ok, 20);
}

#[test]
fn ransac_is_deterministic() {
    assert_eq!(contaminated_trial(5).1, contaminated_trial(5).1);
}

#[test]
fn pose_from_pure_rotation() {
    let k = CameraIntrinsics::pinhole(128, 128, 300.0, 300.0, 63.5, 63.5);
    let km = k.matrix();
    let r = yaw_pitch(0.05, -0.03);
    let h = Homography33::new(km * r * km.try_inverse().unwrap()).unwrap();
    let p = pose_from_homography(&h, &k).unwrap();
    assert!(rotation_angle(&(p.rotation.transpose() * r)) < 1e-6);
    assert!(p.translation.norm() < 1e-6);

    // Plane-induced: R + t nᵀ with n = e3.
    let t = Vector3::new(0.1, 0.0, 0.02);
    let mut m = r;
    for i in 0..3 {
        m[(i, 2)] += t[i];
    }
    let h = Homography33::new(km * m * km.try_inverse().unwrap()).unwrap();
    let p = pose_from_homography(&h, &k).unwrap();
    assert!((p.translation.norm() - 1.0).abs() < 1e-9);
    assert!(rotation_angle(&p.rotation) < 0.2);
}

/// Five frames rotating about the anchor with exact correspondences between
/// consecutive and skip-one frames.
fn rotation_graph(k: &CameraIntrinsics) -> (MatchGraph, Vec<CameraPose>) {
    let km = k.matrix();
    let kinv = km.try_inverse().unwrap();
    let truth: Vec<CameraPose> = (0..5)
        .map(|i| CameraPose { rotation: yaw_pitch(0.02 * i as f64, 0.01 * (i as f64).sin()), translation: Vector3::zeros() })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut edges = Vec::new();
    for i in 0..5 {
        for j in i + 1..(i + 3).min(5) {
            let gi = anchor_homography(&truth[i], &km, &kinv);
            let gj = anchor_homography(&truth[j], &km, &kinv);
            let hij = gj * gi.try_inverse().unwrap();
            let points: Vec<_> = (0..30)
                .map(|_| {
                    let a = (rng.gen_range(10.0..118.0), rng.gen_range(10.0..118.0));
                    let v = hij * Vector3::new(a.0, a.1, 1.0);
                    (a, (v.x / v.z, v.y / v.z))
                })
                .collect();
            edges.push(GraphEdge { i, j, homography: Homography33::new(hij).unwrap(), raw_matches: 30, inlier_count: 30, points });
        }
    }
    (MatchGraph::new((0..5).collect(), edges, 20), truth)
}

#[test]
fn bundle_adjust_stationary_at_truth() {
    let k = CameraIntrinsics::pinhole(128, 128, 300.0, 300.0, 63.5, 63.5);
    let (g, truth) = rotation_graph(&k);
    assert!(bundle_cost(&g, &k, &truth, &[0, 1, 2, 3, 4]) < 1e-16);
    let r = bundle_adjust(&g, &k, &truth, &BundleParams::default()).unwrap();
    for (a, b) in r.poses.iter().zip(&truth) {
        assert!(rotation_angle(&(a.rotation.transpose() * b.rotation)) < 1e-9);
    }
}

#[test]
fn bundle_adjust_recovers_perturbed_rotations() {
    let k = CameraIntrinsics::pinhole(128, 128, 300.0, 300.0, 63.5, 63.5);
    let (g, truth) = rotation_graph(&k);
    for trial in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
        let init: Vec<CameraPose> = truth
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if i == 0 {
                    return *p;
                }
                let w = Vector3::new(rng.gen_range(-0.01..0.01), rng.gen_range(-0.01..0.01), rng.gen_range(-0.01..0.01));
                CameraPose { rotation: exp_so3(&w) * p.rotation, translation: Vector3::zeros() }
            })
            .collect();
        let members = [0, 1, 2, 3, 4];
        assert!(mean_transfer_error(&g, &k, &init, &members) > 1.0);
        let r = bundle_adjust(&g, &k, &init, &BundleParams::default()).unwrap();
        let err = mean_transfer_error(&g, &k, &r.poses, &members);
        assert!(err < 0.1, "trial {trial}: {err}");
        assert!(r.cost_history.windows(2).all(|w| w[1] <= w[0]), "trial {trial}: {:?}", r.cost_history);
        assert_eq!(r.poses[0], init[0]);
        assert!(r.poses.iter().all(|p| p.translation == Vector3::zeros()));
    }
}

#[test]
fn bundle_gradient_matches_finite_differences() {
    let k = CameraIntrinsics::pinhole(128, 128, 300.0, 300.0, 63.5, 63.5);
    let (g, truth) = rotation_graph(&k);
    let members = [0, 1, 2, 3, 4];
    let mut poses = truth.clone();
    for (i, p) in poses.iter_mut().enumerate().skip(1) {
        *p = retract(p, &[0.003 * i as f64, -0.002, 0.001, 0.01, -0.02 * i as f64, 0.005]);
    }
    let grad = bundle_gradient(&g, &k, &poses, &members);
    assert_eq!(grad.len(), 24);
    let h = 1e-6;
    for (slot, frame) in (1..5).enumerate() {
        for d in 0..6 {
            let mut delta = [0.0; 6];
            delta[d] = h;
            let mut plus = poses.clone();
            plus[frame] = retract(&poses[frame], &delta);
            delta[d] = -h;
            let mut minus = poses.clone();
            minus[frame] = retract(&poses[frame], &delta);
            let fd = (bundle_cost(&g, &k, &plus, &members) - bundle_cost(&g, &k, &minus, &members)) / (2.0 * h);
            let a = grad[slot * 6 + d];
            assert!((a - fd).abs() <= 1e-4 * fd.abs().max(1.0), "frame {frame} param {d}: {a} vs {fd}");
        }
    }
}

#[test]
fn blend_single_frame_and_constants() {
    let f = texture(40, 30, 3);
    let out = multiband_blend(&[&f], &[Homography33::identity()], 40, 30, 4).unwrap();
    for (a, b) in out.canvas.data().iter().zip(f.data()) {
        assert!((a - b).abs() < 1e-9);
    }
    assert_eq!(out.uncovered.count(), 0);

    let a = ImageBuffer::filled(40, 30, 1, 0.5);
    let b = ImageBuffer::filled(40, 30, 1, 0.5);
    let out = multiband_blend(&[&a, &b], &[Homography33::identity(), Homography33::translation(20.0, 0.0)], 60, 30, 3).unwrap();
    assert!(out.canvas.data().iter().all(|v| (v - 0.5).abs() < 1e-9));
    assert_eq!(out.uncovered.count(), 0);
    assert_eq!(out.seams[0], 0);
    assert_eq!(out.seams[59], 1);

    let out = multiband_blend(&[&a], &[Homography33::translation(10.0, 0.0)], 60, 30, 2).unwrap();
    assert!(out.uncovered.get(2, 5) && out.uncovered.get(55, 5) && !out.uncovered.get(20, 5));
    assert_eq!(out.seams[2], -1);
    assert!(multiband_blend(&[&a], &[Homography33::identity()], 40, 30, 0).is_err());
}

#[test]
fn blend_seam_is_smooth() {
    let a = ImageBuffer::filled(40, 20, 1, 0.3);
    let b = ImageBuffer::filled(40, 20, 1, 0.7);
    let out = multiband_blend(&[&a, &b], &[Homography33::identity(), Homography33::translation(20.0, 0.0)], 60, 20, 4).unwrap();
    let row: Vec<f64> = (0..60).map(|x| out.canvas.get(x, 10)).collect();
    assert!((row[0] - 0.3).abs() < 0.02 && (row[59] - 0.7).abs() < 0.02);
    let max_step = row.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
    assert!(max_step < 0.1, "step {max_step}");
}

fn sequence(n: usize) -> (Vec<ImageBuffer>, Vec<Matrix3<f64>>, CameraIntrinsics) {
    let k = CameraIntrinsics::pinhole(128, 128, 400.0, 400.0, 63.5, 63.5);
    let tex = texture(220, 180, 11);
    let rots: Vec<_> = (0..n).map(|i| yaw_pitch(0.08 * (i as f64 / (n - 1) as f64 - 0.5), 0.01 * i as f64 % 0.03)).collect();
    let seq = render_rotations(&tex, &k, &rots).unwrap();
    (seq.frames, rots, k)
}

#[test]
fn stitch_single_frame_passthrough() {
    let (frames, _, k) = sequence(2);
    let (res, rep) = stitch(&frames[..1], &k, &StitchConfig::default()).unwrap();
    assert_eq!((res.canvas.width(), res.canvas.height()), (128, 128));
    let diff = res.canvas.data().iter().zip(frames[0].data()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(diff < 1e-9, "max difference {diff}");
    assert_eq!(rep.rendered_component, vec![0]);
}

#[test]
fn stitch_rotation_sweep_recovers_poses() {
    let (frames, rots, k) = sequence(8);
    let (res, rep) = stitch(&frames, &k, &StitchConfig::default()).unwrap();
    assert_eq!(rep.rendered_component.len(), 8, "{:?}", rep.components);
    assert!(rep.mean_transfer_error_px < 1.0, "{}", rep.mean_transfer_error_px);
    let anchor = rep.anchor;
    for i in 0..8 {
        let p = res.poses[i].unwrap();
        // Anchor to frame i maps through R_iᵀ R_anchor.
        let want = rots[i].transpose() * rots[anchor];
        let err = rotation_angle(&(p.rotation.transpose() * want)).to_degrees();
        assert!(err < 0.1, "frame {i}: {err} deg");
    }
    assert!(res.canvas.width() > 128 && res.canvas.width() < 200);
}

#[test]
fn stitch_collapses_duplicates() {
    let (frames, _, k) = sequence(4);
    let dup = vec![frames[0].clone(), frames[0].clone(), frames[1].clone(), frames[2].clone(), frames[3].clone()];
    let (res, rep) = stitch(&dup, &k, &StitchConfig::default()).unwrap();
    assert_eq!((rep.frames, rep.unique_frames), (5, 4));
    assert_eq!(res.warps[0].map(|h| h.to_rows()), res.warps[1].map(|h| h.to_rows()));
}

#[test]
fn stitch_config_validation() {
    let (frames, _, k) = sequence(2);
    let bad = StitchConfig { patch_size: 10, ..Default::default() };
    assert!(stitch(&frames, &k, &bad).is_err());
    assert!(stitch(&[], &k, &StitchConfig::default()).is_err());
}

#[test]
fn warp_plausibility() {
    assert!(warp_is_plausible(&Matrix3::identity(), 64, 48));
    let shift = Matrix3::new(1.0, 0.0, 500.0, 0.0, 1.0, -80.0, 0.0, 0.0, 1.0);
    assert!(warp_is_plausible(&shift, 64, 48));
    assert!(warp_is_plausible(&Matrix3::new(1.9, 0.0, 0.0, 0.0, 1.9, 0.0, 0.0, 0.0, 1.0), 64, 48));
    assert!(!warp_is_plausible(&Matrix3::new(2.1, 0.0, 0.0, 0.0, 2.1, 0.0, 0.0, 0.0, 1.0), 64, 48));
    // Mirror flips the outline orientation.
    assert!(!warp_is_plausible(&Matrix3::new(-1.0, 0.0, 63.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0), 64, 48));
    // Horizon crossing the frame.
    assert!(!warp_is_plausible(&Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, -0.03, 0.0, 1.0), 64, 48));
}
