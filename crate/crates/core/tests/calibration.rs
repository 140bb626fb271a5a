use endomap::calibration::{distort_point, undistort_image, CameraIntrinsics};
use endomap::image::ImageBuffer;

fn k_with(k1: f64) -> CameraIntrinsics {
    CameraIntrinsics { k1, ..CameraIntrinsics::pinhole(96, 80, 90.0, 90.0, 47.5, 39.5) }
}

/// Normalized undistorted coordinates whose distortion lands on pixel `(u, v)`;
/// `None` when strong barrel distortion leaves the pixel without a preimage.
fn invert(u: f64, v: f64, k: &CameraIntrinsics) -> Option<(f64, f64)> {
    let (xd, yd) = ((u - k.cx) / k.fx, (v - k.cy) / k.fy);
    let (mut x, mut y) = (xd, yd);
    for _ in 0..200 {
        let (pu, pv) = distort_point((x, y), k);
        x -= ((pu - k.cx) / k.fx - xd) * 0.8;
        y -= ((pv - k.cy) / k.fy - yd) * 0.8;
    }
    let (pu, pv) = distort_point((x, y), k);
    ((pu - u).hypot(pv - v) < 1e-6).then_some((x, y))
}

/// Renders what a distorting lens would record of the analytic scene `f`.
fn render_distorted(k: &CameraIntrinsics, f: impl Fn(f64, f64) -> f64) -> ImageBuffer {
    ImageBuffer::from_fn(k.image_width, k.image_height, |u, v| {
        match invert(u as f64, v as f64, k) {
            Some((x, y)) => f(k.fx * x + k.cx, k.fy * y + k.cy),
            None => 1.0,
        }
    })
}

#[test]
fn zero_distortion_is_affine() {
    let k = k_with(0.0);
    assert_eq!(distort_point((0.0, 0.0), &k), (k.cx, k.cy));
    let (u, v) = distort_point((0.2, -0.1), &k);
    assert!((u - (k.fx * 0.2 + k.cx)).abs() < 1e-12 && (v - (k.fy * -0.1 + k.cy)).abs() < 1e-12);
}

#[test]
fn radial_term_by_hand() {
    let k = CameraIntrinsics { k1: 0.1, ..CameraIntrinsics::pinhole(100, 100, 1.0, 1.0, 0.0, 0.0) };
    let (u, v) = distort_point((0.5, 0.0), &k);
    assert!((u - 0.5 * 1.025).abs() < 1e-12 && v.abs() < 1e-12);
}

#[test]
fn distortion_is_continuous() {
    let k = CameraIntrinsics { k1: -0.2, k2: 0.05, k3: 0.01, p1: 0.002, p2: -0.001, ..k_with(0.0) };
    for &(x, y) in &[(0.1, 0.2), (-0.4, 0.3), (0.0, -0.5)] {
        let a = distort_point((x, y), &k);
        let b = distort_point((x + 1e-6, y - 1e-6), &k);
        assert!((a.0 - b.0).abs() < 1e-3 && (a.1 - b.1).abs() < 1e-3);
    }
}

#[test]
fn identity_undistort() {
    let k = k_with(0.0);
    let img = ImageBuffer::from_fn(96, 80, |x, y| ((x as f64 * 0.3).sin() * (y as f64 * 0.2).cos() + 1.0) / 2.0);
    let (out, invalid) = undistort_image(&img, &k).unwrap();
    assert_eq!(invalid.count(), 0);
    for y in 1..79 {
        for x in 1..95 {
            assert!((out.get(x, y) - img.get(x, y)).abs() < 1e-6);
        }
    }
}

#[test]
fn dimension_mismatch_rejected() {
    let img = ImageBuffer::filled(10, 10, 1, 0.5);
    assert!(matches!(undistort_image(&img, &k_with(0.0)), Err(endomap::Error::Dimension(_))));
}

#[test]
fn forward_distortion_round_trip() {
    let k = k_with(0.2);
    let scene = |x: f64, y: f64| 0.5 + 0.3 * (x * 0.15).sin() * (y * 0.12).cos();
    let distorted = render_distorted(&k, scene);
    let (out, invalid) = undistort_image(&distorted, &k).unwrap();
    let (mut se, mut n) = (0.0, 0);
    for y in 8..72 {
        for x in 8..88 {
            if !invalid.get(x, y) {
                se += (out.get(x, y) - scene(x as f64, y as f64)).powi(2);
                n += 1;
            }
        }
    }
    assert!((se / n as f64).sqrt() < 0.01);
}

/// RMS distance of a dark vertical line's per-row centroid from its best-fit straight line.
fn line_residual(img: &ImageBuffer, x_guess: usize) -> f64 {
    let mut pts = Vec::new();
    for y in 10..img.height() - 10 {
        let (mut sw, mut sx) = (0.0, 0.0);
        for x in x_guess.saturating_sub(8)..(x_guess + 8).min(img.width()) {
            let w = (1.0 - img.get(x, y)).max(0.0).powi(4);
            sw += w;
            sx += w * x as f64;
        }
        pts.push((y as f64, sx / sw));
    }
    let n = pts.len() as f64;
    let (my, mx) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
    let b = pts.iter().map(|p| (p.0 - my) * (p.1 - mx)).sum::<f64>() / pts.iter().map(|p| (p.0 - my).powi(2)).sum::<f64>();
    (pts.iter().map(|p| (p.1 - mx - b * (p.0 - my)).powi(2)).sum::<f64>() / n).sqrt()
}

#[test]
fn barrel_lines_straighten() {
    let k = CameraIntrinsics { k1: -0.35, ..k_with(0.0) };
    let lx = 20.0;
    let scene = move |x: f64, _y: f64| 1.0 - (-(x - lx).powi(2) / 2.0).exp();
    let distorted = render_distorted(&k, scene);
    let before = line_residual(&distorted, 22);
    let (out, _) = undistort_image(&distorted, &k).unwrap();
    let after = line_residual(&out, 20);
    assert!(before > 0.3, "fixture not curved enough: {before}");
    assert!(after * 10.0 <= before, "before {before} after {after}");
}

#[test]
fn calibration_file_defaults_distortion() {
    let k = CameraIntrinsics::from_toml_str("image_width = 64\nimage_height = 48\nfx = 50.0\nfy = 51.0\ncx = 31.5\ncy = 23.5\n").unwrap();
    assert_eq!((k.k1, k.k2, k.k3, k.p1, k.p2), (0.0, 0.0, 0.0, 0.0, 0.0));
    assert!(CameraIntrinsics::from_toml_str("image_width = 64\nimage_height = 48\nfx = -1.0\nfy = 1.0\ncx = 1.0\ncy = 1.0\n").is_err());
    assert!(CameraIntrinsics::from_toml_str("image_width = 64\nimage_height = 48\nfx = 1.0\nfy = 1.0\ncx = 100.0\ncy = 1.0\n").is_err());
    let back = CameraIntrinsics::from_toml_str(&k.to_toml_string()).unwrap();
    assert_eq!(back, k);
}
