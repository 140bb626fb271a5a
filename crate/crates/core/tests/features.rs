use endomap::features::{
    extract_dense, match_descriptors, point_coords, read_descriptors, read_matches, reprojection_error, write_descriptors,
    write_matches, DenseDescriptorSet, Match, MatchSet, DESCRIPTOR_DIM,
};
use endomap::geometry::Homography33;
use endomap::image::{gaussian_blur, ImageBuffer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Smooth random texture, upsampled from a coarse random grid.
fn texture(w: usize, h: usize, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = ImageBuffer::new(w, h, 1, (0..w * h).map(|_| rng.gen::<f64>()).collect()).unwrap();
    let b = gaussian_blur(&raw, 2.0).unwrap();
    let (lo, hi) = b.data().iter().fold((1.0f64, 0.0f64), |(l, h), v| (l.min(*v), h.max(*v)));
    ImageBuffer::from_fn(w, h, |x, y| 0.1 + 0.8 * (b.get(x, y) - lo) / (hi - lo))
}

fn shift(img: &ImageBuffer, dx: usize, dy: usize, w: usize, h: usize) -> ImageBuffer {
    ImageBuffer::from_fn(w, h, |x, y| img.get(x + dx, y + dy))
}

/// Fraction of matches whose grid points differ by exactly `(dx, dy)`.
fn correct_fraction(a: &DenseDescriptorSet, b: &DenseDescriptorSet, m: &MatchSet, dx: i64, dy: i64) -> f64 {
    let ok = m
        .pairs
        .iter()
        .filter(|p| {
            let (pa, pb) = (a.points[p.index_a], b.points[p.index_b]);
            pa.0 as i64 - pb.0 as i64 == dx && pa.1 as i64 - pb.1 as i64 == dy
        })
        .count();
    ok as f64 / m.len().max(1) as f64
}

#[test]
fn grid_layout_and_parameters() {
    let img = texture(64, 48, 1);
    let d = extract_dense(&img, 4, 16).unwrap();
    let m = DenseDescriptorSet::margin(16);
    assert_eq!(m, 10);
    let xs = (m..=64 - m).step_by(4).count();
    let ys = (m..=48 - m).step_by(4).count();
    assert_eq!(d.len(), xs * ys);
    assert_eq!(d.descriptors.len(), d.len() * DESCRIPTOR_DIM);
    assert!(d.points.iter().all(|&(x, y)| x >= m && y >= m && x + m <= 64 && y + m <= 48));
    for i in 0..d.len() {
        if d.usable[i] {
            let n: f64 = d.descriptor(i).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }
    assert!(extract_dense(&img, 0, 16).is_err());
    assert!(extract_dense(&img, 4, 6).is_err());
    assert!(extract_dense(&img, 4, 18).is_err());
    assert!(extract_dense(&ImageBuffer::filled(12, 12, 1, 0.5), 4, 16).is_err());
    assert!(extract_dense(&ImageBuffer::filled(64, 64, 3, 0.5), 4, 16).is_err());
}

#[test]
fn constant_image_has_no_usable_descriptors() {
    let d = extract_dense(&ImageBuffer::filled(48, 48, 1, 0.6), 4, 16).unwrap();
    assert_eq!(d.usable_count(), 0);
    let m = match_descriptors(&d, &d, 0.8).unwrap();
    assert!(m.is_empty());
}

#[test]
fn vertical_step_edge_has_only_dx_energy() {
    let img = ImageBuffer::from_fn(48, 48, |x, _| if x < 24 { 0.2 } else { 0.8 });
    let d = extract_dense(&img, 2, 16).unwrap();
    let i = d.points.iter().position(|&p| p == (24, 24)).unwrap();
    let v = d.descriptor(i);
    let (mut sdx, mut sdy) = (0.0, 0.0);
    for k in 0..16 {
        sdx += v[4 * k].abs() + v[4 * k + 1];
        sdy += v[4 * k + 2].abs() + v[4 * k + 3];
    }
    assert!(sdx > 0.5 && sdy < 1e-12);
    assert!((0..16).all(|k| v[4 * k] >= -1e-12));
}

#[test]
fn intensity_scaling_leaves_descriptors_unchanged() {
    let img = texture(48, 48, 2);
    let scaled = ImageBuffer::from_fn(48, 48, |x, y| 0.5 * img.get(x, y));
    let (a, b) = (extract_dense(&img, 4, 16).unwrap(), extract_dense(&scaled, 4, 16).unwrap());
    for (x, y) in a.descriptors.iter().zip(&b.descriptors) {
        assert!((x - y).abs() < 1e-9);
    }
}

#[test]
fn exact_grid_shift_matches_every_point() {
    let big = texture(96, 80, 3);
    let a = shift(&big, 0, 0, 80, 64);
    let b = shift(&big, 8, 4, 80, 64);
    let (da, db) = (extract_dense(&a, 4, 16).unwrap(), extract_dense(&b, 4, 16).unwrap());
    let m = match_descriptors(&da, &db, 0.8).unwrap();
    assert!(m.len() > 50);
    assert_eq!(correct_fraction(&da, &db, &m, 8, 4), 1.0);
}

#[test]
fn self_match_is_identity() {
    let img = texture(64, 64, 4);
    let d = extract_dense(&img, 4, 16).unwrap();
    let m = match_descriptors(&d, &d, 0.9).unwrap();
    assert_eq!(m.len(), d.usable_count());
    assert!(m.pairs.iter().all(|p| p.index_a == p.index_b && p.distance == 0.0));
}

#[test]
fn translated_noisy_frame_mostly_correct() {
    let big = texture(112, 112, 5);
    let a = shift(&big, 0, 0, 96, 96);
    let b0 = shift(&big, 8, 8, 96, 96);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let noise = Normal::new(0.0, 0.01).unwrap();
    let b = ImageBuffer::new(96, 96, 1, b0.data().iter().map(|v| v + noise.sample(&mut rng)).collect()).unwrap();
    let (da, db) = (extract_dense(&a, 4, 16).unwrap(), extract_dense(&b, 4, 16).unwrap());
    let m = match_descriptors(&da, &db, 0.8).unwrap();
    assert!(m.len() > 30);
    let frac = correct_fraction(&da, &db, &m, 8, 8);
    assert!(frac >= 0.95, "correct fraction {frac}");
}

#[test]
fn ratio_must_be_in_range() {
    let d = extract_dense(&texture(48, 48, 6), 4, 16).unwrap();
    assert!(match_descriptors(&d, &d, 0.0).is_err());
    assert!(match_descriptors(&d, &d, 1.5).is_err());
}

#[test]
fn reprojection_cases() {
    let pts: Vec<(f64, f64)> = (0..5).map(|i| (i as f64 * 3.0, i as f64)).collect();
    let moved: Vec<(f64, f64)> = pts.iter().map(|p| (p.0 + 2.0, p.1 - 1.0)).collect();
    let m = MatchSet {
        pairs: (0..5).map(|i| Match { index_a: i, index_b: i, distance: 0.0 }).collect(),
        source_dims: (10, 10),
        target_dims: (10, 10),
    };
    let r = reprojection_error(&m, &pts, &moved, &Homography33::translation(2.0, -1.0)).unwrap();
    assert!(r.mean < 1e-12);
    let r = reprojection_error(&m, &pts, &pts, &Homography33::translation(3.0, 4.0)).unwrap();
    assert!((r.mean - 5.0).abs() < 1e-12);
    assert!(r.errors.iter().all(|e| (e.unwrap() - 5.0).abs() < 1e-12));

    // A point on the line at infinity is excluded from the mean.
    let h = Homography33::from_rows(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
    let pts = vec![(-1.0, 0.0), (0.0, 0.0)];
    let m = MatchSet { pairs: vec![Match { index_a: 0, index_b: 0, distance: 0.0 }, Match { index_a: 1, index_b: 1, distance: 0.0 }], source_dims: (1, 1), target_dims: (1, 1) };
    let r = reprojection_error(&m, &pts, &pts, &h).unwrap();
    assert_eq!(r.errors[0], None);
    assert!(r.errors[1].unwrap() < 1e-12 && r.mean < 1e-12);
}

#[test]
fn point_coords_are_grid_points() {
    let d = extract_dense(&texture(48, 48, 7), 8, 16).unwrap();
    let c = point_coords(&d);
    assert_eq!(c[0], (d.points[0].0 as f64, d.points[0].1 as f64));
}

#[test]
fn dump_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = extract_dense(&texture(64, 48, 8), 4, 16).unwrap();
    let p = dir.path().join("a.desc");
    write_descriptors(&d, &p).unwrap();
    let back = read_descriptors(&p).unwrap();
    assert_eq!((back.points.clone(), back.usable.clone()), (d.points.clone(), d.usable.clone()));
    assert_eq!((back.grid_step, back.patch_size, back.width, back.height), (4, 16, 64, 48));
    for (a, b) in d.descriptors.iter().zip(&back.descriptors) {
        assert!((a - b).abs() < 1e-6);
    }

    let m = match_descriptors(&d, &d, 0.9).unwrap();
    let mp = dir.path().join("a.match");
    write_matches(&m, &mp).unwrap();
    let mb = read_matches(&mp).unwrap();
    assert_eq!(mb.len(), m.len());
    assert_eq!((mb.source_dims, mb.target_dims), (m.source_dims, m.target_dims));
    for (x, y) in m.pairs.iter().zip(&mb.pairs) {
        assert_eq!((x.index_a, x.index_b), (y.index_a, y.index_b));
    }

    let mut raw = std::fs::read(&p).unwrap();
    raw[0] = b'X';
    std::fs::write(&p, &raw).unwrap();
    assert!(matches!(read_descriptors(&p), Err(endomap::Error::Format(_))));
    std::fs::write(&mp, &std::fs::read(&mp).unwrap()[..10]).unwrap();
    assert!(read_matches(&mp).is_err());
}
