mod common;

use common::*;
use msihist::imagereg::*;
use msihist::Image;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn points(t: &AffineTransform, src: &[(f64, f64)]) -> ControlPoints {
    ControlPoints::new(
        src.iter()
            .map(|&(x, y)| {
                let (u, v) = t.apply(x, y);
                ControlPoint { src_x: x, src_y: y, dst_x: u, dst_y: v }
            })
            .collect(),
    )
}

fn coefficient_error(a: &AffineTransform, b: &AffineTransform) -> f64 {
    a.coefficients().iter().zip(b.coefficients()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Three source points forming a well-spread triangle.
fn triangle(rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    loop {
        let p: Vec<(f64, f64)> = (0..3).map(|_| (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0))).collect();
        let area = ((p[1].0 - p[0].0) * (p[2].1 - p[0].1) - (p[2].0 - p[0].0) * (p[1].1 - p[0].1)).abs() / 2.0;
        if area > 500.0 {
            return p;
        }
    }
}

#[test]
fn three_exact_points_recover_the_transform() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..200 {
        let t = random_affine(&mut rng);
        let fit = fit_affine(&points(&t, &triangle(&mut rng))).unwrap();
        assert!(coefficient_error(&fit, &t) <= 1e-9);
    }
}

#[test]
fn noisy_points_recover_the_transform_statistically() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let noise = Normal::new(0.0, 0.1).unwrap();
    let (mut linear, mut shift) = (Vec::new(), Vec::new());
    for _ in 0..100 {
        let t = random_affine(&mut rng);
        let src: Vec<(f64, f64)> = (0..20).map(|_| (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0))).collect();
        let mut cp = points(&t, &src);
        for p in &mut cp.pairs {
            p.dst_x += noise.sample(&mut rng);
            p.dst_y += noise.sample(&mut rng);
        }
        let fit = fit_affine(&cp).unwrap();
        let (f, g) = (fit.coefficients(), t.coefficients());
        linear.push((0..4).map(|i| (f[i] - g[i]).abs()).fold(0.0, f64::max));
        // offsets judged where the points live, at the centre of their range
        let (fx, fy) = fit.apply(50.0, 50.0);
        let (tx, ty) = t.apply(50.0, 50.0);
        shift.push((fx - tx).abs().max((fy - ty).abs()));
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    assert!(median(&mut linear) <= 1e-2);
    assert!(median(&mut shift) <= 1e-1);
}

#[test]
fn degenerate_point_sets_are_rejected() {
    let line = ControlPoints::new(
        (0..5)
            .map(|i| ControlPoint { src_x: i as f64, src_y: 2.0 * i as f64, dst_x: 1.0, dst_y: i as f64 })
            .collect(),
    );
    assert!(fit_affine(&line).is_err());
    let two = ControlPoints::new(line.pairs[..2].to_vec());
    assert!(fit_affine(&two).is_err());
}

#[test]
fn identity_warp_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = random_image(&mut rng, 17, 13, 3);
    assert_eq!(warp(&img, &AffineTransform::IDENTITY, 17, 13, PadMode::White).unwrap(), img);
}

#[test]
fn warp_then_inverse_recovers_smooth_images() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let img = smooth_image(&mut rng, 64, 64, 3);
        let t = mild_affine(&mut rng, 64);
        let there = warp(&img, &t, 64, 64, PadMode::Black).unwrap();
        let back = warp(&there, &t.inverse().unwrap(), 64, 64, PadMode::Black).unwrap();
        let mae = mean_abs_diff(&img, &back, |x, y| (10..54).contains(&x) && (10..54).contains(&y));
        assert!(mae <= 2e-2, "{mae}");
    }
}

#[test]
fn divisible_patch_roundtrip_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img = random_image(&mut rng, 64, 96, 3);
    let patches = extract_patches(&img, 32, 32).unwrap();
    assert_eq!(patches.len(), 6);
    assert_eq!(reassemble(&patches, 64, 96).unwrap(), img);
}

#[test]
fn edge_flush_patches_cover_and_reconstruct() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img = random_image(&mut rng, 48, 32, 3);
    let patches = extract_patches(&img, 32, 32).unwrap();
    let origins: Vec<(usize, usize)> = patches.iter().map(|p| (p.x, p.y)).collect();
    assert_eq!(origins, vec![(0, 0), (16, 0)]);
    let back = reassemble(&patches, 48, 32).unwrap();
    assert!(img.data.iter().zip(&back.data).all(|(a, b)| (a - b).abs() <= 1e-6));
}

#[test]
fn overlapping_patches_are_averaged() {
    let zero = Patch { x: 0, y: 0, image: Image::filled(4, 4, 1, 0.0) };
    let one = Patch { x: 2, y: 0, image: Image::filled(4, 4, 1, 1.0) };
    let out = reassemble(&[zero.clone(), one], 6, 4).unwrap();
    assert_eq!(out.pixel(1, 0), &[0.0]);
    assert_eq!(out.pixel(2, 0), &[0.5]);
    assert_eq!(out.pixel(5, 3), &[1.0]);
    assert!(reassemble(&[zero], 6, 4).is_err());
}

#[test]
fn padding_centres_the_image() {
    let img = Image::filled(3, 2, 1, 0.5);
    let sq = pad_to_square(&img, PadMode::White).unwrap();
    assert_eq!((sq.width, sq.height), (3, 3));
    assert_eq!(sq.pixel(1, 0), &[0.5]);
    assert_eq!(sq.pixel(1, 2), &[1.0]);
    let black = pad_to(&img, 5, 2, PadMode::Black).unwrap();
    assert_eq!(black.data, vec![0.0, 0.5, 0.5, 0.5, 0.0, 0.0, 0.5, 0.5, 0.5, 0.0]);
    assert!(pad_to(&img, 2, 2, PadMode::Black).is_err());
}

#[test]
fn control_points_csv_roundtrip() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cp = points(&random_affine(&mut rng), &triangle(&mut rng));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cp.csv");
    cp.save_csv(&path).unwrap();
    assert_eq!(ControlPoints::load_csv(&path).unwrap(), cp);
    assert!(std::fs::read_to_string(&path).unwrap().starts_with("src_x,src_y,dst_x,dst_y"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fit_is_translation_equivariant(seed in any::<u64>(), u in -40.0f64..40.0, v in -40.0f64..40.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random_affine(&mut rng);
        let src: Vec<(f64, f64)> = (0..6).map(|_| (rng.random_range(0.0..64.0), rng.random_range(0.0..64.0))).collect();
        let cp = points(&t, &src);
        let mut shifted = cp.clone();
        for p in &mut shifted.pairs {
            p.dst_x += u;
            p.dst_y += v;
        }
        let (a, b) = (fit_affine(&cp).unwrap(), fit_affine(&shifted).unwrap());
        for (x, y) in a.coefficients()[..4].iter().zip(&b.coefficients()[..4]) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        prop_assert!((b.tx - a.tx - u).abs() < 1e-9 && (b.ty - a.ty - v).abs() < 1e-9);
    }

    #[test]
    fn resize_keeps_constants_and_range(w in 1usize..20, h in 1usize..20, nw in 1usize..30, nh in 1usize..30, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flat = Image::filled(w, h, 3, 0.25);
        prop_assert!(resize(&flat, nw, nh).unwrap().data.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let img = random_image(&mut rng, w, h, 1);
        let out = resize(&img, nw, nh).unwrap();
        let (lo, hi) = img.data.iter().fold((1.0f64, 0.0f64), |(l, h), &v| (l.min(v), h.max(v)));
        prop_assert!(out.data.iter().all(|&v| v >= lo - 1e-15 && v <= hi + 1e-15));
    }
}
