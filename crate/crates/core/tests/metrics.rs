use msihist::metrics::*;
use msihist::Image;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gray(w: usize, h: usize, data: Vec<f64>) -> Image {
    Image::new(w, h, 1, data).unwrap()
}

fn random(rng: &mut ChaCha8Rng, w: usize, h: usize, ch: usize) -> Image {
    Image::new(w, h, ch, (0..w * h * ch).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

#[test]
fn four_pixel_cases_give_ln_2() {
    let a = gray(4, 1, vec![0.0, 0.0, 1.0, 1.0]);
    let b = gray(4, 1, vec![1.0, 1.0, 0.0, 0.0]);
    let ln2 = std::f64::consts::LN_2;
    assert!((mutual_information(&a, &a, 2).unwrap() - ln2).abs() < 1e-12);
    assert!((mutual_information(&a, &b, 2).unwrap() - ln2).abs() < 1e-12);
}

#[test]
fn constant_image_shares_no_information() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let c = Image::filled(16, 16, 1, 0.3);
    assert_eq!(mutual_information(&c, &random(&mut rng, 16, 16, 1), 64).unwrap(), 0.0);
}

#[test]
fn ssim_of_black_versus_white_is_the_luminance_term() {
    let s = ssim(&Image::filled(16, 16, 1, 0.0), &Image::filled(16, 16, 1, 1.0)).unwrap();
    let want = SSIM_C1 / (1.0 + SSIM_C1);
    assert!((s - want).abs() < 1e-9, "{s} vs {want}");
    assert!((s - 9.999e-5).abs() < 1e-8);
}

#[test]
fn shape_errors() {
    let a = Image::filled(16, 16, 1, 0.5);
    let b = Image::filled(16, 15, 1, 0.5);
    assert!(mutual_information(&a, &b, 64).is_err());
    assert!(ssim(&a, &b).is_err());
    assert!(ssim(&Image::filled(10, 10, 1, 0.5), &Image::filled(10, 10, 1, 0.5)).is_err());
    assert!(evaluate_set(&[], 64).is_err());
}

#[test]
fn report_means_are_hand_averages() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b, c) = (random(&mut rng, 12, 12, 3), random(&mut rng, 12, 12, 3), random(&mut rng, 12, 12, 3));
    let rep = evaluate_set(&[("p", &a, &b), ("q", &a, &c)], 16).unwrap();
    let mi = (mutual_information(&a, &b, 16).unwrap() + mutual_information(&a, &c, 16).unwrap()) / 2.0;
    let ss = (ssim(&a, &b).unwrap() + ssim(&a, &c).unwrap()) / 2.0;
    assert_eq!((rep.mi, rep.ssim, rep.n_images), (mi, ss, 2));
    let single = evaluate_set(&[("x", &a, &a)], 16).unwrap();
    assert!((single.mi - entropy(&a, 16).unwrap()).abs() < 1e-12);
    assert_eq!(single.ssim, 1.0);
}

#[test]
fn report_csv_roundtrips() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (a, b) = (random(&mut rng, 12, 12, 1), random(&mut rng, 12, 12, 1));
    let rep = evaluate_set(&[("s1", &a, &b), ("s2", &b, &a)], 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    rep.save(dir.path(), "r", "label").unwrap();
    assert_eq!(MetricReport::load_csv(&dir.path().join("r.csv")).unwrap(), rep);
    let md = std::fs::read_to_string(dir.path().join("r.md")).unwrap();
    assert!(md.contains("| MI |") || md.contains("MI"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mi_is_symmetric_nonnegative_and_bounded(seed in any::<u64>(), bins in 2usize..70) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, 13, 11, 3);
        let b = random(&mut rng, 13, 11, 3).map(|v| v * v);
        let ab = mutual_information(&a, &b, bins).unwrap();
        prop_assert_eq!(ab.to_bits(), mutual_information(&b, &a, bins).unwrap().to_bits());
        prop_assert!(ab >= 0.0);
        let bound = entropy(&a, bins).unwrap().min(entropy(&b, bins).unwrap());
        prop_assert!(ab <= bound + 1e-12);
    }

    #[test]
    fn mi_with_itself_is_the_entropy(seed in any::<u64>(), bins in 2usize..70) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, 20, 9, 1);
        let d = mutual_information(&a, &a, bins).unwrap() - entropy(&a, bins).unwrap();
        prop_assert!(d.abs() < 1e-12);
    }

    #[test]
    fn ssim_is_symmetric_and_one_on_identity(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, 14, 12, 3);
        let b = random(&mut rng, 14, 12, 3);
        prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn constant_images_follow_the_closed_form(x in 0.0f64..=1.0, y in 0.0f64..=1.0) {
        let s = ssim(&Image::filled(11, 11, 1, x), &Image::filled(11, 11, 1, y)).unwrap();
        let want = (2.0 * x * y + SSIM_C1) / (x * x + y * y + SSIM_C1);
        prop_assert!((s - want).abs() < 1e-9);
    }
}
