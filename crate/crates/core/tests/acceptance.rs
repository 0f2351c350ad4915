//! End-to-end acceptance criteria. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.

mod common;

use std::time::{Duration, Instant};

use common::*;
use msihist::imagereg::*;
use msihist::metrics::{entropy, mutual_information, ssim, SSIM_C1};
use msihist::nn::{unet_train_step, TrainState, UNet};
use msihist::pipeline::report::report as compare;
use msihist::pipeline::*;
use msihist::spectra::{interpolate_linear, pick_peaks, rebin, MsiDataset, Spectrum};
use msihist::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Synthetic experiment: desk pix2pix must beat the U-Net on test MI and SSIM.
fn pix2pix_beats_unet() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    generate_synthetic_dataset(&dir.path().join("data"), 40, 7, 64).map_err(|e| e.to_string())?;
    let mut cfg = RunConfig::default();
    cfg.paths.samples = dir.path().join("data/samples.csv");
    cfg.output_dir = dir.path().join("out");
    let result = run_experiment(&cfg, &[(ModelKind::UNet, PadMode::Black), (ModelKind::Pix2Pix, PadMode::Black)])
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let rep = result.report(Split::Test).ok_or("no test report")?;
    let (u, p) = (&rep.rows[0], &rep.rows[1]);
    check(
        p.mi > u.mi && p.ssim > u.ssim && elapsed < Duration::from_secs(30 * 60),
        format!(
            "test MI {:.3} vs {:.3}, SSIM {:.3} vs {:.3} (pix2pix vs U-Net), {:.0} s",
            p.mi,
            u.mi,
            p.ssim,
            u.ssim,
            elapsed.as_secs_f64()
        ),
    )
}

fn published_deltas() -> Outcome {
    let row = |kind, pad, mi, ssim| VariantResult { kind, pad, mi, ssim };
    let rep = compare(&[
        row(ModelKind::UNet, PadMode::Black, 0.429, 0.530),
        row(ModelKind::Pix2Pix, PadMode::Black, 1.349, 0.949),
        row(ModelKind::Pix2Pix, PadMode::White, 1.353, 0.949),
    ]);
    let d = rep.delta.ok_or("no delta")?;
    check(
        (d.mi - 0.924).abs() <= 1e-9 && (d.ssim - 0.419).abs() <= 1e-9,
        format!("MI {:+.12}, SSIM {:+.12}", d.mi, d.ssim),
    )
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let (mut worst_strict, mut worst_other, mut failed) = (0.0f64, 0.0f64, Vec::new());
    let n = 150;
    for i in 0..n {
        let case = grad_case(i, &mut rng);
        let err = max_grad_error(&case, &mut rng);
        if case.strict {
            worst_strict = worst_strict.max(err);
        } else {
            worst_other = worst_other.max(err);
        }
        if err >= grad_tolerance(&case) {
            failed.push(case.name.clone());
        }
    }
    let elapsed = start.elapsed();
    check(
        failed.is_empty() && elapsed < Duration::from_secs(120),
        format!(
            "{n} shapes, worst {worst_strict:.1e} (conv/linear/activation), {worst_other:.1e} (others), {:.1} s{}",
            elapsed.as_secs_f64(),
            if failed.is_empty() { String::new() } else { format!(", failing: {failed:?}") }
        ),
    )
}

fn adjoint() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let worst = (0..50).map(|_| adjoint_gap(&mut rng)).fold(0.0, f64::max);
    check(worst <= 1e-10, format!("50 geometries, worst relative gap {worst:.1e}"))
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut problems = Vec::new();
    for _ in 0..50 {
        let a = random_image(&mut rng, 24, 20, 3);
        let b = random_image(&mut rng, 24, 20, 3);
        let bins = rng.random_range(2..=64);
        let mi = |x: &Image, y: &Image| mutual_information(x, y, bins).unwrap();
        if (mi(&a, &a) - entropy(&a, bins).unwrap()).abs() > 1e-12 {
            problems.push("MI(a,a) != H(a)");
        }
        if mi(&a, &b).to_bits() != mi(&b, &a).to_bits() {
            problems.push("MI asymmetric");
        }
        if ssim(&a, &a).unwrap() != 1.0 {
            problems.push("SSIM(x,x) != 1");
        }
        let dm: f64 = rng.random_range(0.0..=1.0);
        let s = ssim(&Image::filled(16, 16, 1, 0.0), &Image::filled(16, 16, 1, dm)).unwrap();
        if (s - SSIM_C1 / (dm * dm + SSIM_C1)).abs() > 1e-9 {
            problems.push("constant SSIM off the closed form");
        }
    }
    let four = |v: [f64; 4]| Image::new(4, 1, 1, v.to_vec()).unwrap();
    let (p, q) = (four([0.0, 0.0, 1.0, 1.0]), four([1.0, 1.0, 0.0, 0.0]));
    let ln2 = std::f64::consts::LN_2;
    for (x, y) in [(&p, &p), (&p, &q)] {
        if (mutual_information(x, y, 2).unwrap() - ln2).abs() > 1e-12 {
            problems.push("four-pixel MI != ln 2");
        }
    }
    problems.dedup();
    check(problems.is_empty(), if problems.is_empty() { "all oracles hold".into() } else { problems.join("; ") })
}

fn rebinning() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    let mut identity_exact = true;
    for _ in 0..1000 {
        let (ns, s0) = (rng.random_range(2..100), rng.random_range(100.0..110.0));
        let src = random_axis(&mut rng, ns, s0);
        let (nd, d0) = (rng.random_range(2..100), rng.random_range(95.0..115.0));
        let dst = random_axis(&mut rng, nd, d0);
        let y: Vec<f32> = (0..ns).map(|_| rng.random_range(0.0..1e4)).collect();
        for (&t, &v) in dst.values().iter().zip(&interpolate_linear(&src, &y, &dst)) {
            let want = oracle_interpolate(src.values(), &y, t);
            let err = (v as f64 - want).abs() / want.abs().max(1e-300);
            if want != 0.0 || v != 0.0 {
                worst = worst.max(err);
            }
        }
        let ds = MsiDataset::new(1, 1, 1.0, src.clone(), y.clone(), vec![true]).unwrap();
        identity_exact &= rebin(&ds, &src).unwrap().intensities == y;
    }
    check(
        worst <= 1e-6 && identity_exact,
        format!("1000 spectra, worst relative error {worst:.1e}, identity bit-exact: {identity_exact}"),
    )
}

fn peak_picking() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let len = rng.random_range(3..=64);
        let axis = random_axis(&mut rng, len, 500.0);
        let y = random_spectrum(&mut rng, len);
        let k = rng.random_range(1..12);
        let sep = [0.0, 0.5, 1.0, 3.0][rng.random_range(0..4)];
        let got = pick_peaks(&Spectrum::new(axis.clone(), y.clone()).unwrap(), k, sep).unwrap();
        mismatches += (got.as_slice() != oracle_pick_peaks(axis.values(), &y, k, sep).as_slice()) as usize;
    }
    check(mismatches == 0, format!("1000 spectra, {mismatches} mismatches"))
}

fn affine_registration() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let t = random_affine(&mut rng);
        let src = loop {
            let p: Vec<(f64, f64)> = (0..3).map(|_| (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0))).collect();
            let area = ((p[1].0 - p[0].0) * (p[2].1 - p[0].1) - (p[2].0 - p[0].0) * (p[1].1 - p[0].1)).abs();
            if area > 1000.0 {
                break p;
            }
        };
        let cp = ControlPoints::new(
            src.iter()
                .map(|&(x, y)| {
                    let (u, v) = t.apply(x, y);
                    ControlPoint { src_x: x, src_y: y, dst_x: u, dst_y: v }
                })
                .collect(),
        );
        let fit = fit_affine(&cp).map_err(|e| e.to_string())?;
        for (a, b) in fit.coefficients().iter().zip(t.coefficients()) {
            worst = worst.max((a - b).abs());
        }
    }
    let collinear = ControlPoints::new(
        (0..4).map(|i| ControlPoint { src_x: i as f64, src_y: i as f64, dst_x: 0.0, dst_y: i as f64 }).collect(),
    );
    let rejects = fit_affine(&collinear).is_err();
    let mut worst_mae = 0.0f64;
    for _ in 0..20 {
        let img = smooth_image(&mut rng, 64, 64, 3);
        let t = mild_affine(&mut rng, 64);
        let there = warp(&img, &t, 64, 64, PadMode::Black).unwrap();
        let back = warp(&there, &t.inverse().unwrap(), 64, 64, PadMode::Black).unwrap();
        worst_mae = worst_mae.max(mean_abs_diff(&img, &back, |x, y| (10..54).contains(&x) && (10..54).contains(&y)));
    }
    check(
        worst <= 1e-9 && rejects && worst_mae <= 2e-2,
        format!("coefficient error {worst:.1e}, collinear rejected: {rejects}, roundtrip MAE {worst_mae:.1e}"),
    )
}

fn patches() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let img = random_image(&mut rng, 64, 64, 3);
    let exact = reassemble(&extract_patches(&img, 32, 32).unwrap(), 64, 64).unwrap() == img;
    let edge = random_image(&mut rng, 48, 32, 3);
    let back = reassemble(&extract_patches(&edge, 32, 32).unwrap(), 48, 32).unwrap();
    let err = edge.data.iter().zip(&back.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    check(exact && err <= 1e-6, format!("64x64 bit-exact: {exact}, 48x32 max error {err:.1e}"))
}

fn full_run_determinism() -> Outcome {
    let run = |root: &std::path::Path| -> Result<RunConfig, String> {
        let cfg = small_run(root, 10, 32);
        run_experiment(&cfg, &[(ModelKind::UNet, PadMode::Black), (ModelKind::Pix2Pix, PadMode::Black), (ModelKind::Pix2Pix, PadMode::White)])
            .map_err(|e| e.to_string())?;
        Ok(cfg)
    };
    let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    let (ca, cb) = (run(a.path())?, run(b.path())?);
    // the sample list and manifest hold absolute input paths; compare their
    // split assignments instead
    let without = |t: Vec<(std::path::PathBuf, Vec<u8>)>| -> Vec<_> {
        t.into_iter()
            .filter(|(p, _)| !["samples.csv", MANIFEST_FILE].contains(&p.to_str().unwrap_or("")))
            .collect()
    };
    let (da, db) = (without(tree(&a.path().join("data"))), without(tree(&b.path().join("data"))));
    let (oa, ob) = (without(tree(&ca.output_dir)), without(tree(&cb.output_dir)));
    let splits = |c: &RunConfig| -> Vec<(String, Split)> {
        DatasetManifest::load(&c.output_dir.join(MANIFEST_FILE))
            .unwrap()
            .entries
            .into_iter()
            .map(|e| (e.id, e.split))
            .collect()
    };
    let count = |t: &[(std::path::PathBuf, Vec<u8>)], ext: &str| t.iter().filter(|(p, _)| p.extension().is_some_and(|e| e == ext)).count();
    check(
        da == db && oa == ob && splits(&ca) == splits(&cb),
        format!(
            "{} data files and {} output files identical ({} checkpoints, {} PNGs, {} reports)",
            da.len(),
            oa.len(),
            count(&oa, "ckpt"),
            count(&oa, "png"),
            count(&oa, "md")
        ),
    )
}

fn unet_memorizes() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = small_run(dir.path(), 3, 64);
    cfg.unet = Default::default();
    cfg.split.train = 1.0;
    cfg.split.val = 0.0;
    cfg.split.test = 0.0;
    let set = prepare_pairs(&make_manifest(&cfg).map_err(|e| e.to_string())?, &cfg).map_err(|e| e.to_string())?;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for p in &set.pairs {
        let pairs = extract_patches(&p.msi, 32, 32).unwrap().into_iter().zip(extract_patches(&p.histology, 32, 32).unwrap());
        for (a, b) in pairs {
            xs.push(a.image);
            ys.push(b.image);
        }
    }
    xs.truncate(10);
    ys.truncate(10);
    let x = train::images_to_tensor(&xs.iter().collect::<Vec<_>>()).unwrap();
    let y = train::images_to_tensor(&ys.iter().collect::<Vec<_>>()).unwrap();
    let model = UNet::new(cfg.unet.model(3)).map_err(|e| e.to_string())?;
    let mut state = TrainState::new(model.layout.init(&mut ChaCha8Rng::seed_from_u64(0)), 0);
    let adam = cfg.unet.adam();
    let mse = |state: &TrainState| {
        let pred = model.predict(&state.params, &x).unwrap();
        pred.data.iter().zip(&y.data).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / y.numel() as f64
    };
    let mut steps = 0;
    while steps < 2000 && mse(&state) >= 1e-3 {
        unet_train_step(&model, &mut state, &adam, &x, &y).map_err(|e| e.to_string())?;
        steps += 1;
    }
    let final_mse = mse(&state);
    check(final_mse < 1e-3, format!("10 patches, MSE {final_mse:.2e} after {steps} steps"))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("pix2pix beats U-Net on synthetic test set", pix2pix_beats_unet),
        ("report reproduces published deltas", published_deltas),
        ("gradient suite", gradient_suite),
        ("conv adjoint identity", adjoint),
        ("metric oracles", metric_oracles),
        ("rebinning oracle", rebinning),
        ("peak picking oracle", peak_picking),
        ("affine registration", affine_registration),
        ("patch roundtrip", patches),
        ("full-run determinism", full_run_determinism),
        ("U-Net memorization", unet_memorizes),
    ];
    // cheap criteria first; the full experiment last
    let order = [1, 2, 3, 4, 5, 6, 7, 8, 10, 9, 0];
    let mut results = vec![None; criteria.len()];
    for &i in &order {
        let (name, run) = criteria[i];
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {:>2} {tag}: {name} ({detail})", i + 1);
        results[i] = Some(outcome.is_ok());
    }
    let failed = results.iter().filter(|r| **r != Some(true)).count();
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
