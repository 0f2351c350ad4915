use std::path::Path;
use std::process::{Command, Output};

fn msihist(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msihist"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = r#"
seed = 3
output_dir = "out"

[paths]
samples = "data/samples.csv"

[preprocess]
k_peaks = 12
image_size = 16

[unet]
patch = 8
stride = 8
max_steps = 4
eval_every = 2

[pix2pix]
max_steps = 4
eval_every = 2
"#;

#[test]
fn help_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&msihist(&["--help"], dir.path())), 0);
    assert_eq!(code(&msihist(&["frobnicate"], dir.path())), 1);
    assert_eq!(code(&msihist(&["prepare", "--pad", "grey"], dir.path())), 1);
    let o = msihist(&["synth", "--checkpoint", "x", "--input", "y"], dir.path());
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("--out"));
}

#[test]
fn config_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[unet]\nstrid = 4\n").unwrap();
    let o = msihist(&["prepare", "--config", "bad.toml"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("strid"), "{}", stderr(&o));

    std::fs::write(dir.path().join("bad.toml"), "[split]\ntrain = 0.9\n").unwrap();
    let o = msihist(&["prepare", "--config", "bad.toml"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("split"), "{}", stderr(&o));
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.toml"), TINY).unwrap();
    assert_eq!(code(&msihist(&["generate", "--config", "cfg.toml", "--n", "5", "--image-size", "16"], dir.path())), 0);
    // output directory cannot be created: a file is in the way
    std::fs::write(dir.path().join("blocked"), "").unwrap();
    let o = msihist(&["prepare", "--config", "cfg.toml", "--out", "blocked/run"], dir.path());
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("cfg.toml"), TINY).unwrap();
    let ok = |args: &[&str]| {
        let o = msihist(args, d);
        assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
        String::from_utf8(o.stdout).unwrap()
    };
    ok(&["generate", "--config", "cfg.toml", "--n", "6", "--image-size", "16"]);
    assert!(d.join("data/samples.csv").exists());

    ok(&["rebin", "--input", "data/sample_000/msi", "data/sample_001/msi", "--out", "rebinned"]);
    assert!(d.join("rebinned/sample_000/msi/header.json").exists());
    assert!(d.join("rebinned/sample_001/msi/header.json").exists());
    let peaks = ok(&["peaks", "--config", "cfg.toml", "--input", "data/sample_000/msi", "data/sample_001/msi"]);
    assert!(peaks.starts_with("mz,intensity\n"));
    assert_eq!(peaks.lines().count(), 13);
    ok(&["peaks", "--config", "cfg.toml", "--input", "data/sample_000/msi", "--out", "peaks.csv"]);
    ok(&["reduce", "--input", "data/sample_000/msi", "--peaks", "peaks.csv", "--out", "msi.png"]);
    assert!(d.join("msi.png").exists());
    let reg = ok(&[
        "register",
        "--histology",
        "data/sample_000/histology.png",
        "--control-points",
        "data/sample_000/control_points.csv",
        "--size",
        "16",
        "--out",
        "registered.png",
    ]);
    assert!(reg.contains("affine"));

    ok(&["prepare", "--config", "cfg.toml"]);
    assert!(d.join("out/manifest.csv").exists());
    ok(&["train-unet", "--config", "cfg.toml"]);
    ok(&["train-pix2pix", "--config", "cfg.toml"]);
    let log = std::fs::read_to_string(d.join("out/pix2pix_B/train_log.csv")).unwrap();
    assert!(log.starts_with("step,loss_g,loss_d\n"));
    let log = std::fs::read_to_string(d.join("out/unet_B/train_log.csv")).unwrap();
    assert!(log.starts_with("step,loss\n"));
    let eval = ok(&["eval", "--config", "cfg.toml"]);
    assert!(eval.contains("MI"));
    let report = ok(&["report", "--config", "cfg.toml"]);
    assert!(report.contains("| U-Net (B) |") && report.contains("| pix2pix (B) |"));
    assert!(d.join("out/report_test.md").exists());

    let msi_png = d.join("out/pairs_B").read_dir().unwrap().map(|e| e.unwrap().path()).find(|p| p.to_string_lossy().ends_with("_msi.png")).unwrap();
    ok(&["synth", "--checkpoint", "out/unet_B/best.ckpt", "--input", msi_png.to_str().unwrap(), "--out", "fake.png"]);
    assert!(d.join("fake.png").exists());

    // the output directory is locked while a run holds it
    std::fs::write(d.join("out/.lock"), "").unwrap();
    assert_eq!(code(&msihist(&["prepare", "--config", "cfg.toml"], d)), 1);
}

#[test]
fn run_with_explicit_variants() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("cfg.toml"), TINY).unwrap();
    assert_eq!(code(&msihist(&["generate", "--config", "cfg.toml", "--n", "6", "--image-size", "16"], d)), 0);
    let o = msihist(&["run", "--config", "cfg.toml", "--variants", "unet:black,pix2pix:white", "--out", "r"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("pix2pix (W)"));
    assert!(d.join("r/report_test.csv").exists());
    assert_eq!(code(&msihist(&["run", "--config", "cfg.toml", "--variants", "gan:black"], d)), 1);
}
