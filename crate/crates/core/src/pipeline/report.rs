//! Evaluation of trained generators and the model-comparison table.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::prepare::PreparedSet;
use super::split::Split;
use super::synth::Generator;
use super::train::{ModelKind, BEST_CHECKPOINT};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::imagereg::PadMode;
use crate::metrics::{evaluate_set, MetricReport};

/// Mean scores of one trained variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariantResult {
    pub kind: ModelKind,
    pub pad: PadMode,
    pub mi: f64,
    pub ssim: f64,
}

impl VariantResult {
    pub fn label(&self) -> String {
        format!("{} ({})", self.kind.display_name(), self.pad.tag())
    }
}

/// Improvement of the best pix2pix variant over the U-Net baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Delta {
    pub mi: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub rows: Vec<VariantResult>,
    pub delta: Option<Delta>,
}

/// Orders the variants (U-Net before pix2pix, black before white) and, when
/// both model kinds are present, computes the deltas of the best pix2pix
/// row (highest MI, then SSIM) over the U-Net baseline (black padding when
/// available).
pub fn report(results: &[VariantResult]) -> ComparisonReport {
    let mut rows = results.to_vec();
    let pad_rank = |p: PadMode| matches!(p, PadMode::White) as u8;
    rows.sort_by_key(|r| (r.kind, pad_rank(r.pad)));
    let baseline = rows.iter().find(|r| r.kind == ModelKind::UNet);
    let best = rows
        .iter()
        .filter(|r| r.kind == ModelKind::Pix2Pix)
        .max_by(|a, b| a.mi.total_cmp(&b.mi).then(a.ssim.total_cmp(&b.ssim)));
    let delta = match (baseline, best) {
        (Some(u), Some(p)) => Some(Delta {
            mi: p.mi - u.mi,
            ssim: p.ssim - u.ssim,
        }),
        _ => None,
    };
    ComparisonReport { rows, delta }
}

impl ComparisonReport {
    pub fn to_markdown(&self, title: &str) -> String {
        let mut out = format!("## {title}\n\n| Model | MI | SSIM |\n|---|---|---|\n");
        for r in &self.rows {
            let _ = writeln!(out, "| {} | {:.3} | {:.3} |", r.label(), r.mi, r.ssim);
        }
        if let Some(d) = self.delta {
            let _ = writeln!(out, "\nBest pix2pix vs U-Net: MI {:+.3}, SSIM {:+.3}", d.mi, d.ssim);
        }
        out
    }

    /// `variant,mi,ssim`, one row per variant plus a `delta` row when
    /// available.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,mi,ssim\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.label(), r.mi, r.ssim);
        }
        if let Some(d) = self.delta {
            let _ = writeln!(out, "delta,{},{}", d.mi, d.ssim);
        }
        out
    }

    pub fn save(&self, dir: &Path, stem: &str, title: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let md = dir.join(format!("{stem}.md"));
        std::fs::write(&md, self.to_markdown(title)).map_err(|e| Error::io(&md, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }
}

pub fn eval_stem(kind: ModelKind, pad: PadMode, split: Split) -> String {
    format!("{}_{}_{}", kind.slug(), pad.tag(), split)
}

/// Synthesizes every pair of `split` with `generator`, writes the PNGs to
/// `synth_dir` when given, and scores them against the registered
/// histology.
pub fn evaluate_generator(
    generator: &Generator,
    set: &PreparedSet,
    split: Split,
    bins: usize,
    synth_dir: Option<&Path>,
) -> Result<MetricReport> {
    let pairs = set.split(split);
    if pairs.is_empty() {
        return Err(Error::invalid(format!("the {split} split is empty")));
    }
    if let Some(dir) = synth_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut fakes: Vec<Image> = Vec::with_capacity(pairs.len());
    for pair in &pairs {
        let fake = generator
            .synthesize(pair.input(generator.input())?)
            .map_err(|e| e.at_stage(&pair.id, "synth"))?;
        if let Some(dir) = synth_dir {
            fake.save_png(&dir.join(format!("{}.png", pair.id)))?;
        }
        fakes.push(fake);
    }
    let items: Vec<_> = pairs
        .iter()
        .zip(&fakes)
        .map(|(p, f)| (p.id.as_str(), &p.histology, f))
        .collect();
    evaluate_set(&items, bins)
}

/// Evaluates `<model_dir>/best.ckpt` on the validation and test splits;
/// reports land in `<output_dir>/eval`, images in `<output_dir>/synth`.
pub fn evaluate_variant(
    output_dir: &Path,
    model_dir: &Path,
    kind: ModelKind,
    set: &PreparedSet,
    bins: usize,
) -> Result<Vec<(Split, MetricReport)>> {
    let generator = Generator::load(&model_dir.join(BEST_CHECKPOINT))?;
    let mut out = Vec::new();
    for split in [Split::Val, Split::Test] {
        if set.split(split).is_empty() {
            log::warn!("skipping evaluation on the empty {split} split");
            continue;
        }
        let stem = eval_stem(kind, set.pad_mode, split);
        let synth_dir = output_dir.join("synth").join(&stem);
        let report = evaluate_generator(&generator, set, split, bins, Some(&synth_dir))?;
        let label = format!("{} ({}), {split} split", kind.display_name(), set.pad_mode.tag());
        report.save(&output_dir.join("eval"), &stem, &label)?;
        log::info!("{label}: MI {:.4}, SSIM {:.4}", report.mi, report.ssim);
        out.push((split, report));
    }
    Ok(out)
}

/// Collects every `eval/<model>_<pad>_<split>.csv` present for `split`.
pub fn collect_results(output_dir: &Path, split: Split) -> Result<Vec<VariantResult>> {
    let mut out = Vec::new();
    for kind in [ModelKind::UNet, ModelKind::Pix2Pix] {
        for pad in [PadMode::Black, PadMode::White] {
            let path: PathBuf = output_dir.join("eval").join(format!("{}.csv", eval_stem(kind, pad, split)));
            if path.exists() {
                let r = MetricReport::load_csv(&path)?;
                out.push(VariantResult {
                    kind,
                    pad,
                    mi: r.mi,
                    ssim: r.ssim,
                });
            }
        }
    }
    Ok(out)
}

/// Writes `report_<split>.md/.csv` for every split with results; returns
/// the reports written.
pub fn write_reports(output_dir: &Path) -> Result<Vec<(Split, ComparisonReport)>> {
    let mut out = Vec::new();
    for split in [Split::Test, Split::Val] {
        let results = collect_results(output_dir, split)?;
        if results.is_empty() {
            continue;
        }
        let rep = report(&results);
        rep.save(
            output_dir,
            &format!("report_{split}"),
            &format!("Synthesized histology, {split} split (image-level means)"),
        )?;
        out.push((split, rep));
    }
    if out.is_empty() {
        return Err(Error::invalid(format!(
            "no evaluation results under {}",
            output_dir.join("eval").display()
        )));
    }
    Ok(out)
}
