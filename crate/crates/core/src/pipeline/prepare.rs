//! Turns raw samples into co-registered image pairs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ModelInput, RunConfig};
use super::split::{DatasetManifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::imagereg::{fit_affine, pad_to_square, resize, warp, AffineTransform, ControlPoints, PadMode};
use crate::reduce::{pca_rgb, percentile};
use crate::spectra::{
    build_peak_stack, default_half_window, load_msi, pick_peaks, rebin, shared_axis, sum_spectra_many, MsiDataset,
    PeakImageStack, PeakList,
};

/// A co-registered MSI rendering and histology image in the common frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub id: String,
    pub split: Split,
    /// Three-channel PCA rendering of the peak stack.
    pub msi: Image,
    /// Histology warped onto the MSI frame.
    pub histology: Image,
    /// Percentile-scaled ion images of all picked peaks, when requested.
    pub peaks: Option<Image>,
    pub pad_mode: PadMode,
    /// Histology → MSI transform fitted from the control points.
    pub transform: AffineTransform,
}

impl ImagePair {
    /// Model input for the requested representation.
    pub fn input(&self, kind: ModelInput) -> Result<&Image> {
        match kind {
            ModelInput::Rgb => Ok(&self.msi),
            ModelInput::Peaks => self
                .peaks
                .as_ref()
                .ok_or_else(|| Error::invalid(format!("pair `{}` was prepared without peak channels", self.id))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSet {
    pub pairs: Vec<ImagePair>,
    pub peaks: PeakList,
    pub pad_mode: PadMode,
}

impl PreparedSet {
    pub fn split(&self, split: Split) -> Vec<&ImagePair> {
        self.pairs.iter().filter(|p| p.split == split).collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PairRow {
    id: String,
    split: Split,
    msi: String,
    histology: String,
    peaks: String,
    pad_mode: PadMode,
    a: f64,
    b: f64,
    c: f64,
    d: f64,
    tx: f64,
    ty: f64,
}

/// Directory holding the prepared pairs for one padding mode.
pub fn pairs_dir(output_dir: &Path, pad: PadMode) -> PathBuf {
    output_dir.join(format!("pairs_{}", pad.tag()))
}

/// Dataset-wide spectral stage: shared axis, rebinning, summation and peak
/// picking over every sample.
pub fn pick_dataset_peaks(datasets: &[MsiDataset], cfg: &RunConfig) -> Result<(Vec<MsiDataset>, PeakList)> {
    let axis = shared_axis(datasets.iter().map(|d| &d.axis))?;
    let rebinned = datasets.iter().map(|d| rebin(d, &axis)).collect::<Result<Vec<_>>>()?;
    let total = sum_spectra_many(&rebinned)?;
    let peaks = pick_peaks(&total, cfg.preprocess.k_peaks, cfg.preprocess.min_separation)?;
    if peaks.len() < cfg.preprocess.k_peaks {
        log::warn!(
            "only {} peaks found (requested {})",
            peaks.len(),
            cfg.preprocess.k_peaks
        );
    }
    Ok((rebinned, peaks))
}

fn square_resize(img: &Image, size: usize, pad: PadMode) -> Result<Image> {
    let sq = if img.width == img.height { img.clone() } else { pad_to_square(img, pad)? };
    if sq.width == size {
        Ok(sq)
    } else {
        resize(&sq, size, size)
    }
}

/// Each ion image divided by its 99th percentile over acquired pixels and
/// clamped to [0, 1].
pub fn scaled_peak_image(stack: &PeakImageStack) -> Result<Image> {
    let n = stack.width * stack.height;
    let mut data = vec![0.0; n * stack.channels];
    for k in 0..stack.channels {
        let ch = stack.channel(k);
        let mut on: Vec<f64> = ch.iter().zip(&stack.mask).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
        on.sort_by(f64::total_cmp);
        let hi = if on.is_empty() { 0.0 } else { percentile(&on, 99.0) };
        for p in 0..n {
            data[p * stack.channels + k] = if hi > 0.0 { (ch[p] / hi).clamp(0.0, 1.0) } else { 0.0 };
        }
    }
    Image::new(stack.width, stack.height, stack.channels, data)
}

/// Registers and frames one sample. `dataset` must already be on the
/// shared axis.
pub fn prepare_sample(
    entry: &ManifestEntry,
    dataset: &MsiDataset,
    peaks: &PeakList,
    cfg: &RunConfig,
    with_peaks: bool,
) -> Result<ImagePair> {
    let p = &cfg.preprocess;
    let size = p.image_size;
    let stage = |stage: &'static str| move |e: Error| e.at_stage(&entry.id, stage);
    let hw = p.half_window.unwrap_or_else(|| default_half_window(&dataset.axis));
    let stack = build_peak_stack(dataset, peaks, hw).map_err(stage("build_peak_stack"))?;
    let rgb = pca_rgb(&stack, p.clip_low_pct, p.clip_high_pct).map_err(stage("pca_rgb"))?;
    let msi = square_resize(&rgb, size, PadMode::Black).map_err(stage("resize_msi"))?;
    let peak_img = if with_peaks {
        let img = scaled_peak_image(&stack).map_err(stage("peak_channels"))?;
        Some(square_resize(&img, size, PadMode::Black).map_err(stage("resize_msi"))?)
    } else {
        None
    };
    let raw = Image::load_png_rgb(&entry.histology).map_err(stage("load_histology"))?;
    let hist = square_resize(&raw, size, cfg.pad_mode).map_err(stage("resize_histology"))?;
    let points = ControlPoints::load_csv(&entry.control_points).map_err(stage("load_control_points"))?;
    let transform = fit_affine(&points).map_err(stage("fit_affine"))?;
    let histology = warp(&hist, &transform, size, size, cfg.pad_mode).map_err(stage("warp"))?;
    Ok(ImagePair {
        id: entry.id.clone(),
        split: entry.split,
        msi,
        histology,
        peaks: peak_img,
        pad_mode: cfg.pad_mode,
        transform,
    })
}

/// Full preparation: loads every sample, runs the spectral and geometric
/// stages, writes the pairs to `pairs_dir(cfg.output_dir, cfg.pad_mode)`
/// and returns them as read back from disk.
pub fn prepare_pairs(manifest: &DatasetManifest, cfg: &RunConfig) -> Result<PreparedSet> {
    if manifest.entries.is_empty() {
        return Err(Error::invalid("manifest lists no samples"));
    }
    let datasets = manifest
        .entries
        .iter()
        .map(|e| load_msi(&e.msi).map_err(|err| err.at_stage(&e.id, "load_msi")))
        .collect::<Result<Vec<_>>>()?;
    let (rebinned, peaks) =
        pick_dataset_peaks(&datasets, cfg).map_err(|e| e.at_stage("<dataset>", "peak_picking"))?;
    let with_peaks = cfg.pix2pix.input == ModelInput::Peaks;
    let pairs = manifest
        .entries
        .iter()
        .zip(&rebinned)
        .map(|(entry, ds)| prepare_sample(entry, ds, &peaks, cfg, with_peaks))
        .collect::<Result<Vec<_>>>()?;
    let set = PreparedSet {
        pairs,
        peaks,
        pad_mode: cfg.pad_mode,
    };
    let dir = pairs_dir(&cfg.output_dir, cfg.pad_mode);
    save_pairs(&set, &dir)?;
    load_pairs(&dir)
}

pub fn save_pairs(set: &PreparedSet, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let peaks_path = dir.join("peaks.csv");
    let mut w = csv::Writer::from_path(&peaks_path).map_err(|e| Error::csv(&peaks_path, e))?;
    w.write_record(["mz", "intensity"]).map_err(|e| Error::csv(&peaks_path, e))?;
    for p in set.peaks.iter() {
        w.write_record([p.mz.to_string(), p.intensity.to_string()])
            .map_err(|e| Error::csv(&peaks_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&peaks_path, e))?;

    let csv_path = dir.join("pairs.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::csv(&csv_path, e))?;
    for pair in &set.pairs {
        let msi = format!("{}_msi.png", pair.id);
        let histology = format!("{}_histology.png", pair.id);
        pair.msi.save_png(&dir.join(&msi))?;
        pair.histology.save_png(&dir.join(&histology))?;
        let peaks = match &pair.peaks {
            Some(img) => {
                let name = format!("{}_peaks.bin", pair.id);
                save_raw(img, &dir.join(&name))?;
                name
            }
            None => String::new(),
        };
        let t = pair.transform;
        w.serialize(PairRow {
            id: pair.id.clone(),
            split: pair.split,
            msi,
            histology,
            peaks,
            pad_mode: pair.pad_mode,
            a: t.a,
            b: t.b,
            c: t.c,
            d: t.d,
            tx: t.tx,
            ty: t.ty,
        })
        .map_err(|e| Error::csv(&csv_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))
}

pub fn load_pairs(dir: &Path) -> Result<PreparedSet> {
    let peaks_path = dir.join("peaks.csv");
    let mut r = csv::Reader::from_path(&peaks_path).map_err(|e| Error::csv(&peaks_path, e))?;
    let peaks = r
        .deserialize()
        .collect::<std::result::Result<Vec<crate::spectra::Peak>, _>>()
        .map_err(|e| Error::csv(&peaks_path, e))?;

    let csv_path = dir.join("pairs.csv");
    let mut r = csv::Reader::from_path(&csv_path).map_err(|e| Error::csv(&csv_path, e))?;
    let mut pairs = Vec::new();
    let mut pad_mode = None;
    for row in r.deserialize() {
        let row: PairRow = row.map_err(|e| Error::csv(&csv_path, e))?;
        if *pad_mode.get_or_insert(row.pad_mode) != row.pad_mode {
            return Err(Error::invalid(format!("{} mixes padding modes", csv_path.display())));
        }
        let peaks = if row.peaks.is_empty() { None } else { Some(load_raw(&dir.join(&row.peaks))?) };
        pairs.push(ImagePair {
            msi: Image::load_png_rgb(&dir.join(&row.msi))?,
            histology: Image::load_png_rgb(&dir.join(&row.histology))?,
            peaks,
            id: row.id,
            split: row.split,
            pad_mode: row.pad_mode,
            transform: AffineTransform {
                a: row.a,
                b: row.b,
                c: row.c,
                d: row.d,
                tx: row.tx,
                ty: row.ty,
            },
        });
    }
    let pad_mode = pad_mode.ok_or_else(|| Error::invalid(format!("{} lists no pairs", csv_path.display())))?;
    Ok(PreparedSet {
        pairs,
        peaks: PeakList::from_peaks(peaks),
        pad_mode,
    })
}

/// `u32 width, u32 height, u32 channels` then interleaved f64 samples, all
/// little-endian.
fn save_raw(img: &Image, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(12 + 8 * img.data.len());
    for d in [img.width, img.height, img.channels] {
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &img.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn load_raw(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = || Error::Format {
        what: "peak channel file",
        detail: path.display().to_string(),
    };
    if bytes.len() < 12 {
        return Err(bad());
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let (w, h, c) = (dim(0), dim(1), dim(2));
    let body = &bytes[12..];
    if body.len() != w * h * c * 8 {
        return Err(Error::SizeMismatch {
            what: "peak channel file",
            expected: w * h * c * 8,
            found: body.len(),
        });
    }
    let data = body.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
    Image::new(w, h, c, data).map_err(|_| bad())
}
