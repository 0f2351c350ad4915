//! MSI data model, interpolation rebinning, spectral summation, peak picking
//! and ion-image extraction.

mod io;
mod peaks;

pub use io::{load_msi, save_msi, ContainerHeader, DEFAULT_PIXEL_SIZE_UM};
pub use peaks::{pick_peaks, Peak, PeakList};

use crate::error::{Error, Result};
use crate::image::Image;

/// Strictly increasing, finite, non-negative m/z values (at least two).
#[derive(Debug, Clone, PartialEq)]
pub struct MzAxis(Vec<f64>);

impl MzAxis {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::invalid(format!(
                "m/z axis needs at least 2 values, got {}",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::invalid(format!("m/z axis contains invalid value {bad}")));
        }
        if let Some(i) = values.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::invalid(format!(
                "m/z axis not strictly increasing at index {}: {} then {}",
                i + 1,
                values[i],
                values[i + 1]
            )));
        }
        Ok(Self(values))
    }

    /// `start, start + width, ...` up to and including `end` (within 1e-9 bins).
    pub fn uniform(start: f64, end: f64, width: f64) -> Result<Self> {
        if !(width > 0.0) || !(end > start) {
            return Err(Error::invalid(format!(
                "uniform axis needs end > start and width > 0 (start={start}, end={end}, width={width})"
            )));
        }
        let n = ((end - start) / width + 1e-9).floor() as usize + 1;
        Self::new((0..n).map(|i| start + i as f64 * width).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.0[0]
    }

    pub fn max(&self) -> f64 {
        self.0[self.0.len() - 1]
    }

    pub fn contains(&self, mz: f64) -> bool {
        mz >= self.min() && mz <= self.max()
    }

    pub fn bin_widths(&self) -> impl Iterator<Item = f64> + '_ {
        self.0.windows(2).map(|w| w[1] - w[0])
    }

    pub fn median_bin_width(&self) -> f64 {
        median(self.bin_widths().collect())
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// A single spectrum on its axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub axis: MzAxis,
    pub intensities: Vec<f32>,
}

impl Spectrum {
    pub fn new(axis: MzAxis, intensities: Vec<f32>) -> Result<Self> {
        if intensities.len() != axis.len() {
            return Err(Error::SizeMismatch {
                what: "spectrum intensities",
                expected: axis.len(),
                found: intensities.len(),
            });
        }
        if let Some(bad) = intensities.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::invalid(format!("spectrum intensity {bad} is not finite and non-negative")));
        }
        Ok(Self { axis, intensities })
    }
}

/// A `width × height` grid of spectra on one shared m/z axis.
///
/// Spectra are stored row-major (y, then x) as one flat block of
/// `width * height * axis.len()` intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct MsiDataset {
    pub width: usize,
    pub height: usize,
    pub pixel_size_um: f64,
    pub axis: MzAxis,
    pub intensities: Vec<f32>,
    pub mask: Vec<bool>,
}

impl MsiDataset {
    pub fn new(
        width: usize,
        height: usize,
        pixel_size_um: f64,
        axis: MzAxis,
        intensities: Vec<f32>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        let ds = Self {
            width,
            height,
            pixel_size_um,
            axis,
            intensities,
            mask,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("dataset dimensions must be positive"));
        }
        if !(self.pixel_size_um > 0.0) || !self.pixel_size_um.is_finite() {
            return Err(Error::invalid(format!(
                "pixel_size_um must be positive, got {}",
                self.pixel_size_um
            )));
        }
        let pixels = self.n_pixels();
        if self.intensities.len() != pixels * self.axis.len() {
            return Err(Error::SizeMismatch {
                what: "spectra",
                expected: pixels,
                found: self.intensities.len() / self.axis.len(),
            });
        }
        if self.mask.len() != pixels {
            return Err(Error::SizeMismatch {
                what: "mask",
                expected: pixels,
                found: self.mask.len(),
            });
        }
        if let Some(bad) = self.intensities.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::invalid(format!("intensity {bad} is not finite and non-negative")));
        }
        Ok(())
    }

    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn n_bins(&self) -> usize {
        self.axis.len()
    }

    /// Intensities of pixel `p = y * width + x`.
    pub fn spectrum(&self, p: usize) -> &[f32] {
        let n = self.n_bins();
        &self.intensities[p * n..(p + 1) * n]
    }

    pub fn spectrum_at(&self, x: usize, y: usize) -> &[f32] {
        self.spectrum(y * self.width + x)
    }
}

/// Per-target-bin interpolation plan: source segment index and weight of the
/// right endpoint. `None` marks targets outside the source range.
fn interpolation_plan(source: &[f64], target: &[f64]) -> Vec<Option<(usize, f64)>> {
    let last = source.len() - 1;
    let mut j = 0;
    target
        .iter()
        .map(|&t| {
            if t < source[0] || t > source[last] {
                return None;
            }
            while j + 1 < last && source[j + 1] <= t {
                j += 1;
            }
            while j > 0 && source[j] > t {
                j -= 1;
            }
            if t == source[j] {
                Some((j, 0.0))
            } else if t == source[j + 1] {
                Some((j + 1, 0.0))
            } else {
                Some((j, (t - source[j]) / (source[j + 1] - source[j])))
            }
        })
        .collect()
}

/// Linearly interpolates `values` (sampled on `source`) onto `target`.
///
/// Target points outside `[source.min, source.max]` map to zero; points that
/// coincide with a source sample copy it exactly.
pub fn interpolate_linear(source: &MzAxis, values: &[f32], target: &MzAxis) -> Vec<f32> {
    let plan = interpolation_plan(source.values(), target.values());
    apply_plan(&plan, values)
}

fn apply_plan(plan: &[Option<(usize, f64)>], values: &[f32]) -> Vec<f32> {
    plan.iter()
        .map(|step| match *step {
            None => 0.0,
            Some((j, 0.0)) => values[j],
            Some((j, w)) => {
                let lo = values[j] as f64;
                let hi = values[j + 1] as f64;
                (lo * (1.0 - w) + hi * w) as f32
            }
        })
        .collect()
}

/// Resamples every spectrum of `dataset` onto `target`.
pub fn rebin(dataset: &MsiDataset, target: &MzAxis) -> Result<MsiDataset> {
    dataset.validate()?;
    let plan = interpolation_plan(dataset.axis.values(), target.values());
    let mut intensities = Vec::with_capacity(dataset.n_pixels() * target.len());
    for p in 0..dataset.n_pixels() {
        intensities.extend(apply_plan(&plan, dataset.spectrum(p)));
    }
    Ok(MsiDataset {
        width: dataset.width,
        height: dataset.height,
        pixel_size_um: dataset.pixel_size_um,
        axis: target.clone(),
        intensities,
        mask: dataset.mask.clone(),
    })
}

/// Uniform axis spanning the global m/z range of `axes`, with the median of
/// all source bin widths as its step.
pub fn shared_axis<'a>(axes: impl IntoIterator<Item = &'a MzAxis>) -> Result<MzAxis> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut widths = Vec::new();
    for axis in axes {
        lo = lo.min(axis.min());
        hi = hi.max(axis.max());
        widths.extend(axis.bin_widths());
    }
    if widths.is_empty() {
        return Err(Error::invalid("cannot build a shared axis from zero datasets"));
    }
    MzAxis::uniform(lo, hi, median(widths))
}

/// Element-wise sum over all acquired (mask-true) pixels, accumulated in f64.
pub fn sum_spectra(dataset: &MsiDataset) -> Result<Spectrum> {
    sum_spectra_many(std::slice::from_ref(dataset))
}

/// Sum over the acquired pixels of several datasets sharing one axis.
pub fn sum_spectra_many(datasets: &[MsiDataset]) -> Result<Spectrum> {
    let first = datasets
        .first()
        .ok_or_else(|| Error::invalid("no datasets to sum"))?;
    let mut acc = vec![0.0f64; first.n_bins()];
    let mut any = false;
    for ds in datasets {
        if ds.axis != first.axis {
            return Err(Error::invalid("datasets must share one m/z axis before summation (rebin first)"));
        }
        for p in (0..ds.n_pixels()).filter(|&p| ds.mask[p]) {
            any = true;
            for (a, &v) in acc.iter_mut().zip(ds.spectrum(p)) {
                *a += v as f64;
            }
        }
    }
    if !any {
        return Err(Error::invalid("no acquired pixels (mask is all false)"));
    }
    Spectrum::new(first.axis.clone(), acc.into_iter().map(|v| v as f32).collect())
}

/// Per-pixel sum of intensities over axis bins within `[mz - half_window, mz + half_window]`.
pub fn ion_image(dataset: &MsiDataset, mz: f64, half_window: f64) -> Result<Image> {
    if !dataset.axis.contains(mz) {
        return Err(Error::invalid(format!(
            "m/z {mz} outside axis range [{}, {}]",
            dataset.axis.min(),
            dataset.axis.max()
        )));
    }
    if !(half_window >= 0.0) {
        return Err(Error::invalid(format!("half_window must be >= 0, got {half_window}")));
    }
    let (lo, hi) = (mz - half_window, mz + half_window);
    let values = dataset.axis.values();
    let start = values.partition_point(|&v| v < lo);
    let end = values.partition_point(|&v| v <= hi);
    let mut data = Vec::with_capacity(dataset.n_pixels());
    for p in 0..dataset.n_pixels() {
        if !dataset.mask[p] {
            data.push(0.0);
            continue;
        }
        let s = &dataset.spectrum(p)[start..end.max(start)];
        data.push(s.iter().map(|&v| v as f64).sum());
    }
    Image::new(dataset.width, dataset.height, 1, data)
}

/// `H×W×K` stack of ion images, one channel per picked peak.
#[derive(Debug, Clone, PartialEq)]
pub struct PeakImageStack {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Pixel-major: `data[(y * width + x) * channels + k]`.
    pub data: Vec<f64>,
    pub peak_mzs: Vec<f64>,
    /// Acquired pixels, carried over from the source dataset.
    pub mask: Vec<bool>,
}

impl PeakImageStack {
    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }

    pub fn channel(&self, k: usize) -> Vec<f64> {
        self.data.iter().skip(k).step_by(self.channels).copied().collect()
    }
}

/// Default ion-image half window: half the dataset's median bin width.
pub fn default_half_window(axis: &MzAxis) -> f64 {
    0.5 * axis.median_bin_width()
}

pub fn build_peak_stack(dataset: &MsiDataset, peaks: &PeakList, half_window: f64) -> Result<PeakImageStack> {
    if peaks.is_empty() {
        return Err(Error::invalid("cannot build a peak stack from an empty peak list"));
    }
    let k = peaks.len();
    let n = dataset.n_pixels();
    let mut data = vec![0.0; n * k];
    for (c, peak) in peaks.iter().enumerate() {
        let img = ion_image(dataset, peak.mz, half_window)?;
        for (p, v) in img.data.into_iter().enumerate() {
            data[p * k + c] = v;
        }
    }
    Ok(PeakImageStack {
        width: dataset.width,
        height: dataset.height,
        channels: k,
        data,
        peak_mzs: peaks.iter().map(|p| p.mz).collect(),
        mask: dataset.mask.clone(),
    })
}
