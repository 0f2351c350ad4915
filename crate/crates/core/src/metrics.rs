//! Mutual information and SSIM between real and synthesized histology.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::Image;

pub const DEFAULT_MI_BINS: usize = 64;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
/// Dynamic range of luminance images.
const SSIM_L: f64 = 1.0;

pub const SSIM_C1: f64 = (SSIM_K1 * SSIM_L) * (SSIM_K1 * SSIM_L);
pub const SSIM_C2: f64 = (SSIM_K2 * SSIM_L) * (SSIM_K2 * SSIM_L);

fn check_dims(a: &Image, b: &Image) -> Result<()> {
    if !a.same_dims(b) {
        return Err(Error::shape(format!(
            "image dimensions differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

fn bin_indices(img: &Image, bins: usize) -> Vec<usize> {
    img.luminance()
        .data
        .iter()
        .map(|&v| ((v * bins as f64) as usize).min(bins - 1))
        .collect()
}

fn check_bins(bins: usize) -> Result<()> {
    if bins < 2 {
        return Err(Error::invalid(format!("histogram needs at least 2 bins, got {bins}")));
    }
    Ok(())
}

/// Shannon entropy (nats) of the luminance histogram.
pub fn entropy(img: &Image, bins: usize) -> Result<f64> {
    check_bins(bins)?;
    let mut hist = vec![0u64; bins];
    for i in bin_indices(img, bins) {
        hist[i] += 1;
    }
    let n = (img.width * img.height) as f64;
    Ok(hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum())
}

/// Histogram mutual information (nats) between the luminances of `a` and `b`
/// on `bins` equal-width bins over [0, 1].
pub fn mutual_information(a: &Image, b: &Image, bins: usize) -> Result<f64> {
    check_dims(a, b)?;
    check_bins(bins)?;
    let ia = bin_indices(a, bins);
    let ib = bin_indices(b, bins);
    let mut joint = vec![0u64; bins * bins];
    let mut ma = vec![0u64; bins];
    let mut mb = vec![0u64; bins];
    for (&i, &j) in ia.iter().zip(&ib) {
        joint[i * bins + j] += 1;
        ma[i] += 1;
        mb[j] += 1;
    }
    let n = ia.len() as f64;
    let term = |n_ij: u64, n_i: u64, n_j: u64| -> f64 {
        if n_ij == 0 {
            return 0.0;
        }
        let p = n_ij as f64 / n;
        p * (p / ((n_i as f64 / n) * (n_j as f64 / n))).ln()
    };
    // Cells (i, j) and (j, i) are added as one pair so that swapping the
    // arguments reproduces the same summation bit for bit.
    let mut mi = 0.0;
    for i in 0..bins {
        mi += term(joint[i * bins + i], ma[i], mb[i]);
        for j in i + 1..bins {
            let upper = term(joint[i * bins + j], ma[i], mb[j]);
            let lower = term(joint[j * bins + i], ma[j], mb[i]);
            mi += upper + lower;
        }
    }
    Ok(mi.max(0.0))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

fn gaussian_filter(data: &[f64], w: usize, h: usize, kernel: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * data[y * w + reflect(x as isize + k as isize - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * tmp[reflect(y as isize + k as isize - r, h) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Mean SSIM over the luminance images, using an 11×11 Gaussian window
/// (σ = 1.5), K1 = 0.01, K2 = 0.03, L = 1 and reflective borders.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.width, a.height
        )));
    }
    let (w, h) = (a.width, a.height);
    let x = a.luminance().data;
    let y = b.luminance().data;
    let kernel = gaussian_kernel();
    let filt = |d: &[f64]| gaussian_filter(d, w, h, &kernel);
    let mu_x = filt(&x);
    let mu_y = filt(&y);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let e_xx = filt(&xx);
    let e_yy = filt(&yy);
    let e_xy = filt(&xy);

    let mut total = 0.0;
    for i in 0..w * h {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let vx = e_xx[i] - mx * mx;
        let vy = e_yy[i] - my * my;
        let cxy = e_xy[i] - mx * my;
        let num = (2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2);
        let den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2);
        total += num / den;
    }
    Ok(total / (w * h) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageScore {
    pub id: String,
    pub mi: f64,
    pub ssim: f64,
}

/// Image-level MI/SSIM with their arithmetic means.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub mi: f64,
    pub ssim: f64,
    pub n_images: usize,
    pub per_image: Vec<ImageScore>,
}

/// One evaluation item: `(id, real, synthesized)`.
pub type EvalPair<'a> = (&'a str, &'a Image, &'a Image);

pub fn evaluate_set(pairs: &[EvalPair<'_>], bins: usize) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty set of image pairs"));
    }
    let per_image = pairs
        .iter()
        .map(|&(id, real, fake)| {
            Ok(ImageScore {
                id: id.to_string(),
                mi: mutual_information(real, fake, bins)?,
                ssim: ssim(real, fake)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_image.len() as f64;
    Ok(MetricReport {
        mi: per_image.iter().map(|s| s.mi).sum::<f64>() / n,
        ssim: per_image.iter().map(|s| s.ssim).sum::<f64>() / n,
        n_images: per_image.len(),
        per_image,
    })
}

impl MetricReport {
    /// `id,mi,ssim` rows, one per image.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,mi,ssim\n");
        for s in &self.per_image {
            let _ = writeln!(out, "{},{},{}", s.id, s.mi, s.ssim);
        }
        out
    }

    pub fn to_markdown(&self, label: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "<!-- image-level means over {} whole images (not patches) -->",
            self.n_images
        );
        out.push_str("| | MI | SSIM |\n|---|---|---|\n");
        let _ = writeln!(out, "| {label} | {:.3} | {:.3} |", self.mi, self.ssim);
        out
    }

    pub fn save(&self, dir: &Path, stem: &str, label: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let md = dir.join(format!("{stem}.md"));
        std::fs::write(&md, self.to_markdown(label)).map_err(|e| Error::io(&md, e))
    }

    /// Reads back the means from a report CSV written by [`MetricReport::to_csv`].
    pub fn load_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let mut per_image = Vec::new();
        for row in reader.records() {
            let row = row.map_err(|e| Error::csv(path, e))?;
            let parse = |i: usize| -> Result<f64> {
                row.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Format {
                    what: "metric report CSV",
                    detail: format!("bad value in column {i}"),
                })
            };
            per_image.push(ImageScore {
                id: row.get(0).unwrap_or_default().to_string(),
                mi: parse(1)?,
                ssim: parse(2)?,
            });
        }
        if per_image.is_empty() {
            return Err(Error::Format {
                what: "metric report CSV",
                detail: "no rows".into(),
            });
        }
        let n = per_image.len() as f64;
        Ok(Self {
            mi: per_image.iter().map(|s| s.mi).sum::<f64>() / n,
            ssim: per_image.iter().map(|s| s.ssim).sum::<f64>() / n,
            n_images: per_image.len(),
            per_image,
        })
    }
}
