//! PCA reduction of a peak-image stack to a 3-channel pseudo-color image.

use std::cmp::Ordering;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::spectra::PeakImageStack;

/// Eigenvalues below this fraction of the largest are treated as zero so that
/// rank-deficient stacks produce constant (not noise-amplified) channels.
const RELATIVE_EIGEN_FLOOR: f64 = 1e-10;

/// Principal components of the acquired pixels of a stack.
#[derive(Debug, Clone)]
pub struct PcaFit {
    pub mean: Vec<f64>,
    /// Up to three unit-norm loading vectors, by decreasing eigenvalue.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// Per-pixel scores (`n_pixels × 3`); masked-off pixels hold zeros and
    /// components below the eigenvalue floor score zero everywhere.
    pub scores: Vec<[f64; 3]>,
}

impl PcaFit {
    /// Maps a score row back into the K-channel space (mean included).
    pub fn back_project(&self, score: &[f64; 3]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (s, comp) in score.iter().zip(&self.components) {
            for (o, c) in out.iter_mut().zip(comp) {
                *o += s * c;
            }
        }
        out
    }
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Mean-centres the acquired pixels and projects them onto the top three
/// eigenvectors of the `K×K` covariance.
///
/// Accumulation runs over the pixels in lexicographic order of their
/// K-vectors, so the fit does not depend on pixel order.
pub fn pca_fit(stack: &PeakImageStack) -> Result<PcaFit> {
    let k = stack.channels;
    if k < 3 {
        return Err(Error::invalid(format!("PCA to RGB needs at least 3 channels, got {k}")));
    }
    let n = stack.width * stack.height;
    let mut on: Vec<usize> = (0..n).filter(|&p| stack.mask[p]).collect();
    if on.len() < 2 {
        return Err(Error::Degenerate(format!(
            "PCA needs at least 2 acquired pixels, got {}",
            on.len()
        )));
    }
    on.sort_by(|&a, &b| lexicographic(stack.pixel(a), stack.pixel(b)));

    let mut mean = vec![0.0; k];
    for &p in &on {
        for (m, v) in mean.iter_mut().zip(stack.pixel(p)) {
            *m += v;
        }
    }
    let count = on.len() as f64;
    mean.iter_mut().for_each(|m| *m /= count);

    let mut cov = DMatrix::<f64>::zeros(k, k);
    let mut centred = vec![0.0; k];
    for &p in &on {
        for ((c, v), m) in centred.iter_mut().zip(stack.pixel(p)).zip(&mean) {
            *c = v - m;
        }
        for i in 0..k {
            for j in i..k {
                cov[(i, j)] += centred[i] * centred[j];
            }
        }
    }
    for i in 0..k {
        for j in i..k {
            let v = cov[(i, j)] / (count - 1.0);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]];
    if !(top > 0.0) {
        return Err(Error::Degenerate("stack has zero covariance (constant input)".into()));
    }

    let mut components = Vec::with_capacity(3);
    let mut eigenvalues = Vec::with_capacity(3);
    for &idx in order.iter().take(3) {
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        // largest-|loading| entry positive (first one on ties)
        let lead = v
            .iter()
            .enumerate()
            .fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        eigenvalues.push(eig.eigenvalues[idx].max(0.0));
    }
    let active: Vec<bool> = eigenvalues.iter().map(|&e| e > RELATIVE_EIGEN_FLOOR * top).collect();

    let mut scores = vec![[0.0; 3]; n];
    for p in (0..n).filter(|&p| stack.mask[p]) {
        let px = stack.pixel(p);
        for (c, comp) in components.iter().enumerate() {
            if active[c] {
                scores[p][c] = px.iter().zip(&mean).zip(comp).map(|((v, m), w)| (v - m) * w).sum();
            }
        }
    }
    Ok(PcaFit {
        mean,
        components,
        eigenvalues,
        scores,
    })
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(sorted: &[f64], pct: f64) -> f64 {
    let pos = (pct / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

/// Three-channel pseudo-color rendering: PC1..PC3 scores become R, G, B,
/// each clipped at the given percentiles and stretched to [0, 1].
/// Masked-off pixels are black; a channel whose clip range collapses is 0.5.
pub fn pca_rgb(stack: &PeakImageStack, clip_lo_pct: f64, clip_hi_pct: f64) -> Result<Image> {
    if !(0.0..=100.0).contains(&clip_lo_pct) || !(0.0..=100.0).contains(&clip_hi_pct) || clip_lo_pct > clip_hi_pct {
        return Err(Error::invalid(format!(
            "clip percentiles must satisfy 0 <= lo <= hi <= 100, got ({clip_lo_pct}, {clip_hi_pct})"
        )));
    }
    let fit = pca_fit(stack)?;
    let n = stack.width * stack.height;
    let on: Vec<usize> = (0..n).filter(|&p| stack.mask[p]).collect();
    let mut out = Image::filled(stack.width, stack.height, 3, 0.0);
    for c in 0..3 {
        let mut values: Vec<f64> = on.iter().map(|&p| fit.scores[p][c]).collect();
        values.sort_by(f64::total_cmp);
        let lo = percentile(&values, clip_lo_pct);
        let hi = percentile(&values, clip_hi_pct);
        for &p in &on {
            let v = if hi > lo {
                (fit.scores[p][c].clamp(lo, hi) - lo) / (hi - lo)
            } else {
                0.5
            };
            out.data[p * 3 + c] = v;
        }
    }
    Ok(out)
}
