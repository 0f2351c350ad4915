use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::Spectrum;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub mz: f64,
    pub intensity: f64,
}

/// Picked peaks, most intense first.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PeakList {
    peaks: Vec<Peak>,
}

impl PeakList {
    /// Wraps peaks that are already in the desired channel order.
    pub fn from_peaks(peaks: Vec<Peak>) -> Self {
        Self { peaks }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Peak> {
        self.peaks.iter()
    }

    pub fn len(&self) -> usize {
        self.peaks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.peaks.is_empty()
    }

    pub fn as_slice(&self) -> &[Peak] {
        &self.peaks
    }
}

/// Interior local maxima. A plateau counts once, at its leftmost index, when
/// both of its outer neighbours are strictly lower.
fn local_maxima(y: &[f32]) -> Vec<usize> {
    let n = y.len();
    let mut out = Vec::new();
    let mut i = 1;
    while i + 1 < n {
        if y[i] > y[i - 1] {
            let mut r = i;
            while r + 1 < n && y[r + 1] == y[i] {
                r += 1;
            }
            if r + 1 < n && y[r + 1] < y[i] {
                out.push(i);
            }
            i = r + 1;
        } else {
            i += 1;
        }
    }
    out
}

/// Greedy top-`k` peak selection on a (summed) spectrum.
///
/// Candidates are visited by descending intensity, ties going to the lower
/// m/z, and a candidate is skipped when it lies within `min_separation` of an
/// already accepted peak.
pub fn pick_peaks(spectrum: &Spectrum, k: usize, min_separation: f64) -> Result<PeakList> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if !(min_separation >= 0.0) {
        return Err(Error::invalid(format!("min_separation must be >= 0, got {min_separation}")));
    }
    let y = &spectrum.intensities;
    if y.len() < 3 {
        return Err(Error::invalid(format!(
            "peak picking needs at least 3 bins, got {}",
            y.len()
        )));
    }
    let mz = spectrum.axis.values();
    let mut candidates = local_maxima(y);
    candidates.sort_by(|&a, &b| match y[b].partial_cmp(&y[a]) {
        Some(Ordering::Equal) | None => a.cmp(&b),
        Some(o) => o,
    });

    let mut accepted: Vec<Peak> = Vec::with_capacity(k);
    for i in candidates {
        if accepted.len() == k {
            break;
        }
        if accepted.iter().any(|p| (p.mz - mz[i]).abs() <= min_separation) {
            continue;
        }
        accepted.push(Peak {
            mz: mz[i],
            intensity: y[i] as f64,
        });
    }
    Ok(PeakList { peaks: accepted })
}
