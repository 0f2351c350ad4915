//! Seeded synthetic paired dataset with planted ground truth.
//!
//! Each sample is a smooth tissue section made of three regions
//! (background, stroma, epithelial glands) defined analytically in the
//! `S × S` MSI frame. From the same regions the generator renders
//!
//! * an `S/2 × S/2` MSI acquisition whose spectra are sums of Gaussian peaks
//!   at fixed m/z loci with region-dependent amplitudes, on a per-sample
//!   jittered m/z axis;
//! * a `1.5·S × 1.125·S` H&E-like histology image seen through a known
//!   near-identity affine misalignment;
//! * control points relating the padded-and-resized histology frame to the
//!   MSI frame exactly.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::split::{save_samples, SampleFiles};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::imagereg::{AffineTransform, ControlPoint, ControlPoints};
use crate::spectra::{save_msi, MsiDataset, MzAxis, DEFAULT_PIXEL_SIZE_UM};

pub const N_LOCI: usize = 60;
pub const MZ_START: f64 = 600.0;
pub const MZ_END: f64 = 900.0;
pub const MZ_STEP: f64 = 1.0;
pub const PEAK_SIGMA: f64 = 1.0;
/// Edge softness of region boundaries, in pixels of the `S × S` frame.
const EDGE: f64 = 0.7;
const NUCLEUS_SIGMA: f64 = 1.2;

const BACKGROUND_RGB: [f64; 3] = [0.95, 0.94, 0.96];
const STROMA_A_RGB: [f64; 3] = [0.93, 0.60, 0.74];
const STROMA_B_RGB: [f64; 3] = [0.82, 0.45, 0.66];
const EPITHELIUM_RGB: [f64; 3] = [0.60, 0.38, 0.70];
const NUCLEUS_RGB: [f64; 3] = [0.28, 0.14, 0.45];

/// m/z positions of the planted peaks.
pub fn planted_loci() -> Vec<f64> {
    (0..N_LOCI).map(|i| 610.0 + 4.7 * i as f64).collect()
}

/// Region chemistry shared by all samples of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Chemistry {
    pub background: Vec<f64>,
    pub stroma_a: Vec<f64>,
    pub stroma_b: Vec<f64>,
    pub epithelium: Vec<f64>,
}

impl Chemistry {
    pub fn generate(rng: &mut ChaCha8Rng) -> Self {
        let mut amps = |lo: f64, hi: f64| (0..N_LOCI).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>();
        Self {
            background: amps(0.0, 0.03),
            stroma_a: amps(0.1, 1.0),
            stroma_b: amps(0.1, 1.0),
            epithelium: amps(0.1, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Ellipse {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
    theta: f64,
}

impl Ellipse {
    /// Normalized radius (1 on the boundary) and polar angle of `(x, y)`.
    fn polar(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (c * dx + s * dy) / self.ax;
        let v = (-s * dx + c * dy) / self.ay;
        (u.hypot(v), v.atan2(u))
    }

    fn inside(&self, x: f64, y: f64) -> f64 {
        let (r, _) = self.polar(x, y);
        soft_step((1.0 - r) * self.ax.min(self.ay))
    }
}

fn soft_step(signed_depth: f64) -> f64 {
    1.0 / (1.0 + (-signed_depth / EDGE).exp())
}

/// Analytic tissue layout of one sample, in `S × S` MSI-frame pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Tissue {
    outline: Ellipse,
    wobble: [(f64, f64); 3],
    glands: Vec<Ellipse>,
    nuclei: Vec<(f64, f64)>,
    field_k: (f64, f64),
    field_phase: f64,
}

/// Soft region memberships at a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regions {
    pub background: f64,
    pub stroma: f64,
    pub epithelium: f64,
    /// Mixing weight between the two stroma subtypes.
    pub stroma_mix: f64,
    pub nuclei: f64,
}

impl Tissue {
    pub fn generate(rng: &mut ChaCha8Rng, size: usize) -> Self {
        let s = size as f64;
        let c = (s - 1.0) / 2.0;
        let outline = Ellipse {
            cx: c + rng.random_range(-0.04..0.04) * s,
            cy: c + rng.random_range(-0.03..0.03) * s,
            ax: rng.random_range(0.30..0.42) * s,
            ay: rng.random_range(0.22..0.30) * s,
            theta: rng.random_range(-0.3..0.3),
        };
        let wobble = [0; 3].map(|_| (rng.random_range(0.0..0.06), rng.random_range(0.0..2.0 * PI)));
        let n_glands = rng.random_range(3..=6);
        let mut glands = Vec::with_capacity(n_glands);
        while glands.len() < n_glands {
            let r = rng.random_range(0.0..0.7f64).sqrt();
            let phi = rng.random_range(0.0..2.0 * PI);
            let (px, py) = (outline.ax * r * phi.cos(), outline.ay * r * phi.sin());
            let (st, ct) = outline.theta.sin_cos();
            let ax = rng.random_range(0.05..0.12) * s;
            glands.push(Ellipse {
                cx: outline.cx + ct * px - st * py,
                cy: outline.cy + st * px + ct * py,
                ax,
                ay: ax * rng.random_range(0.6..1.0),
                theta: rng.random_range(0.0..PI),
            });
        }
        let spacing = 0.09 * s;
        let n = (s / spacing).ceil() as usize;
        let mut nuclei = Vec::new();
        for j in 0..n {
            for i in 0..n {
                nuclei.push((
                    (i as f64 + 0.5 + rng.random_range(-0.3..0.3)) * spacing,
                    (j as f64 + 0.5 + rng.random_range(-0.3..0.3)) * spacing,
                ));
            }
        }
        let angle = rng.random_range(0.0..2.0 * PI);
        let k = 2.0 * PI / (rng.random_range(0.6..1.2) * s);
        Self {
            outline,
            wobble,
            glands,
            nuclei,
            field_k: (k * angle.cos(), k * angle.sin()),
            field_phase: rng.random_range(0.0..2.0 * PI),
        }
    }

    pub fn regions(&self, x: f64, y: f64) -> Regions {
        let (r, phi) = self.outline.polar(x, y);
        let bump: f64 = self
            .wobble
            .iter()
            .enumerate()
            .map(|(k, &(a, p))| a * ((k + 2) as f64 * phi + p).cos())
            .sum();
        let tissue = soft_step((1.0 + bump - r) * self.outline.ax.min(self.outline.ay));
        let gland = self.glands.iter().map(|g| g.inside(x, y)).fold(0.0, f64::max);
        let nuclei: f64 = self
            .nuclei
            .iter()
            .map(|&(nx, ny)| {
                let d2 = (x - nx).powi(2) + (y - ny).powi(2);
                if d2 > 25.0 * NUCLEUS_SIGMA * NUCLEUS_SIGMA {
                    0.0
                } else {
                    (-d2 / (2.0 * NUCLEUS_SIGMA * NUCLEUS_SIGMA)).exp()
                }
            })
            .sum::<f64>()
            .min(1.0);
        let mix = 0.5 + 0.5 * (self.field_k.0 * x + self.field_k.1 * y + self.field_phase).sin();
        Regions {
            background: 1.0 - tissue,
            stroma: tissue * (1.0 - gland),
            epithelium: tissue * gland,
            stroma_mix: mix,
            nuclei,
        }
    }

    /// H&E-like colour at a point of the MSI frame.
    pub fn color(&self, x: f64, y: f64) -> [f64; 3] {
        let r = self.regions(x, y);
        let nuc = r.nuclei * r.epithelium;
        std::array::from_fn(|c| {
            let stroma = STROMA_A_RGB[c] * (1.0 - r.stroma_mix) + STROMA_B_RGB[c] * r.stroma_mix;
            let base = r.background * BACKGROUND_RGB[c] + r.stroma * stroma + r.epithelium * EPITHELIUM_RGB[c];
            base * (1.0 - 0.6 * nuc) + NUCLEUS_RGB[c] * 0.6 * nuc
        })
    }

    /// Noise-free histology rendered directly in the `size × size` MSI frame.
    pub fn render_msi_frame(&self, size: usize) -> Image {
        let mut img = Image::filled(size, size, 3, 0.0);
        for y in 0..size {
            for x in 0..size {
                let rgb = self.color(x as f64, y as f64);
                for (c, v) in rgb.into_iter().enumerate() {
                    img.set(x, y, c, v);
                }
            }
        }
        img
    }
}

/// Geometry of one generated sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTruth {
    pub id: String,
    pub tissue: Tissue,
    /// Maps the padded, resized histology frame onto the MSI frame.
    pub transform: AffineTransform,
    pub gain: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub seed: u64,
    /// Side `S` of the common frame; must be a positive multiple of 8.
    pub image_size: usize,
}

impl SyntheticSpec {
    pub fn msi_size(&self) -> usize {
        self.image_size / 2
    }

    /// Raw histology width × height (before padding to a square).
    pub fn histology_dims(&self) -> (usize, usize) {
        (self.image_size * 3 / 2, self.image_size * 9 / 8)
    }

    fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::invalid("need at least one sample"));
        }
        if self.image_size < 16 || !self.image_size.is_multiple_of(8) {
            return Err(Error::invalid(format!(
                "image size {} must be a multiple of 8 and at least 16",
                self.image_size
            )));
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    pub fn chemistry(&self) -> Chemistry {
        Chemistry::generate(&mut self.rng(0))
    }

    pub fn sample_id(index: usize) -> String {
        format!("sample_{index:03}")
    }

    /// Ground truth of sample `index`, independent of every other sample.
    pub fn truth(&self, index: usize) -> SampleTruth {
        let mut rng = self.rng(1 + 3 * index as u64);
        let s = self.image_size as f64;
        let tissue = Tissue::generate(&mut rng, self.image_size);
        let angle = rng.random_range(-4.0..4.0f64).to_radians();
        let scale = rng.random_range(0.96..1.04);
        let (tx, ty) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let c = (s - 1.0) / 2.0;
        let (sin, cos) = angle.sin_cos();
        let (a, b, cc, d) = (scale * cos, -scale * sin, scale * sin, scale * cos);
        let transform = AffineTransform {
            a,
            b,
            c: cc,
            d,
            tx: c - a * c - b * c + tx,
            ty: c - cc * c - d * c + ty,
        };
        SampleTruth {
            id: Self::sample_id(index),
            tissue,
            transform,
            gain: rng.random_range(0.8..1.2),
        }
    }

    pub fn msi(&self, index: usize, truth: &SampleTruth, chem: &Chemistry) -> Result<MsiDataset> {
        let mut rng = self.rng(2 + 3 * index as u64);
        let start = MZ_START + rng.random_range(-0.3..0.3);
        let step = MZ_STEP * (1.0 + rng.random_range(-0.002..0.002));
        let n_bins = ((MZ_END - start) / step).floor() as usize + 1;
        let axis = MzAxis::new((0..n_bins).map(|i| start + step * i as f64).collect())?;
        let loci = planted_loci();
        let profile = |amps: &[f64]| -> Vec<f64> {
            axis.values()
                .iter()
                .map(|&mz| {
                    loci.iter()
                        .zip(amps)
                        .map(|(&mu, &a)| a * (-(mz - mu).powi(2) / (2.0 * PEAK_SIGMA * PEAK_SIGMA)).exp())
                        .sum()
                })
                .collect()
        };
        let bg = profile(&chem.background);
        let sa = profile(&chem.stroma_a);
        let sb = profile(&chem.stroma_b);
        let ep = profile(&chem.epithelium);
        let m = self.msi_size();
        let jitter = Normal::<f64>::new(1.0, 0.05).expect("valid normal");
        let mut intensities = Vec::with_capacity(m * m * n_bins);
        for j in 0..m {
            for i in 0..m {
                let r = truth.tissue.regions(2.0 * i as f64 + 0.5, 2.0 * j as f64 + 0.5);
                let scale = truth.gain * f64::max(jitter.sample(&mut rng), 0.0);
                for b in 0..n_bins {
                    let stroma = sa[b] * (1.0 - r.stroma_mix) + sb[b] * r.stroma_mix;
                    let clean = r.background * bg[b] + r.stroma * stroma + r.epithelium * ep[b];
                    let noise = rng.random_range(0.0..0.01);
                    intensities.push((clean * scale + noise) as f32);
                }
            }
        }
        MsiDataset::new(m, m, DEFAULT_PIXEL_SIZE_UM, axis, intensities, vec![true; m * m])
    }

    /// Raw histology: every pixel is mapped to the padded, resized frame,
    /// then through the planted transform into the MSI frame, where the
    /// tissue colour is evaluated.
    pub fn histology(&self, index: usize, truth: &SampleTruth) -> Image {
        let mut rng = self.rng(3 + 3 * index as u64);
        let (w, h) = self.histology_dims();
        let top = ((w - h) / 2) as f64;
        let scale = self.image_size as f64 / w as f64;
        let mut img = Image::filled(w, h, 3, 0.0);
        for y in 0..h {
            for x in 0..w {
                let px = (x as f64 + 0.5) * scale - 0.5;
                let py = (y as f64 + top + 0.5) * scale - 0.5;
                let (qx, qy) = truth.transform.apply(px, py);
                let rgb = truth.tissue.color(qx, qy);
                for (c, v) in rgb.into_iter().enumerate() {
                    let grain = rng.random_range(-0.01..0.01);
                    img.set(x, y, c, (v + grain).clamp(0.0, 1.0));
                }
            }
        }
        img
    }

    /// Four landmarks in the padded, resized histology frame and their exact
    /// images in the MSI frame.
    pub fn control_points(&self, truth: &SampleTruth) -> ControlPoints {
        let s = self.image_size as f64;
        let pts = [(0.25, 0.25), (0.75, 0.25), (0.75, 0.75), (0.25, 0.7)];
        ControlPoints::new(
            pts.iter()
                .map(|&(u, v)| {
                    let (src_x, src_y) = (u * s, v * s);
                    let (dst_x, dst_y) = truth.transform.apply(src_x, src_y);
                    ControlPoint {
                        src_x,
                        src_y,
                        dst_x,
                        dst_y,
                    }
                })
                .collect(),
        )
    }

    /// Region of the MSI frame covered by real histology content (not
    /// padding) after registration, shrunk by `margin` pixels.
    pub fn content_mask(&self, truth: &SampleTruth, margin: f64) -> Result<Vec<bool>> {
        let s = self.image_size;
        let (w, h) = self.histology_dims();
        let scale = s as f64 / w as f64;
        let top = ((w - h) / 2) as f64;
        let (y0, y1) = ((top + 0.5) * scale - 0.5, (top + h as f64 - 0.5) * scale - 0.5);
        let (x0, x1) = (0.5 * scale - 0.5, (w as f64 - 0.5) * scale - 0.5);
        let inv = truth.transform.inverse()?;
        let mut mask = Vec::with_capacity(s * s);
        for y in 0..s {
            for x in 0..s {
                let (px, py) = inv.apply(x as f64, y as f64);
                mask.push(px >= x0 + margin && px <= x1 - margin && py >= y0 + margin && py <= y1 - margin);
            }
        }
        Ok(mask)
    }
}

/// Writes `n_samples` samples plus `samples.csv` under `out`.
///
/// Layout: `samples.csv`, and per sample `sample_XXX/msi/` (container),
/// `sample_XXX/histology.png`, `sample_XXX/control_points.csv`.
pub fn generate_synthetic_dataset(out: &Path, n_samples: usize, seed: u64, image_size: usize) -> Result<Vec<SampleFiles>> {
    let spec = SyntheticSpec {
        n_samples,
        seed,
        image_size,
    };
    spec.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let chem = spec.chemistry();
    let mut files = Vec::with_capacity(n_samples);
    for index in 0..n_samples {
        let truth = spec.truth(index);
        let rel = PathBuf::from(&truth.id);
        let dir = out.join(&rel);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        save_msi(&spec.msi(index, &truth, &chem)?, &dir.join("msi"))?;
        spec.histology(index, &truth).save_png(&dir.join("histology.png"))?;
        spec.control_points(&truth).save_csv(&dir.join("control_points.csv"))?;
        files.push(SampleFiles {
            id: truth.id.clone(),
            msi: rel.join("msi"),
            histology: rel.join("histology.png"),
            control_points: rel.join("control_points.csv"),
        });
        log::debug!("generated {}", truth.id);
    }
    save_samples(&files, &out.join("samples.csv"))?;
    log::info!("wrote {n_samples} synthetic samples to {}", out.display());
    Ok(files
        .into_iter()
        .map(|f| SampleFiles {
            msi: out.join(f.msi),
            histology: out.join(f.histology),
            control_points: out.join(f.control_points),
            id: f.id,
        })
        .collect())
}
