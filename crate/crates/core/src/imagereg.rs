//! Geometric preparation: padding, resizing, control-point affine fitting,
//! warping and patch tiling.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Border fill used when padding or warping histology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    Black,
    White,
}

impl PadMode {
    pub fn value(self) -> f64 {
        match self {
            PadMode::Black => 0.0,
            PadMode::White => 1.0,
        }
    }

    /// Single-letter tag (`B` / `W`) used in reports.
    pub fn tag(self) -> &'static str {
        match self {
            PadMode::Black => "B",
            PadMode::White => "W",
        }
    }
}

impl fmt::Display for PadMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PadMode::Black => "black",
            PadMode::White => "white",
        })
    }
}

impl FromStr for PadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "black" | "b" => Ok(PadMode::Black),
            "white" | "w" => Ok(PadMode::White),
            _ => Err(Error::invalid(format!("unknown pad mode `{s}` (expected black or white)"))),
        }
    }
}

/// Maps `(x, y)` to `(a·x + b·y + tx, c·x + d·y + ty)`, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub tx: f64,
    pub ty: f64,
}

impl AffineTransform {
    pub const IDENTITY: AffineTransform = AffineTransform {
        a: 1.0,
        b: 0.0,
        c: 0.0,
        d: 1.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self { tx, ty, ..Self::IDENTITY }
    }

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (self.a * x + self.b * y + self.tx, self.c * x + self.d * y + self.ty)
    }

    pub fn determinant(&self) -> f64 {
        self.a * self.d - self.b * self.c
    }

    pub fn inverse(&self) -> Result<Self> {
        let det = self.determinant();
        let scale = self.a.abs().max(self.b.abs()).max(self.c.abs()).max(self.d.abs());
        if !det.is_finite() || det.abs() <= 1e-12 * scale * scale {
            return Err(Error::Degenerate(format!("affine transform is not invertible (det = {det})")));
        }
        let (a, b, c, d) = (self.d / det, -self.b / det, -self.c / det, self.a / det);
        Ok(Self {
            a,
            b,
            c,
            d,
            tx: -(a * self.tx + b * self.ty),
            ty: -(c * self.tx + d * self.ty),
        })
    }

    /// `self ∘ first`: applies `first`, then `self`.
    pub fn compose(&self, first: &AffineTransform) -> Self {
        Self {
            a: self.a * first.a + self.b * first.c,
            b: self.a * first.b + self.b * first.d,
            c: self.c * first.a + self.d * first.c,
            d: self.c * first.b + self.d * first.d,
            tx: self.a * first.tx + self.b * first.ty + self.tx,
            ty: self.c * first.tx + self.d * first.ty + self.ty,
        }
    }

    pub fn coefficients(&self) -> [f64; 6] {
        [self.a, self.b, self.c, self.d, self.tx, self.ty]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlPoint {
    pub src_x: f64,
    pub src_y: f64,
    pub dst_x: f64,
    pub dst_y: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ControlPoints {
    pub pairs: Vec<ControlPoint>,
}

impl ControlPoints {
    pub fn new(pairs: Vec<ControlPoint>) -> Self {
        Self { pairs }
    }

    /// Reads a `src_x,src_y,dst_x,dst_y` CSV.
    pub fn load_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["src_x", "src_y", "dst_x", "dst_y"] {
            return Err(Error::Format {
                what: "control points CSV header",
                detail: format!("expected `src_x,src_y,dst_x,dst_y`, found `{}`", headers.iter().collect::<Vec<_>>().join(",")),
            });
        }
        let pairs = reader
            .deserialize()
            .collect::<std::result::Result<Vec<ControlPoint>, _>>()
            .map_err(|e| Error::csv(path, e))?;
        Ok(Self { pairs })
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        for p in &self.pairs {
            writer.serialize(p).map_err(|e| Error::csv(path, e))?;
        }
        writer.flush().map_err(|e| Error::io(path, e))
    }
}

/// Centres `image` on a `target_w × target_h` canvas filled with the pad
/// value; when the margin is odd the extra pixel goes right / bottom.
pub fn pad_to(image: &Image, target_w: usize, target_h: usize, mode: PadMode) -> Result<Image> {
    if target_w < image.width || target_h < image.height {
        return Err(Error::invalid(format!(
            "pad target {target_w}x{target_h} is smaller than the image {}x{}",
            image.width, image.height
        )));
    }
    let ox = (target_w - image.width) / 2;
    let oy = (target_h - image.height) / 2;
    let mut out = Image::filled(target_w, target_h, image.channels, mode.value());
    let row = image.width * image.channels;
    for y in 0..image.height {
        let dst = out.index(ox, oy + y, 0);
        let src = image.index(0, y, 0);
        out.data[dst..dst + row].copy_from_slice(&image.data[src..src + row]);
    }
    Ok(out)
}

/// Pads the shorter side so the image becomes square.
pub fn pad_to_square(image: &Image, mode: PadMode) -> Result<Image> {
    let side = image.width.max(image.height);
    pad_to(image, side, side, mode)
}

/// Bilinear resize with half-pixel-centred sampling and edge clamping.
pub fn resize(image: &Image, new_w: usize, new_h: usize) -> Result<Image> {
    if new_w == 0 || new_h == 0 {
        return Err(Error::invalid("resize target must be at least 1x1"));
    }
    if new_w == image.width && new_h == image.height {
        return Ok(image.clone());
    }
    let sx = image.width as f64 / new_w as f64;
    let sy = image.height as f64 / new_h as f64;
    let taps = |out_len: usize, in_len: usize, scale: f64| -> Vec<(usize, usize, f64)> {
        (0..out_len)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(in_len - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let xs = taps(new_w, image.width, sx);
    let ys = taps(new_h, image.height, sy);
    let ch = image.channels;
    let mut out = Image::filled(new_w, new_h, ch, 0.0);
    for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
            for c in 0..ch {
                let top = image.get(x0, y0, c) * (1.0 - fx) + image.get(x1, y0, c) * fx;
                let bot = image.get(x0, y1, c) * (1.0 - fx) + image.get(x1, y1, c) * fx;
                out.set(x, y, c, top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Ok(out)
}

/// Least-squares affine fit `src → dst`.
///
/// The normal equations of the 3-unknown problem per output coordinate are
/// solved after centring the source points, which decouples the translation
/// and leaves a 2×2 system shared by both coordinates.
pub fn fit_affine(points: &ControlPoints) -> Result<AffineTransform> {
    let pts = &points.pairs;
    if pts.len() < 3 {
        return Err(Error::invalid(format!(
            "affine fit needs at least 3 control points, got {}",
            pts.len()
        )));
    }
    if pts
        .iter()
        .any(|p| !(p.src_x.is_finite() && p.src_y.is_finite() && p.dst_x.is_finite() && p.dst_y.is_finite()))
    {
        return Err(Error::invalid("control points must be finite"));
    }
    let n = pts.len() as f64;
    let mean = |f: fn(&ControlPoint) -> f64| pts.iter().map(f).sum::<f64>() / n;
    let (mx, my) = (mean(|p| p.src_x), mean(|p| p.src_y));
    let (mu, mv) = (mean(|p| p.dst_x), mean(|p| p.dst_y));

    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    let (mut sxu, mut syu, mut sxv, mut syv) = (0.0, 0.0, 0.0, 0.0);
    for p in pts {
        let (x, y) = (p.src_x - mx, p.src_y - my);
        let (u, v) = (p.dst_x - mu, p.dst_y - mv);
        sxx += x * x;
        sxy += x * y;
        syy += y * y;
        sxu += x * u;
        syu += y * u;
        sxv += x * v;
        syv += y * v;
    }
    let det = sxx * syy - sxy * sxy;
    let scale = (sxx + syy) * (sxx + syy);
    if !(det > 1e-12 * scale) {
        return Err(Error::Degenerate("control points are collinear or coincident".into()));
    }
    let a = (sxu * syy - syu * sxy) / det;
    let b = (syu * sxx - sxu * sxy) / det;
    let c = (sxv * syy - syv * sxy) / det;
    let d = (syv * sxx - sxv * sxy) / det;
    Ok(AffineTransform {
        a,
        b,
        c,
        d,
        tx: mu - (a * mx + b * my),
        ty: mv - (c * mx + d * my),
    })
}

/// Bilinear sample at a real-valued pixel position; neighbours outside the
/// image contribute `fill`.
#[inline]
fn sample_bilinear(image: &Image, x: f64, y: f64, c: usize, fill: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let at = |xi: f64, yi: f64| -> f64 {
        if xi < 0.0 || yi < 0.0 || xi >= image.width as f64 || yi >= image.height as f64 {
            fill
        } else {
            image.get(xi as usize, yi as usize, c)
        }
    };
    let top = if fx == 0.0 { at(x0, y0) } else { at(x0, y0) * (1.0 - fx) + at(x0 + 1.0, y0) * fx };
    if fy == 0.0 {
        return top;
    }
    let bot = if fx == 0.0 { at(x0, y0 + 1.0) } else { at(x0, y0 + 1.0) * (1.0 - fx) + at(x0 + 1.0, y0 + 1.0) * fx };
    top * (1.0 - fy) + bot * fy
}

/// Inverse-mapping warp: output pixel `(x, y)` samples the input at `t⁻¹(x, y)`.
pub fn warp(image: &Image, t: &AffineTransform, out_w: usize, out_h: usize, fill: PadMode) -> Result<Image> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::invalid("warp output must be at least 1x1"));
    }
    let inv = t.inverse()?;
    let fill = fill.value();
    let mut out = Image::filled(out_w, out_h, image.channels, fill);
    for y in 0..out_h {
        for x in 0..out_w {
            let (sx, sy) = inv.apply(x as f64, y as f64);
            if !(sx.is_finite() && sy.is_finite()) {
                continue;
            }
            for c in 0..image.channels {
                out.set(x, y, c, sample_bilinear(image, sx, sy, c, fill));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub x: usize,
    pub y: usize,
    pub image: Image,
}

fn tile_origins(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..).map(|i| i * stride).take_while(|&o| o + patch <= dim).collect();
    if let Some(&last) = out.last() {
        if last + patch < dim {
            out.push(dim - patch);
        }
    }
    out
}

/// Row-major tiling with an extra edge-flush tile per axis when the stride
/// does not land exactly on the border.
pub fn extract_patches(image: &Image, patch: usize, stride: usize) -> Result<Vec<Patch>> {
    if patch == 0 || stride == 0 {
        return Err(Error::invalid("patch size and stride must be positive"));
    }
    if patch > image.width || patch > image.height {
        return Err(Error::invalid(format!(
            "patch {patch} larger than image {}x{}",
            image.width, image.height
        )));
    }
    let xs = tile_origins(image.width, patch, stride);
    let ys = tile_origins(image.height, patch, stride);
    let ch = image.channels;
    let mut out = Vec::with_capacity(xs.len() * ys.len());
    for &oy in &ys {
        for &ox in &xs {
            let mut data = Vec::with_capacity(patch * patch * ch);
            for y in oy..oy + patch {
                let start = image.index(ox, y, 0);
                data.extend_from_slice(&image.data[start..start + patch * ch]);
            }
            out.push(Patch {
                x: ox,
                y: oy,
                image: Image::new(patch, patch, ch, data)?,
            });
        }
    }
    Ok(out)
}

/// Inverse of [`extract_patches`]; overlapping pixels are averaged.
pub fn reassemble(patches: &[Patch], out_w: usize, out_h: usize) -> Result<Image> {
    let first = patches.first().ok_or_else(|| Error::invalid("no patches to reassemble"))?;
    let ch = first.image.channels;
    let mut sum = Image::filled(out_w, out_h, ch, 0.0);
    let mut count = vec![0u32; out_w * out_h];
    for p in patches {
        if p.image.channels != ch {
            return Err(Error::shape("patches have differing channel counts"));
        }
        if p.x + p.image.width > out_w || p.y + p.image.height > out_h {
            return Err(Error::invalid(format!(
                "patch at ({}, {}) extends past the {out_w}x{out_h} canvas",
                p.x, p.y
            )));
        }
        for y in 0..p.image.height {
            for x in 0..p.image.width {
                count[(p.y + y) * out_w + p.x + x] += 1;
                for c in 0..ch {
                    let i = sum.index(p.x + x, p.y + y, c);
                    sum.data[i] += p.image.get(x, y, c);
                }
            }
        }
    }
    if let Some(i) = count.iter().position(|&n| n == 0) {
        return Err(Error::invalid(format!(
            "pixel ({}, {}) is not covered by any patch",
            i % out_w,
            i / out_w
        )));
    }
    for (i, &n) in count.iter().enumerate() {
        for c in 0..ch {
            sum.data[i * ch + c] /= n as f64;
        }
    }
    Ok(sum)
}
