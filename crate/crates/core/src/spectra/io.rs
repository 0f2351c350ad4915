//! Binary MSI container and the CSV test format.
//!
//! A container is a directory with `header.json`, `mzaxis.bin` (little-endian
//! f64), `spectra.bin` (little-endian f32, row-major y then x, bins
//! innermost) and an optional `mask.bin` (one 0/1 byte per pixel).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MsiDataset, MzAxis};
use crate::error::{Error, Result};

/// Pixel pitch assigned to datasets read from CSV, which carries none.
pub const DEFAULT_PIXEL_SIZE_UM: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerHeader {
    pub width: usize,
    pub height: usize,
    pub pixel_size_um: f64,
    pub n_bins: usize,
    pub dtype: String,
    pub endianness: String,
    pub version: u32,
}

fn header_error(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "MSI header",
        detail: detail.into(),
    }
}

/// Loads a container directory or a `.csv` file.
pub fn load_msi(path: &Path) -> Result<MsiDataset> {
    if path.is_dir() {
        load_container(path)
    } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        load_csv(path)
    } else {
        Err(Error::invalid(format!(
            "{} is neither an MSI container directory nor a .csv file",
            path.display()
        )))
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn load_container(dir: &Path) -> Result<MsiDataset> {
    let header_path = dir.join("header.json");
    let header: ContainerHeader =
        serde_json::from_slice(&read(&header_path)?).map_err(|e| header_error(e.to_string()))?;
    if header.version != 1 {
        return Err(header_error(format!("unsupported version {}", header.version)));
    }
    if header.dtype != "f32" {
        return Err(header_error(format!("unsupported dtype `{}`", header.dtype)));
    }
    if header.endianness != "little" {
        return Err(header_error(format!("unsupported endianness `{}`", header.endianness)));
    }
    if header.width == 0 || header.height == 0 || header.n_bins < 2 {
        return Err(header_error("width, height must be positive and n_bins >= 2"));
    }

    let axis_bytes = read(&dir.join("mzaxis.bin"))?;
    if axis_bytes.len() != header.n_bins * 8 {
        return Err(Error::SizeMismatch {
            what: "mzaxis.bin bins",
            expected: header.n_bins,
            found: axis_bytes.len() / 8,
        });
    }
    let axis = MzAxis::new(
        axis_bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    )?;

    let pixels = header.width * header.height;
    let spectra_bytes = read(&dir.join("spectra.bin"))?;
    let row_bytes = header.n_bins * 4;
    if spectra_bytes.len() != pixels * row_bytes {
        return Err(Error::SizeMismatch {
            what: "spectra.bin pixels",
            expected: pixels,
            found: spectra_bytes.len() / row_bytes,
        });
    }
    let intensities = spectra_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let mask_path = dir.join("mask.bin");
    let mask = if mask_path.exists() {
        let bytes = read(&mask_path)?;
        if bytes.len() != pixels {
            return Err(Error::SizeMismatch {
                what: "mask.bin pixels",
                expected: pixels,
                found: bytes.len(),
            });
        }
        bytes
            .into_iter()
            .map(|b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::Format {
                    what: "mask.bin",
                    detail: format!("mask byte must be 0 or 1, got {other}"),
                }),
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        vec![true; pixels]
    };

    let mut ds = MsiDataset::new(header.width, header.height, header.pixel_size_um, axis, intensities, mask)?;
    // masked-off pixels read back as zeros whatever the payload holds
    let n = ds.n_bins();
    for p in 0..pixels {
        if !ds.mask[p] {
            ds.intensities[p * n..(p + 1) * n].fill(0.0);
        }
    }
    Ok(ds)
}

/// Writes `dataset` as a container directory (created if missing).
/// `mask.bin` is emitted only when some pixel is not acquired.
pub fn save_msi(dataset: &MsiDataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header = ContainerHeader {
        width: dataset.width,
        height: dataset.height,
        pixel_size_um: dataset.pixel_size_um,
        n_bins: dataset.n_bins(),
        dtype: "f32".into(),
        endianness: "little".into(),
        version: 1,
    };
    let write = |name: &str, bytes: Vec<u8>| {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(path, e))
    };
    let mut json = serde_json::to_string_pretty(&header).expect("header serializes");
    json.push('\n');
    write("header.json", json.into_bytes())?;
    write(
        "mzaxis.bin",
        dataset.axis.values().iter().flat_map(|v| v.to_le_bytes()).collect(),
    )?;
    write(
        "spectra.bin",
        dataset.intensities.iter().flat_map(|v| v.to_le_bytes()).collect(),
    )?;
    let mask_path = dir.join("mask.bin");
    if dataset.mask.iter().all(|&m| m) {
        if mask_path.exists() {
            fs::remove_file(&mask_path).map_err(|e| Error::io(&mask_path, e))?;
        }
    } else {
        write("mask.bin", dataset.mask.iter().map(|&m| m as u8).collect())?;
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    x: usize,
    y: usize,
    mz: f64,
    intensity: f32,
}

/// CSV test format: header `x,y,mz,intensity`, every listed pixel carrying
/// the same set of m/z values. Pixels absent from the file are not acquired.
fn load_csv(path: &Path) -> Result<MsiDataset> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let headers = reader.headers().map_err(|e| Error::csv(path, e))?;
    if headers.iter().collect::<Vec<_>>() != ["x", "y", "mz", "intensity"] {
        return Err(Error::Format {
            what: "MSI CSV header",
            detail: format!("expected `x,y,mz,intensity`, found `{}`", headers.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut pixels: BTreeMap<(usize, usize), Vec<(f64, f32)>> = BTreeMap::new();
    for row in reader.deserialize::<CsvRow>() {
        let row = row.map_err(|e| Error::csv(path, e))?;
        pixels.entry((row.y, row.x)).or_default().push((row.mz, row.intensity));
    }
    let Some(first) = pixels.values().next() else {
        return Err(Error::Format {
            what: "MSI CSV",
            detail: "no rows".into(),
        });
    };
    let mut mzs: Vec<f64> = first.iter().map(|r| r.0).collect();
    mzs.sort_by(f64::total_cmp);
    let axis = MzAxis::new(mzs)?;

    let width = pixels.keys().map(|&(_, x)| x).max().unwrap() + 1;
    let height = pixels.keys().map(|&(y, _)| y).max().unwrap() + 1;
    let n = axis.len();
    let mut intensities = vec![0.0f32; width * height * n];
    let mut mask = vec![false; width * height];
    for ((y, x), mut rows) in pixels {
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        if rows.len() != n || rows.iter().zip(axis.values()).any(|(r, &m)| r.0 != m) {
            return Err(Error::Format {
                what: "MSI CSV",
                detail: format!("pixel ({x},{y}) does not share the common m/z set"),
            });
        }
        let p = y * width + x;
        mask[p] = true;
        for (i, (_, v)) in rows.into_iter().enumerate() {
            intensities[p * n + i] = v;
        }
    }
    MsiDataset::new(width, height, DEFAULT_PIXEL_SIZE_UM, axis, intensities, mask)
}
