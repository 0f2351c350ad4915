//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MSIH"  u32 version
//! u64 len + JSON model config
//! u64 len + JSON training progress
//! u32 group count, then per group:
//!     u64 len + name, u64 step, u64 rng seed, u32 param count, then per param:
//!         u64 len + name, u32 ndim, ndim × u64 dims,
//!         numel × f64 values, numel × f64 first moment, numel × f64 second moment
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{AdamConfig, TrainState};
use super::params::ParamStore;
use super::pix2pix::Pix2PixConfig;
use super::tensor::Tensor;
use super::unet::UNetConfig;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MSIH";
pub const FORMAT_VERSION: u32 = 1;

/// Which MSI representation a generator consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelInput {
    /// The three-channel PCA rendering.
    #[default]
    Rgb,
    /// All K ion images, each scaled by its 99th percentile.
    Peaks,
}

/// Model description echoed into every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelConfig {
    Unet {
        unet: UNetConfig,
        adam: AdamConfig,
    },
    Pix2pix {
        pix2pix: Pix2PixConfig,
        #[serde(default)]
        input: ModelInput,
    },
}

/// Where a training run stands; enough to resume it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub step: u64,
    pub best_val: Option<f64>,
    pub best_step: u64,
    pub evals_since_best: u32,
    pub stopped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub progress: Progress,
    /// Named optimizer states, e.g. `unet`, or `generator` and `discriminator`.
    pub groups: Vec<(String, TrainState)>,
}

impl Checkpoint {
    pub fn group(&self, name: &str) -> Option<&TrainState> {
        self.groups.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_bytes(&mut out, &serde_json::to_vec(&self.config).expect("config serializes"));
        put_bytes(&mut out, &serde_json::to_vec(&self.progress).expect("progress serializes"));
        out.extend_from_slice(&(self.groups.len() as u32).to_le_bytes());
        for (name, state) in &self.groups {
            put_bytes(&mut out, name.as_bytes());
            out.extend_from_slice(&state.step.to_le_bytes());
            out.extend_from_slice(&state.rng_seed.to_le_bytes());
            out.extend_from_slice(&(state.params.len() as u32).to_le_bytes());
            for (i, (pname, t)) in state.params.names.iter().zip(&state.params.tensors).enumerate() {
                put_bytes(&mut out, pname.as_bytes());
                out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
                for &d in &t.shape {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for values in [&t.data, &state.m[i], &state.v[i]] {
                    for v in values {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("missing MSIH magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let config: ModelConfig =
            serde_json::from_slice(r.blob()?).map_err(|e| bad(format!("config: {e}")))?;
        let progress: Progress =
            serde_json::from_slice(r.blob()?).map_err(|e| bad(format!("progress: {e}")))?;
        let n_groups = r.u32()?;
        let mut groups = Vec::new();
        for _ in 0..n_groups {
            let name = r.string()?;
            let step = r.u64()?;
            let rng_seed = r.u64()?;
            let n_params = r.u32()? as usize;
            let mut names = Vec::with_capacity(n_params);
            let mut tensors = Vec::with_capacity(n_params);
            let mut m = Vec::with_capacity(n_params);
            let mut v = Vec::with_capacity(n_params);
            for _ in 0..n_params {
                names.push(r.string()?);
                let ndim = r.u32()? as usize;
                let shape = (0..ndim)
                    .map(|_| r.u64().map(|d| d as usize))
                    .collect::<Result<Vec<_>>>()?;
                let numel = shape
                    .iter()
                    .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                    .ok_or_else(|| bad("parameter shape overflows"))?;
                tensors.push(Tensor::new(shape, r.f64s(numel)?)?);
                m.push(r.f64s(numel)?);
                v.push(r.f64s(numel)?);
            }
            groups.push((
                name,
                TrainState {
                    step,
                    params: ParamStore { names, tensors },
                    m,
                    v,
                    rng_seed,
                },
            ));
        }
        if r.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config,
            progress,
            groups,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| bad(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn blob(&mut self) -> Result<&'a [u8]> {
        let n = usize::try_from(self.u64()?).map_err(|_| bad("length overflows"))?;
        self.take(n)
    }

    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.blob()?.to_vec()).map_err(|_| bad("name is not UTF-8"))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| bad("length overflows"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
