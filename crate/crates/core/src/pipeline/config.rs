//! Run configuration, read from TOML.
//!
//! Every section is optional and falls back to the defaults below; unknown
//! keys are rejected. See `configs/desk.toml` at the repository root for an
//! annotated example.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagereg::PadMode;
use crate::metrics::DEFAULT_MI_BINS;
pub use crate::nn::ModelInput;
use crate::nn::{AdamConfig, FinalActivation, Norm, Pix2PixConfig, UNetConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub pad_mode: PadMode,
    pub paths: Paths,
    pub split: SplitFractions,
    pub preprocess: Preprocess,
    pub metrics: MetricsConfig,
    pub unet: UNetSection,
    pub pix2pix: Pix2PixSection,
    pub stopping: Stopping,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            output_dir: PathBuf::from("runs/default"),
            pad_mode: PadMode::Black,
            paths: Paths::default(),
            split: SplitFractions::default(),
            preprocess: Preprocess::default(),
            metrics: MetricsConfig::default(),
            unet: UNetSection::default(),
            pix2pix: Pix2PixSection::default(),
            stopping: Stopping::default(),
        }
    }
}

/// Input locations. `samples` is a CSV with columns
/// `id,msi,histology,control_points`; relative paths inside it are resolved
/// against the CSV's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub samples: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            samples: PathBuf::from("data/samples.csv"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Preprocess {
    pub k_peaks: usize,
    /// Minimum m/z distance between accepted peaks.
    pub min_separation: f64,
    /// Ion-image half window in m/z; half the median bin width when absent.
    pub half_window: Option<f64>,
    pub clip_low_pct: f64,
    pub clip_high_pct: f64,
    /// Side length of the common square frame of both modalities.
    pub image_size: usize,
}

impl Default for Preprocess {
    fn default() -> Self {
        Self {
            k_peaks: 50,
            min_separation: 1.0,
            half_window: None,
            clip_low_pct: 1.0,
            clip_high_pct: 99.0,
            image_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub bins_mi: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            bins_mi: DEFAULT_MI_BINS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetSection {
    pub base_width: usize,
    pub depth: usize,
    pub norm: Norm,
    pub patch: usize,
    pub stride: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub max_steps: u64,
    pub eval_every: u64,
}

impl Default for UNetSection {
    fn default() -> Self {
        Self {
            base_width: 8,
            depth: 2,
            norm: Norm::None,
            patch: 32,
            stride: 32,
            batch_size: 64,
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            max_steps: 300,
            eval_every: 10,
        }
    }
}

impl UNetSection {
    pub fn model(&self, channels: usize) -> UNetConfig {
        UNetConfig {
            in_channels: channels,
            out_channels: 3,
            base_width: self.base_width,
            depth: self.depth,
            final_activation: FinalActivation::Sigmoid,
            patch: self.patch,
            norm: self.norm,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::new(self.lr, self.beta1, self.beta2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Pix2PixSection {
    pub input: ModelInput,
    pub lambda_l1: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub gen_base_width: usize,
    pub gen_depth: usize,
    pub disc_layers: usize,
    pub disc_width: usize,
    pub max_steps: u64,
    pub eval_every: u64,
}

impl Default for Pix2PixSection {
    fn default() -> Self {
        let desk = Pix2PixConfig::desk();
        Self {
            input: ModelInput::Rgb,
            lambda_l1: desk.lambda_l1,
            lr: desk.lr,
            beta1: desk.beta1,
            beta2: desk.beta2,
            gen_base_width: desk.gen.base_width,
            gen_depth: desk.gen.depth,
            disc_layers: desk.disc_layers,
            disc_width: desk.disc_width,
            max_steps: 2000,
            eval_every: 100,
        }
    }
}

impl Pix2PixSection {
    pub fn model(&self, image_size: usize, channels: usize) -> Pix2PixConfig {
        let desk = Pix2PixConfig::desk();
        Pix2PixConfig {
            image_size,
            lambda_l1: self.lambda_l1,
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            gen: UNetConfig {
                in_channels: channels,
                base_width: self.gen_base_width,
                depth: self.gen_depth,
                patch: image_size,
                ..desk.gen
            },
            disc_layers: self.disc_layers,
            disc_width: self.disc_width,
            disc_norm: desk.disc_norm,
        }
    }
}

/// Early stopping: halt once validation loss has not improved by more than
/// `min_delta` for `patience` consecutive evaluations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stopping {
    pub patience: u32,
    pub min_delta: f64,
}

impl Default for Stopping {
    fn default() -> Self {
        Self {
            patience: 10,
            min_delta: 1e-4,
        }
    }
}

/// Command-line overrides applied on top of a loaded config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub pad_mode: Option<PadMode>,
    pub k_peaks: Option<usize>,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let key = msg
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| "<document>".to_string());
            Error::config(key, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative paths in it are resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.paths.samples = base.join(&cfg.paths.samples);
        cfg.output_dir = base.join(&cfg.output_dir);
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(pad) = o.pad_mode {
            self.pad_mode = pad;
        }
        if let Some(k) = o.k_peaks {
            self.preprocess.k_peaks = k;
        }
        if let Some(out) = &o.output_dir {
            self.output_dir = out.clone();
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.split;
        for (key, f) in [("split.train", s.train), ("split.val", s.val), ("split.test", s.test)] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::config(key, format!("fraction {f} outside [0, 1]")));
            }
        }
        let total = s.train + s.val + s.test;
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config("split", format!("fractions sum to {total}, expected 1")));
        }
        let p = &self.preprocess;
        if p.k_peaks == 0 {
            return Err(Error::config("preprocess.k_peaks", "must be at least 1"));
        }
        if !(p.min_separation >= 0.0) {
            return Err(Error::config("preprocess.min_separation", "must be >= 0"));
        }
        if let Some(hw) = p.half_window {
            if !(hw >= 0.0) {
                return Err(Error::config("preprocess.half_window", "must be >= 0"));
            }
        }
        if !(0.0 <= p.clip_low_pct && p.clip_low_pct < p.clip_high_pct && p.clip_high_pct <= 100.0) {
            return Err(Error::config(
                "preprocess.clip_low_pct",
                "need 0 <= clip_low_pct < clip_high_pct <= 100",
            ));
        }
        if p.image_size < 11 {
            return Err(Error::config("preprocess.image_size", "must be at least 11 (SSIM window)"));
        }
        if self.metrics.bins_mi < 2 {
            return Err(Error::config("metrics.bins_mi", "must be at least 2"));
        }
        let u = &self.unet;
        if u.batch_size == 0 {
            return Err(Error::config("unet.batch_size", "must be at least 1"));
        }
        if u.stride == 0 || u.stride > u.patch {
            return Err(Error::config("unet.stride", "must be in 1..=patch"));
        }
        if u.patch > p.image_size {
            return Err(Error::config("unet.patch", "larger than preprocess.image_size"));
        }
        if !(u.lr > 0.0) {
            return Err(Error::config("unet.lr", "must be > 0"));
        }
        if u.eval_every == 0 {
            return Err(Error::config("unet.eval_every", "must be at least 1"));
        }
        u.model(3).validate().map_err(|e| rekey(e, "unet"))?;
        if self.pix2pix.eval_every == 0 {
            return Err(Error::config("pix2pix.eval_every", "must be at least 1"));
        }
        self.pix2pix
            .model(p.image_size, 3)
            .validate()
            .map_err(|e| rekey(e, "pix2pix"))?;
        if !(self.stopping.min_delta >= 0.0) {
            return Err(Error::config("stopping.min_delta", "must be >= 0"));
        }
        Ok(())
    }
}

fn rekey(e: Error, section: &str) -> Error {
    match e {
        Error::Config { key, detail } if !key.starts_with(section) => {
            Error::config(format!("{section}.{key}"), detail)
        }
        other => other,
    }
}
