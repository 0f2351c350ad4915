//! Orchestration: configuration, splitting, synthetic data, pair
//! preparation, training, synthesis, evaluation and reporting.
//!
//! A run writes everything below `output_dir`:
//!
//! ```text
//! manifest.csv                 split assignment
//! pairs_{B,W}/                 prepared pairs per padding mode
//! {unet,pix2pix}_{B,W}/        checkpoints and training logs
//! synth/<variant>_<split>/     synthesized histology
//! eval/<variant>_<split>.csv   per-image MI/SSIM
//! report_{test,val}.{md,csv}   model comparison
//! ```

pub mod config;
pub mod prepare;
pub mod report;
pub mod split;
pub mod synth;
pub mod synthetic;
pub mod train;

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

pub use config::{ModelInput, Overrides, RunConfig};
pub use prepare::{load_pairs, pairs_dir, prepare_pairs, ImagePair, PreparedSet};
pub use report::{report, ComparisonReport, Delta, VariantResult};
pub use split::{split_dataset, DatasetManifest, Split};
pub use synth::Generator;
pub use synthetic::generate_synthetic_dataset;
pub use train::{model_dir, train_pix2pix, train_unet, ModelKind, TrainOutcome};

use crate::error::{Error, Result};
use crate::imagereg::PadMode;
use crate::metrics::MetricReport;

pub const MANIFEST_FILE: &str = "manifest.csv";
const LOCK_FILE: &str = ".lock";

/// Exclusive ownership of an output directory for the lifetime of a run.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::invalid(format!(
                "{} is in use by another run (remove {} if that run died)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Splits the samples listed in `cfg.paths.samples` and writes the manifest.
pub fn make_manifest(cfg: &RunConfig) -> Result<DatasetManifest> {
    let samples = split::load_samples(&cfg.paths.samples)?;
    let manifest = split_dataset(&samples, cfg.split.as_array(), cfg.seed)?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    manifest.save(&cfg.output_dir.join(MANIFEST_FILE))?;
    log::info!(
        "split {} samples: {} train / {} val / {} test",
        manifest.entries.len(),
        manifest.count(Split::Train),
        manifest.count(Split::Val),
        manifest.count(Split::Test)
    );
    Ok(manifest)
}

/// Loads the prepared pairs of `cfg.pad_mode`.
pub fn load_prepared(cfg: &RunConfig) -> Result<PreparedSet> {
    let dir = pairs_dir(&cfg.output_dir, cfg.pad_mode);
    if !dir.join("pairs.csv").exists() {
        return Err(Error::invalid(format!(
            "no prepared pairs in {}; run `prepare` first",
            dir.display()
        )));
    }
    load_pairs(&dir)
}

#[derive(Debug, Clone)]
pub struct VariantRun {
    pub kind: ModelKind,
    pub pad: PadMode,
    pub training: TrainOutcome,
    pub scores: Vec<(Split, MetricReport)>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub variants: Vec<VariantRun>,
    pub reports: Vec<(Split, ComparisonReport)>,
}

impl ExperimentResult {
    pub fn report(&self, split: Split) -> Option<&ComparisonReport> {
        self.reports.iter().find(|(s, _)| *s == split).map(|(_, r)| r)
    }
}

/// Prepare → train → evaluate → report for each `(model, padding)` variant.
/// The run holds the output directory's lock throughout.
pub fn run_experiment(cfg: &RunConfig, variants: &[(ModelKind, PadMode)]) -> Result<ExperimentResult> {
    if variants.is_empty() {
        return Err(Error::invalid("no model variants requested"));
    }
    let _lock = OutputLock::acquire(&cfg.output_dir)?;
    let manifest = make_manifest(cfg)?;
    let mut pads: Vec<PadMode> = variants.iter().map(|v| v.1).collect();
    pads.dedup();
    let mut sets = Vec::new();
    for pad in [PadMode::Black, PadMode::White] {
        if variants.iter().any(|v| v.1 == pad) {
            let c = RunConfig {
                pad_mode: pad,
                ..cfg.clone()
            };
            sets.push((pad, prepare_pairs(&manifest, &c)?));
        }
    }
    let mut runs = Vec::new();
    for &(kind, pad) in variants {
        let set = &sets.iter().find(|(p, _)| *p == pad).expect("prepared above").1;
        let c = RunConfig {
            pad_mode: pad,
            ..cfg.clone()
        };
        log::info!("training {} ({})", kind.display_name(), pad.tag());
        let training = match kind {
            ModelKind::UNet => train_unet(set, &c, false)?,
            ModelKind::Pix2Pix => train_pix2pix(set, &c, false)?,
        };
        let scores = report::evaluate_variant(
            &cfg.output_dir,
            &model_dir(&cfg.output_dir, kind, pad),
            kind,
            set,
            cfg.metrics.bins_mi,
        )?;
        runs.push(VariantRun {
            kind,
            pad,
            training,
            scores,
        });
    }
    let reports = report::write_reports(&cfg.output_dir)?;
    Ok(ExperimentResult {
        variants: runs,
        reports,
    })
}
