//! `msihist` command-line interface.
//!
//! Exit status: 0 on success, 1 for invalid input (arguments, configs,
//! malformed files), 2 for failures while running a computation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use msihist::imagereg::{fit_affine, pad_to_square, resize, warp, ControlPoint, ControlPoints, PadMode};
use msihist::pipeline::prepare::pick_dataset_peaks;
use msihist::pipeline::report::{evaluate_variant, write_reports};
use msihist::pipeline::synth::synth_png;
use msihist::pipeline::{
    generate_synthetic_dataset, load_prepared, make_manifest, model_dir, prepare_pairs, run_experiment,
    train_pix2pix, train_unet, ModelKind, OutputLock, Overrides, RunConfig, TrainOutcome,
};
use msihist::reduce::pca_rgb;
use msihist::spectra::{
    build_peak_stack, default_half_window, load_msi, rebin, save_msi, shared_axis, MsiDataset, Peak, PeakList,
};
use msihist::Image;

#[derive(Debug)]
enum CliError {
    Usage(String),
    Lib(msihist::Error),
}

impl From<msihist::Error> for CliError {
    fn from(e: msihist::Error) -> Self {
        CliError::Lib(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Lib(e) if e.is_validation() => 1,
            CliError::Lib(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Lib(e) => {
                write!(f, "{e}")?;
                let mut source = std::error::Error::source(e);
                while let Some(s) = source {
                    write!(f, ": {s}")?;
                    source = s.source();
                }
                Ok(())
            }
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "msihist", version, about = "Synthesize histology from mass spectrometry imaging")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Pad {
    Black,
    White,
}

impl From<Pad> for PadMode {
    fn from(p: Pad) -> Self {
        match p {
            Pad::Black => PadMode::Black,
            Pad::White => PadMode::White,
        }
    }
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pad: Option<Pad>,
    #[arg(long = "k-peaks", global = true)]
    k_peaks: Option<usize>,
    /// Output directory (or file, for single-artifact commands).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelArg {
    Unet,
    Pix2pix,
    All,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded synthetic paired dataset.
    Generate {
        #[arg(long, default_value_t = 40)]
        n: usize,
        #[arg(long = "image-size", default_value_t = 64)]
        image_size: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Rebin MSI containers onto their shared m/z axis.
    Rebin {
        #[arg(long = "input", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Sum all spectra and pick the most intense peaks.
    Peaks {
        #[arg(long = "input", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long = "min-separation")]
        min_separation: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Render the PCA pseudo-colour image of one MSI container.
    Reduce {
        #[arg(long)]
        input: PathBuf,
        /// `mz,intensity` CSV from the `peaks` command.
        #[arg(long)]
        peaks: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Pad, resize and warp a histology image using control points.
    Register {
        #[arg(long)]
        histology: PathBuf,
        #[arg(long = "control-points")]
        control_points: PathBuf,
        #[arg(long)]
        size: Option<usize>,
        /// Treat the CSV's dst columns as histology and src as MSI.
        #[arg(long)]
        swap: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Split the dataset and write co-registered pairs.
    Prepare {
        #[command(flatten)]
        common: Common,
    },
    /// Train the patch-based U-Net baseline.
    TrainUnet {
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Train the pix2pix translator.
    TrainPix2pix {
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Synthesize histology for one MSI rendering.
    Synth {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score trained models on the validation and test splits.
    Eval {
        #[arg(long, value_enum, default_value = "all")]
        model: ModelArg,
        #[command(flatten)]
        common: Common,
    },
    /// Build the model-comparison tables from evaluation results.
    Report {
        #[command(flatten)]
        common: Common,
    },
    /// Prepare, train, evaluate and report in one go.
    Run {
        /// Comma-separated variants, e.g. `unet:black,pix2pix:black,pix2pix:white`.
        #[arg(long, default_value = "unet:black,pix2pix:black")]
        variants: String,
        #[command(flatten)]
        common: Common,
    },
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            pad_mode: self.pad.map(PadMode::from),
            k_peaks: self.k_peaks,
            output_dir: self.out.clone(),
        }
    }

    fn config(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        cfg.apply(&self.overrides())?;
        Ok(cfg)
    }

    fn out_path(&self) -> CliResult<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Usage("this command needs --out".into()))
    }
}

fn load_all(inputs: &[PathBuf]) -> CliResult<Vec<MsiDataset>> {
    Ok(inputs.iter().map(|p| load_msi(p)).collect::<msihist::Result<Vec<_>>>()?)
}

/// Output name per input: the file name, qualified by its parent
/// directory when file names collide (e.g. `sample_000/msi`).
fn output_names(inputs: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let unnamed = |p: &Path| CliError::Usage(format!("cannot name output for {}", p.display()));
    let names = inputs
        .iter()
        .map(|p| p.file_name().map(PathBuf::from).ok_or_else(|| unnamed(p)))
        .collect::<CliResult<Vec<_>>>()?;
    let unique = names.iter().collect::<std::collections::HashSet<_>>().len() == names.len();
    if unique {
        return Ok(names);
    }
    let qualified = inputs
        .iter()
        .zip(&names)
        .map(|(p, n)| {
            let parent = p.parent().and_then(Path::file_name).ok_or_else(|| unnamed(p))?;
            Ok(Path::new(parent).join(n))
        })
        .collect::<CliResult<Vec<_>>>()?;
    if qualified.iter().collect::<std::collections::HashSet<_>>().len() != qualified.len() {
        return Err(CliError::Usage("rebin inputs must have distinct names".into()));
    }
    Ok(qualified)
}

fn read_peaks(path: &Path) -> CliResult<PeakList> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    let peaks = reader
        .deserialize()
        .collect::<Result<Vec<Peak>, _>>()
        .map_err(|e| CliError::Usage(format!("malformed peaks CSV {}: {e}", path.display())))?;
    if peaks.is_empty() {
        return Err(CliError::Usage(format!("{} lists no peaks", path.display())));
    }
    Ok(PeakList::from_peaks(peaks))
}

fn peaks_csv(peaks: &PeakList) -> String {
    let mut out = String::from("mz,intensity\n");
    for p in peaks.iter() {
        out.push_str(&format!("{},{}\n", p.mz, p.intensity));
    }
    out
}

fn write_text(path: &Path, text: &str) -> CliResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| msihist::Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| {
        CliError::Lib(msihist::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn summarize(kind: ModelKind, o: &TrainOutcome) {
    println!(
        "{}: {} steps, validation loss {:.6} -> best {:.6} at step {}{}",
        kind.display_name(),
        o.steps,
        o.initial_val,
        o.best_val,
        o.best_step,
        if o.stopped_early { " (early stop)" } else { "" }
    );
}

fn parse_variants(spec: &str) -> CliResult<Vec<(ModelKind, PadMode)>> {
    spec.split(',')
        .map(|item| {
            let (model, pad) = item
                .trim()
                .split_once(':')
                .ok_or_else(|| CliError::Usage(format!("variant `{item}` is not `model:pad`")))?;
            let kind = match model {
                "unet" => ModelKind::UNet,
                "pix2pix" => ModelKind::Pix2Pix,
                other => return Err(CliError::Usage(format!("unknown model `{other}`"))),
            };
            Ok((kind, pad.parse::<PadMode>()?))
        })
        .collect()
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Generate { n, image_size, common } => {
            let cfg = common.config()?;
            // without --out, write where the config expects its samples
            let out = match &common.out {
                Some(dir) => dir.clone(),
                None => cfg.paths.samples.parent().map(Path::to_path_buf).unwrap_or_default(),
            };
            let out = out.as_path();
            let files = generate_synthetic_dataset(out, n, cfg.seed, image_size)?;
            println!("wrote {} samples to {}", files.len(), out.display());
        }
        Command::Rebin { inputs, common } => {
            let out = common.out_path()?.to_path_buf();
            let datasets = load_all(&inputs)?;
            let axis = shared_axis(datasets.iter().map(|d| &d.axis))?;
            for (name, ds) in output_names(&inputs)?.iter().zip(&datasets) {
                save_msi(&rebin(ds, &axis)?, &out.join(name))?;
            }
            println!(
                "rebinned {} datasets onto {} bins [{}, {}]",
                datasets.len(),
                axis.len(),
                axis.min(),
                axis.max()
            );
        }
        Command::Peaks {
            inputs,
            min_separation,
            common,
        } => {
            let mut cfg = common.config()?;
            if let Some(sep) = min_separation {
                cfg.preprocess.min_separation = sep;
                cfg.validate()?;
            }
            let (_, peaks) = pick_dataset_peaks(&load_all(&inputs)?, &cfg)?;
            let text = peaks_csv(&peaks);
            match &common.out {
                Some(path) => write_text(path, &text)?,
                None => print!("{text}"),
            }
        }
        Command::Reduce { input, peaks, common } => {
            let cfg = common.config()?;
            let ds = load_msi(&input)?;
            let peaks = read_peaks(&peaks)?;
            let hw = cfg.preprocess.half_window.unwrap_or_else(|| default_half_window(&ds.axis));
            let stack = build_peak_stack(&ds, &peaks, hw)?;
            let img = pca_rgb(&stack, cfg.preprocess.clip_low_pct, cfg.preprocess.clip_high_pct)?;
            img.save_png(common.out_path()?)?;
        }
        Command::Register {
            histology,
            control_points,
            size,
            swap,
            common,
        } => {
            let cfg = common.config()?;
            let size = size.unwrap_or(cfg.preprocess.image_size);
            let mut points = ControlPoints::load_csv(&control_points)?;
            if swap {
                for p in &mut points.pairs {
                    *p = ControlPoint {
                        src_x: p.dst_x,
                        src_y: p.dst_y,
                        dst_x: p.src_x,
                        dst_y: p.src_y,
                    };
                }
            }
            let raw = Image::load_png_rgb(&histology)?;
            let square = if raw.width == raw.height { raw } else { pad_to_square(&raw, cfg.pad_mode)? };
            let framed = resize(&square, size, size)?;
            let t = fit_affine(&points)?;
            warp(&framed, &t, size, size, cfg.pad_mode)?.save_png(common.out_path()?)?;
            let [a, b, c, d, tx, ty] = t.coefficients();
            println!("affine a={a} b={b} c={c} d={d} tx={tx} ty={ty}");
        }
        Command::Prepare { common } => {
            let cfg = common.config()?;
            let _lock = OutputLock::acquire(&cfg.output_dir)?;
            let manifest = make_manifest(&cfg)?;
            let set = prepare_pairs(&manifest, &cfg)?;
            println!(
                "prepared {} pairs ({} peaks, {} padding)",
                set.pairs.len(),
                set.peaks.len(),
                cfg.pad_mode
            );
        }
        Command::TrainUnet { resume, common } => {
            let cfg = common.config()?;
            let _lock = OutputLock::acquire(&cfg.output_dir)?;
            let set = load_prepared(&cfg)?;
            summarize(ModelKind::UNet, &train_unet(&set, &cfg, resume)?);
        }
        Command::TrainPix2pix { resume, common } => {
            let cfg = common.config()?;
            let _lock = OutputLock::acquire(&cfg.output_dir)?;
            let set = load_prepared(&cfg)?;
            summarize(ModelKind::Pix2Pix, &train_pix2pix(&set, &cfg, resume)?);
        }
        Command::Synth {
            checkpoint,
            input,
            common,
        } => {
            synth_png(&checkpoint, &input, common.out_path()?)?;
        }
        Command::Eval { model, common } => {
            let cfg = common.config()?;
            let _lock = OutputLock::acquire(&cfg.output_dir)?;
            let set = load_prepared(&cfg)?;
            let kinds: &[ModelKind] = match model {
                ModelArg::Unet => &[ModelKind::UNet],
                ModelArg::Pix2pix => &[ModelKind::Pix2Pix],
                ModelArg::All => &[ModelKind::UNet, ModelKind::Pix2Pix],
            };
            let mut evaluated = 0;
            for &kind in kinds {
                let dir = model_dir(&cfg.output_dir, kind, cfg.pad_mode);
                if model == ModelArg::All && !dir.exists() {
                    continue;
                }
                for (split, r) in evaluate_variant(&cfg.output_dir, &dir, kind, &set, cfg.metrics.bins_mi)? {
                    println!(
                        "{} ({}) {split}: MI {:.4}, SSIM {:.4} over {} images",
                        kind.display_name(),
                        cfg.pad_mode.tag(),
                        r.mi,
                        r.ssim,
                        r.n_images
                    );
                }
                evaluated += 1;
            }
            if evaluated == 0 {
                return Err(CliError::Usage(format!(
                    "no trained models under {}",
                    cfg.output_dir.display()
                )));
            }
        }
        Command::Report { common } => {
            let cfg = common.config()?;
            for (split, rep) in write_reports(&cfg.output_dir)? {
                println!("{}", rep.to_markdown(&format!("{split} split")));
            }
        }
        Command::Run { variants, common } => {
            let cfg = common.config()?;
            let variants = parse_variants(&variants)?;
            let result = run_experiment(&cfg, &variants)?;
            for v in &result.variants {
                summarize(v.kind, &v.training);
            }
            for (split, rep) in &result.reports {
                println!("{}", rep.to_markdown(&format!("{split} split")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
