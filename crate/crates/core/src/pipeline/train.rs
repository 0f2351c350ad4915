//! Training loops with validation-based early stopping and resumable
//! checkpoints.
//!
//! Both trainers share one loop. Step `s` (0-based) belongs to epoch
//! `s / batches_per_epoch`; each epoch's order is a fresh shuffle drawn from
//! a generator seeded by `(seed, epoch)`, so the loop state is fully
//! described by the step count and resuming from `last.ckpt` replays exactly
//! what an uninterrupted run would do. Validation runs at step 0 and every
//! `eval_every` steps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{RunConfig, Stopping};
use super::prepare::{ImagePair, PreparedSet};
use super::split::Split;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::imagereg::{extract_patches, PadMode};
use crate::nn::{
    unet_train_step, AdamConfig, Checkpoint, ModelConfig, ModelInput, Pix2Pix, Pix2PixState, Progress, Tensor,
    TrainState, UNet,
};

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const VAL_LOG: &str = "val_log.csv";

/// Batches larger than this are split when running inference.
const INFERENCE_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelKind {
    UNet,
    Pix2Pix,
}

impl ModelKind {
    pub fn slug(self) -> &'static str {
        match self {
            ModelKind::UNet => "unet",
            ModelKind::Pix2Pix => "pix2pix",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            ModelKind::UNet => "U-Net",
            ModelKind::Pix2Pix => "pix2pix",
        }
    }
}

/// Output directory of one trained variant, e.g. `<out>/pix2pix_W`.
pub fn model_dir(output_dir: &Path, kind: ModelKind, pad: PadMode) -> PathBuf {
    output_dir.join(format!("{}_{}", kind.slug(), pad.tag()))
}

/// Stacks `[C, H, W]` planar copies of equally sized images into `[N, C, H, W]`.
pub fn images_to_tensor(images: &[&Image]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::invalid("empty image batch"))?;
    let (w, h, c) = (first.width, first.height, first.channels);
    let mut data = Vec::with_capacity(images.len() * w * h * c);
    for img in images {
        if (img.width, img.height, img.channels) != (w, h, c) {
            return Err(Error::shape("images in a batch differ in size"));
        }
        data.extend(img.to_planar());
    }
    Tensor::new(vec![images.len(), c, h, w], data)
}

/// Splits an `[N, C, H, W]` tensor back into images.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<Image>> {
    let (n, c, h, w) = t.dims4()?;
    let per = c * h * w;
    (0..n)
        .map(|i| Image::from_planar(w, h, c, &t.data[i * per..(i + 1) * per]))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub initial_val: f64,
    pub best_val: f64,
    pub best_step: u64,
    pub steps: u64,
    pub stopped_early: bool,
    pub best: Checkpoint,
    pub last: Checkpoint,
}

/// One model's plug-in to the shared loop.
trait Trainer {
    fn n_items(&self) -> usize;
    fn batch_size(&self) -> usize;
    fn log_header(&self) -> &'static str;
    /// Runs one update on the given item indices and returns the log columns.
    fn step(&mut self, batch: &[usize], step: u64) -> Result<Vec<f64>>;
    fn validate(&self) -> Result<f64>;
    fn checkpoint(&self, progress: &Progress) -> Checkpoint;
}

#[derive(Debug, Clone, Copy)]
struct LoopSettings {
    seed: u64,
    max_steps: u64,
    eval_every: u64,
    stopping: Stopping,
}

fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Keeps the header and the rows whose step is at most `step`.
fn truncate_log(path: &Path, step: u64) -> Result<String> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0
            || line
                .split(',')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s <= step);
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

fn run_loop(trainer: &mut dyn Trainer, settings: LoopSettings, dir: &Path, resume: Option<Progress>) -> Result<TrainOutcome> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (train_log, val_log) = (dir.join(TRAIN_LOG), dir.join(VAL_LOG));
    let n = trainer.n_items();
    if n == 0 {
        return Err(Error::invalid("no training items"));
    }
    let bs = trainer.batch_size().min(n);
    let per_epoch = (n / bs) as u64;

    let (mut progress, mut log, mut vlog, initial_val) = match resume {
        Some(p) => {
            let log = truncate_log(&train_log, p.step)?;
            let vlog = truncate_log(&val_log, p.step)?;
            let initial = vlog
                .lines()
                .nth(1)
                .and_then(|l| l.split(',').nth(1))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::invalid(format!("{} has no initial validation row", val_log.display())))?;
            (p, log, vlog, initial)
        }
        None => {
            let val = trainer.validate()?;
            let progress = Progress {
                step: 0,
                best_val: Some(val),
                best_step: 0,
                evals_since_best: 0,
                stopped: false,
            };
            trainer.checkpoint(&progress).save(&dir.join(BEST_CHECKPOINT))?;
            let log = format!("{}\n", trainer.log_header());
            let vlog = format!("step,val_loss\n0,{val}\n");
            (progress, log, vlog, val)
        }
    };

    while !progress.stopped && progress.step < settings.max_steps {
        let step = progress.step;
        let order = epoch_order(n, settings.seed, step / per_epoch);
        let b = (step % per_epoch) as usize;
        let columns = trainer.step(&order[b * bs..(b + 1) * bs], step + 1)?;
        progress.step += 1;
        let _ = write!(log, "{}", progress.step);
        for v in columns {
            let _ = write!(log, ",{v}");
        }
        log.push('\n');

        if progress.step % settings.eval_every == 0 {
            let val = trainer.validate()?;
            if !val.is_finite() {
                write(&train_log, &log)?;
                return Err(Error::NonFinite {
                    what: "validation loss",
                    step: progress.step,
                });
            }
            let _ = writeln!(vlog, "{},{val}", progress.step);
            let best = progress.best_val.unwrap_or(f64::INFINITY);
            if best - val > settings.stopping.min_delta {
                progress.best_val = Some(val);
                progress.best_step = progress.step;
                progress.evals_since_best = 0;
                trainer.checkpoint(&progress).save(&dir.join(BEST_CHECKPOINT))?;
            } else {
                progress.evals_since_best += 1;
                if progress.evals_since_best >= settings.stopping.patience {
                    progress.stopped = true;
                    log::info!("stopping at step {}: no improvement for {} evaluations", progress.step, progress.evals_since_best);
                }
            }
            log::info!("step {} validation loss {val:.6}", progress.step);
            // resumable snapshot: logs and state agree at every evaluation
            write(&train_log, &log)?;
            write(&val_log, &vlog)?;
            trainer.checkpoint(&progress).save(&dir.join(LAST_CHECKPOINT))?;
        }
    }

    write(&train_log, &log)?;
    write(&val_log, &vlog)?;
    let last = trainer.checkpoint(&progress);
    last.save(&dir.join(LAST_CHECKPOINT))?;
    let best = Checkpoint::load(&dir.join(BEST_CHECKPOINT))?;
    Ok(TrainOutcome {
        initial_val,
        best_val: progress.best_val.unwrap_or(initial_val),
        best_step: progress.best_step,
        steps: progress.step,
        stopped_early: progress.stopped,
        best,
        last,
    })
}

fn validation_pairs(set: &PreparedSet) -> Vec<&ImagePair> {
    let val = set.split(Split::Val);
    if val.is_empty() {
        log::warn!("validation split is empty; validating on the training split");
        set.split(Split::Train)
    } else {
        val
    }
}

fn patch_tensors(pairs: &[&ImagePair], patch: usize, stride: usize) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for pair in pairs {
        for (x, y) in extract_patches(&pair.msi, patch, stride)?
            .into_iter()
            .zip(extract_patches(&pair.histology, patch, stride)?)
        {
            inputs.push(images_to_tensor(&[&x.image])?);
            targets.push(images_to_tensor(&[&y.image])?);
        }
    }
    Ok((inputs, targets))
}

fn gather(items: &[Tensor], idx: &[usize]) -> Result<Tensor> {
    let picked: Vec<Tensor> = idx.iter().map(|&i| items[i].clone()).collect();
    Tensor::stack_batch(&picked)
}

struct UNetTrainer {
    model: UNet,
    adam: AdamConfig,
    state: TrainState,
    batch: usize,
    inputs: Vec<Tensor>,
    targets: Vec<Tensor>,
    val_inputs: Vec<Tensor>,
    val_targets: Vec<Tensor>,
}

impl Trainer for UNetTrainer {
    fn n_items(&self) -> usize {
        self.inputs.len()
    }

    fn batch_size(&self) -> usize {
        self.batch
    }

    fn log_header(&self) -> &'static str {
        "step,loss"
    }

    fn step(&mut self, batch: &[usize], _step: u64) -> Result<Vec<f64>> {
        let x = gather(&self.inputs, batch)?;
        let y = gather(&self.targets, batch)?;
        let loss = unet_train_step(&self.model, &mut self.state, &self.adam, &x, &y)?;
        Ok(vec![loss])
    }

    /// Mean squared error over all validation patches.
    fn validate(&self) -> Result<f64> {
        let mut sum = 0.0;
        let mut count = 0usize;
        let idx: Vec<usize> = (0..self.val_inputs.len()).collect();
        for chunk in idx.chunks(INFERENCE_CHUNK) {
            let x = gather(&self.val_inputs, chunk)?;
            let y = gather(&self.val_targets, chunk)?;
            let pred = self.model.predict(&self.state.params, &x)?;
            sum += pred.data.iter().zip(&y.data).map(|(p, t)| (p - t) * (p - t)).sum::<f64>();
            count += y.data.len();
        }
        Ok(sum / count as f64)
    }

    fn checkpoint(&self, progress: &Progress) -> Checkpoint {
        Checkpoint {
            config: ModelConfig::Unet {
                unet: self.model.cfg.clone(),
                adam: self.adam,
            },
            progress: progress.clone(),
            groups: vec![("unet".to_string(), self.state.clone())],
        }
    }
}

struct Pix2PixTrainer {
    model: Pix2Pix,
    input: ModelInput,
    state: Pix2PixState,
    conds: Vec<Tensor>,
    reals: Vec<Tensor>,
    val_conds: Vec<Tensor>,
    val_reals: Vec<Tensor>,
}

impl Trainer for Pix2PixTrainer {
    fn n_items(&self) -> usize {
        self.conds.len()
    }

    fn batch_size(&self) -> usize {
        1
    }

    fn log_header(&self) -> &'static str {
        "step,loss_g,loss_d"
    }

    fn step(&mut self, batch: &[usize], step: u64) -> Result<Vec<f64>> {
        let c = gather(&self.conds, batch)?;
        let r = gather(&self.reals, batch)?;
        let losses = self.model.step(&mut self.state, &c, &r).map_err(|e| match e {
            Error::NonFinite { what, .. } => Error::NonFinite { what, step },
            other => other,
        })?;
        Ok(vec![losses.loss_g, losses.loss_d])
    }

    /// Mean absolute error of the generator on the validation images.
    fn validate(&self) -> Result<f64> {
        let mut sum = 0.0;
        let mut count = 0usize;
        for (c, r) in self.val_conds.iter().zip(&self.val_reals) {
            let fake = self.model.gen.predict(&self.state.gen.params, c)?;
            sum += fake.data.iter().zip(&r.data).map(|(f, t)| (f - t).abs()).sum::<f64>();
            count += r.data.len();
        }
        Ok(sum / count as f64)
    }

    fn checkpoint(&self, progress: &Progress) -> Checkpoint {
        Checkpoint {
            config: ModelConfig::Pix2pix {
                pix2pix: self.model.cfg.clone(),
                input: self.input,
            },
            progress: progress.clone(),
            groups: vec![
                ("generator".to_string(), self.state.gen.clone()),
                ("discriminator".to_string(), self.state.disc.clone()),
            ],
        }
    }
}

fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn resume_state(dir: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let path = dir.join(LAST_CHECKPOINT);
    let ck = Checkpoint::load(&path)?;
    if &ck.config != expected {
        return Err(Error::config(
            "resume",
            format!("{} was written with a different model configuration", path.display()),
        ));
    }
    Ok(ck)
}

fn take_group(ck: &Checkpoint, name: &str) -> Result<TrainState> {
    ck.group(name).cloned().ok_or_else(|| Error::Format {
        what: "checkpoint",
        detail: format!("missing parameter group `{name}`"),
    })
}

/// Trains the patch-based U-Net baseline on the train split of `set`,
/// writing checkpoints and logs to `model_dir(output_dir, UNet, pad)`.
pub fn train_unet(set: &PreparedSet, cfg: &RunConfig, resume: bool) -> Result<TrainOutcome> {
    let u = &cfg.unet;
    let model = UNet::new(u.model(3))?;
    let train = set.split(Split::Train);
    if train.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    let (inputs, targets) = patch_tensors(&train, u.patch, u.stride)?;
    let (val_inputs, val_targets) = patch_tensors(&validation_pairs(set), u.patch, u.stride)?;
    if inputs.len() < u.batch_size {
        log::warn!("{} training patches, fewer than one batch of {}", inputs.len(), u.batch_size);
    }
    let dir = model_dir(&cfg.output_dir, ModelKind::UNet, set.pad_mode);
    let adam = u.adam();
    let expected = ModelConfig::Unet {
        unet: model.cfg.clone(),
        adam,
    };
    let (state, progress) = if resume {
        let ck = resume_state(&dir, &expected)?;
        (take_group(&ck, "unet")?, Some(ck.progress))
    } else {
        (TrainState::new(model.layout.init(&mut init_rng(cfg.seed)), cfg.seed), None)
    };
    let mut trainer = UNetTrainer {
        model,
        adam,
        state,
        batch: u.batch_size,
        inputs,
        targets,
        val_inputs,
        val_targets,
    };
    let settings = LoopSettings {
        seed: cfg.seed,
        max_steps: u.max_steps,
        eval_every: u.eval_every,
        stopping: cfg.stopping,
    };
    run_loop(&mut trainer, settings, &dir, progress)
}

/// Trains pix2pix (batch size 1, whole images) on the train split of `set`.
pub fn train_pix2pix(set: &PreparedSet, cfg: &RunConfig, resume: bool) -> Result<TrainOutcome> {
    let p = &cfg.pix2pix;
    let train = set.split(Split::Train);
    let first = train.first().ok_or_else(|| Error::invalid("training split is empty"))?;
    let channels = first.input(p.input)?.channels;
    let model = Pix2Pix::new(p.model(cfg.preprocess.image_size, channels))?;
    let tensors = |pairs: &[&ImagePair]| -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let mut c = Vec::new();
        let mut r = Vec::new();
        for pair in pairs {
            c.push(images_to_tensor(&[pair.input(p.input)?])?);
            r.push(images_to_tensor(&[&pair.histology])?);
        }
        Ok((c, r))
    };
    let (conds, reals) = tensors(&train)?;
    let (val_conds, val_reals) = tensors(&validation_pairs(set))?;
    let dir = model_dir(&cfg.output_dir, ModelKind::Pix2Pix, set.pad_mode);
    let expected = ModelConfig::Pix2pix {
        pix2pix: model.cfg.clone(),
        input: p.input,
    };
    let (state, progress) = if resume {
        let ck = resume_state(&dir, &expected)?;
        let state = Pix2PixState {
            gen: take_group(&ck, "generator")?,
            disc: take_group(&ck, "discriminator")?,
        };
        (state, Some(ck.progress))
    } else {
        (model.init_state(&mut init_rng(cfg.seed), cfg.seed), None)
    };
    let mut trainer = Pix2PixTrainer {
        model,
        input: p.input,
        state,
        conds,
        reals,
        val_conds,
        val_reals,
    };
    let settings = LoopSettings {
        seed: cfg.seed,
        max_steps: p.max_steps,
        eval_every: p.eval_every,
        stopping: cfg.stopping,
    };
    run_loop(&mut trainer, settings, &dir, progress)
}
