//! Conditional GAN translator: a U-Net generator trained against a PatchGAN
//! discriminator with an added L1 reconstruction term.

use serde::{Deserialize, Serialize};

use super::graph::Graph;
use super::optim::{adam_step, AdamConfig, TrainState};
use super::params::ParamStore;
use super::patchgan::{PatchGan, PatchGanConfig};
use super::tensor::Tensor;
use super::unet::{Norm, UNet, UNetConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pix2PixConfig {
    pub image_size: usize,
    pub lambda_l1: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub gen: UNetConfig,
    pub disc_layers: usize,
    pub disc_width: usize,
    #[serde(default = "instance")]
    pub disc_norm: Norm,
}

fn instance() -> Norm {
    Norm::Instance
}

impl Pix2PixConfig {
    /// Full-size settings: 512×512 inputs, lr 2e-5, L1 weight 200.
    pub fn paper() -> Self {
        Self {
            image_size: 512,
            lambda_l1: 200.0,
            lr: 0.00002,
            beta1: 0.5,
            beta2: 0.999,
            gen: UNetConfig {
                patch: 512,
                norm: Norm::Instance,
                ..UNetConfig::paper()
            },
            disc_layers: 3,
            disc_width: 64,
            disc_norm: Norm::Instance,
        }
    }

    /// 64×64 preset with narrow networks for single-core training.
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            gen: UNetConfig {
                base_width: 8,
                depth: 3,
                patch: 64,
                norm: Norm::Instance,
                ..UNetConfig::paper()
            },
            disc_width: 8,
            // The small model sees far fewer updates than the full-size one;
            // the published rate barely moves it within a desk budget.
            lr: 2e-4,
            ..Self::paper()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::new(self.lr, self.beta1, self.beta2)
    }

    pub fn disc_config(&self) -> PatchGanConfig {
        PatchGanConfig {
            in_channels: self.gen.in_channels + self.gen.out_channels,
            base_width: self.disc_width,
            layers: self.disc_layers,
            norm: self.disc_norm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_l1 >= 0.0) {
            return Err(Error::config("pix2pix.lambda_l1", "must be >= 0"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("pix2pix.lr", "must be > 0"));
        }
        for (key, b) in [("pix2pix.beta1", self.beta1), ("pix2pix.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(key, "must be in [0, 1)"));
            }
        }
        if self.gen.patch != self.image_size {
            return Err(Error::config(
                "pix2pix.image_size",
                format!("generator input size {} differs from image_size {}", self.gen.patch, self.image_size),
            ));
        }
        self.gen.validate()
    }
}

#[derive(Debug, Clone)]
pub struct Pix2Pix {
    pub cfg: Pix2PixConfig,
    pub gen: UNet,
    pub disc: PatchGan,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pix2PixState {
    pub gen: TrainState,
    pub disc: TrainState,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pix2PixLosses {
    /// Discriminator loss, `(bce(real, 1) + bce(fake, 0)) / 2`.
    pub loss_d: f64,
    /// Generator objective `adv + lambda_l1 · l1`.
    pub loss_g: f64,
    pub adv: f64,
    pub l1: f64,
}

/// Generator objective pieces and the gradients of the total objective.
#[derive(Debug, Clone)]
pub struct GeneratorGrads {
    pub adv: f64,
    pub l1: f64,
    pub total: f64,
    pub grads: Vec<Vec<f64>>,
}

impl Pix2Pix {
    pub fn new(cfg: Pix2PixConfig) -> Result<Self> {
        cfg.validate()?;
        let gen = UNet::new(cfg.gen.clone())?;
        let disc = PatchGan::new(cfg.disc_config())?;
        Ok(Self { cfg, gen, disc })
    }

    pub fn init_state<R: rand::Rng + ?Sized>(&self, rng: &mut R, seed: u64) -> Pix2PixState {
        let gen = self.gen.layout.init(rng);
        let disc = self.disc.layout.init(rng);
        Pix2PixState {
            gen: TrainState::new(gen, seed),
            disc: TrainState::new(disc, seed),
        }
    }

    fn check_batch(&self, cond: &Tensor, real: &Tensor) -> Result<()> {
        let (n, _, h, w) = cond.dims4()?;
        let (rn, rc, rh, rw) = real.dims4()?;
        if (n, h, w) != (rn, rh, rw) || rc != self.cfg.gen.out_channels {
            return Err(Error::shape(format!(
                "condition {:?} and target {:?} do not form a pix2pix batch",
                cond.shape, real.shape
            )));
        }
        if h != self.cfg.image_size || w != self.cfg.image_size {
            return Err(Error::shape(format!(
                "pix2pix expects {0}x{0} images, got {h}x{w}",
                self.cfg.image_size
            )));
        }
        Ok(())
    }

    /// Discriminator loss and parameter gradients for a given fake batch.
    pub fn discriminator_grads(
        &self,
        disc: &ParamStore,
        cond: &Tensor,
        real: &Tensor,
        fake: &Tensor,
    ) -> Result<(f64, ParamStore)> {
        let mut g = Graph::new();
        let p = disc.bind(&mut g, true);
        let c = g.constant(cond.clone());
        let r = g.constant(real.clone());
        let f = g.constant(fake.clone());
        let real_logits = self.disc.forward(&mut g, &p, c, r)?;
        let fake_logits = self.disc.forward(&mut g, &p, c, f)?;
        let lr = g.bce_with_logits(real_logits, 1.0);
        let lf = g.bce_with_logits(fake_logits, 0.0);
        let sum = g.add(lr, lf)?;
        let loss = g.scale(sum, 0.5);
        g.backward(loss)?;
        let mut out = disc.clone();
        out.take_grads(&g, &p);
        Ok((g.value(loss).item(), out))
    }

    /// Generator objective `bce(D(cond, G(cond)), 1) + lambda · l1(G(cond), real)`
    /// with the discriminator held fixed, and its gradients with respect to
    /// the generator parameters.
    pub fn generator_grads(
        &self,
        gen: &ParamStore,
        disc: &ParamStore,
        cond: &Tensor,
        real: &Tensor,
        lambda_l1: f64,
    ) -> Result<GeneratorGrads> {
        let mut g = Graph::new();
        let gp = gen.bind(&mut g, true);
        let dp = disc.bind(&mut g, false);
        let c = g.constant(cond.clone());
        let r = g.constant(real.clone());
        let fake = self.gen.forward(&mut g, &gp, c)?;
        let logits = self.disc.forward(&mut g, &dp, c, fake)?;
        let adv = g.bce_with_logits(logits, 1.0);
        let l1 = g.l1(fake, r)?;
        let weighted = g.scale(l1, lambda_l1);
        let total = g.add(adv, weighted)?;
        g.backward(total)?;
        let grads = gp
            .iter()
            .zip(&gen.tensors)
            .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect();
        Ok(GeneratorGrads {
            adv: g.value(adv).item(),
            l1: g.value(l1).item(),
            total: g.value(total).item(),
            grads,
        })
    }

    /// One discriminator update followed by one generator update.
    pub fn step(&self, state: &mut Pix2PixState, cond: &Tensor, real: &Tensor) -> Result<Pix2PixLosses> {
        self.check_batch(cond, real)?;
        let adam = self.cfg.adam();
        let step = state.gen.step + 1;

        let fake = self.gen.predict(&state.gen.params, cond)?;
        let (loss_d, with_grads) = self.discriminator_grads(&state.disc.params, cond, real, &fake)?;
        if !loss_d.is_finite() {
            return Err(Error::NonFinite {
                what: "discriminator loss",
                step,
            });
        }
        state.disc.params = with_grads;
        adam_step(&mut state.disc, &adam)?;

        let gg = self.generator_grads(&state.gen.params, &state.disc.params, cond, real, self.cfg.lambda_l1)?;
        if !gg.total.is_finite() {
            return Err(Error::NonFinite {
                what: "generator loss",
                step,
            });
        }
        for (t, grad) in state.gen.params.tensors.iter_mut().zip(gg.grads) {
            t.grad = Some(grad);
        }
        adam_step(&mut state.gen, &adam)?;
        Ok(Pix2PixLosses {
            loss_d,
            loss_g: gg.total,
            adv: gg.adv,
            l1: gg.l1,
        })
    }
}

/// `pix2pix_step` as a free function.
pub fn pix2pix_step(model: &Pix2Pix, state: &mut Pix2PixState, cond: &Tensor, real: &Tensor) -> Result<Pix2PixLosses> {
    model.step(state, cond, real)
}
