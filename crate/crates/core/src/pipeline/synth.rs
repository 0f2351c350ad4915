//! Histology synthesis from a trained checkpoint.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::imagereg::{extract_patches, reassemble, Patch};
use crate::nn::{Checkpoint, ModelConfig, ModelInput, ParamStore, UNet};

use super::train::{images_to_tensor, tensor_to_images};

const PATCH_BATCH: usize = 64;

/// A generator network ready for inference.
#[derive(Debug, Clone)]
pub enum Generator {
    /// Patch model; inputs of any size ≥ the patch are tiled edge-flush and
    /// the overlapping outputs averaged.
    Patchwise { model: UNet, params: ParamStore },
    /// Whole-image model for a fixed square input size.
    Whole {
        model: UNet,
        params: ParamStore,
        image_size: usize,
        input: ModelInput,
    },
}

impl Generator {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let missing = |name: &str| Error::Format {
            what: "checkpoint",
            detail: format!("missing parameter group `{name}`"),
        };
        match &ck.config {
            ModelConfig::Unet { unet, .. } => {
                let model = UNet::new(unet.clone())?;
                let params = ck.group("unet").ok_or_else(|| missing("unet"))?.params.clone();
                model.layout.check(&params)?;
                Ok(Generator::Patchwise { model, params })
            }
            ModelConfig::Pix2pix { pix2pix, input } => {
                let model = UNet::new(pix2pix.gen.clone())?;
                let params = ck.group("generator").ok_or_else(|| missing("generator"))?.params.clone();
                model.layout.check(&params)?;
                Ok(Generator::Whole {
                    model,
                    params,
                    image_size: pix2pix.image_size,
                    input: *input,
                })
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Input representation the network was trained on.
    pub fn input(&self) -> ModelInput {
        match self {
            Generator::Patchwise { .. } => ModelInput::Rgb,
            Generator::Whole { input, .. } => *input,
        }
    }

    fn model(&self) -> &UNet {
        match self {
            Generator::Patchwise { model, .. } | Generator::Whole { model, .. } => model,
        }
    }

    /// RGB histology in [0, 1] with the input's width and height.
    pub fn synthesize(&self, input: &Image) -> Result<Image> {
        let cfg = &self.model().cfg;
        if input.channels != cfg.in_channels {
            return Err(Error::config(
                "input",
                format!("model expects {} channels, input has {}", cfg.in_channels, input.channels),
            ));
        }
        match self {
            Generator::Whole {
                model,
                params,
                image_size,
                ..
            } => {
                if input.width != *image_size || input.height != *image_size {
                    return Err(Error::config(
                        "input",
                        format!(
                            "model expects {0}x{0} images, input is {1}x{2}",
                            image_size, input.width, input.height
                        ),
                    ));
                }
                let out = model.predict(params, &images_to_tensor(&[input])?)?;
                Ok(tensor_to_images(&out)?.remove(0))
            }
            Generator::Patchwise { model, params } => {
                let patch = model.cfg.patch;
                if input.width < patch || input.height < patch {
                    return Err(Error::config(
                        "input",
                        format!("input {}x{} is smaller than the {patch}px patch", input.width, input.height),
                    ));
                }
                let tiles = extract_patches(input, patch, patch)?;
                let mut out = Vec::with_capacity(tiles.len());
                for chunk in tiles.chunks(PATCH_BATCH) {
                    let imgs: Vec<&Image> = chunk.iter().map(|p| &p.image).collect();
                    let pred = model.predict(params, &images_to_tensor(&imgs)?)?;
                    for (tile, image) in chunk.iter().zip(tensor_to_images(&pred)?) {
                        out.push(Patch {
                            x: tile.x,
                            y: tile.y,
                            image,
                        });
                    }
                }
                reassemble(&out, input.width, input.height)
            }
        }
    }
}

/// Loads a checkpoint, synthesizes from an input PNG and writes an 8-bit PNG.
pub fn synth_png(checkpoint: &Path, input: &Path, output: &Path) -> Result<Image> {
    let generator = Generator::load(checkpoint)?;
    let img = Image::load_png_rgb(input)?;
    let out = generator.synthesize(&img)?;
    out.save_png(output)?;
    Ok(out)
}
