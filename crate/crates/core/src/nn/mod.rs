//! A small 64-bit reverse-mode autodiff engine with the U-Net, PatchGAN and
//! pix2pix models built on it.

pub mod checkpoint;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod patchgan;
pub mod pix2pix;
pub mod tensor;
pub mod unet;

pub use checkpoint::{Checkpoint, ModelConfig, ModelInput, Progress};
pub use graph::{Graph, Var, NORM_EPS};
pub use optim::{adam_step, AdamConfig, TrainState};
pub use params::{Init, ParamLayout, ParamSpec, ParamStore, INIT_STD};
pub use patchgan::{PatchGan, PatchGanConfig};
pub use pix2pix::{pix2pix_step, GeneratorGrads, Pix2Pix, Pix2PixConfig, Pix2PixLosses, Pix2PixState};
pub use tensor::Tensor;
pub use unet::{unet_train_step, FinalActivation, Norm, UNet, UNetConfig};
