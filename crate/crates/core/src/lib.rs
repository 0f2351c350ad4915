//! Synthesis of histology-like images from mass spectrometry imaging (MSI).
//!
//! The crate covers the whole chain: MSI containers and interpolation
//! rebinning ([`spectra`]), PCA pseudo-color reduction ([`reduce`]),
//! control-point affine registration and patching ([`imagereg`]), a small
//! reverse-mode tensor engine with a U-Net baseline and a pix2pix translator
//! ([`nn`]), MI/SSIM evaluation ([`metrics`]) and the orchestration that ties
//! them together ([`pipeline`]).

// `!(x > 0.0)` is used on purpose so that NaN fails validation too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod image;
pub mod imagereg;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod reduce;
pub mod spectra;

pub use crate::error::{Error, Result};
pub use crate::image::Image;
