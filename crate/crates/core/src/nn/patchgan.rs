//! PatchGAN discriminator: a stack of stride-2 4×4 convolutions with leaky
//! ReLU, closed by a stride-1 4×4 convolution to a single-channel logit map.

use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{ParamLayout, ParamStore};
use super::tensor::Tensor;
use super::unet::{ConvIdx, Norm, NormIdx};
use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;
const KERNEL: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchGanConfig {
    /// Channels of condition and image together.
    pub in_channels: usize,
    pub base_width: usize,
    /// Number of stride-2 layers.
    pub layers: usize,
    #[serde(default)]
    pub norm: Norm,
}

#[derive(Debug, Clone)]
pub struct PatchGan {
    pub cfg: PatchGanConfig,
    pub layout: ParamLayout,
    convs: Vec<ConvIdx>,
    norms: Vec<Option<NormIdx>>,
}

impl PatchGan {
    pub fn new(cfg: PatchGanConfig) -> Result<Self> {
        if cfg.in_channels == 0 || cfg.base_width == 0 {
            return Err(Error::config("pix2pix.disc", "channel counts must be positive"));
        }
        if cfg.layers == 0 || cfg.layers > 8 {
            return Err(Error::config("pix2pix.disc_layers", format!("must be in 1..=8, got {}", cfg.layers)));
        }
        let mut layout = ParamLayout::default();
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut cin = cfg.in_channels;
        for i in 0..cfg.layers {
            let cout = cfg.base_width << i;
            convs.push(ConvIdx::declare(&mut layout, &format!("disc{i}"), cin, cout, KERNEL, 2, 1));
            // no normalization directly on the input layer
            norms.push((i > 0 && cfg.norm == Norm::Instance).then(|| NormIdx::declare(&mut layout, &format!("disc{i}.norm"), cout)));
            cin = cout;
        }
        convs.push(ConvIdx::declare(&mut layout, "disc_out", cin, 1, KERNEL, 1, 1));
        Ok(Self { cfg, layout, convs, norms })
    }

    /// `(kernel, stride, pad)` of every layer, input to output.
    pub fn geometry(&self) -> Vec<(usize, usize, usize)> {
        self.convs.iter().map(|c| (KERNEL, c.stride, c.pad)).collect()
    }

    /// Logit-map size for an `h × w` input, if every layer fits.
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        self.geometry().into_iter().try_fold((h, w), |(h, w), (k, s, p)| {
            (h + 2 * p >= k && w + 2 * p >= k).then(|| ((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1))
        })
    }

    /// Inclusive input rows (or columns) seen by logit row (column) `i`;
    /// the range may extend into the zero padding.
    pub fn receptive_field(&self, i: usize) -> (isize, isize) {
        self.geometry().into_iter().rev().fold((i as isize, i as isize), |(lo, hi), (k, s, p)| {
            (lo * s as isize - p as isize, hi * s as isize - p as isize + k as isize - 1)
        })
    }

    /// Logits for the channel-concatenated `(condition, image)` pair.
    pub fn forward(&self, g: &mut Graph, p: &[Var], condition: Var, image: Var) -> Result<Var> {
        let x = g.concat_channels(condition, image)?;
        let (_, c, h, w) = g.value(x).dims4()?;
        if c != self.cfg.in_channels {
            return Err(Error::shape(format!(
                "discriminator expects {} channels, got {c}",
                self.cfg.in_channels
            )));
        }
        if self.output_size(h, w).is_none_or(|(oh, ow)| oh == 0 || ow == 0) {
            return Err(Error::shape(format!("discriminator layers do not fit a {h}x{w} input")));
        }
        let mut h = x;
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            h = conv.forward(g, p, h)?;
            if let Some(norm) = norm {
                h = norm.forward(g, p, h)?;
            }
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        self.convs.last().expect("output layer").forward(g, p, h)
    }

    pub fn predict(&self, params: &ParamStore, condition: &Tensor, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let c = g.constant(condition.clone());
        let x = g.constant(image.clone());
        let y = self.forward(&mut g, &p, c, x)?;
        Ok(g.value(y).clone())
    }
}
