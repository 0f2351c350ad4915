//! U-Net encoder/decoder with skip connections.
//!
//! Each level is a pair of 3×3 convolutions (optionally instance-normalized)
//! with ReLU, followed by 2×2 max pooling on the way down and a stride-2
//! transposed convolution plus skip concatenation on the way up. A 1×1
//! convolution and a sigmoid produce the output.

use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::optim::{adam_step, AdamConfig, TrainState};
use super::params::{Init, ParamLayout, ParamStore, INIT_STD};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinalActivation {
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    #[default]
    None,
    Instance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub final_activation: FinalActivation,
    /// Training input side (patch size for the baseline, image size for pix2pix).
    pub patch: usize,
    #[serde(default)]
    pub norm: Norm,
}

impl UNetConfig {
    /// Full-size baseline: four levels, 64 channels at the first level.
    pub fn paper() -> Self {
        Self {
            in_channels: 3,
            out_channels: 3,
            base_width: 64,
            depth: 4,
            final_activation: FinalActivation::Sigmoid,
            patch: 32,
            norm: Norm::None,
        }
    }

    /// Desk-scale baseline that trains in minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            base_width: 8,
            depth: 2,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.base_width == 0 {
            return Err(Error::config("unet", "channel counts and base_width must be positive"));
        }
        if self.depth == 0 || self.depth > 8 {
            return Err(Error::config("unet.depth", format!("must be in 1..=8, got {}", self.depth)));
        }
        if self.patch == 0 || !self.patch.is_multiple_of(1 << self.depth) {
            return Err(Error::config(
                "unet.patch",
                format!("{} is not divisible by 2^depth = {}", self.patch, 1 << self.depth),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvIdx {
    pub w: usize,
    pub b: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvIdx {
    pub(crate) fn declare(
        layout: &mut ParamLayout,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Self {
            w: layout.add(format!("{name}.weight"), &[cout, cin, k, k], Init::Normal(INIT_STD)),
            b: layout.add(format!("{name}.bias"), &[cout], Init::Zeros),
            stride,
            pad,
        }
    }

    pub(crate) fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        g.conv2d(x, p[self.w], Some(p[self.b]), self.stride, self.pad)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NormIdx {
    pub gamma: usize,
    pub beta: usize,
}

impl NormIdx {
    pub(crate) fn declare(layout: &mut ParamLayout, name: &str, c: usize) -> Self {
        Self {
            gamma: layout.add(format!("{name}.gamma"), &[c], Init::Ones),
            beta: layout.add(format!("{name}.beta"), &[c], Init::Zeros),
        }
    }

    pub(crate) fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        g.instance_norm(x, p[self.gamma], p[self.beta])
    }
}

#[derive(Debug, Clone)]
struct DoubleConv {
    convs: [ConvIdx; 2],
    norms: Option<[NormIdx; 2]>,
}

impl DoubleConv {
    fn declare(layout: &mut ParamLayout, name: &str, cin: usize, cout: usize, norm: Norm) -> Self {
        let c1 = ConvIdx::declare(layout, &format!("{name}.conv1"), cin, cout, 3, 1, 1);
        let n1 = (norm == Norm::Instance).then(|| NormIdx::declare(layout, &format!("{name}.norm1"), cout));
        let c2 = ConvIdx::declare(layout, &format!("{name}.conv2"), cout, cout, 3, 1, 1);
        let n2 = (norm == Norm::Instance).then(|| NormIdx::declare(layout, &format!("{name}.norm2"), cout));
        Self {
            convs: [c1, c2],
            norms: n1.zip(n2).map(|(a, b)| [a, b]),
        }
    }

    fn forward(&self, g: &mut Graph, p: &[Var], mut x: Var) -> Result<Var> {
        for i in 0..2 {
            x = self.convs[i].forward(g, p, x)?;
            if let Some(norms) = &self.norms {
                x = norms[i].forward(g, p, x)?;
            }
            x = g.relu(x);
        }
        Ok(x)
    }
}

#[derive(Debug, Clone)]
pub struct UNet {
    pub cfg: UNetConfig,
    pub layout: ParamLayout,
    down: Vec<DoubleConv>,
    bottleneck: DoubleConv,
    up: Vec<(ConvIdx, DoubleConv)>,
    head: ConvIdx,
}

impl UNet {
    pub fn new(cfg: UNetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut layout = ParamLayout::default();
        let width = |level: usize| cfg.base_width << level;
        let mut down = Vec::with_capacity(cfg.depth);
        let mut cin = cfg.in_channels;
        for level in 0..cfg.depth {
            down.push(DoubleConv::declare(&mut layout, &format!("down{level}"), cin, width(level), cfg.norm));
            cin = width(level);
        }
        let bottleneck = DoubleConv::declare(&mut layout, "bottleneck", cin, width(cfg.depth), cfg.norm);
        let mut up = Vec::with_capacity(cfg.depth);
        for level in (0..cfg.depth).rev() {
            let name = format!("up{level}");
            let (wide, narrow) = (width(level + 1), width(level));
            // transposed conv weights are laid out Cin×Cout×k×k
            let upconv = ConvIdx {
                w: layout.add(format!("{name}.upconv.weight"), &[wide, narrow, 2, 2], Init::Normal(INIT_STD)),
                b: layout.add(format!("{name}.upconv.bias"), &[narrow], Init::Zeros),
                stride: 2,
                pad: 0,
            };
            let block = DoubleConv::declare(&mut layout, &name, 2 * narrow, narrow, cfg.norm);
            up.push((upconv, block));
        }
        let head = ConvIdx::declare(&mut layout, "head", width(0), cfg.out_channels, 1, 1, 0);
        Ok(Self {
            cfg,
            layout,
            down,
            bottleneck,
            up,
            head,
        })
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let m = 1 << self.cfg.depth;
        if c != self.cfg.in_channels {
            return Err(Error::shape(format!(
                "U-Net expects {} input channels, got {c}",
                self.cfg.in_channels
            )));
        }
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::shape(format!("U-Net input {h}x{w} is not divisible by 2^depth = {m}")));
        }
        Ok(())
    }

    /// Builds the forward pass on `g`; `p` are the bound parameters.
    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        self.check_input(g.value(x))?;
        let mut skips = Vec::with_capacity(self.cfg.depth);
        let mut h = x;
        for block in &self.down {
            h = block.forward(g, p, h)?;
            skips.push(h);
            h = g.max_pool2d(h)?;
        }
        h = self.bottleneck.forward(g, p, h)?;
        for ((upconv, block), skip) in self.up.iter().zip(skips.into_iter().rev()) {
            h = g.conv_transpose2d(h, p[upconv.w], Some(p[upconv.b]), upconv.stride, upconv.pad)?;
            h = g.concat_channels(skip, h)?;
            h = block.forward(g, p, h)?;
        }
        let logits = self.head.forward(g, p, h)?;
        Ok(match self.cfg.final_activation {
            FinalActivation::Sigmoid => g.sigmoid(logits),
        })
    }

    /// Inference on a batch.
    pub fn predict(&self, params: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, &p, xv)?;
        Ok(g.value(y).clone())
    }
}

/// One MSE/Adam update on `(input, target)`; returns the pre-update loss.
pub fn unet_train_step(
    model: &UNet,
    state: &mut TrainState,
    adam: &AdamConfig,
    input: &Tensor,
    target: &Tensor,
) -> Result<f64> {
    let mut g = Graph::new();
    let p = state.params.bind(&mut g, true);
    let x = g.constant(input.clone());
    let t = g.constant(target.clone());
    let y = model.forward(&mut g, &p, x)?;
    let loss = g.mse(y, t)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite {
            what: "U-Net loss",
            step: state.step + 1,
        });
    }
    g.backward(loss)?;
    state.params.take_grads(&g, &p);
    adam_step(state, adam)?;
    Ok(value)
}
