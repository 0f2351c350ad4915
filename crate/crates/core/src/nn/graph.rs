//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value; [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients into the nodes that
//! require them. Nodes are only ever appended, so a node's inputs always sit
//! at smaller indices.

use super::kernels::{col2im, gemm, im2col, ConvGeom, MatRef};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Epsilon added to the variance in instance normalization.
pub const NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    MaxPool2(Var, Vec<usize>),
    InstanceNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Concat(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Mse(Var, Var),
    L1(Var, Var),
    BceWithLogits(Var, f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::MaxPool2(..) => "max_pool2d",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::Concat(..) => "concat",
            Op::Add(..) => "add",
            Op::Scale(..) => "scale",
            Op::Mse(..) => "mse",
            Op::L1(..) => "l1",
            Op::BceWithLogits(..) => "bce_with_logits",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    check_finite: bool,
    non_finite: Option<&'static str>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    /// Empty tape. Non-finite forward values are recorded (see
    /// [`Graph::first_non_finite`]) in debug builds.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
            non_finite: None,
        }
    }

    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    /// Name of the first operation that produced a NaN or infinity, if the
    /// finiteness check is enabled and one did.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.non_finite
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.check_finite && self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some(op.name());
        }
        value.grad = None;
        value.requires_grad = requires_grad;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf; it participates in differentiation when `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg)
    }

    /// Adds a constant leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn conv_weights(&self, w: Var, b: Option<Var>, out_c: usize) -> Result<(usize, usize, usize, usize)> {
        let (wo, wi, kh, kw) = self.value(w).dims4()?;
        if let Some(b) = b {
            if self.value(b).shape != [out_c] {
                return Err(Error::shape(format!(
                    "bias shape {:?} does not match {out_c} output channels",
                    self.value(b).shape
                )));
            }
        }
        Ok((wo, wi, kh, kw))
    }

    /// Cross-correlation of `x` (`N×Cin×H×W`) with `w` (`Cout×Cin×kh×kw`),
    /// zero padding `pad` on every side.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, kh, kw) = self.value(w).dims4()?;
        self.conv_weights(w, b, cout)?;
        if wcin != cin {
            return Err(Error::shape(format!("conv2d: input has {cin} channels, weight expects {wcin}")));
        }
        let g = ConvGeom::new(cin, h, wd, kh, kw, stride, pad)
            .ok_or_else(|| Error::shape(format!("conv2d: kernel {kh}x{kw} does not fit {h}x{wd} with pad {pad}")))?;
        let (ck, p) = (g.col_rows(), g.col_cols());
        let xv = &self.value(x).data;
        let wv = &self.value(w).data;
        let mut out = vec![0.0; n * cout * p];
        let mut col = vec![0.0; if g.is_pointwise() { 0 } else { ck * p }];
        for s in 0..n {
            let xs = &xv[s * cin * h * wd..(s + 1) * cin * h * wd];
            let lowered: &[f64] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, &g, &mut col);
                &col
            };
            gemm(
                1.0,
                MatRef::new(wv, cout, ck),
                MatRef::new(lowered, ck, p),
                0.0,
                &mut out[s * cout * p..(s + 1) * cout * p],
            );
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, &self.value(b).data, n, cout, p);
        }
        let value = Tensor::new(vec![n, cout, g.oh, g.ow], out)?;
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(value, Op::Conv2d { x, w, b, stride, pad }, rg))
    }

    /// Transposed convolution (the adjoint of [`Graph::conv2d`] with the same
    /// geometry). `w` is `Cin×Cout×kh×kw`; output side `(H−1)·stride − 2·pad + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (wcin, cout, kh, kw) = self.value(w).dims4()?;
        self.conv_weights(w, b, cout)?;
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv_transpose2d: input has {cin} channels, weight expects {wcin}"
            )));
        }
        if stride == 0 || h == 0 || wd == 0 || (h - 1) * stride + kh < 2 * pad + 1 || (wd - 1) * stride + kw < 2 * pad + 1 {
            return Err(Error::shape("conv_transpose2d: output would be empty".to_string()));
        }
        let oh = (h - 1) * stride + kh - 2 * pad;
        let ow = (wd - 1) * stride + kw - 2 * pad;
        let g = ConvGeom::new(cout, oh, ow, kh, kw, stride, pad)
            .ok_or_else(|| Error::shape("conv_transpose2d: invalid geometry".to_string()))?;
        debug_assert_eq!((g.oh, g.ow), (h, wd));
        let (ck, p) = (g.col_rows(), g.col_cols());
        let xv = &self.value(x).data;
        let wv = &self.value(w).data;
        let plane = oh * ow;
        let mut out = vec![0.0; n * cout * plane];
        let mut col = vec![0.0; ck * p];
        for s in 0..n {
            gemm(
                1.0,
                MatRef::new(wv, cin, ck).t(),
                MatRef::new(&xv[s * cin * p..(s + 1) * cin * p], cin, p),
                0.0,
                &mut col,
            );
            col2im(&col, &g, &mut out[s * cout * plane..(s + 1) * cout * plane]);
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, &self.value(b).data, n, cout, plane);
        }
        let value = Tensor::new(vec![n, cout, oh, ow], out)?;
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, stride, pad }, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| f(v)).collect(),
            grad: None,
            requires_grad: false,
        };
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(x, slope))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    /// 2×2 max pooling with stride 2; spatial dims must be even.
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!("max_pool2d needs even spatial dims, got {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xv = &self.value(x).data;
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut arg = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xv[i] > xv[best] {
                            best = i;
                        }
                    }
                    out.push(xv[best]);
                    arg.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MaxPool2(x, arg), rg))
    }

    /// Per-sample, per-channel normalization followed by a learnable
    /// per-channel scale `gamma` and shift `beta` (both of shape `[C]`).
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(gamma).shape != [c] || self.value(beta).shape != [c] {
            return Err(Error::shape(format!("instance_norm: scale/shift must have shape [{c}]")));
        }
        let p = h * w;
        let xv = &self.value(x).data;
        let gv = &self.value(gamma).data;
        let bv = &self.value(beta).data;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; n * c];
        let mut out = vec![0.0; xv.len()];
        for plane in 0..n * c {
            let ch = plane % c;
            let src = &xv[plane * p..(plane + 1) * p];
            let mean = src.iter().sum::<f64>() / p as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / p as f64;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[plane] = inv;
            for i in 0..p {
                let xh = (src[i] - mean) * inv;
                xhat[plane * p + i] = xh;
                out[plane * p + i] = gv[ch] * xh + bv[ch];
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(value, Op::InstanceNorm { x, gamma, beta, xhat, inv_std }, rg))
    }

    /// Channel-axis concatenation of two `N×C×H×W` tensors.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape(format!(
                "concat: shapes {:?} and {:?} differ outside the channel axis",
                self.value(a).shape,
                self.value(b).shape
            )));
        }
        let (sa, sb) = (ca * h * w, cb * h * w);
        let mut out = Vec::with_capacity(n * (sa + sb));
        for s in 0..n {
            out.extend_from_slice(&self.value(a).data[s * sa..(s + 1) * sa]);
            out.extend_from_slice(&self.value(b).data[s * sb..(s + 1) * sb]);
        }
        let value = Tensor::new(vec![n, ca + cb, h, w], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Concat(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape != self.value(b).shape {
            return Err(Error::shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape,
                self.value(b).shape
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.value(a).shape.clone(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |v| k * v, Op::Scale(a, k))
    }

    /// Mean squared error.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "mse")?;
        let (p, t) = (&self.value(pred).data, &self.value(target).data);
        let v = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        let rg = self.rg(&[pred, target]);
        Ok(self.push(Tensor::scalar(v), Op::Mse(pred, target), rg))
    }

    /// Mean absolute error.
    pub fn l1(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "l1")?;
        let (p, t) = (&self.value(pred).data, &self.value(target).data);
        let v = p.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64;
        let rg = self.rg(&[pred, target]);
        Ok(self.push(Tensor::scalar(v), Op::L1(pred, target), rg))
    }

    /// Mean binary cross-entropy of logits against a constant label.
    pub fn bce_with_logits(&mut self, logits: Var, label: f64) -> Var {
        let x = &self.value(logits).data;
        let v = x
            .iter()
            .map(|&z| z.max(0.0) - z * label + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / x.len() as f64;
        let rg = self.rg(&[logits]);
        self.push(Tensor::scalar(v), Op::BceWithLogits(logits, label), rg)
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape
            )));
        }
        self.backward_with(root, vec![1.0])
    }

    /// Back-propagates an explicit output gradient `seed` from `root`.
    pub fn backward_with(&mut self, root: Var, seed: Vec<f64>) -> Result<()> {
        if seed.len() != self.value(root).numel() {
            return Err(Error::shape("backward seed does not match the root's shape".to_string()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(seed);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let contributions = self.local_backward(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, d) in contributions {
                let node = &mut self.nodes[v.0];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(d),
                }
            }
        }
        Ok(())
    }

    /// Gradients flowing from node `i` (with output gradient `g`) to each of
    /// its inputs that requires one.
    fn local_backward(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d { x, w, b, stride, pad } => {
                let (n, cin, h, wd) = val(x).dims4().unwrap();
                let (cout, _, kh, kw) = val(w).dims4().unwrap();
                let geom = ConvGeom::new(cin, h, wd, kh, kw, stride, pad).unwrap();
                let (ck, p) = (geom.col_rows(), geom.col_cols());
                let xv = &val(x).data;
                let wv = &val(w).data;
                let mut dw = needs(w).then(|| vec![0.0; cout * ck]);
                let mut dx = needs(x).then(|| vec![0.0; xv.len()]);
                let mut col = vec![0.0; ck * p];
                for s in 0..n {
                    let gs = &g[s * cout * p..(s + 1) * cout * p];
                    let xs = &xv[s * cin * h * wd..(s + 1) * cin * h * wd];
                    if let Some(dw) = dw.as_mut() {
                        let lowered: &[f64] = if geom.is_pointwise() {
                            xs
                        } else {
                            im2col(xs, &geom, &mut col);
                            &col
                        };
                        gemm(1.0, MatRef::new(gs, cout, p), MatRef::new(lowered, ck, p).t(), 1.0, dw);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dxs = &mut dx[s * cin * h * wd..(s + 1) * cin * h * wd];
                        if geom.is_pointwise() {
                            gemm(1.0, MatRef::new(wv, cout, ck).t(), MatRef::new(gs, cout, p), 0.0, dxs);
                        } else {
                            gemm(1.0, MatRef::new(wv, cout, ck).t(), MatRef::new(gs, cout, p), 0.0, &mut col);
                            col2im(&col, &geom, dxs);
                        }
                    }
                }
                if let Some(dw) = dw {
                    out.push((w, dw));
                }
                if let Some(dx) = dx {
                    out.push((x, dx));
                }
                if let Some(b) = b.filter(|&b| needs(b)) {
                    out.push((b, channel_sums(g, n, cout, p)));
                }
            }
            &Op::ConvTranspose2d { x, w, b, stride, pad } => {
                let (n, cin, h, wd) = val(x).dims4().unwrap();
                let (_, cout, kh, kw) = val(w).dims4().unwrap();
                let (_, _, oh, ow) = node.value.dims4().unwrap();
                let geom = ConvGeom::new(cout, oh, ow, kh, kw, stride, pad).unwrap();
                let (ck, p) = (geom.col_rows(), geom.col_cols());
                debug_assert_eq!(p, h * wd);
                let plane = oh * ow;
                let xv = &val(x).data;
                let wv = &val(w).data;
                let mut dw = needs(w).then(|| vec![0.0; cin * ck]);
                let mut dx = needs(x).then(|| vec![0.0; xv.len()]);
                let mut col = vec![0.0; ck * p];
                for s in 0..n {
                    im2col(&g[s * cout * plane..(s + 1) * cout * plane], &geom, &mut col);
                    if let Some(dx) = dx.as_mut() {
                        gemm(
                            1.0,
                            MatRef::new(wv, cin, ck),
                            MatRef::new(&col, ck, p),
                            0.0,
                            &mut dx[s * cin * p..(s + 1) * cin * p],
                        );
                    }
                    if let Some(dw) = dw.as_mut() {
                        gemm(
                            1.0,
                            MatRef::new(&xv[s * cin * p..(s + 1) * cin * p], cin, p),
                            MatRef::new(&col, ck, p).t(),
                            1.0,
                            dw,
                        );
                    }
                }
                if let Some(dw) = dw {
                    out.push((w, dw));
                }
                if let Some(dx) = dx {
                    out.push((x, dx));
                }
                if let Some(b) = b.filter(|&b| needs(b)) {
                    out.push((b, channel_sums(g, n, cout, plane)));
                }
            }
            &Op::Relu(x) => {
                let d = val(x).data.iter().zip(g).map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 }).collect();
                out.push((x, d));
            }
            &Op::LeakyRelu(x, slope) => {
                let d = val(x)
                    .data
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { slope * gv })
                    .collect();
                out.push((x, d));
            }
            &Op::Sigmoid(x) => {
                let d = node.value.data.iter().zip(g).map(|(&s, &gv)| gv * s * (1.0 - s)).collect();
                out.push((x, d));
            }
            &Op::Tanh(x) => {
                let d = node.value.data.iter().zip(g).map(|(&t, &gv)| gv * (1.0 - t * t)).collect();
                out.push((x, d));
            }
            Op::MaxPool2(x, arg) => {
                let mut d = vec![0.0; val(*x).numel()];
                for (&src, &gv) in arg.iter().zip(g) {
                    d[src] += gv;
                }
                out.push((*x, d));
            }
            Op::InstanceNorm { x, gamma, beta, xhat, inv_std } => {
                let (n, c, h, w) = val(*x).dims4().unwrap();
                let p = h * w;
                let gv = &val(*gamma).data;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = needs(*x).then(|| vec![0.0; n * c * p]);
                for plane in 0..n * c {
                    let ch = plane % c;
                    let gs = &g[plane * p..(plane + 1) * p];
                    let xh = &xhat[plane * p..(plane + 1) * p];
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for (a, b) in gs.iter().zip(xh) {
                        sum_g += a;
                        sum_gx += a * b;
                    }
                    dgamma[ch] += sum_gx;
                    dbeta[ch] += sum_g;
                    if let Some(dx) = dx.as_mut() {
                        // with dxhat = g·gamma:
                        // dx = inv_std / P · (P·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
                        let k = gv[ch] * inv_std[plane] / p as f64;
                        let pf = p as f64;
                        for i in 0..p {
                            dx[plane * p + i] = k * (pf * gs[i] - sum_g - xh[i] * sum_gx);
                        }
                    }
                }
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if needs(*gamma) {
                    out.push((*gamma, dgamma));
                }
                if needs(*beta) {
                    out.push((*beta, dbeta));
                }
            }
            &Op::Concat(a, b) => {
                let (n, ca, h, w) = val(a).dims4().unwrap();
                let cb = val(b).dims4().unwrap().1;
                let (sa, sb) = (ca * h * w, cb * h * w);
                if needs(a) {
                    let d = (0..n).flat_map(|s| g[s * (sa + sb)..s * (sa + sb) + sa].iter().copied()).collect();
                    out.push((a, d));
                }
                if needs(b) {
                    let d = (0..n)
                        .flat_map(|s| g[s * (sa + sb) + sa..(s + 1) * (sa + sb)].iter().copied())
                        .collect();
                    out.push((b, d));
                }
            }
            &Op::Add(a, b) => {
                if needs(a) {
                    out.push((a, g.to_vec()));
                }
                if needs(b) {
                    out.push((b, g.to_vec()));
                }
            }
            &Op::Scale(a, k) => out.push((a, g.iter().map(|v| v * k).collect())),
            &Op::Mse(pred, target) => {
                let (p, t) = (&val(pred).data, &val(target).data);
                let k = 2.0 * g[0] / p.len() as f64;
                let d: Vec<f64> = p.iter().zip(t).map(|(a, b)| k * (a - b)).collect();
                if needs(target) {
                    out.push((target, d.iter().map(|v| -v).collect()));
                }
                if needs(pred) {
                    out.push((pred, d));
                }
            }
            &Op::L1(pred, target) => {
                let (p, t) = (&val(pred).data, &val(target).data);
                let k = g[0] / p.len() as f64;
                let d: Vec<f64> = p
                    .iter()
                    .zip(t)
                    .map(|(a, b)| match a.partial_cmp(b) {
                        Some(std::cmp::Ordering::Greater) => k,
                        Some(std::cmp::Ordering::Less) => -k,
                        _ => 0.0,
                    })
                    .collect();
                if needs(target) {
                    out.push((target, d.iter().map(|v| -v).collect()));
                }
                if needs(pred) {
                    out.push((pred, d));
                }
            }
            &Op::BceWithLogits(x, label) => {
                let xv = &val(x).data;
                let k = g[0] / xv.len() as f64;
                out.push((x, xv.iter().map(|&z| k * (sigmoid(z) - label)).collect()));
            }
        }
        out
    }
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], n: usize, c: usize, plane: usize) {
    for s in 0..n {
        for (ch, &bv) in bias.iter().enumerate().take(c) {
            let start = (s * c + ch) * plane;
            out[start..start + plane].iter_mut().for_each(|v| *v += bv);
        }
    }
}

fn channel_sums(g: &[f64], n: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for s in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            let start = (s * c + ch) * plane;
            *o += g[start..start + plane].iter().sum::<f64>();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn conv_ones() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let w = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y).shape, vec![1, 1, 1, 1]);
        assert_eq!(g.value(y).data, vec![4.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..18).map(|v| v as f64 * 0.5 - 3.0).collect();
        let x = g.constant(t(&[2, 1, 3, 3], data.clone()));
        let w = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y).data, data);
    }

    #[test]
    fn conv_transpose_scales_kernel() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 1, 1], 3.0));
        let w = g.constant(t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let y = g.conv_transpose2d(x, w, None, 2, 0).unwrap();
        assert_eq!(g.value(y).shape, vec![1, 1, 2, 2]);
        assert_eq!(g.value(y).data, vec![3.0, 6.0, 9.0, 12.0]);

        let z = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
        let y = g.conv_transpose2d(z, w, None, 2, 0).unwrap();
        assert!(g.value(y).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn activation_values() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], vec![0.0, -1.0, 2.0]));
        let s = g.sigmoid(x);
        let l = g.leaky_relu(x, 0.2);
        let r = g.relu(x);
        assert_eq!(g.value(s).data[0], 0.5);
        assert_eq!(g.value(l).data, vec![0.0, -0.2, 2.0]);
        assert_eq!(g.value(r).data, vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn loss_values() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], vec![0.0, 2.0]));
        let b = g.constant(t(&[2], vec![1.0, 0.0]));
        let l1 = g.l1(a, b).unwrap();
        assert_eq!(g.value(l1).item(), 1.5);
        let m = g.mse(a, a).unwrap();
        assert_eq!(g.value(m).item(), 0.0);
        let z = g.constant(Tensor::scalar(0.0));
        let bce = g.bce_with_logits(z, 1.0);
        assert!((g.value(bce).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn instance_norm_constant_plane_gives_shift() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 2, 3, 3], 0.7));
        let gamma = g.constant(t(&[2], vec![1.5, -2.0]));
        let beta = g.constant(t(&[2], vec![0.25, -0.5]));
        let y = g.instance_norm(x, gamma, beta).unwrap();
        for (i, v) in g.value(y).data.iter().enumerate() {
            let expect = if i < 9 { 0.25 } else { -0.5 };
            assert!((v - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]).with_requires_grad(true));
        let y = g.relu(x);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn gradient_accumulates_over_reuse() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1], vec![3.0]).with_requires_grad(true));
        let y = g.add(x, x).unwrap();
        let s = g.scale(y, 2.0);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0]);
    }

    #[test]
    fn non_finite_values_are_flagged() {
        let mut g = Graph::new();
        g.set_check_finite(true);
        let x = g.constant(t(&[1], vec![f64::INFINITY]));
        let _ = g.scale(x, 0.0);
        assert_eq!(g.first_non_finite(), Some("leaf"));
    }
}
