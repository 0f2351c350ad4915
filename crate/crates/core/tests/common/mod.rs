//! Shared oracles for the integration suites.

#![allow(dead_code)]

use msihist::imagereg::AffineTransform;
use msihist::nn::{Graph, Tensor, Var};
use msihist::spectra::{MzAxis, Peak};
use msihist::{Image, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;

/// Absolute floor of the relative-error denominator, so that gradients that
/// are zero up to round-off do not produce spurious large ratios.
pub const REL_FLOOR: f64 = 1e-4;

pub type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct GradCase {
    pub name: String,
    pub inputs: Vec<Tensor>,
    pub build: Build,
    /// Convolutions, linear ops and activations are held to the tighter bound.
    pub strict: bool,
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values whose magnitude is at least `gap`, so ±ε never crosses a kink at 0.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(gap..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn eval(case: &GradCase, inputs: &[Tensor], r: &[f64]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone().with_requires_grad(true))).collect();
    let out = (case.build)(&mut g, &vars).unwrap();
    g.value(out).data.iter().zip(r).map(|(a, b)| a * b).sum()
}

/// Maximum relative error between reverse-mode gradients of `⟨op(x), r⟩`
/// and central differences, over every coordinate of every input.
pub fn max_grad_error(case: &GradCase, rng: &mut ChaCha8Rng) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = case
        .inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = (case.build)(&mut g, &vars).unwrap();
    let r: Vec<f64> = (0..g.value(out).numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    g.backward_with(out, r.clone()).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&case.inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    let mut worst = 0.0f64;
    for (i, t) in case.inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut plus = case.inputs.clone();
            plus[i].data[j] += FD_EPS;
            let mut minus = case.inputs.clone();
            minus[i].data[j] -= FD_EPS;
            let numeric = (eval(case, &plus, &r) - eval(case, &minus, &r)) / (2.0 * FD_EPS);
            worst = worst.max(rel_err(analytic[i][j], numeric));
        }
    }
    worst
}

/// Redraws until no 2×2 pooling window holds two values closer than `gap`.
pub fn poolable(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    loop {
        let t = random_tensor(rng, shape, -1.0, 1.0);
        let ok = (0..n * c).all(|plane| {
            (0..h / 2).all(|oy| {
                (0..w / 2).all(|ox| {
                    let mut v: Vec<f64> = (0..4)
                        .map(|k| t.data[plane * h * w + (2 * oy + k / 2) * w + 2 * ox + k % 2])
                        .collect();
                    v.sort_by(f64::total_cmp);
                    v.windows(2).all(|p| p[1] - p[0] > gap)
                })
            })
        });
        if ok {
            return t;
        }
    }
}

/// The `i`-th random gradient case; cycles through every differentiable op.
pub fn grad_case(i: usize, rng: &mut ChaCha8Rng) -> GradCase {
    let n = rng.random_range(1..=2);
    let c = rng.random_range(1..=3);
    let h = rng.random_range(2..=5);
    let w = rng.random_range(2..=5);
    let shape = [n, c, h, w];
    match i % 15 {
        0 | 1 => {
            let cout = rng.random_range(1..=3);
            let k = rng.random_range(1..=3usize);
            let stride = rng.random_range(1..=2);
            let pad = rng.random_range(0..k);
            let (h, w) = (h.max(k), w.max(k));
            let with_bias = rng.random_bool(0.5);
            let mut inputs = vec![
                random_tensor(rng, &[n, c, h, w], -1.0, 1.0),
                random_tensor(rng, &[cout, c, k, k], -1.0, 1.0),
            ];
            if with_bias {
                inputs.push(random_tensor(rng, &[cout], -1.0, 1.0));
            }
            GradCase {
                name: format!("conv2d k{k} s{stride} p{pad} {:?}", [n, c, h, w]),
                inputs,
                build: Box::new(move |g, v| g.conv2d(v[0], v[1], v.get(2).copied(), stride, pad)),
                strict: true,
            }
        }
        2 | 3 => {
            let cout = rng.random_range(1..=3);
            let k = rng.random_range(1..=4usize);
            let stride = rng.random_range(1..=2);
            let pad = rng.random_range(0..=(k - 1) / 2);
            let with_bias = rng.random_bool(0.5);
            let mut inputs = vec![
                random_tensor(rng, &shape, -1.0, 1.0),
                random_tensor(rng, &[c, cout, k, k], -1.0, 1.0),
            ];
            if with_bias {
                inputs.push(random_tensor(rng, &[cout], -1.0, 1.0));
            }
            GradCase {
                name: format!("conv_transpose2d k{k} s{stride} p{pad} {shape:?}"),
                inputs,
                build: Box::new(move |g, v| g.conv_transpose2d(v[0], v[1], v.get(2).copied(), stride, pad)),
                strict: true,
            }
        }
        4 => GradCase {
            name: format!("relu {shape:?}"),
            inputs: vec![away_from_zero(rng, &shape, 1e-3)],
            build: Box::new(|g, v| Ok(g.relu(v[0]))),
            strict: true,
        },
        5 => {
            let slope = rng.random_range(0.01..0.5);
            GradCase {
                name: format!("leaky_relu({slope:.3}) {shape:?}"),
                inputs: vec![away_from_zero(rng, &shape, 1e-3)],
                build: Box::new(move |g, v| Ok(g.leaky_relu(v[0], slope))),
                strict: true,
            }
        }
        6 => GradCase {
            name: format!("sigmoid {shape:?}"),
            inputs: vec![random_tensor(rng, &shape, -3.0, 3.0)],
            build: Box::new(|g, v| Ok(g.sigmoid(v[0]))),
            strict: true,
        },
        7 => GradCase {
            name: format!("tanh {shape:?}"),
            inputs: vec![random_tensor(rng, &shape, -2.0, 2.0)],
            build: Box::new(|g, v| Ok(g.tanh(v[0]))),
            strict: true,
        },
        8 => {
            let s = [n, c, 2 * h, 2 * w];
            GradCase {
                name: format!("max_pool2d {s:?}"),
                inputs: vec![poolable(rng, &s, 1e-3)],
                build: Box::new(|g, v| g.max_pool2d(v[0])),
                strict: true,
            }
        }
        9 => GradCase {
            name: format!("instance_norm {shape:?}"),
            inputs: vec![
                random_tensor(rng, &shape, -1.0, 1.0),
                random_tensor(rng, &[c], 0.5, 1.5),
                random_tensor(rng, &[c], -0.5, 0.5),
            ],
            build: Box::new(|g, v| g.instance_norm(v[0], v[1], v[2])),
            strict: false,
        },
        10 => {
            let cb = rng.random_range(1..=3);
            GradCase {
                name: format!("concat_channels {shape:?}+{cb}"),
                inputs: vec![
                    random_tensor(rng, &shape, -1.0, 1.0),
                    random_tensor(rng, &[n, cb, h, w], -1.0, 1.0),
                ],
                build: Box::new(|g, v| g.concat_channels(v[0], v[1])),
                strict: true,
            }
        }
        11 => {
            let k = rng.random_range(-2.0..2.0);
            GradCase {
                name: format!("add+scale({k:.3}) {shape:?}"),
                inputs: vec![random_tensor(rng, &shape, -1.0, 1.0), random_tensor(rng, &shape, -1.0, 1.0)],
                build: Box::new(move |g, v| {
                    let s = g.scale(v[1], k);
                    g.add(v[0], s)
                }),
                strict: true,
            }
        }
        12 => GradCase {
            name: format!("mse {shape:?}"),
            inputs: vec![random_tensor(rng, &shape, -1.0, 1.0), random_tensor(rng, &shape, -1.0, 1.0)],
            build: Box::new(|g, v| g.mse(v[0], v[1])),
            strict: false,
        },
        13 => {
            let target = random_tensor(rng, &shape, -1.0, 1.0);
            let offset = away_from_zero(rng, &shape, 1e-3);
            let pred = Tensor::new(
                shape.to_vec(),
                target.data.iter().zip(&offset.data).map(|(t, o)| t + o).collect(),
            )
            .unwrap();
            GradCase {
                name: format!("l1 {shape:?}"),
                inputs: vec![pred, target],
                build: Box::new(|g, v| g.l1(v[0], v[1])),
                strict: true,
            }
        }
        _ => {
            let label = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
            GradCase {
                name: format!("bce_with_logits(label {label}) {shape:?}"),
                inputs: vec![random_tensor(rng, &shape, -4.0, 4.0)],
                build: Box::new(move |g, v| Ok(g.bce_with_logits(v[0], label))),
                strict: false,
            }
        }
    }
}

/// Tolerance per op class: 1e-6 for conv / linear / activations, 1e-5 for
/// the rest.
pub fn grad_tolerance(case: &GradCase) -> f64 {
    if case.strict {
        1e-6
    } else {
        1e-5
    }
}

/// Plain nested-loop convolution, the oracle for the im2col path.
pub fn naive_conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, wd) = x.dims4().unwrap();
    let (co, _, kh, kw) = w.dims4().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * co * oh * ow];
    for s in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xo * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.data[((s * c + ci) * h + iy as usize) * wd + ix as usize]
                                        * w.data[((o * c + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                    out[((s * co + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, co, oh, ow], out).unwrap()
}

/// Relative gap in ⟨conv(x), y⟩ = ⟨x, convᵀ(y)⟩ for a random geometry whose
/// input side is exactly the transpose's output side.
pub fn adjoint_gap(rng: &mut ChaCha8Rng) -> f64 {
    let (k, stride, pad, h, w) = loop {
        let k = rng.random_range(1..=4usize);
        let stride = rng.random_range(1..=3);
        let pad = rng.random_range(0..k);
        let side = |o: usize| ((o - 1) * stride + k).checked_sub(2 * pad).filter(|&s| s >= 1);
        if let (Some(h), Some(w)) = (side(rng.random_range(1..=5)), side(rng.random_range(1..=5))) {
            break (k, stride, pad, h, w);
        }
    };
    let (cin, cout) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let n = rng.random_range(1..=2);
    let x = random_tensor(rng, &[n, cin, h, w], -1.0, 1.0);
    let wt = random_tensor(rng, &[cout, cin, k, k], -1.0, 1.0);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(wt.clone()));
    let cx = g.conv2d(xv, wv, None, stride, pad).unwrap();
    let y = random_tensor(rng, &g.value(cx).shape.clone(), -1.0, 1.0);
    let lhs = g.value(cx).dot(&y);
    // A `Cout×Cin×k×k` conv weight is the `Cin'×Cout'×k×k` weight of the
    // transpose mapping back.
    let yv = g.constant(y);
    let ty = g.conv_transpose2d(yv, wv, None, stride, pad).unwrap();
    let rhs = x.dot(g.value(ty));
    (lhs - rhs).abs() / lhs.abs().max(1.0)
}

/// Strictly increasing axis with irregular spacing.
pub fn random_axis(rng: &mut ChaCha8Rng, len: usize, start: f64) -> MzAxis {
    let mut v = Vec::with_capacity(len);
    let mut x = start;
    for _ in 0..len {
        v.push(x);
        x += rng.random_range(0.05..2.0);
    }
    MzAxis::new(v).unwrap()
}

/// Brute-force linear interpolation: scan every source segment for the one
/// containing `t`.
pub fn oracle_interpolate(source: &[f64], values: &[f32], t: f64) -> f64 {
    for i in 0..source.len() {
        if source[i] == t {
            return values[i] as f64;
        }
    }
    for i in 0..source.len() - 1 {
        let (x0, x1) = (source[i], source[i + 1]);
        if x0 < t && t < x1 {
            let (y0, y1) = (values[i] as f64, values[i + 1] as f64);
            return y0 + (y1 - y0) * (t - x0) / (x1 - x0);
        }
    }
    0.0
}

/// Enumerates maxima plateau by plateau, sorts them, then suppresses.
pub fn oracle_pick_peaks(mz: &[f64], y: &[f32], k: usize, min_separation: f64) -> Vec<Peak> {
    let n = y.len();
    let mut candidates = Vec::new();
    for l in 1..n {
        if y[l - 1] == y[l] {
            continue;
        }
        let mut r = l;
        while r + 1 < n && y[r + 1] == y[l] {
            r += 1;
        }
        if r + 1 < n && y[l - 1] < y[l] && y[r + 1] < y[l] {
            candidates.push(l);
        }
    }
    candidates.sort_by(|&a, &b| y[b].total_cmp(&y[a]).then(mz[a].total_cmp(&mz[b])));
    let mut out: Vec<Peak> = Vec::new();
    for i in candidates {
        if out.len() < k && out.iter().all(|p| (p.mz - mz[i]).abs() > min_separation) {
            out.push(Peak {
                mz: mz[i],
                intensity: y[i] as f64,
            });
        }
    }
    out
}

/// Spectrum drawn from a small value set so that ties and plateaus occur.
pub fn random_spectrum(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
    let levels = rng.random_range(2..8);
    (0..len).map(|_| rng.random_range(0..levels) as f32 * 0.5).collect()
}

/// Invertible affine with a determinant bounded away from zero.
pub fn random_affine(rng: &mut ChaCha8Rng) -> AffineTransform {
    loop {
        let t = AffineTransform {
            a: rng.random_range(-2.0..2.0),
            b: rng.random_range(-2.0..2.0),
            c: rng.random_range(-2.0..2.0),
            d: rng.random_range(-2.0..2.0),
            tx: rng.random_range(-50.0..50.0),
            ty: rng.random_range(-50.0..50.0),
        };
        if t.determinant().abs() > 0.1 {
            return t;
        }
    }
}

/// Small rotation/scale/shift about the centre of a `side`-pixel image.
pub fn mild_affine(rng: &mut ChaCha8Rng, side: usize) -> AffineTransform {
    let th = rng.random_range(-0.1..0.1f64);
    let s = rng.random_range(0.95..1.05);
    let (a, b, c, d) = (s * th.cos(), -s * th.sin(), s * th.sin(), s * th.cos());
    let m = (side as f64 - 1.0) / 2.0;
    AffineTransform {
        a,
        b,
        c,
        d,
        tx: m - a * m - b * m + rng.random_range(-1.5..1.5),
        ty: m - c * m - d * m + rng.random_range(-1.5..1.5),
    }
}

/// Low-frequency sinusoidal image in [0, 1].
pub fn smooth_image(rng: &mut ChaCha8Rng, w: usize, h: usize, channels: usize) -> Image {
    let params: Vec<[f64; 4]> = (0..channels)
        .map(|_| {
            [
                rng.random_range(0.02..0.12),
                rng.random_range(0.02..0.12),
                rng.random_range(0.0..6.3),
                rng.random_range(0.0..6.3),
            ]
        })
        .collect();
    let mut img = Image::filled(w, h, channels, 0.0);
    for y in 0..h {
        for x in 0..w {
            for (c, p) in params.iter().enumerate() {
                let v = 0.5 + 0.25 * ((x as f64 * p[0] + p[2]).sin() + (y as f64 * p[1] + p[3]).cos());
                img.set(x, y, c, v);
            }
        }
    }
    img
}

pub fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize, channels: usize) -> Image {
    Image::new(w, h, channels, (0..w * h * channels).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

pub fn mean_abs_diff(a: &Image, b: &Image, keep: impl Fn(usize, usize) -> bool) -> f64 {
    let (mut total, mut n) = (0.0, 0usize);
    for y in 0..a.height {
        for x in 0..a.width {
            if keep(x, y) {
                for c in 0..a.channels {
                    total += (a.get(x, y, c) - b.get(x, y, c)).abs();
                    n += 1;
                }
            }
        }
    }
    total / n as f64
}

/// Generates `n` synthetic samples of side `size` under `root/data` and
/// returns a fast config writing to `root/out`.
pub fn small_run(root: &std::path::Path, n: usize, size: usize) -> msihist::pipeline::RunConfig {
    use msihist::pipeline::{generate_synthetic_dataset, RunConfig};
    let data = root.join("data");
    if !data.join("samples.csv").exists() {
        generate_synthetic_dataset(&data, n, 3, size).unwrap();
    }
    let mut cfg = RunConfig::default();
    cfg.paths.samples = data.join("samples.csv");
    cfg.output_dir = root.join("out");
    cfg.preprocess.image_size = size;
    cfg.preprocess.k_peaks = 12;
    cfg.unet.patch = size / 2;
    cfg.unet.stride = size / 2;
    cfg.unet.max_steps = 6;
    cfg.unet.eval_every = 2;
    cfg.pix2pix.max_steps = 6;
    cfg.pix2pix.eval_every = 2;
    cfg
}

/// Every file under `dir`, as (relative path, bytes), sorted.
pub fn tree(dir: &std::path::Path) -> Vec<(std::path::PathBuf, Vec<u8>)> {
    fn walk(base: &std::path::Path, dir: &std::path::Path, out: &mut Vec<(std::path::PathBuf, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                out.push((p.strip_prefix(base).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}
