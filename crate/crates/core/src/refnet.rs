//! A small reference detector/descriptor network trained with the tracking
//! objective, plus inference utilities: score thresholding, greedy NMS and
//! descriptor sampling.
//!
//! The backbone is a four-block convolutional encoder (3x3 convolutions,
//! tanh, 2x2 average pooling after the first three blocks, so the output
//! stride is 8), followed by two 1x1 heads: 65 detection logits per cell and
//! a 256-channel descriptor field. Capacity is deliberately far below the
//! full VGG-style original so CPU training finishes in minutes; the loss is
//! the interesting part, not the backbone.
//!
//! Everything runs in f64 and is deterministic for fixed weights and inputs.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::loss::{self, LossParams};
use crate::supervision::TrainingSample;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("input must be square with side divisible by 8, got {0}x{1}")]
    BadInputShape(usize, usize),
    #[error("training diverged: loss became non-finite at step {0}")]
    Diverged(usize),
    #[error(transparent)]
    Loss(#[from] loss::LossError),
    #[error("checkpoint io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

/// One convolution layer: weights (out, in, kh, kw) and per-channel bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
}

impl Conv {
    fn init(rng: &mut ChaCha8Rng, out_c: usize, in_c: usize, k: usize) -> Conv {
        let bound = 1.0 / ((in_c * k * k) as f64).sqrt();
        Conv {
            weight: Array4::from_shape_fn((out_c, in_c, k, k), |_| rng.gen_range(-bound..bound)),
            bias: Array1::zeros(out_c),
        }
    }

    fn zeros_like(&self) -> Conv {
        Conv {
            weight: Array4::zeros(self.weight.dim()),
            bias: Array1::zeros(self.bias.len()),
        }
    }

    fn axpy(&mut self, alpha: f64, other: &Conv) {
        self.weight.zip_mut_with(&other.weight, |a, &b| *a += alpha * b);
        self.bias.zip_mut_with(&other.bias, |a, &b| *a += alpha * b);
    }
}

/// All network parameters. `NetWeights::zeros_like` / `axpy` make the same
/// struct double as a gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct NetWeights {
    pub blocks: Vec<Conv>,
    pub det_head: Conv,
    pub desc_head: Conv,
}

impl NetWeights {
    /// The standard configuration: channels 8-16-32-64, 256-d descriptors.
    pub fn init(seed: u64) -> NetWeights {
        Self::with_dims(&[8, 16, 32, 64], 256, seed)
    }

    /// Arbitrary channel widths, for reduced-capacity test nets.
    pub fn with_dims(channels: &[usize; 4], desc_dim: usize, seed: u64) -> NetWeights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::with_capacity(4);
        let mut in_c = 1;
        for &out_c in channels {
            blocks.push(Conv::init(&mut rng, out_c, in_c, 3));
            in_c = out_c;
        }
        NetWeights {
            blocks,
            det_head: Conv::init(&mut rng, 65, in_c, 1),
            desc_head: Conv::init(&mut rng, desc_dim, in_c, 1),
        }
    }

    pub fn zeros_like(&self) -> NetWeights {
        NetWeights {
            blocks: self.blocks.iter().map(Conv::zeros_like).collect(),
            det_head: self.det_head.zeros_like(),
            desc_head: self.desc_head.zeros_like(),
        }
    }

    pub fn axpy(&mut self, alpha: f64, other: &NetWeights) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            a.axpy(alpha, b);
        }
        self.det_head.axpy(alpha, &other.det_head);
        self.desc_head.axpy(alpha, &other.desc_head);
    }

    fn conv_iter(&self) -> impl Iterator<Item = (&'static str, &Conv)> {
        let names = ["block0", "block1", "block2", "block3"];
        self.blocks
            .iter()
            .enumerate()
            .map(move |(i, c)| (names[i], c))
            .chain([("det_head", &self.det_head), ("desc_head", &self.desc_head)])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    /// Integer-pixel location on the full input grid.
    pub xy: [f64; 2],
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub loss: LossParams,
    /// Write a checkpoint every this many steps (0 = never) into
    /// `checkpoint_dir`.
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<std::path::PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            steps: 0,
            loss: LossParams::default(),
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

// ---------------------------------------------------------------------------
// conv primitives

/// 3x3 convolution, stride 1, zero padding 1. Parallel over output channels.
fn conv3x3(input: &Array3<f64>, conv: &Conv) -> Array3<f64> {
    let (in_c, h, w) = input.dim();
    let out_c = conv.weight.dim().0;
    let mut out = Array3::zeros((out_c, h, w));
    let in_slice = input.as_slice().unwrap();
    out.outer_iter_mut()
        .into_iter()
        .enumerate()
        .collect::<Vec<_>>()
        .into_par_iter()
        .for_each(|(o, mut plane)| {
            let plane = plane.as_slice_mut().unwrap();
            plane.fill(conv.bias[o]);
            for c in 0..in_c {
                let src = &in_slice[c * h * w..(c + 1) * h * w];
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let wv = conv.weight[[o, c, ky, kx]];
                        if wv == 0.0 {
                            continue;
                        }
                        let dy = ky as isize - 1;
                        let dx = kx as isize - 1;
                        for y in 0..h as isize {
                            let sy = y + dy;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let x0 = (-dx).max(0) as usize;
                            let x1 = (w as isize - dx.max(0)) as usize;
                            let dst = &mut plane[y as usize * w + x0..y as usize * w + x1];
                            let s0 = (x0 as isize + dx) as usize;
                            let srow = &src[sy as usize * w + s0..sy as usize * w + s0 + (x1 - x0)];
                            for (d, s) in dst.iter_mut().zip(srow) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        });
    out
}

/// Backward pass of [`conv3x3`]: gradients for input, weights and bias.
fn conv3x3_backward(
    input: &Array3<f64>,
    conv: &Conv,
    grad_out: &Array3<f64>,
) -> (Array3<f64>, Conv) {
    let (in_c, h, w) = input.dim();
    let out_c = conv.weight.dim().0;
    let mut grad = conv.zeros_like();
    let in_slice = input.as_slice().unwrap();
    let go_slice = grad_out.as_slice().unwrap();

    // weight and bias gradients, parallel over output channels
    let per_out: Vec<(Vec<f64>, f64)> = (0..out_c)
        .into_par_iter()
        .map(|o| {
            let go = &go_slice[o * h * w..(o + 1) * h * w];
            let gb: f64 = go.iter().sum();
            let mut gw = vec![0.0; in_c * 9];
            for c in 0..in_c {
                let src = &in_slice[c * h * w..(c + 1) * h * w];
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let dy = ky as isize - 1;
                        let dx = kx as isize - 1;
                        let mut acc = 0.0;
                        for y in 0..h as isize {
                            let sy = y + dy;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let x0 = (-dx).max(0) as usize;
                            let x1 = (w as isize - dx.max(0)) as usize;
                            let gorow = &go[y as usize * w + x0..y as usize * w + x1];
                            let s0 = (x0 as isize + dx) as usize;
                            let srow = &src[sy as usize * w + s0..sy as usize * w + s0 + (x1 - x0)];
                            for (g, s) in gorow.iter().zip(srow) {
                                acc += g * s;
                            }
                        }
                        gw[c * 9 + ky * 3 + kx] = acc;
                    }
                }
            }
            (gw, gb)
        })
        .collect();
    for (o, (gw, gb)) in per_out.into_iter().enumerate() {
        grad.bias[o] = gb;
        for c in 0..in_c {
            for ky in 0..3 {
                for kx in 0..3 {
                    grad.weight[[o, c, ky, kx]] = gw[c * 9 + ky * 3 + kx];
                }
            }
        }
    }

    // input gradient: full correlation with flipped kernels, parallel over
    // input channels
    let mut grad_in = Array3::zeros((in_c, h, w));
    grad_in
        .outer_iter_mut()
        .into_iter()
        .enumerate()
        .collect::<Vec<_>>()
        .into_par_iter()
        .for_each(|(c, mut plane)| {
            let plane = plane.as_slice_mut().unwrap();
            for o in 0..out_c {
                let go = &go_slice[o * h * w..(o + 1) * h * w];
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let wv = conv.weight[[o, c, ky, kx]];
                        if wv == 0.0 {
                            continue;
                        }
                        // output pixel y reads input y + dy, so input s
                        // receives from output s - dy
                        let dy = ky as isize - 1;
                        let dx = kx as isize - 1;
                        for s_y in 0..h as isize {
                            let y = s_y - dy;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            let sx0 = dx.max(0) as usize;
                            let sx1 = (w as isize + dx.min(0)) as usize;
                            let dst = &mut plane[s_y as usize * w + sx0..s_y as usize * w + sx1];
                            let g0 = (sx0 as isize - dx) as usize;
                            let grow = &go[y as usize * w + g0..y as usize * w + g0 + (sx1 - sx0)];
                            for (d, g) in dst.iter_mut().zip(grow) {
                                *d += wv * g;
                            }
                        }
                    }
                }
            }
        });
    (grad_in, grad)
}

/// 1x1 convolution.
fn conv1x1(input: &Array3<f64>, conv: &Conv) -> Array3<f64> {
    let (in_c, h, w) = input.dim();
    let out_c = conv.weight.dim().0;
    let in_slice = input.as_slice().unwrap();
    let mut out = Array3::zeros((out_c, h, w));
    out.outer_iter_mut()
        .into_iter()
        .enumerate()
        .collect::<Vec<_>>()
        .into_par_iter()
        .for_each(|(o, mut plane)| {
            let plane = plane.as_slice_mut().unwrap();
            plane.fill(conv.bias[o]);
            for c in 0..in_c {
                let wv = conv.weight[[o, c, 0, 0]];
                let src = &in_slice[c * h * w..(c + 1) * h * w];
                for (d, s) in plane.iter_mut().zip(src) {
                    *d += wv * s;
                }
            }
        });
    out
}

fn conv1x1_backward(
    input: &Array3<f64>,
    conv: &Conv,
    grad_out: &Array3<f64>,
) -> (Array3<f64>, Conv) {
    let (in_c, h, w) = input.dim();
    let out_c = conv.weight.dim().0;
    let in_slice = input.as_slice().unwrap();
    let go_slice = grad_out.as_slice().unwrap();
    let mut grad = conv.zeros_like();
    for o in 0..out_c {
        let go = &go_slice[o * h * w..(o + 1) * h * w];
        grad.bias[o] = go.iter().sum();
        for c in 0..in_c {
            let src = &in_slice[c * h * w..(c + 1) * h * w];
            grad.weight[[o, c, 0, 0]] = go.iter().zip(src).map(|(g, s)| g * s).sum();
        }
    }
    let mut grad_in = Array3::zeros((in_c, h, w));
    grad_in
        .outer_iter_mut()
        .into_iter()
        .enumerate()
        .collect::<Vec<_>>()
        .into_par_iter()
        .for_each(|(c, mut plane)| {
            let plane = plane.as_slice_mut().unwrap();
            for o in 0..out_c {
                let wv = conv.weight[[o, c, 0, 0]];
                let go = &go_slice[o * h * w..(o + 1) * h * w];
                for (d, g) in plane.iter_mut().zip(go) {
                    *d += wv * g;
                }
            }
        });
    (grad_in, grad)
}

fn tanh_forward(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(f64::tanh)
}

fn tanh_backward(activated: &Array3<f64>, grad_out: &Array3<f64>) -> Array3<f64> {
    let mut g = grad_out.clone();
    g.zip_mut_with(activated, |gv, &a| *gv *= 1.0 - a * a);
    g
}

fn avgpool2(input: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = input.dim();
    let mut out = Array3::zeros((c, h / 2, w / 2));
    for ch in 0..c {
        for y in 0..h / 2 {
            for x in 0..w / 2 {
                out[[ch, y, x]] = 0.25
                    * (input[[ch, 2 * y, 2 * x]]
                        + input[[ch, 2 * y, 2 * x + 1]]
                        + input[[ch, 2 * y + 1, 2 * x]]
                        + input[[ch, 2 * y + 1, 2 * x + 1]]);
            }
        }
    }
    out
}

fn avgpool2_backward(grad_out: &Array3<f64>, in_h: usize, in_w: usize) -> Array3<f64> {
    let (c, oh, ow) = grad_out.dim();
    let mut g = Array3::zeros((c, in_h, in_w));
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let v = 0.25 * grad_out[[ch, y, x]];
                g[[ch, 2 * y, 2 * x]] = v;
                g[[ch, 2 * y, 2 * x + 1]] = v;
                g[[ch, 2 * y + 1, 2 * x]] = v;
                g[[ch, 2 * y + 1, 2 * x + 1]] = v;
            }
        }
    }
    g
}

// ---------------------------------------------------------------------------
// forward / backward

struct Activations {
    /// Input as (1, H, W).
    input: Array3<f64>,
    /// Per block: (post-tanh activation, pooled output or the activation
    /// itself for the unpooled last block).
    blocks: Vec<(Array3<f64>, Array3<f64>)>,
}

fn forward_encoder(w: &NetWeights, image: &Array2<f64>) -> Result<(Array3<f64>, Activations), NetError> {
    let (h, wd) = image.dim();
    if h != wd || h % 8 != 0 || h == 0 {
        return Err(NetError::BadInputShape(h, wd));
    }
    let input = image
        .clone()
        .into_shape_with_order((1, h, wd))
        .expect("reshape");
    let mut acts = Activations { input: input.clone(), blocks: Vec::with_capacity(4) };
    let mut cur = input;
    for (i, block) in w.blocks.iter().enumerate() {
        let z = conv3x3(&cur, block);
        let a = tanh_forward(&z);
        let p = if i < 3 { avgpool2(&a) } else { a.clone() };
        acts.blocks.push((a, p.clone()));
        cur = p;
    }
    Ok((cur, acts))
}

/// Full forward pass: detection logits (65, Hc, Wc), raw descriptor field
/// (Hc, Wc, desc_dim) and the full-resolution score map obtained by per-cell
/// softmax (dustbin dropped, 64 positions scattered back to 8x8 pixels).
pub fn forward(
    w: &NetWeights,
    image: &Array2<f64>,
) -> Result<(Array3<f64>, Array3<f64>, Array2<f64>), NetError> {
    let (features, _) = forward_encoder(w, image)?;
    let logits = conv1x1(&features, &w.det_head);
    let desc_chw = conv1x1(&features, &w.desc_head);
    let (dd, hc, wc) = desc_chw.dim();
    let mut desc = Array3::zeros((hc, wc, dd));
    for k in 0..dd {
        for y in 0..hc {
            for x in 0..wc {
                desc[[y, x, k]] = desc_chw[[k, y, x]];
            }
        }
    }
    let score = score_map(&logits);
    Ok((logits, desc, score))
}

/// Per-cell softmax over the 65 classes, dustbin dropped, positions
/// scattered back to the 8x8 pixel block of each cell.
pub fn score_map(logits: &Array3<f64>) -> Array2<f64> {
    let (_, hc, wc) = logits.dim();
    let mut map = Array2::zeros((hc * 8, wc * 8));
    for cy in 0..hc {
        for cx in 0..wc {
            let mut m = f64::NEG_INFINITY;
            for k in 0..65 {
                m = m.max(logits[[k, cy, cx]]);
            }
            let mut sum = 0.0;
            let mut e = [0.0; 65];
            for k in 0..65 {
                e[k] = (logits[[k, cy, cx]] - m).exp();
                sum += e[k];
            }
            for k in 0..64 {
                map[[cy * 8 + k / 8, cx * 8 + k % 8]] = e[k] / sum;
            }
        }
    }
    map
}

/// Loss and weight gradients for one training sample: forward every image,
/// reverse through the loss, the heads and the encoder. Accumulation is in
/// fixed image order.
pub fn backward(
    w: &NetWeights,
    sample: &TrainingSample,
    params: &LossParams,
) -> Result<(f64, NetWeights), NetError> {
    let n = sample.images.len();
    let mut logits_all = Vec::with_capacity(n);
    let mut desc_all = Vec::with_capacity(n);
    let mut acts_all = Vec::with_capacity(n);
    let mut features_all = Vec::with_capacity(n);
    for img in &sample.images {
        let (features, acts) = forward_encoder(w, img)?;
        let logits = conv1x1(&features, &w.det_head);
        let desc_chw = conv1x1(&features, &w.desc_head);
        let (dd, hc, wc) = desc_chw.dim();
        let mut desc = Array3::zeros((hc, wc, dd));
        for k in 0..dd {
            for y in 0..hc {
                for x in 0..wc {
                    desc[[y, x, k]] = desc_chw[[k, y, x]];
                }
            }
        }
        logits_all.push(logits);
        desc_all.push(desc);
        acts_all.push(acts);
        features_all.push(features);
    }

    let (total, grad_logits, grad_desc) = loss::grad_loss(
        &logits_all,
        &desc_all,
        &sample.heatmaps,
        &sample.correspondences,
        params,
    )?;

    let mut grads = w.zeros_like();
    for i in 0..n {
        // heads
        let (g_feat_det, g_det) = conv1x1_backward(&features_all[i], &w.det_head, &grad_logits[i]);
        let (dd, hc, wc) = (grad_desc[i].dim().2, grad_desc[i].dim().0, grad_desc[i].dim().1);
        let mut gd_chw = Array3::zeros((dd, hc, wc));
        for k in 0..dd {
            for y in 0..hc {
                for x in 0..wc {
                    gd_chw[[k, y, x]] = grad_desc[i][[y, x, k]];
                }
            }
        }
        let (g_feat_desc, g_desc) = conv1x1_backward(&features_all[i], &w.desc_head, &gd_chw);
        grads.det_head.axpy(1.0, &g_det);
        grads.desc_head.axpy(1.0, &g_desc);
        let mut g = &g_feat_det + &g_feat_desc;

        // encoder, last block first
        let acts = &acts_all[i];
        for bi in (0..w.blocks.len()).rev() {
            let (activated, _) = &acts.blocks[bi];
            if bi < 3 {
                let (_, hh, ww) = activated.dim();
                g = avgpool2_backward(&g, hh, ww);
            }
            g = tanh_backward(activated, &g);
            let block_input = if bi == 0 { &acts.input } else { &acts.blocks[bi - 1].1 };
            let (g_in, g_w) = conv3x3_backward(block_input, &w.blocks[bi], &g);
            grads.blocks[bi].axpy(1.0, &g_w);
            g = g_in;
        }
    }
    Ok((total, grads))
}

/// Plain gradient descent over a sample stream. The stream is called with
/// the step index. Loss history has one entry per step; a non-finite loss
/// aborts.
pub fn train<F>(
    mut next_sample: F,
    initial: NetWeights,
    config: &TrainConfig,
) -> Result<(NetWeights, Vec<f64>), NetError>
where
    F: FnMut(usize) -> Result<TrainingSample, NetError>,
{
    let mut w = initial;
    let mut history = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let sample = next_sample(step)?;
        let (l, grads) = backward(&w, &sample, &config.loss)?;
        if !l.is_finite() {
            return Err(NetError::Diverged(step));
        }
        w.axpy(-config.learning_rate, &grads);
        history.push(l);
        if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 {
            if let Some(dir) = &config.checkpoint_dir {
                save_weights(&w, &dir.join(format!("step_{:06}.ckpt", step + 1)))?;
            }
        }
    }
    Ok((w, history))
}

/// Threshold + greedy non-maximum suppression with Chebyshev (square)
/// neighborhoods. Keypoints are integer-pixel, sorted by descending score,
/// at most `max_keypoints` of them. Ties break by raster order.
pub fn detect(
    score_map: &Array2<f64>,
    threshold: f64,
    nms_radius: usize,
    max_keypoints: usize,
) -> Vec<Keypoint> {
    let (h, w) = score_map.dim();
    let mut candidates: Vec<(f64, usize, usize)> = score_map
        .indexed_iter()
        .filter(|(_, &v)| v >= threshold)
        .map(|((y, x), &v)| (v, y, x))
        .collect();
    candidates.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then_with(|| (a.1, a.2).cmp(&(b.1, b.2)))
    });
    let mut suppressed = vec![false; h * w];
    let mut out = Vec::new();
    for (score, y, x) in candidates {
        if out.len() >= max_keypoints {
            break;
        }
        if suppressed[y * w + x] {
            continue;
        }
        out.push(Keypoint { xy: [x as f64, y as f64], score });
        let r = nms_radius as isize;
        for dy in -r..=r {
            for dx in -r..=r {
                let (sy, sx) = (y as isize + dy, x as isize + dx);
                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                    suppressed[sy as usize * w + sx as usize] = true;
                }
            }
        }
    }
    out
}

/// Bilinear descriptor sampling at keypoint locations, unit-normalized.
pub fn describe(field: &Array3<f64>, keypoints: &[Keypoint]) -> Vec<Vec<f64>> {
    keypoints
        .iter()
        .map(|kp| loss::sample_descriptor(field, kp.xy).unit)
        .collect()
}

// ---------------------------------------------------------------------------
// checkpoint format: magic, version, tensor table, f32 data (little endian)

const CKPT_MAGIC: &[u8; 4] = b"SFNW";
const CKPT_VERSION: u32 = 1;

pub fn save_weights(w: &NetWeights, path: &Path) -> Result<(), NetError> {
    let io_err = |e| NetError::Io { path: path.display().to_string(), source: e };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    let entries: Vec<(&str, &Conv)> = w.conv_iter().collect();
    (|| -> std::io::Result<()> {
        f.write_all(CKPT_MAGIC)?;
        f.write_u32::<LittleEndian>(CKPT_VERSION)?;
        f.write_u32::<LittleEndian>(entries.len() as u32)?;
        for (name, conv) in &entries {
            f.write_u16::<LittleEndian>(name.len() as u16)?;
            f.write_all(name.as_bytes())?;
            let (o, c, kh, kw) = conv.weight.dim();
            for d in [o, c, kh, kw] {
                f.write_u32::<LittleEndian>(d as u32)?;
            }
            for &v in conv.weight.iter() {
                f.write_f32::<LittleEndian>(v as f32)?;
            }
            for &v in conv.bias.iter() {
                f.write_f32::<LittleEndian>(v as f32)?;
            }
        }
        Ok(())
    })()
    .map_err(io_err)
}

pub fn load_weights(path: &Path) -> Result<NetWeights, NetError> {
    let io_err = |e| NetError::Io { path: path.display().to_string(), source: e };
    let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(io_err)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic).map_err(io_err)?;
    if &magic != CKPT_MAGIC {
        return Err(NetError::BadCheckpoint("bad magic".into()));
    }
    let version = f.read_u32::<LittleEndian>().map_err(io_err)?;
    if version != CKPT_VERSION {
        return Err(NetError::BadCheckpoint(format!("unsupported version {version}")));
    }
    let count = f.read_u32::<LittleEndian>().map_err(io_err)?;
    let mut convs: Vec<(String, Conv)> = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = f.read_u16::<LittleEndian>().map_err(io_err)? as usize;
        let mut name = vec![0u8; name_len];
        f.read_exact(&mut name).map_err(io_err)?;
        let name = String::from_utf8(name)
            .map_err(|_| NetError::BadCheckpoint("tensor name not utf-8".into()))?;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = f.read_u32::<LittleEndian>().map_err(io_err)? as usize;
        }
        let n = dims.iter().product::<usize>();
        let mut weight = Vec::with_capacity(n);
        for _ in 0..n {
            weight.push(f.read_f32::<LittleEndian>().map_err(io_err)? as f64);
        }
        let mut bias = Vec::with_capacity(dims[0]);
        for _ in 0..dims[0] {
            bias.push(f.read_f32::<LittleEndian>().map_err(io_err)? as f64);
        }
        convs.push((
            name,
            Conv {
                weight: Array4::from_shape_vec((dims[0], dims[1], dims[2], dims[3]), weight)
                    .map_err(|e| NetError::BadCheckpoint(e.to_string()))?,
                bias: Array1::from_vec(bias),
            },
        ));
    }
    let mut find = |n: &str| -> Result<Conv, NetError> {
        convs
            .iter()
            .position(|(name, _)| name == n)
            .map(|i| convs.remove(i).1)
            .ok_or_else(|| NetError::BadCheckpoint(format!("missing tensor {n}")))
    };
    Ok(NetWeights {
        blocks: vec![find("block0")?, find("block1")?, find("block2")?, find("block3")?],
        det_head: find("det_head")?,
        desc_head: find("desc_head")?,
    })
}

// ---------------------------------------------------------------------------
// feature export: u64 count, then per keypoint f64 x, f64 y, f64 score and
// f32 descriptor entries

pub fn save_features(
    keypoints: &[Keypoint],
    descriptors: &[Vec<f64>],
    path: &Path,
) -> Result<(), NetError> {
    assert_eq!(keypoints.len(), descriptors.len());
    let io_err = |e| NetError::Io { path: path.display().to_string(), source: e };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    (|| -> std::io::Result<()> {
        f.write_u64::<LittleEndian>(keypoints.len() as u64)?;
        let dim = descriptors.first().map_or(0, Vec::len);
        f.write_u32::<LittleEndian>(dim as u32)?;
        for (kp, d) in keypoints.iter().zip(descriptors) {
            f.write_f64::<LittleEndian>(kp.xy[0])?;
            f.write_f64::<LittleEndian>(kp.xy[1])?;
            f.write_f64::<LittleEndian>(kp.score)?;
            for &v in d {
                f.write_f32::<LittleEndian>(v as f32)?;
            }
        }
        Ok(())
    })()
    .map_err(io_err)
}

pub fn load_features(path: &Path) -> Result<(Vec<Keypoint>, Vec<Vec<f64>>), NetError> {
    let io_err = |e| NetError::Io { path: path.display().to_string(), source: e };
    let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(io_err)?);
    let count = f.read_u64::<LittleEndian>().map_err(io_err)?;
    let dim = f.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    let mut keypoints = Vec::with_capacity(count as usize);
    let mut descriptors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let x = f.read_f64::<LittleEndian>().map_err(io_err)?;
        let y = f.read_f64::<LittleEndian>().map_err(io_err)?;
        let score = f.read_f64::<LittleEndian>().map_err(io_err)?;
        let mut d = Vec::with_capacity(dim);
        for _ in 0..dim {
            d.push(f.read_f32::<LittleEndian>().map_err(io_err)? as f64);
        }
        keypoints.push(Keypoint { xy: [x, y], score });
        descriptors.push(d);
    }
    Ok((keypoints, descriptors))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::supervision::TARGET_SIZE;
    use crate::tracks::CorrespondenceSet;
    use std::collections::BTreeMap;

    fn tiny_net(seed: u64) -> NetWeights {
        NetWeights::with_dims(&[2, 3, 3, 4], 6, seed)
    }

    fn random_image(rng: &mut ChaCha8Rng, side: usize) -> Array2<f64> {
        Array2::from_shape_fn((side, side), |_| rng.gen_range(0.0..1.0))
    }

    pub(crate) fn tiny_sample(rng: &mut ChaCha8Rng, side: usize, n_tracks: usize) -> TrainingSample {
        let images = vec![random_image(rng, side), random_image(rng, side)];
        let heatmaps = vec![
            crate::loss::tests::random_heatmap(rng, side, side),
            crate::loss::tests::random_heatmap(rng, side, side),
        ];
        let mut correspondences = BTreeMap::new();
        correspondences.insert(
            (0, 1),
            crate::loss::tests::random_correspondences(rng, n_tracks, side as f64),
        );
        TrainingSample { image_ids: vec![0, 1], images, heatmaps, correspondences }
    }

    #[test]
    fn forward_shapes() {
        let w = NetWeights::init(1);
        let img = Array2::zeros((TARGET_SIZE, TARGET_SIZE));
        let (logits, desc, score) = forward(&w, &img).unwrap();
        assert_eq!(logits.dim(), (65, 32, 32));
        assert_eq!(desc.dim(), (32, 32, 256));
        assert_eq!(score.dim(), (256, 256));
    }

    #[test]
    fn forward_rejects_bad_shape() {
        let w = tiny_net(1);
        let img = Array2::zeros((100, 100));
        assert!(matches!(forward(&w, &img), Err(NetError::BadInputShape(100, 100))));
    }

    #[test]
    fn score_map_cells_sum_with_dustbin_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = tiny_net(2);
        let img = random_image(&mut rng, 32);
        let (logits, _, score) = forward(&w, &img).unwrap();
        for cy in 0..4 {
            for cx in 0..4 {
                let mut s = 0.0;
                for iy in 0..8 {
                    for ix in 0..8 {
                        s += score[[cy * 8 + iy, cx * 8 + ix]];
                    }
                }
                // add dustbin probability back
                let mut m = f64::NEG_INFINITY;
                for k in 0..65 {
                    m = m.max(logits[[k, cy, cx]]);
                }
                let exps: Vec<f64> = (0..65).map(|k| (logits[[k, cy, cx]] - m).exp()).collect();
                let denom: f64 = exps.iter().sum();
                s += exps[64] / denom;
                assert!((s - 1.0).abs() < 1e-6, "cell sum {s}");
            }
        }
    }

    #[test]
    fn descriptor_cell_norms_unit_after_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = tiny_net(4);
        let img = random_image(&mut rng, 32);
        let (_, desc, _) = forward(&w, &img).unwrap();
        let kps: Vec<Keypoint> = (0..10)
            .map(|_| Keypoint {
                xy: [rng.gen_range(0.0..32.0), rng.gen_range(0.0..32.0)],
                score: 1.0,
            })
            .collect();
        for d in describe(&desc, &kps) {
            let norm: f64 = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn describe_at_cell_center_equals_cell_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let field = crate::loss::tests::random_field(&mut rng, 4, 4, 6);
        let kp = Keypoint { xy: [2.0 * 8.0 + 3.5, 1.0 * 8.0 + 3.5], score: 1.0 };
        let d = describe(&field, &[kp]);
        let mut cell: Vec<f64> = (0..6).map(|k| field[[1, 2, k]]).collect();
        let norm: f64 = cell.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut cell {
            *v /= norm;
        }
        for (a, b) in d[0].iter().zip(&cell) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        // reduced net, 16x16 inputs, 3 tracks
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = tiny_net(8);
        let sample = tiny_sample(&mut rng, 16, 3);
        let params = LossParams::default();
        let (_, grads) = backward(&w, &sample, &params).unwrap();

        let loss_of = |w: &NetWeights| -> f64 {
            let mut logits_all = Vec::new();
            let mut desc_all = Vec::new();
            for img in &sample.images {
                let (l, d, _) = forward(w, img).unwrap();
                logits_all.push(l);
                desc_all.push(d);
            }
            loss::loss_total(&logits_all, &desc_all, &sample.heatmaps, &sample.correspondences, &params)
                .unwrap()
        };

        let step = 1e-5;
        let mut max_rel = 0.0f64;
        let mut check = |w: &NetWeights, grads: &NetWeights, which: usize| {
            let mut wp = w.clone();
            let (analytic, fd) = {
                // probe a scattering of weights in every tensor
                let convs: Vec<&Conv> = w.conv_iter().map(|(_, c)| c).collect();
                let gconvs: Vec<&Conv> = grads.conv_iter().map(|(_, c)| c).collect();
                let conv = convs[which];
                let n = conv.weight.len();
                let idx = n / 2;
                let dims = conv.weight.dim();
                let coord = {
                    let mut rem = idx;
                    let (o, c, kh, kw) = dims;
                    let i3 = rem % kw;
                    rem /= kw;
                    let i2 = rem % kh;
                    rem /= kh;
                    let i1 = rem % c;
                    rem /= c;
                    (rem % o, i1, i2, i3)
                };
                let orig = conv.weight[[coord.0, coord.1, coord.2, coord.3]];
                let mutate = |wp: &mut NetWeights, v: f64| {
                    let target: &mut Conv = match which {
                        0..=3 => &mut wp.blocks[which],
                        4 => &mut wp.det_head,
                        _ => &mut wp.desc_head,
                    };
                    target.weight[[coord.0, coord.1, coord.2, coord.3]] = v;
                };
                mutate(&mut wp, orig + step);
                let lp = loss_of(&wp);
                mutate(&mut wp, orig - step);
                let lm = loss_of(&wp);
                mutate(&mut wp, orig);
                (
                    gconvs[which].weight[[coord.0, coord.1, coord.2, coord.3]],
                    (lp - lm) / (2.0 * step),
                )
            };
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-3);
            max_rel = max_rel.max(rel);
        };
        for which in 0..6 {
            check(&w, &grads, which);
        }
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn duplicated_image_identity_correspondences_zero_tracking_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = tiny_net(10);
        let img = random_image(&mut rng, 16);
        let heat = crate::loss::tests::random_heatmap(&mut rng, 16, 16);
        let mut correspondences = BTreeMap::new();
        let pts: Vec<_> = (0..3)
            .map(|t| {
                let p = [rng.gen_range(0.0..16.0), rng.gen_range(0.0..16.0)];
                (p, p, t as u64)
            })
            .collect();
        correspondences.insert((0, 1), CorrespondenceSet { image_a: 0, image_b: 1, pairs: pts });
        let sample = TrainingSample {
            image_ids: vec![0, 0],
            images: vec![img.clone(), img],
            heatmaps: vec![heat.clone(), heat],
            correspondences,
        };
        // identical images and identity correspondences: positives have
        // dot exactly 1, so the positive hinge is inactive; negatives may
        // still fire, so only check positives via lambda_t isolation.
        let only_pos = LossParams { lambda_t: 1.0, m_n: 1.0, ..Default::default() };
        let (_, g1) = backward(&w, &sample, &only_pos).unwrap();
        // with m_n = 1.0 negatives need dot > 1: impossible, so descriptor
        // gradients must vanish
        assert!(g1.desc_head.weight.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn heatmap_scaling_leaves_detection_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = tiny_net(12);
        let mut sample = tiny_sample(&mut rng, 16, 3);
        let params = LossParams { lambda: 0.0, ..Default::default() };
        let (_, g1) = backward(&w, &sample, &params).unwrap();
        for h in &mut sample.heatmaps {
            h.mapv_inplace(|v| v * 3.0);
        }
        let (_, g2) = backward(&w, &sample, &params).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn train_zero_steps_keeps_weights() {
        let w = tiny_net(13);
        let cfg = TrainConfig { steps: 0, ..Default::default() };
        let (out, history) = train(|_| unreachable!(), w.clone(), &cfg).unwrap();
        assert_eq!(out, w);
        assert!(history.is_empty());
    }

    #[test]
    fn train_reduces_loss_on_fixed_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let w = tiny_net(15);
        let sample = tiny_sample(&mut rng, 16, 3);
        let cfg = TrainConfig { steps: 200, learning_rate: 0.05, ..Default::default() };
        let (_, history) = train(|_| Ok(sample.clone()), w, &cfg).unwrap();
        assert!(history.last().unwrap() < &history[0], "history {:?}", (&history[0], history.last()));
    }

    #[test]
    fn train_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let sample = tiny_sample(&mut rng, 16, 3);
        let cfg = TrainConfig { steps: 20, learning_rate: 0.01, ..Default::default() };
        let (_, h1) = train(|_| Ok(sample.clone()), tiny_net(17), &cfg).unwrap();
        let (_, h2) = train(|_| Ok(sample.clone()), tiny_net(17), &cfg).unwrap();
        assert_eq!(h1, h2);
    }

    #[test]
    fn detect_single_peak() {
        let mut map = Array2::zeros((64, 64));
        map[[20, 30]] = 0.9;
        let kps = detect(&map, 0.1, 4, 100);
        assert_eq!(kps.len(), 1);
        assert_eq!(kps[0].xy, [30.0, 20.0]);
    }

    #[test]
    fn detect_nearby_peaks_suppressed() {
        let mut map = Array2::zeros((64, 64));
        map[[20, 30]] = 0.9;
        map[[20, 33]] = 0.8; // 3 px away, radius 4: suppressed
        let kps = detect(&map, 0.1, 4, 100);
        assert_eq!(kps.len(), 1);
        assert_eq!(kps[0].score, 0.9);
    }

    /// Quadratic reference NMS: a pixel survives iff it is >= threshold and
    /// no strictly better pixel within the Chebyshev radius survives before
    /// it in (score desc, raster) order.
    pub(crate) fn reference_nms(
        map: &Array2<f64>,
        threshold: f64,
        radius: usize,
        max_keypoints: usize,
    ) -> Vec<Keypoint> {
        let (h, w) = map.dim();
        let mut cand: Vec<(f64, usize, usize)> = map
            .indexed_iter()
            .filter(|(_, &v)| v >= threshold)
            .map(|((y, x), &v)| (v, y, x))
            .collect();
        cand.sort_by(|a, b| {
            b.0.partial_cmp(&a.0).unwrap().then_with(|| (a.1, a.2).cmp(&(b.1, b.2)))
        });
        let mut kept: Vec<Keypoint> = Vec::new();
        for (v, y, x) in cand {
            if kept.len() >= max_keypoints {
                break;
            }
            let clash = kept.iter().any(|k| {
                let dy = (k.xy[1] - y as f64).abs();
                let dx = (k.xy[0] - x as f64).abs();
                dy.max(dx) <= radius as f64
            });
            if !clash {
                kept.push(Keypoint { xy: [x as f64, y as f64], score: v });
            }
        }
        let _ = (h, w);
        kept
    }

    #[test]
    fn detect_matches_reference_on_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        for _ in 0..5 {
            let map = Array2::from_shape_fn((64, 64), |_| rng.gen_range(0.0..1.0));
            let ours = detect(&map, 0.0, 4, 1000);
            let reference = reference_nms(&map, 0.0, 4, 1000);
            assert_eq!(ours, reference);
        }
    }

    #[test]
    fn detect_respects_max_and_spacing() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let map = Array2::from_shape_fn((128, 128), |_| rng.gen_range(0.0..1.0));
        let kps = detect(&map, 0.0, 4, 50);
        assert!(kps.len() <= 50);
        for i in 0..kps.len() {
            for j in (i + 1)..kps.len() {
                let dx = (kps[i].xy[0] - kps[j].xy[0]).abs();
                let dy = (kps[i].xy[1] - kps[j].xy[1]).abs();
                assert!(dx.max(dy) > 4.0);
            }
        }
        // sorted by descending score
        for w in kps.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let w = tiny_net(20);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        save_weights(&w, &path).unwrap();
        let back = load_weights(&path).unwrap();
        // f32 storage: compare at f32 precision
        for ((_, a), (_, b)) in w.conv_iter().zip(back.conv_iter()) {
            for (x, y) in a.weight.iter().zip(b.weight.iter()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }

    #[test]
    fn feature_file_round_trip() {
        let kps = vec![
            Keypoint { xy: [1.0, 2.0], score: 0.5 },
            Keypoint { xy: [30.0, 40.0], score: 0.25 },
        ];
        let descs = vec![vec![0.5f64; 8], vec![-0.25f64; 8]];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.feat");
        save_features(&kps, &descs, &path).unwrap();
        let (k2, d2) = load_features(&path).unwrap();
        assert_eq!(kps, k2);
        for (a, b) in descs.iter().zip(&d2) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }
}
