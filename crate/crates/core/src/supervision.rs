//! Training-input construction: frame preprocessing, photometric
//! augmentation, detection heatmaps and N-image batch sampling under the
//! shared-track constraint.

use std::collections::{BTreeMap, HashMap, HashSet};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tracks::{correspondences, CorrespondenceSet, ReliableTrack};

/// Side length of the network input.
pub const TARGET_SIZE: usize = 256;

#[derive(Debug, Error)]
pub enum SupervisionError {
    #[error("zero-sized frame")]
    EmptyFrame,
    #[error("no valid {n}-subset of pairwise track-connected frames after {restarts} restarts; lower N")]
    NoValidBatch { n: usize, restarts: usize },
    #[error("frame source failed for image {id}: {msg}")]
    FrameSource { id: u32, msg: String },
    #[error("no frame transform for image {0}")]
    MissingTransform(u32),
    #[error("batch size must be >= 2, got {0}")]
    BadBatchSize(usize),
}

/// Coordinate map from full-frame pixels to the preprocessed square crop.
/// Pixel centers are aligned: target = (full - offset + 0.5) * scale - 0.5.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameTransform {
    /// Top-left corner of the centered square crop, full-frame pixels.
    pub crop_offset: [f64; 2],
    /// Target pixels per source pixel (target_size / crop side).
    pub scale: f64,
    pub source_size: [usize; 2],
    pub target_size: usize,
}

impl FrameTransform {
    pub fn apply(&self, xy: [f64; 2]) -> [f64; 2] {
        [
            (xy[0] - self.crop_offset[0] + 0.5) * self.scale - 0.5,
            (xy[1] - self.crop_offset[1] + 0.5) * self.scale - 0.5,
        ]
    }

    pub fn invert(&self, xy: [f64; 2]) -> [f64; 2] {
        [
            (xy[0] + 0.5) / self.scale - 0.5 + self.crop_offset[0],
            (xy[1] + 0.5) / self.scale - 0.5 + self.crop_offset[1],
        ]
    }
}

/// Center-crop to square, bilinear-resize to `target`, convert to luminance
/// and scale to [0,1].
pub fn preprocess_frame(
    frame: &Array3<u8>,
    target: usize,
) -> Result<(Array2<f64>, FrameTransform), SupervisionError> {
    let (h, w, _c) = frame.dim();
    if h == 0 || w == 0 {
        return Err(SupervisionError::EmptyFrame);
    }
    let side = h.min(w);
    let off_x = (w - side) / 2;
    let off_y = (h - side) / 2;
    let scale = target as f64 / side as f64;
    let transform = FrameTransform {
        crop_offset: [off_x as f64, off_y as f64],
        scale,
        source_size: [w, h],
        target_size: target,
    };

    // Rec.601 luma, normalized.
    let mut gray = Array2::<f64>::zeros((side, side));
    for y in 0..side {
        for x in 0..side {
            let (sy, sx) = (y + off_y, x + off_x);
            let r = frame[[sy, sx, 0]] as f64;
            let g = frame[[sy, sx, 1]] as f64;
            let b = frame[[sy, sx, 2]] as f64;
            gray[[y, x]] = (0.299 * r + 0.587 * g + 0.114 * b) / 255.0;
        }
    }

    let mut out = Array2::<f64>::zeros((target, target));
    for ty in 0..target {
        for tx in 0..target {
            // pixel-center aligned inverse map into the crop
            let sx = (tx as f64 + 0.5) / scale - 0.5;
            let sy = (ty as f64 + 0.5) / scale - 0.5;
            out[[ty, tx]] = bilinear(&gray, sx, sy);
        }
    }
    Ok((out, transform))
}

fn bilinear(img: &Array2<f64>, x: f64, y: f64) -> f64 {
    let (h, w) = img.dim();
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let x0 = xc.floor() as usize;
    let y0 = yc.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    img[[y0, x0]] * (1.0 - fx) * (1.0 - fy)
        + img[[y0, x1]] * fx * (1.0 - fy)
        + img[[y1, x0]] * (1.0 - fx) * fy
        + img[[y1, x1]] * fx * fy
}

/// Photometric augmentation parameters. Each field is the sampling range of
/// the corresponding effect; the seed passed to [`augment`] fully determines
/// the draw.
#[derive(Debug, Clone)]
pub struct AugmentConfig {
    /// Brightness shift in intensity values (0-255 scale), drawn from
    /// U(-max, +max).
    pub brightness_max_delta: f64,
    /// Contrast alpha range for 127 + alpha * (v - 127).
    pub contrast_range: (f64, f64),
    /// Per-pixel speckle (salt and pepper) probability range.
    pub speckle_prob_range: (f64, f64),
    /// Additive Gaussian noise sigma range (0-255 scale).
    pub gaussian_sigma_range: (f64, f64),
    /// Multiplicative darkening factor inside a random ellipse.
    pub shade_factor_range: (f64, f64),
    /// Ellipse semi-axis range in pixels.
    pub shade_axes_range: (f64, f64),
    /// Probability that the elliptical shade is applied at all.
    pub shade_prob: f64,
    /// Motion blur kernel size in pixels.
    pub blur_kernel: usize,
    /// Probability that motion blur is applied.
    pub blur_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            brightness_max_delta: 50.0,
            contrast_range: (0.5, 1.5),
            speckle_prob_range: (0.0, 0.0035),
            gaussian_sigma_range: (0.0, 10.0),
            shade_factor_range: (0.3, 0.8),
            shade_axes_range: (10.0, 80.0),
            shade_prob: 0.5,
            blur_kernel: 3,
            blur_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    /// Configuration whose every draw is the identity transform.
    pub fn identity() -> Self {
        AugmentConfig {
            brightness_max_delta: 0.0,
            contrast_range: (1.0, 1.0),
            speckle_prob_range: (0.0, 0.0),
            gaussian_sigma_range: (0.0, 0.0),
            shade_factor_range: (1.0, 1.0),
            shade_axes_range: (10.0, 80.0),
            shade_prob: 0.0,
            blur_kernel: 3,
            blur_prob: 0.0,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.gen_range(range.0..range.1)
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Apply brightness, contrast, speckle, Gaussian noise, elliptical shade and
/// motion blur with parameters drawn from `config`. Output clamped to [0,1].
pub fn augment(image: &Array2<f64>, config: &AugmentConfig, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = image.dim();
    let mut out = image.clone();

    // brightness and contrast on the 0-255 scale: 127 + alpha (v - 127)
    let delta = if config.brightness_max_delta > 0.0 {
        rng.gen_range(-config.brightness_max_delta..config.brightness_max_delta)
    } else {
        0.0
    };
    let alpha = uniform(&mut rng, config.contrast_range);
    out.mapv_inplace(|v| (127.0 + alpha * (v * 255.0 + delta - 127.0)) / 255.0);

    // speckle: pixels flipped to black or white
    let speckle_p = uniform(&mut rng, config.speckle_prob_range);
    if speckle_p > 0.0 {
        for v in out.iter_mut() {
            if rng.gen::<f64>() < speckle_p {
                *v = if rng.gen::<bool>() { 1.0 } else { 0.0 };
            }
        }
    }

    // additive Gaussian noise
    let sigma = uniform(&mut rng, config.gaussian_sigma_range) / 255.0;
    if sigma > 0.0 {
        for v in out.iter_mut() {
            *v += sigma * gaussian(&mut rng);
        }
    }

    // elliptical shade: multiplicative darkening inside a rotated ellipse
    if config.shade_prob > 0.0 && rng.gen::<f64>() < config.shade_prob {
        let factor = uniform(&mut rng, config.shade_factor_range);
        let cx = rng.gen_range(0.0..w as f64);
        let cy = rng.gen_range(0.0..h as f64);
        let ax = uniform(&mut rng, config.shade_axes_range);
        let ay = uniform(&mut rng, config.shade_axes_range);
        let angle = rng.gen_range(0.0..std::f64::consts::PI);
        let (sin, cos) = angle.sin_cos();
        for y in 0..h {
            for x in 0..w {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let u = cos * dx + sin * dy;
                let v = -sin * dx + cos * dy;
                if (u / ax).powi(2) + (v / ay).powi(2) <= 1.0 {
                    out[[y, x]] *= factor;
                }
            }
        }
    }

    // motion blur: averaging along a random 4-direction line
    if config.blur_prob > 0.0 && rng.gen::<f64>() < config.blur_prob {
        let k = config.blur_kernel.max(1) as isize;
        let dir = rng.gen_range(0..4u8);
        let (dx, dy): (isize, isize) = match dir {
            0 => (1, 0),
            1 => (0, 1),
            2 => (1, 1),
            _ => (1, -1),
        };
        let src = out.clone();
        let half = k / 2;
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut sum = 0.0;
                let mut n = 0.0;
                for t in -half..=(k - 1 - half) {
                    let sx = x + t * dx;
                    let sy = y + t * dy;
                    if sx >= 0 && sy >= 0 && (sx as usize) < w && (sy as usize) < h {
                        sum += src[[sy as usize, sx as usize]];
                        n += 1.0;
                    }
                }
                out[[y as usize, x as usize]] = sum / n;
            }
        }
    }

    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    out
}

/// Render a detection heatmap: a unit-mass impulse at each point's nearest
/// pixel, convolved with a discrete Gaussian of standard deviation `sigma`
/// (kernel radius at least 1). Contributions that would fall off the image
/// are renormalized so each in-bounds point keeps unit mass.
pub fn render_heatmap(points: &[[f64; 2]], size: usize, sigma: f64) -> Array2<f64> {
    assert!(sigma > 0.0, "sigma must be positive");
    let mut map = Array2::<f64>::zeros((size, size));
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;

    // base kernel normalized over the full window
    let dim = (2 * radius + 1) as usize;
    let mut kernel = vec![0.0; dim * dim];
    let mut ksum = 0.0;
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let v = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
            kernel[((dy + radius) * (2 * radius + 1) + dx + radius) as usize] = v;
            ksum += v;
        }
    }
    for v in &mut kernel {
        *v /= ksum;
    }

    for p in points {
        let px = p[0].round() as isize;
        let py = p[1].round() as isize;
        if px < 0 || py < 0 || px >= size as isize || py >= size as isize {
            continue;
        }
        // in-image kernel mass for border renormalization
        let mut inside = 0.0;
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let (x, y) = (px + dx, py + dy);
                if x >= 0 && y >= 0 && x < size as isize && y < size as isize {
                    inside += kernel[((dy + radius) * (2 * radius + 1) + dx + radius) as usize];
                }
            }
        }
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let (x, y) = (px + dx, py + dy);
                if x >= 0 && y >= 0 && x < size as isize && y < size as isize {
                    map[[y as usize, x as usize]] +=
                        kernel[((dy + radius) * (2 * radius + 1) + dx + radius) as usize] / inside;
                }
            }
        }
    }
    map
}

/// Source of preprocessed frames: 256x256 grayscale in [0,1].
pub trait FrameSource {
    fn frame(&self, image_id: u32) -> Result<Array2<f64>, String>;
}

impl FrameSource for BTreeMap<u32, Array2<f64>> {
    fn frame(&self, image_id: u32) -> Result<Array2<f64>, String> {
        self.get(&image_id)
            .cloned()
            .ok_or_else(|| format!("no frame for image {image_id}"))
    }
}

/// Batch size policy: the fixed operating point or a per-sample uniform draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BatchSize {
    Fixed(usize),
    Range(usize, usize),
}

impl BatchSize {
    fn draw(self, rng: &mut ChaCha8Rng) -> usize {
        match self {
            BatchSize::Fixed(n) => n,
            BatchSize::Range(lo, hi) => rng.gen_range(lo..=hi),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchConfig {
    pub batch_size: BatchSize,
    /// Heatmap blur in pixels.
    pub heatmap_sigma: f64,
    pub augment: AugmentConfig,
    pub max_restarts: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig {
            batch_size: BatchSize::Fixed(4),
            heatmap_sigma: 0.2,
            augment: AugmentConfig::default(),
            max_restarts: 100,
        }
    }
}

/// N preprocessed, augmented frames with detection heatmaps and all pairwise
/// correspondence sets in 256x256 coordinates. Keys of `correspondences` are
/// batch positions (a, b) with a < b.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub image_ids: Vec<u32>,
    pub images: Vec<Array2<f64>>,
    pub heatmaps: Vec<Array2<f64>>,
    pub correspondences: BTreeMap<(usize, usize), CorrespondenceSet>,
}

/// Select N frames such that every unordered pair shares at least one
/// reliable track (greedy growth from a random seed track, restarting on
/// dead ends), then emit the full sample. Deterministic given
/// (tracks, config, seed).
pub fn sample_batch<S: FrameSource>(
    tracks: &[ReliableTrack],
    config: &BatchConfig,
    seed: u64,
    transforms: &BTreeMap<u32, FrameTransform>,
    source: &S,
) -> Result<TrainingSample, SupervisionError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.batch_size.draw(&mut rng);
    if n < 2 {
        return Err(SupervisionError::BadBatchSize(n));
    }

    // frame -> set of track indices through it
    let mut frame_tracks: HashMap<u32, HashSet<usize>> = HashMap::new();
    for (ti, t) in tracks.iter().enumerate() {
        for (img, _, _) in &t.frames {
            frame_tracks.entry(*img).or_default().insert(ti);
        }
    }

    let shares = |a: u32, b: u32| -> bool {
        match (frame_tracks.get(&a), frame_tracks.get(&b)) {
            (Some(sa), Some(sb)) => sa.intersection(sb).next().is_some(),
            _ => false,
        }
    };

    let mut selected: Option<Vec<u32>> = None;
    'restart: for _ in 0..config.max_restarts {
        if tracks.is_empty() {
            break;
        }
        let t = &tracks[rng.gen_range(0..tracks.len())];
        let first = t.frames[rng.gen_range(0..t.frames.len())].0;
        let mut chosen = vec![first];
        while chosen.len() < n {
            // candidates sharing a track with every chosen frame
            let mut candidates: Vec<u32> = frame_tracks
                .keys()
                .copied()
                .filter(|f| !chosen.contains(f) && chosen.iter().all(|&c| shares(*f, c)))
                .collect();
            if candidates.is_empty() {
                continue 'restart;
            }
            candidates.sort_unstable();
            chosen.push(candidates[rng.gen_range(0..candidates.len())]);
        }
        selected = Some(chosen);
        break;
    }
    let image_ids = selected.ok_or(SupervisionError::NoValidBatch {
        n,
        restarts: config.max_restarts,
    })?;

    let mut images = Vec::with_capacity(n);
    let mut heatmaps = Vec::with_capacity(n);
    for &id in &image_ids {
        let tf = transforms
            .get(&id)
            .ok_or(SupervisionError::MissingTransform(id))?;
        let frame = source
            .frame(id)
            .map_err(|msg| SupervisionError::FrameSource { id, msg })?;
        let aug_seed = rng.gen::<u64>();
        let side = tf.target_size;
        images.push(augment(&frame, &config.augment, aug_seed));

        // Y: every reliable-track point visible in this frame, green or
        // blue, mapped into target coordinates; out-of-crop points dropped.
        let mut pts = Vec::new();
        for t in tracks {
            for (img, xy, _) in &t.frames {
                if *img == id {
                    let m = tf.apply(*xy);
                    if m[0] >= 0.0 && m[1] >= 0.0 && m[0] < side as f64 && m[1] < side as f64 {
                        pts.push(m);
                    }
                }
            }
        }
        heatmaps.push(render_heatmap(&pts, side, config.heatmap_sigma));
    }

    let mut corr = BTreeMap::new();
    for a in 0..n {
        for b in (a + 1)..n {
            let set = correspondences(tracks, image_ids[a], image_ids[b])
                .expect("distinct batch members");
            let tfa = &transforms[&image_ids[a]];
            let tfb = &transforms[&image_ids[b]];
            let mapped: Vec<_> = set
                .pairs
                .iter()
                .filter_map(|(xa, xb, tid)| {
                    let ma = tfa.apply(*xa);
                    let mb = tfb.apply(*xb);
                    let ok = |p: [f64; 2], side: usize| {
                        p[0] >= 0.0 && p[1] >= 0.0 && p[0] < side as f64 && p[1] < side as f64
                    };
                    (ok(ma, tfa.target_size) && ok(mb, tfb.target_size))
                        .then_some((ma, mb, *tid))
                })
                .collect();
            corr.insert(
                (a, b),
                CorrespondenceSet {
                    image_a: image_ids[a],
                    image_b: image_ids[b],
                    pairs: mapped,
                },
            );
        }
    }

    // Every pair of a valid batch shares a track, but crop-dropping can
    // empty a set; that is a dead end too. Retry with a derived seed.
    if corr.values().any(|s| s.pairs.is_empty()) {
        if config.max_restarts == 0 {
            return Err(SupervisionError::NoValidBatch { n, restarts: 0 });
        }
        let mut cfg = config.clone();
        cfg.max_restarts -= 1;
        return sample_batch(tracks, &cfg, seed.wrapping_add(0x9e3779b97f4a7c15), transforms, source);
    }

    Ok(TrainingSample {
        image_ids,
        images,
        heatmaps,
        correspondences: corr,
    })
}
