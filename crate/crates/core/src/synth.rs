//! Synthetic ground-truth scenes: a textured tube interior, a camera moving
//! along its axis, rendered grayscale frames with moving illumination and
//! hard-edged specular highlights, plus an exact sparse reconstruction and
//! pairwise correspondences. This stands in for real endoscopy footage when
//! validating the rest of the pipeline.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::colmap::{
    self, Camera, CameraModel, ImageRecord, ModelFormat, Observation, Point3D, SparseModel,
};
use crate::geometry::{self, GeometryError};
use crate::tracks::CorrespondenceSet;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("config must place at least 8 landmarks, got {0}")]
    TooFewLandmarks(usize),
    #[error("dropout rate must be in [0, 1), got {0}")]
    BadDropout(f64),
    #[error("fewer than 8 landmarks survived visibility and dropout ({0})")]
    TooFewSurvivors(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("scene io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] colmap::ColmapError),
}

/// Hard-edged specular highlight: pixel (x, y) is inside when the standard
/// ellipse inequality holds at the pixel's integer coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpecularBlob {
    pub center: [f64; 2],
    pub axes: [f64; 2],
}

impl SpecularBlob {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.center[0]) / self.axes[0];
        let dy = (y - self.center[1]) / self.axes[1];
        dx * dx + dy * dy <= 1.0
    }
}

#[derive(Debug, Clone)]
pub struct SceneConfig {
    /// Tube interior radius and length, world units. The camera travels
    /// along the tube axis (+z).
    pub tube_radius: f64,
    pub tube_length: f64,
    pub landmark_count: usize,
    pub texture_seed: u64,
    pub frame_count: usize,
    /// Square frames, pixels.
    pub frame_size: usize,
    /// fx, fy, cx, cy, k1..k4 of the fisheye camera.
    pub calibration: [f64; 8],
    pub specular_blob_count: usize,
    /// Rendered value inside specular blobs; kept high so the specular
    /// metric's 180 threshold separates cleanly.
    pub specular_intensity: u8,
    /// Probability that a visible landmark's observation is dropped from
    /// the reconstruction (simulated detector failure).
    pub dropout: f64,
    /// Texture contrast in [0, 1]; near zero stresses low-texture scenes.
    pub texture_amplitude: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let s = 256.0;
        SceneConfig {
            tube_radius: 1.0,
            tube_length: 12.0,
            landmark_count: 400,
            texture_seed: 7,
            frame_count: 12,
            frame_size: 256,
            calibration: [s * 0.45, s * 0.45, s / 2.0 - 0.5, s / 2.0 - 0.5, 0.02, -0.005, 0.001, 0.0],
            specular_blob_count: 3,
            specular_intensity: 240,
            dropout: 0.0,
            texture_amplitude: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthScene {
    /// Grayscale frames, 0-255, keyed by image id (1-based, in capture
    /// order).
    pub frames: BTreeMap<u32, Array2<u8>>,
    /// Exact reconstruction: observations are analytic projections.
    pub truth: SparseModel,
    /// Ground-truth pairwise correspondences from the generator's own
    /// track bookkeeping (independent of the tracks module).
    pub correspondences: Vec<CorrespondenceSet>,
    /// Planted highlights per image, for exact specular-metric expectations.
    pub blobs: BTreeMap<u32, Vec<SpecularBlob>>,
}

impl SynthScene {
    /// True when the integer pixel at an observation falls inside a planted
    /// highlight of that frame. Mirrors how the specular metric reads the
    /// frame: at the rounded observation coordinates.
    pub fn is_specular(&self, image_id: u32, xy: [f64; 2]) -> bool {
        let x = xy[0].round();
        let y = xy[1].round();
        self.blobs[&image_id].iter().any(|b| b.contains(x, y))
    }

    /// Replicate a grayscale frame to the 3-channel layout the supervision
    /// preprocessing expects.
    pub fn frame_rgb(&self, image_id: u32) -> Array3<u8> {
        let f = &self.frames[&image_id];
        let (h, w) = f.dim();
        Array3::from_shape_fn((h, w, 3), |(y, x, _)| f[[y, x]])
    }
}

/// Band-limited periodic texture on the unwrapped tube surface (angle phi,
/// axial coordinate z). Values in [0, 1].
struct TubeTexture {
    // (angular harmonic, axial frequency, phase, amplitude)
    waves: Vec<(f64, f64, f64, f64)>,
    norm: f64,
}

impl TubeTexture {
    fn new(seed: u64) -> TubeTexture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut waves = Vec::new();
        let mut norm = 0.0;
        for _ in 0..12 {
            let harmonic = rng.gen_range(1..9) as f64;
            let axial = rng.gen_range(0.5..6.0);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp = rng.gen_range(0.3..1.0);
            norm += amp;
            waves.push((harmonic, axial, phase, amp));
        }
        TubeTexture { waves, norm }
    }

    fn value(&self, phi: f64, z: f64) -> f64 {
        let s: f64 = self
            .waves
            .iter()
            .map(|&(h, a, p, amp)| amp * (h * phi + a * z + p).sin())
            .sum();
        0.5 + 0.5 * s / self.norm
    }
}

fn make_camera(config: &SceneConfig) -> Camera {
    Camera {
        id: 1,
        model: CameraModel::OpencvFisheye,
        width: config.frame_size as u64,
        height: config.frame_size as u64,
        params: config.calibration.to_vec(),
    }
}

/// Camera poses along the tube axis: forward motion with a gentle lateral
/// wobble and a small look-direction tilt, so consecutive views overlap but
/// the two-view geometry is never pure forward translation.
fn trajectory(config: &SceneConfig) -> Vec<([f64; 4], [f64; 3])> {
    let n = config.frame_count;
    let span = config.tube_length * 0.5;
    (0..n)
        .map(|i| {
            let t = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
            let z = 0.5 + t * span;
            let wob = config.tube_radius * 0.15;
            let cx = wob * (t * 5.0).sin();
            let cy = wob * (t * 4.0).cos() - wob;
            // small pitch/yaw tilt, scalar-first quaternion
            let ay = 0.04 * (t * 6.0).sin();
            let ax = 0.03 * (t * 7.0).cos();
            let qy = [(ay / 2.0).cos(), 0.0, (ay / 2.0).sin(), 0.0];
            let qx = [(ax / 2.0).cos(), (ax / 2.0).sin(), 0.0, 0.0];
            let q = quat_mul(qy, qx);
            // world-to-camera: rotation R from q, translation -R * center
            let r = geometry::quat_to_matrix(q);
            let c = Vector3::new(cx, cy, z);
            let tvec = -(r * c);
            (q, [tvec[0], tvec[1], tvec[2]])
        })
        .collect()
}

fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<SynthScene, SynthError> {
    if config.landmark_count < 8 {
        return Err(SynthError::TooFewLandmarks(config.landmark_count));
    }
    if !(0.0..1.0).contains(&config.dropout) {
        return Err(SynthError::BadDropout(config.dropout));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let camera = make_camera(config);
    let poses = trajectory(config);
    let n_frames = poses.len();

    // Landmarks on the tube wall, uniform in angle and axial position.
    let landmarks: Vec<[f64; 3]> = (0..config.landmark_count)
        .map(|_| {
            let phi = rng.gen_range(0.0..std::f64::consts::TAU);
            let z = rng.gen_range(0.0..config.tube_length);
            [
                config.tube_radius * phi.cos(),
                config.tube_radius * phi.sin(),
                z,
            ]
        })
        .collect();

    // Per landmark, per frame: Some(projection) when visible, plus a kept
    // flag after dropout. Visibility = in front of the camera and inside
    // the frame.
    #[derive(Clone, Copy)]
    struct Sight {
        xy: [f64; 2],
        kept: bool,
    }
    let mut sights: Vec<Vec<Option<Sight>>> = Vec::with_capacity(landmarks.len());
    for lm in &landmarks {
        let mut row = Vec::with_capacity(n_frames);
        for (q, t) in &poses {
            let img = ImageRecord {
                id: 0,
                name: String::new(),
                rotation: *q,
                translation: *t,
                camera_id: 1,
                observations: Vec::new(),
            };
            let pc = geometry::world_to_camera(&img, *lm);
            let entry = if pc[2] <= 0.05 {
                None
            } else {
                match geometry::project_fisheye(&camera, pc) {
                    Ok(xy)
                        if xy[0] >= 0.0
                            && xy[1] >= 0.0
                            && xy[0] < config.frame_size as f64
                            && xy[1] < config.frame_size as f64 =>
                    {
                        let kept = rng.gen_range(0.0..1.0) >= config.dropout;
                        Some(Sight { xy, kept })
                    }
                    _ => None,
                }
            };
            row.push(entry);
        }
        sights.push(row);
    }

    // Keep landmarks with at least two surviving observations.
    let survivors: Vec<usize> = (0..landmarks.len())
        .filter(|&l| sights[l].iter().flatten().filter(|s| s.kept).count() >= 2)
        .collect();
    if survivors.len() < 8 {
        return Err(SynthError::TooFewSurvivors(survivors.len()));
    }

    // Assemble the model. Point ids are 1-based over survivors; image ids
    // 1-based in capture order; observation indices follow point-id order
    // within each image.
    let mut images: BTreeMap<u32, ImageRecord> = poses
        .iter()
        .enumerate()
        .map(|(i, (q, t))| {
            let id = i as u32 + 1;
            (
                id,
                ImageRecord {
                    id,
                    name: format!("frame_{id:04}.pgm"),
                    rotation: *q,
                    translation: *t,
                    camera_id: 1,
                    observations: Vec::new(),
                },
            )
        })
        .collect();
    let mut points: BTreeMap<u64, Point3D> = BTreeMap::new();
    for (pi, &l) in survivors.iter().enumerate() {
        let pid = pi as u64 + 1;
        let mut track = Vec::new();
        for (fi, s) in sights[l].iter().enumerate() {
            let Some(s) = s else { continue };
            if !s.kept {
                continue;
            }
            let img = images.get_mut(&(fi as u32 + 1)).unwrap();
            let obs_idx = img.observations.len() as u32;
            img.observations.push(Observation { xy: s.xy, point3d_id: Some(pid) });
            track.push((fi as u32 + 1, obs_idx));
        }
        points.insert(
            pid,
            Point3D {
                id: pid,
                xyz: landmarks[l],
                color: [128, 128, 128],
                error: 0.0,
                track,
            },
        );
    }
    let mut cameras = BTreeMap::new();
    cameras.insert(1, camera.clone());
    let truth = SparseModel { cameras, images, points };

    // Ground-truth correspondences via an independent per-landmark scan:
    // within each contiguous visible run, the interval from the first to
    // the last kept observation supports pairs; runs shorter than two
    // frames contribute nothing.
    let mut corr: BTreeMap<(u32, u32), CorrespondenceSet> = BTreeMap::new();
    for (pi, &l) in survivors.iter().enumerate() {
        let pid = pi as u64 + 1;
        let row = &sights[l];
        let mut fi = 0;
        while fi < n_frames {
            if row[fi].is_none() {
                fi += 1;
                continue;
            }
            let start = fi;
            while fi < n_frames && row[fi].is_some() {
                fi += 1;
            }
            // kept-bounded interval inside [start, fi)
            let kept: Vec<usize> =
                (start..fi).filter(|&k| row[k].unwrap().kept).collect();
            let (Some(&first), Some(&last)) = (kept.first(), kept.last()) else { continue };
            if last == first {
                continue;
            }
            for a in first..=last {
                for b in (a + 1)..=last {
                    let (ia, ib) = (a as u32 + 1, b as u32 + 1);
                    let entry = corr.entry((ia, ib)).or_insert_with(|| CorrespondenceSet {
                        image_a: ia,
                        image_b: ib,
                        pairs: Vec::new(),
                    });
                    entry.pairs.push((row[a].unwrap().xy, row[b].unwrap().xy, pid));
                }
            }
        }
    }

    // Specular highlights: per frame, random image-space ellipses.
    let mut blobs: BTreeMap<u32, Vec<SpecularBlob>> = BTreeMap::new();
    let s = config.frame_size as f64;
    for i in 0..n_frames {
        let list = (0..config.specular_blob_count)
            .map(|_| SpecularBlob {
                center: [rng.gen_range(0.0..s), rng.gen_range(0.0..s)],
                axes: [rng.gen_range(4.0..14.0), rng.gen_range(4.0..14.0)],
            })
            .collect();
        blobs.insert(i as u32 + 1, list);
    }

    // Render frames: per pixel, cast a ray through the fisheye model,
    // intersect the tube wall, shade with texture and distance falloff.
    // The moving light sits at the camera, so illumination changes frame
    // to frame. Non-specular values stay strictly below the 180 threshold.
    let texture = TubeTexture::new(config.texture_seed);
    let frames: BTreeMap<u32, Array2<u8>> = (0..n_frames)
        .into_par_iter()
        .map(|i| {
            let (q, t) = poses[i];
            let r = geometry::quat_to_matrix(q);
            let rt: Matrix3<f64> = r.transpose();
            let center = -(rt * Vector3::new(t[0], t[1], t[2]));
            let blob_list = &blobs[&(i as u32 + 1)];
            let n = config.frame_size;
            let mut img = Array2::<u8>::zeros((n, n));
            for y in 0..n {
                for x in 0..n {
                    if blob_list.iter().any(|b| b.contains(x as f64, y as f64)) {
                        img[[y, x]] = config.specular_intensity;
                        continue;
                    }
                    let v = match geometry::unproject_fisheye(&camera, [x as f64, y as f64]) {
                        Ok(d) => {
                            let dir = rt * Vector3::new(d[0], d[1], d[2]);
                            shade(&texture, config, &center, &dir)
                        }
                        Err(_) => 0.0,
                    };
                    img[[y, x]] = (20.0 + 130.0 * v).round().clamp(0.0, 150.0) as u8;
                }
            }
            (i as u32 + 1, img)
        })
        .collect();

    Ok(SynthScene { frames, truth, correspondences: corr.into_values().collect(), blobs })
}

/// Texture times light falloff at the tube-wall intersection of the ray
/// from `origin` along `dir`; 0 when the ray misses the wall (or exits the
/// open tube ends).
fn shade(texture: &TubeTexture, config: &SceneConfig, origin: &Vector3<f64>, dir: &Vector3<f64>) -> f64 {
    // |o_xy + t d_xy| = R
    let (ox, oy) = (origin[0], origin[1]);
    let (dx, dy) = (dir[0], dir[1]);
    let a = dx * dx + dy * dy;
    let b = 2.0 * (ox * dx + oy * dy);
    let c = ox * ox + oy * oy - config.tube_radius * config.tube_radius;
    if a < 1e-12 {
        return 0.0; // looking straight down the axis: open end
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return 0.0;
    }
    let t = (-b + disc.sqrt()) / (2.0 * a); // camera is inside: take exit root
    if t <= 0.0 {
        return 0.0;
    }
    let hit = origin + dir * t;
    if hit[2] < -1.0 || hit[2] > config.tube_length + 1.0 {
        return 0.0;
    }
    let phi = hit[1].atan2(hit[0]);
    let tex = 0.5 + (texture.value(phi, hit[2]) - 0.5) * config.texture_amplitude;
    let dist = (hit - origin).norm();
    let falloff = 1.0 / (1.0 + 0.35 * dist * dist);
    (tex * falloff).clamp(0.0, 1.0)
}

/// Write a complete scene directory: `sparse/` with the truth model in
/// binary format and `images/` with one binary PGM per frame.
pub fn write_scene(scene: &SynthScene, dir: &Path) -> Result<(), SynthError> {
    let sparse = dir.join("sparse");
    let images = dir.join("images");
    for d in [&sparse, &images] {
        std::fs::create_dir_all(d)
            .map_err(|e| SynthError::Io { path: d.display().to_string(), source: e })?;
    }
    colmap::write_model(&scene.truth, &sparse, ModelFormat::Binary)?;
    for (id, frame) in &scene.frames {
        let path = images.join(&scene.truth.images[id].name);
        write_pgm(frame, &path)?;
    }
    Ok(())
}

/// Binary (P5) PGM, 8-bit.
pub fn write_pgm(frame: &Array2<u8>, path: &Path) -> Result<(), SynthError> {
    let io_err = |e| SynthError::Io { path: path.display().to_string(), source: e };
    let (h, w) = frame.dim();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    (|| -> std::io::Result<()> {
        write!(f, "P5\n{w} {h}\n255\n")?;
        f.write_all(frame.as_slice().unwrap())
    })()
    .map_err(io_err)
}

pub fn read_pgm(path: &Path) -> Result<Array2<u8>, SynthError> {
    let io_err = |e| SynthError::Io { path: path.display().to_string(), source: e };
    let data = std::fs::read(path).map_err(io_err)?;
    let bad = || SynthError::Io {
        path: path.display().to_string(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, "not an 8-bit binary PGM"),
    };
    // header: magic, width, height, maxval as whitespace-separated tokens
    let mut pos = 0usize;
    let mut tokens = Vec::new();
    while tokens.len() < 4 && pos < data.len() {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        tokens.push(std::str::from_utf8(&data[start..pos]).map_err(|_| bad())?);
    }
    if tokens.len() != 4 || tokens[0] != "P5" || tokens[3] != "255" {
        return Err(bad());
    }
    let w: usize = tokens[1].parse().map_err(|_| bad())?;
    let h: usize = tokens[2].parse().map_err(|_| bad())?;
    pos += 1; // single whitespace after maxval
    if data.len() < pos + w * h {
        return Err(bad());
    }
    Array2::from_shape_vec((h, w), data[pos..pos + w * h].to_vec()).map_err(|_| bad())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tracks;

    fn small_config() -> SceneConfig {
        SceneConfig {
            landmark_count: 120,
            frame_count: 8,
            frame_size: 96,
            calibration: [43.0, 43.0, 47.5, 47.5, 0.02, -0.005, 0.001, 0.0],
            ..Default::default()
        }
    }

    #[test]
    fn truth_model_validates_clean() {
        let scene = generate_scene(&small_config(), 1).unwrap();
        assert!(colmap::validate_model(&scene.truth).is_empty());
    }

    #[test]
    fn truth_model_reprojects_exactly() {
        let scene = generate_scene(&small_config(), 2).unwrap();
        let report = geometry::reprojection_errors(&scene.truth).unwrap();
        assert!(report.flagged.is_empty());
        for (_, e) in report.errors {
            assert!(e < 1e-9, "error {e}");
        }
    }

    #[test]
    fn zero_dropout_keeps_every_visible_observation() {
        let scene = generate_scene(&small_config(), 3).unwrap();
        // every observation in the model reprojects exactly and every
        // correspondence pair coordinate equals a recorded observation
        let frame_order: Vec<u32> = scene.truth.images.keys().copied().collect();
        let reps = tracks::reproject_all(&scene.truth, &frame_order).unwrap();
        for per_frame in &reps {
            for r in per_frame {
                // with dropout 0, in-bounds entries are all green
                if r.in_bounds {
                    assert!(r.observed, "point {} blue in frame {}", r.point3d_id, r.image_id);
                }
            }
        }
    }

    #[test]
    fn correspondences_match_track_module_output() {
        for (seed, dropout) in [(4u64, 0.0), (5, 0.3)] {
            let config = SceneConfig { dropout, ..small_config() };
            let scene = generate_scene(&config, seed).unwrap();
            let frame_order: Vec<u32> = scene.truth.images.keys().copied().collect();
            let reps = tracks::reproject_all(&scene.truth, &frame_order).unwrap();
            let rtracks = tracks::extract_reliable_tracks(&reps, &frame_order, 2);
            for ab in scene.correspondences.iter() {
                let from_tracks = tracks::correspondences(&rtracks, ab.image_a, ab.image_b).unwrap();
                let mut a: Vec<_> = ab.pairs.clone();
                let mut b: Vec<_> = from_tracks.pairs.clone();
                let key = |p: &([f64; 2], [f64; 2], u64)| p.2;
                a.sort_by_key(key);
                b.sort_by_key(key);
                // coordinates within fp noise: observations are exact
                // projections, so green and blue coordinates coincide
                assert_eq!(a.len(), b.len(), "pair ({}, {})", ab.image_a, ab.image_b);
                for (pa, pb) in a.iter().zip(&b) {
                    assert_eq!(pa.2, pb.2);
                    for k in 0..2 {
                        assert!((pa.0[k] - pb.0[k]).abs() < 1e-9);
                        assert!((pa.1[k] - pb.1[k]).abs() < 1e-9);
                    }
                }
            }
            // and no extra pairs on the tracks side
            let total_gt: usize = scene.correspondences.iter().map(|c| c.pairs.len()).sum();
            let mut total_tracks = 0;
            for i in 0..frame_order.len() {
                for j in (i + 1)..frame_order.len() {
                    total_tracks +=
                        tracks::correspondences(&rtracks, frame_order[i], frame_order[j])
                            .unwrap()
                            .pairs
                            .len();
                }
            }
            assert_eq!(total_gt, total_tracks);
        }
    }

    #[test]
    fn non_specular_pixels_below_threshold_specular_above() {
        let scene = generate_scene(&small_config(), 6).unwrap();
        for (id, frame) in &scene.frames {
            for ((y, x), &v) in frame.indexed_iter() {
                let inside = scene.blobs[id].iter().any(|b| b.contains(x as f64, y as f64));
                if inside {
                    assert!(v >= 180, "blob pixel {v} below threshold");
                } else {
                    assert!(v < 180, "texture pixel {v} reached threshold");
                }
            }
        }
    }

    #[test]
    fn determinism() {
        let a = generate_scene(&small_config(), 9).unwrap();
        let b = generate_scene(&small_config(), 9).unwrap();
        assert_eq!(a.truth, b.truth);
        assert_eq!(a.frames, b.frames);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = small_config();
        c.landmark_count = 4;
        assert!(matches!(generate_scene(&c, 0), Err(SynthError::TooFewLandmarks(4))));
        let mut c = small_config();
        c.dropout = 1.0;
        assert!(matches!(generate_scene(&c, 0), Err(SynthError::BadDropout(_))));
    }

    #[test]
    fn scene_directory_round_trips() {
        let scene = generate_scene(&small_config(), 10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_scene(&scene, dir.path()).unwrap();
        let model =
            colmap::read_model(&dir.path().join("sparse"), ModelFormat::Binary).unwrap();
        assert_eq!(model, scene.truth);
        let first = scene.truth.images.values().next().unwrap();
        let img = read_pgm(&dir.path().join("images").join(&first.name)).unwrap();
        assert_eq!(img, scene.frames[&first.id]);
    }

    #[test]
    fn frames_carry_texture() {
        // the default amplitude must give the descriptors something to
        // learn: non-trivial variance away from blobs
        let scene = generate_scene(&small_config(), 11).unwrap();
        let f = scene.frames.values().next().unwrap();
        let vals: Vec<f64> = f.iter().map(|&v| v as f64).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(var > 100.0, "variance {var}");
    }
}
