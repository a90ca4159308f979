//! Reliable-track extraction from a sparse reconstruction.
//!
//! Every 3D point is reprojected into every frame of the sequence. Frames
//! where the point was actually observed by the source reconstruction are
//! "green"; frames where it only reprojects are "blue". A reliable track is
//! the interval from the first green frame to the last green frame,
//! including interior blue frames; trailing blue frames are dropped. Green
//! entries carry the recorded 2D observation, blue entries the analytic
//! reprojection.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::colmap::SparseModel;
use crate::geometry::{project_fisheye, world_to_camera, GeometryError};

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("frame order references unregistered image {0}")]
    UnknownFrame(u32),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("correspondences need two distinct images, got {0} twice")]
    SameImage(u32),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("track file parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// One 3D point seen (or merely reprojected) in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Reprojection {
    pub image_id: u32,
    pub point3d_id: u64,
    /// Full-frame pixel coordinates: the recorded observation for green
    /// entries, the analytic reprojection for blue ones.
    pub xy: [f64; 2],
    /// Green = the source reconstruction observed the point here.
    pub observed: bool,
    pub in_bounds: bool,
}

/// The supervision unit: per-3D-point interval bounded by green frames.
#[derive(Debug, Clone, PartialEq)]
pub struct ReliableTrack {
    pub point3d_id: u64,
    /// Ordered by sequence position; first and last are observed.
    pub frames: Vec<(u32, [f64; 2], bool)>,
}

/// Pairwise correspondences induced by reliable tracks shared between two
/// images. Each track contributes at most one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    pub image_a: u32,
    pub image_b: u32,
    pub pairs: Vec<([f64; 2], [f64; 2], u64)>,
}

/// Reproject every 3D point into every frame of `frame_order`. Points behind
/// a camera yield no entry for that frame. Output is grouped per image, in
/// `frame_order`, each list ordered by point id.
pub fn reproject_all(
    model: &SparseModel,
    frame_order: &[u32],
) -> Result<Vec<Vec<Reprojection>>, TrackError> {
    for &id in frame_order {
        if !model.images.contains_key(&id) {
            return Err(TrackError::UnknownFrame(id));
        }
    }

    // (image_id, obs_idx in track) -> lookup table of observed points
    let mut observed: HashMap<(u32, u64), [f64; 2]> = HashMap::new();
    for p in model.points.values() {
        for &(img_id, obs_idx) in &p.track {
            let xy = model.images[&img_id].observations[obs_idx as usize].xy;
            observed.insert((img_id, p.id), xy);
        }
    }

    let mut out = Vec::with_capacity(frame_order.len());
    for &img_id in frame_order {
        let img = &model.images[&img_id];
        let cam = &model.cameras[&img.camera_id];
        let mut list = Vec::new();
        for p in model.points.values() {
            let pc = world_to_camera(img, p.xyz);
            let (xy, is_observed) = match observed.get(&(img_id, p.id)) {
                Some(&obs_xy) => {
                    // Green entries carry the recorded observation, but the
                    // point must still project in front of the camera.
                    if pc[2] <= 0.0 {
                        continue;
                    }
                    (obs_xy, true)
                }
                None => match project_fisheye(cam, pc) {
                    Ok(uv) => (uv, false),
                    Err(GeometryError::BehindCamera(_)) => continue,
                    Err(e) => return Err(e.into()),
                },
            };
            let in_bounds = xy[0] >= 0.0
                && xy[1] >= 0.0
                && xy[0] < cam.width as f64
                && xy[1] < cam.height as f64;
            list.push(Reprojection {
                image_id: img_id,
                point3d_id: p.id,
                xy,
                observed: is_observed,
                in_bounds,
            });
        }
        out.push(list);
    }
    Ok(out)
}

/// Extract reliable tracks: per point, the interval from first to last
/// observed frame, carrying every in-bounds reprojection in between. An
/// out-of-bounds frame interior to the interval splits the track at the gap;
/// each resulting segment must again be bounded by observed entries. Tracks
/// shorter than `min_length` are discarded.
pub fn extract_reliable_tracks(
    reprojections: &[Vec<Reprojection>],
    frame_order: &[u32],
    min_length: usize,
) -> Vec<ReliableTrack> {
    // point id -> per-frame entry aligned with frame_order
    let mut per_point: BTreeMap<u64, Vec<Option<&Reprojection>>> = BTreeMap::new();
    for (fi, list) in reprojections.iter().enumerate() {
        for r in list {
            per_point
                .entry(r.point3d_id)
                .or_insert_with(|| vec![None; frame_order.len()])
                [fi] = Some(r);
        }
    }

    let mut tracks = Vec::new();
    for (pid, entries) in per_point {
        // Split into runs of consecutive in-bounds frames, then trim each
        // run to its observed interval.
        let mut run: Vec<(u32, [f64; 2], bool)> = Vec::new();
        let flush = |run: &mut Vec<(u32, [f64; 2], bool)>, tracks: &mut Vec<ReliableTrack>| {
            let first = run.iter().position(|e| e.2);
            let last = run.iter().rposition(|e| e.2);
            if let (Some(first), Some(last)) = (first, last) {
                let frames: Vec<_> = run[first..=last].to_vec();
                if frames.len() >= min_length {
                    tracks.push(ReliableTrack { point3d_id: pid, frames });
                }
            }
            run.clear();
        };
        for (fi, entry) in entries.iter().enumerate() {
            match entry {
                Some(r) if r.in_bounds => run.push((frame_order[fi], r.xy, r.observed)),
                _ => flush(&mut run, &mut tracks),
            }
        }
        flush(&mut run, &mut tracks);
    }
    tracks
}

/// Correspondence pairs between two images over the given tracks: one pair
/// per track containing both images.
pub fn correspondences(
    tracks: &[ReliableTrack],
    image_a: u32,
    image_b: u32,
) -> Result<CorrespondenceSet, TrackError> {
    if image_a == image_b {
        return Err(TrackError::SameImage(image_a));
    }
    let mut pairs = Vec::new();
    for t in tracks {
        let xa = t.frames.iter().find(|f| f.0 == image_a);
        let xb = t.frames.iter().find(|f| f.0 == image_b);
        if let (Some(a), Some(b)) = (xa, xb) {
            pairs.push((a.1, b.1, t.point3d_id));
        }
    }
    Ok(CorrespondenceSet { image_a, image_b, pairs })
}

/// Write tracks to the text export format: one track per line,
/// `point3d_id  image_id x y observed  image_id x y observed ...`
/// with observed encoded as 1/0. Floats use shortest round-trip formatting.
pub fn write_tracks(tracks: &[ReliableTrack], path: &Path) -> Result<(), TrackError> {
    let mut out = String::new();
    out.push_str("# reliable tracks: POINT3D_ID (IMAGE_ID X Y OBSERVED)...\n");
    for t in tracks {
        let _ = write!(out, "{}", t.point3d_id);
        for (img, xy, obs) in &t.frames {
            let _ = write!(out, " {img} {} {} {}", xy[0], xy[1], u8::from(*obs));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| TrackError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn read_tracks(path: &Path) -> Result<Vec<ReliableTrack>, TrackError> {
    let content = std::fs::read_to_string(path).map_err(|e| TrackError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut tracks = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() < 1 + 4 || (tok.len() - 1) % 4 != 0 {
            return Err(TrackError::Parse {
                line: i + 1,
                msg: "expected POINT3D_ID then (IMAGE_ID X Y OBSERVED) quadruples".into(),
            });
        }
        let bad = |msg: &str| TrackError::Parse { line: i + 1, msg: msg.into() };
        let pid: u64 = tok[0].parse().map_err(|_| bad("bad point id"))?;
        let mut frames = Vec::with_capacity((tok.len() - 1) / 4);
        for q in tok[1..].chunks(4) {
            let img: u32 = q[0].parse().map_err(|_| bad("bad image id"))?;
            let x: f64 = q[1].parse().map_err(|_| bad("bad x"))?;
            let y: f64 = q[2].parse().map_err(|_| bad("bad y"))?;
            let obs: u8 = q[3].parse().map_err(|_| bad("bad observed flag"))?;
            frames.push((img, [x, y], obs != 0));
        }
        tracks.push(ReliableTrack { point3d_id: pid, frames });
    }
    Ok(tracks)
}
