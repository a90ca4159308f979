//! Reading, writing and validation of COLMAP sparse-model directories.
//!
//! Both the binary and the text layout are supported. Binary files are
//! little-endian; the text files are whitespace separated with `#` comment
//! lines. A model directory holds `cameras.{bin|txt}`, `images.{bin|txt}`
//! and `points3D.{bin|txt}` in one consistent format.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

/// Sentinel for "observation not linked to a 3D point" in binary streams.
pub const INVALID_POINT3D_ID: u64 = u64::MAX;

#[derive(Debug, Error)]
pub enum ColmapError {
    #[error("missing model file: {0}")]
    MissingFile(String),
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("truncated stream in {0}")]
    Truncated(String),
    #[error("unknown camera model id {id} (camera {camera_id})")]
    UnknownCameraModel { id: i32, camera_id: u32 },
    #[error("unknown camera model name {0:?}")]
    UnknownCameraModelName(String),
    #[error("parse error in {path} line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("dangling reference: {0}")]
    DanglingReference(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
}

/// The camera models accepted by this toolkit. Any other COLMAP model id is
/// a hard parse error; silently skipping a camera would corrupt every
/// projection downstream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CameraModel {
    Pinhole,
    SimpleRadial,
    OpencvFisheye,
}

impl CameraModel {
    /// COLMAP's numeric model id.
    pub fn id(self) -> i32 {
        match self {
            CameraModel::Pinhole => 1,
            CameraModel::SimpleRadial => 2,
            CameraModel::OpencvFisheye => 5,
        }
    }

    pub fn from_id(id: i32) -> Option<Self> {
        match id {
            1 => Some(CameraModel::Pinhole),
            2 => Some(CameraModel::SimpleRadial),
            5 => Some(CameraModel::OpencvFisheye),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CameraModel::Pinhole => "PINHOLE",
            CameraModel::SimpleRadial => "SIMPLE_RADIAL",
            CameraModel::OpencvFisheye => "OPENCV_FISHEYE",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "PINHOLE" => Some(CameraModel::Pinhole),
            "SIMPLE_RADIAL" => Some(CameraModel::SimpleRadial),
            "OPENCV_FISHEYE" => Some(CameraModel::OpencvFisheye),
            _ => None,
        }
    }

    /// Number of intrinsic parameters.
    pub fn arity(self) -> usize {
        match self {
            CameraModel::Pinhole => 4,        // fx fy cx cy
            CameraModel::SimpleRadial => 4,   // f cx cy k
            CameraModel::OpencvFisheye => 8,  // fx fy cx cy k1 k2 k3 k4
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub id: u32,
    pub model: CameraModel,
    pub width: u64,
    pub height: u64,
    pub params: Vec<f64>,
}

impl Camera {
    pub fn fx(&self) -> f64 {
        self.params[0]
    }
    pub fn fy(&self) -> f64 {
        match self.model {
            CameraModel::SimpleRadial => self.params[0],
            _ => self.params[1],
        }
    }
    pub fn cx(&self) -> f64 {
        match self.model {
            CameraModel::SimpleRadial => self.params[1],
            _ => self.params[2],
        }
    }
    pub fn cy(&self) -> f64 {
        match self.model {
            CameraModel::SimpleRadial => self.params[2],
            _ => self.params[3],
        }
    }
}

/// One 2D observation in an image: subpixel location plus the 3D point it
/// belongs to, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub xy: [f64; 2],
    pub point3d_id: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: u32,
    pub name: String,
    /// World-to-camera rotation, scalar-first unit quaternion (w, x, y, z).
    pub rotation: [f64; 4],
    /// Translation in the camera frame: p_cam = R * p_world + t.
    pub translation: [f64; 3],
    pub camera_id: u32,
    pub observations: Vec<Observation>,
}

impl ImageRecord {
    pub fn quat_norm(&self) -> f64 {
        self.rotation.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Point3D {
    pub id: u64,
    pub xyz: [f64; 3],
    pub color: [u8; 3],
    /// Mean reprojection error in pixels as recorded by the reconstruction.
    pub error: f64,
    /// (image_id, observation index) pairs.
    pub track: Vec<(u32, u32)>,
}

/// A full sparse reconstruction. Immutable after construction; maps are
/// ordered by id so serialization is deterministic.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseModel {
    pub cameras: BTreeMap<u32, Camera>,
    pub images: BTreeMap<u32, ImageRecord>,
    pub points: BTreeMap<u64, Point3D>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelFormat {
    Binary,
    Text,
    Auto,
}

fn pick_file(dir: &Path, stem: &str, format: ModelFormat) -> Result<(std::path::PathBuf, bool), ColmapError> {
    let bin = dir.join(format!("{stem}.bin"));
    let txt = dir.join(format!("{stem}.txt"));
    match format {
        ModelFormat::Binary => {
            if bin.exists() {
                Ok((bin, true))
            } else {
                Err(ColmapError::MissingFile(bin.display().to_string()))
            }
        }
        ModelFormat::Text => {
            if txt.exists() {
                Ok((txt, false))
            } else {
                Err(ColmapError::MissingFile(txt.display().to_string()))
            }
        }
        ModelFormat::Auto => {
            if bin.exists() {
                Ok((bin, true))
            } else if txt.exists() {
                Ok((txt, false))
            } else {
                Err(ColmapError::MissingFile(format!(
                    "{} (neither .bin nor .txt)",
                    dir.join(stem).display()
                )))
            }
        }
    }
}

/// Read a sparse model directory. `Auto` prefers binary when both exist.
pub fn read_model(dir: &Path, format: ModelFormat) -> Result<SparseModel, ColmapError> {
    let (cam_path, cam_bin) = pick_file(dir, "cameras", format)?;
    let (img_path, img_bin) = pick_file(dir, "images", format)?;
    let (pts_path, pts_bin) = pick_file(dir, "points3D", format)?;

    let cameras = if cam_bin {
        read_cameras_bin(&cam_path)?
    } else {
        read_cameras_txt(&cam_path)?
    };
    let images = if img_bin {
        read_images_bin(&img_path)?
    } else {
        read_images_txt(&img_path)?
    };
    let points = if pts_bin {
        read_points_bin(&pts_path)?
    } else {
        read_points_txt(&pts_path)?
    };

    let model = SparseModel {
        cameras,
        images,
        points,
    };
    check_cross_links(&model)?;
    Ok(model)
}

/// Write a sparse model directory. The model must pass [`validate_model`].
pub fn write_model(model: &SparseModel, dir: &Path, format: ModelFormat) -> Result<(), ColmapError> {
    let violations = validate_model(model);
    if !violations.is_empty() {
        return Err(ColmapError::InvalidModel(violations.join("; ")));
    }
    std::fs::create_dir_all(dir).map_err(|e| ColmapError::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    match format {
        ModelFormat::Binary | ModelFormat::Auto => {
            write_cameras_bin(model, &dir.join("cameras.bin"))?;
            write_images_bin(model, &dir.join("images.bin"))?;
            write_points_bin(model, &dir.join("points3D.bin"))?;
        }
        ModelFormat::Text => {
            write_cameras_txt(model, &dir.join("cameras.txt"))?;
            write_images_txt(model, &dir.join("images.txt"))?;
            write_points_txt(model, &dir.join("points3D.txt"))?;
        }
    }
    Ok(())
}

/// Check every type invariant; returns one human-readable line per
/// violation. An empty list means the model is consistent.
pub fn validate_model(model: &SparseModel) -> Vec<String> {
    let mut v = Vec::new();

    for cam in model.cameras.values() {
        if cam.params.len() != cam.model.arity() {
            v.push(format!(
                "camera {}: model {} expects {} params, found {}",
                cam.id,
                cam.model.name(),
                cam.model.arity(),
                cam.params.len()
            ));
        }
        if cam.width == 0 || cam.height == 0 {
            v.push(format!("camera {}: zero width or height", cam.id));
        }
        if cam.fx() <= 0.0 || cam.fy() <= 0.0 {
            v.push(format!("camera {}: non-positive focal length", cam.id));
        }
    }

    let mut names = std::collections::HashSet::new();
    for img in model.images.values() {
        if !names.insert(img.name.as_str()) {
            v.push(format!("image {}: duplicate name {:?}", img.id, img.name));
        }
        if (img.quat_norm() - 1.0).abs() > 1e-9 {
            v.push(format!(
                "image {}: quaternion norm {} deviates from 1",
                img.id,
                img.quat_norm()
            ));
        }
        if !model.cameras.contains_key(&img.camera_id) {
            v.push(format!(
                "image {}: references missing camera {}",
                img.id, img.camera_id
            ));
        }
        for (obs_idx, obs) in img.observations.iter().enumerate() {
            if let Some(pid) = obs.point3d_id {
                match model.points.get(&pid) {
                    None => v.push(format!(
                        "image {} obs {}: references missing point {}",
                        img.id, obs_idx, pid
                    )),
                    Some(p) => {
                        if !p.track.contains(&(img.id, obs_idx as u32)) {
                            v.push(format!(
                                "image {} obs {}: point {} track lacks back-reference",
                                img.id, obs_idx, pid
                            ));
                        }
                    }
                }
            }
        }
    }

    for p in model.points.values() {
        if p.track.len() < 2 {
            v.push(format!("point {}: track length {} < 2", p.id, p.track.len()));
        }
        if p.error < 0.0 {
            v.push(format!("point {}: negative error {}", p.id, p.error));
        }
        for &(img_id, obs_idx) in &p.track {
            match model.images.get(&img_id) {
                None => v.push(format!(
                    "point {}: track references missing image {}",
                    p.id, img_id
                )),
                Some(img) => match img.observations.get(obs_idx as usize) {
                    None => v.push(format!(
                        "point {}: track references obs {} of image {} which has only {}",
                        p.id,
                        obs_idx,
                        img_id,
                        img.observations.len()
                    )),
                    Some(obs) => {
                        if obs.point3d_id != Some(p.id) {
                            v.push(format!(
                                "point {}: image {} obs {} does not point back (has {:?})",
                                p.id, img_id, obs_idx, obs.point3d_id
                            ));
                        }
                    }
                },
            }
        }
    }

    v
}

fn check_cross_links(model: &SparseModel) -> Result<(), ColmapError> {
    for img in model.images.values() {
        if !model.cameras.contains_key(&img.camera_id) {
            return Err(ColmapError::DanglingReference(format!(
                "image {} references camera {}",
                img.id, img.camera_id
            )));
        }
        for (obs_idx, obs) in img.observations.iter().enumerate() {
            if let Some(pid) = obs.point3d_id {
                if !model.points.contains_key(&pid) {
                    return Err(ColmapError::DanglingReference(format!(
                        "image {} obs {} references point {}",
                        img.id, obs_idx, pid
                    )));
                }
            }
        }
    }
    for p in model.points.values() {
        for &(img_id, obs_idx) in &p.track {
            let img = model.images.get(&img_id).ok_or_else(|| {
                ColmapError::DanglingReference(format!(
                    "point {} track references image {}",
                    p.id, img_id
                ))
            })?;
            if img.observations.len() <= obs_idx as usize {
                return Err(ColmapError::DanglingReference(format!(
                    "point {} track references obs {} of image {}",
                    p.id, obs_idx, img_id
                )));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// binary readers

fn open(path: &Path) -> Result<BufReader<File>, ColmapError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| ColmapError::Io {
            path: path.display().to_string(),
            source: e,
        })
}

fn trunc(path: &Path) -> ColmapError {
    ColmapError::Truncated(path.display().to_string())
}

fn read_cameras_bin(path: &Path) -> Result<BTreeMap<u32, Camera>, ColmapError> {
    let mut r = open(path)?;
    let count = r.read_u64::<LittleEndian>().map_err(|_| trunc(path))?;
    let mut cameras = BTreeMap::new();
    for _ in 0..count {
        let id = r.read_u32::<LittleEndian>().map_err(|_| trunc(path))?;
        let model_id = r.read_i32::<LittleEndian>().map_err(|_| trunc(path))?;
        let model = CameraModel::from_id(model_id)
            .ok_or(ColmapError::UnknownCameraModel { id: model_id, camera_id: id })?;
        let width = r.read_u64::<LittleEndian>().map_err(|_| trunc(path))?;
        let height = r.read_u64::<LittleEndian>().map_err(|_| trunc(path))?;
        let mut params = Vec::with_capacity(model.arity());
        for _ in 0..model.arity() {
            params.push(r.read_f64::<LittleEndian>().map_err(|_| trunc(path))?);
        }
        cameras.insert(id, Camera { id, model, width, height, params });
    }
    Ok(cameras)
}

fn read_images_bin(path: &Path) -> Result<BTreeMap<u32, ImageRecord>, ColmapError> {
    let mut r = open(path)?;
    let count = r.read_u64::<LittleEndian>().map_err(|_| trunc(path))?;
    let mut images = BTreeMap::new();
    for _ in 0..count {
        let id = r.read_u32::<LittleEndian>().map_err(|_| trunc(path))?;
        let mut rotation = [0.0; 4];
        for q in &mut rotation {
            *q = r.read_f64::<LittleEndian>().map_err(|_| trunc(path))?;
        }
        let mut translation = [0.0; 3];
        for t in &mut translation {
            *t = r.read_f64::<LittleEndian>().map_err(|_| trunc(path))?;
        }
        let camera_id = r.read_u32::<LittleEndian>().map_err(|_| trunc(path))?;
        let mut name_bytes = Vec::new();
        loop {
            let b = r.read_u8().map_err(|_| trunc(path))?;
            if b == 0 {
                break;
            }
            name_bytes.push(b);
        }
        let name = String::from_utf8(name_bytes).map_err(|e| ColmapError::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: format!("image name not utf-8: {e}"),
        })?;
        let num_obs = r.read_u64::<LittleEndian>().map_err(|_| trunc(path))?;
        let mut observations = Vec::with_capacity(num_obs as usize);
        for _ in 0..num_obs {
            let x = r.read_f64::<LittleEndian>().map_err(|_| trunc(path))?;
            let y = r.read_f64::<LittleEndian>().map_err(|_| trunc(path))?;
            let pid = r.read_u64::<LittleEndian>().map_err(|_| trunc(path))?;
            observations.push(Observation {
                xy: [x, y],
                point3d_id: (pid != INVALID_POINT3D_ID).then_some(pid),
            });
        }
        images.insert(
            id,
            ImageRecord { id, name, rotation, translation, camera_id, observations },
        );
    }
    Ok(images)
}

fn read_points_bin(path: &Path) -> Result<BTreeMap<u64, Point3D>, ColmapError> {
    let mut r = open(path)?;
    let count = r.read_u64::<LittleEndian>().map_err(|_| trunc(path))?;
    let mut points = BTreeMap::new();
    for _ in 0..count {
        let id = r.read_u64::<LittleEndian>().map_err(|_| trunc(path))?;
        let mut xyz = [0.0; 3];
        for c in &mut xyz {
            *c = r.read_f64::<LittleEndian>().map_err(|_| trunc(path))?;
        }
        let mut color = [0u8; 3];
        r.read_exact(&mut color).map_err(|_| trunc(path))?;
        let error = r.read_f64::<LittleEndian>().map_err(|_| trunc(path))?;
        let track_len = r.read_u64::<LittleEndian>().map_err(|_| trunc(path))?;
        let mut track = Vec::with_capacity(track_len as usize);
        for _ in 0..track_len {
            let img = r.read_u32::<LittleEndian>().map_err(|_| trunc(path))?;
            let obs = r.read_u32::<LittleEndian>().map_err(|_| trunc(path))?;
            track.push((img, obs));
        }
        points.insert(id, Point3D { id, xyz, color, error, track });
    }
    Ok(points)
}

// ---------------------------------------------------------------------------
// binary writers

fn create(path: &Path) -> Result<BufWriter<File>, ColmapError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| ColmapError::Io {
            path: path.display().to_string(),
            source: e,
        })
}

fn wio(path: &Path, e: std::io::Error) -> ColmapError {
    ColmapError::Io {
        path: path.display().to_string(),
        source: e,
    }
}

fn write_cameras_bin(model: &SparseModel, path: &Path) -> Result<(), ColmapError> {
    let mut w = create(path)?;
    let e = |err| wio(path, err);
    w.write_u64::<LittleEndian>(model.cameras.len() as u64).map_err(e)?;
    for cam in model.cameras.values() {
        w.write_u32::<LittleEndian>(cam.id).map_err(e)?;
        w.write_i32::<LittleEndian>(cam.model.id()).map_err(e)?;
        w.write_u64::<LittleEndian>(cam.width).map_err(e)?;
        w.write_u64::<LittleEndian>(cam.height).map_err(e)?;
        for &p in &cam.params {
            w.write_f64::<LittleEndian>(p).map_err(e)?;
        }
    }
    Ok(())
}

fn write_images_bin(model: &SparseModel, path: &Path) -> Result<(), ColmapError> {
    let mut w = create(path)?;
    let e = |err| wio(path, err);
    w.write_u64::<LittleEndian>(model.images.len() as u64).map_err(e)?;
    for img in model.images.values() {
        w.write_u32::<LittleEndian>(img.id).map_err(e)?;
        for &q in &img.rotation {
            w.write_f64::<LittleEndian>(q).map_err(e)?;
        }
        for &t in &img.translation {
            w.write_f64::<LittleEndian>(t).map_err(e)?;
        }
        w.write_u32::<LittleEndian>(img.camera_id).map_err(e)?;
        w.write_all(img.name.as_bytes()).map_err(e)?;
        w.write_u8(0).map_err(e)?;
        w.write_u64::<LittleEndian>(img.observations.len() as u64).map_err(e)?;
        for obs in &img.observations {
            w.write_f64::<LittleEndian>(obs.xy[0]).map_err(e)?;
            w.write_f64::<LittleEndian>(obs.xy[1]).map_err(e)?;
            w.write_u64::<LittleEndian>(obs.point3d_id.unwrap_or(INVALID_POINT3D_ID))
                .map_err(e)?;
        }
    }
    Ok(())
}

fn write_points_bin(model: &SparseModel, path: &Path) -> Result<(), ColmapError> {
    let mut w = create(path)?;
    let e = |err| wio(path, err);
    w.write_u64::<LittleEndian>(model.points.len() as u64).map_err(e)?;
    for p in model.points.values() {
        w.write_u64::<LittleEndian>(p.id).map_err(e)?;
        for &c in &p.xyz {
            w.write_f64::<LittleEndian>(c).map_err(e)?;
        }
        w.write_all(&p.color).map_err(e)?;
        w.write_f64::<LittleEndian>(p.error).map_err(e)?;
        w.write_u64::<LittleEndian>(p.track.len() as u64).map_err(e)?;
        for &(img, obs) in &p.track {
            w.write_u32::<LittleEndian>(img).map_err(e)?;
            w.write_u32::<LittleEndian>(obs).map_err(e)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// text readers

/// Iterate non-comment, non-empty lines with their 1-based line numbers.
fn text_lines(path: &Path) -> Result<Vec<(usize, String)>, ColmapError> {
    let mut content = String::new();
    open(path)?
        .read_to_string(&mut content)
        .map_err(|e| wio(path, e))?;
    Ok(content
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.to_string()))
        .filter(|(_, l)| {
            let t = l.trim();
            !t.is_empty() && !t.starts_with('#')
        })
        .collect())
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> ColmapError {
    ColmapError::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn read_cameras_txt(path: &Path) -> Result<BTreeMap<u32, Camera>, ColmapError> {
    let mut cameras = BTreeMap::new();
    for (lineno, line) in text_lines(path)? {
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() < 4 {
            return Err(parse_err(path, lineno, "expected CAMERA_ID MODEL WIDTH HEIGHT PARAMS..."));
        }
        let id: u32 = tok[0]
            .parse()
            .map_err(|_| parse_err(path, lineno, "bad camera id"))?;
        let model = CameraModel::from_name(tok[1])
            .ok_or_else(|| ColmapError::UnknownCameraModelName(tok[1].to_string()))?;
        let width: u64 = tok[2]
            .parse()
            .map_err(|_| parse_err(path, lineno, "bad width"))?;
        let height: u64 = tok[3]
            .parse()
            .map_err(|_| parse_err(path, lineno, "bad height"))?;
        let params: Vec<f64> = tok[4..]
            .iter()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| parse_err(path, lineno, "bad camera parameter"))?;
        if params.len() != model.arity() {
            return Err(parse_err(
                path,
                lineno,
                format!("model {} expects {} params, found {}", model.name(), model.arity(), params.len()),
            ));
        }
        cameras.insert(id, Camera { id, model, width, height, params });
    }
    Ok(cameras)
}

fn read_images_txt(path: &Path) -> Result<BTreeMap<u32, ImageRecord>, ColmapError> {
    // An image with zero observations has an empty second line, so the
    // observation line is the raw successor of the header, not the next
    // non-blank line.
    let mut content = String::new();
    open(path)?
        .read_to_string(&mut content)
        .map_err(|e| wio(path, e))?;
    let raw: Vec<&str> = content.lines().collect();

    let mut images = BTreeMap::new();
    let mut i = 0;
    while i < raw.len() {
        let t = raw[i].trim();
        if t.is_empty() || t.starts_with('#') {
            i += 1;
            continue;
        }
        let lineno = &(i + 1);
        let header = t;
        if i + 1 >= raw.len() {
            return Err(parse_err(path, i + 1, "missing observation line"));
        }
        let obs_lineno = &(i + 2);
        let obs_line = raw[i + 1];
        i += 2;
        let tok: Vec<&str> = header.split_whitespace().collect();
        if tok.len() < 10 {
            return Err(parse_err(path, *lineno, "expected IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME"));
        }
        let id: u32 = tok[0]
            .parse()
            .map_err(|_| parse_err(path, *lineno, "bad image id"))?;
        let mut rotation = [0.0; 4];
        let mut translation = [0.0; 3];
        for (i, q) in rotation.iter_mut().enumerate() {
            *q = tok[1 + i]
                .parse()
                .map_err(|_| parse_err(path, *lineno, "bad quaternion component"))?;
        }
        for (i, t) in translation.iter_mut().enumerate() {
            *t = tok[5 + i]
                .parse()
                .map_err(|_| parse_err(path, *lineno, "bad translation component"))?;
        }
        let camera_id: u32 = tok[8]
            .parse()
            .map_err(|_| parse_err(path, *lineno, "bad camera id"))?;
        let name = tok[9..].join(" ");

        let otok: Vec<&str> = obs_line.split_whitespace().collect();
        if otok.len() % 3 != 0 {
            return Err(parse_err(path, *obs_lineno, "observations must come in (X Y POINT3D_ID) triples"));
        }
        let mut observations = Vec::with_capacity(otok.len() / 3);
        for t in otok.chunks(3) {
            let x: f64 = t[0]
                .parse()
                .map_err(|_| parse_err(path, *obs_lineno, "bad observation x"))?;
            let y: f64 = t[1]
                .parse()
                .map_err(|_| parse_err(path, *obs_lineno, "bad observation y"))?;
            let pid: i64 = t[2]
                .parse()
                .map_err(|_| parse_err(path, *obs_lineno, "bad point3d id"))?;
            observations.push(Observation {
                xy: [x, y],
                point3d_id: (pid >= 0).then_some(pid as u64),
            });
        }
        images.insert(
            id,
            ImageRecord { id, name, rotation, translation, camera_id, observations },
        );
    }
    Ok(images)
}

fn read_points_txt(path: &Path) -> Result<BTreeMap<u64, Point3D>, ColmapError> {
    let mut points = BTreeMap::new();
    for (lineno, line) in text_lines(path)? {
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() < 8 || (tok.len() - 8) % 2 != 0 {
            return Err(parse_err(path, lineno, "expected POINT3D_ID X Y Z R G B ERROR (IMAGE_ID OBS_IDX)..."));
        }
        let id: u64 = tok[0]
            .parse()
            .map_err(|_| parse_err(path, lineno, "bad point id"))?;
        let mut xyz = [0.0; 3];
        for (i, c) in xyz.iter_mut().enumerate() {
            *c = tok[1 + i]
                .parse()
                .map_err(|_| parse_err(path, lineno, "bad coordinate"))?;
        }
        let mut color = [0u8; 3];
        for (i, c) in color.iter_mut().enumerate() {
            *c = tok[4 + i]
                .parse()
                .map_err(|_| parse_err(path, lineno, "bad color byte"))?;
        }
        let error: f64 = tok[7]
            .parse()
            .map_err(|_| parse_err(path, lineno, "bad error"))?;
        let mut track = Vec::with_capacity((tok.len() - 8) / 2);
        for t in tok[8..].chunks(2) {
            let img: u32 = t[0]
                .parse()
                .map_err(|_| parse_err(path, lineno, "bad track image id"))?;
            let obs: u32 = t[1]
                .parse()
                .map_err(|_| parse_err(path, lineno, "bad track obs index"))?;
            track.push((img, obs));
        }
        points.insert(id, Point3D { id, xyz, color, error, track });
    }
    Ok(points)
}

// ---------------------------------------------------------------------------
// text writers
//
// Floats use Rust's shortest round-trip formatting, so text round trips are
// value-exact, comfortably inside the 1e-9 contract.

fn write_cameras_txt(model: &SparseModel, path: &Path) -> Result<(), ColmapError> {
    let mut out = String::new();
    out.push_str("# Camera list with one line of data per camera:\n");
    out.push_str("#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n");
    let _ = writeln!(out, "# Number of cameras: {}", model.cameras.len());
    for cam in model.cameras.values() {
        let _ = write!(out, "{} {} {} {}", cam.id, cam.model.name(), cam.width, cam.height);
        for &p in &cam.params {
            let _ = write!(out, " {p}");
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| wio(path, e))
}

fn write_images_txt(model: &SparseModel, path: &Path) -> Result<(), ColmapError> {
    let mut out = String::new();
    out.push_str("# Image list with two lines of data per image:\n");
    out.push_str("#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n");
    out.push_str("#   POINTS2D[] as (X, Y, POINT3D_ID)\n");
    let _ = writeln!(out, "# Number of images: {}", model.images.len());
    for img in model.images.values() {
        let [qw, qx, qy, qz] = img.rotation;
        let [tx, ty, tz] = img.translation;
        let _ = writeln!(
            out,
            "{} {qw} {qx} {qy} {qz} {tx} {ty} {tz} {} {}",
            img.id, img.camera_id, img.name
        );
        let mut first = true;
        for obs in &img.observations {
            if !first {
                out.push(' ');
            }
            first = false;
            let pid = obs.point3d_id.map(|p| p as i64).unwrap_or(-1);
            let _ = write!(out, "{} {} {}", obs.xy[0], obs.xy[1], pid);
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| wio(path, e))
}

fn write_points_txt(model: &SparseModel, path: &Path) -> Result<(), ColmapError> {
    let mut out = String::new();
    out.push_str("# 3D point list with one line of data per point:\n");
    out.push_str("#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n");
    let _ = writeln!(out, "# Number of points: {}", model.points.len());
    for p in model.points.values() {
        let [x, y, z] = p.xyz;
        let _ = write!(
            out,
            "{} {x} {y} {z} {} {} {} {}",
            p.id, p.color[0], p.color[1], p.color[2], p.error
        );
        for &(img, obs) in &p.track {
            let _ = write!(out, " {img} {obs}");
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| wio(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use byteorder::WriteBytesExt;
    use tempfile::tempdir;

    pub(crate) fn fisheye_camera(id: u32) -> Camera {
        Camera {
            id,
            model: CameraModel::OpencvFisheye,
            width: 1440,
            height: 1080,
            params: vec![730.0, 731.5, 720.0, 540.0, -0.01, 0.02, -0.003, 0.0005],
        }
    }

    /// A small consistent two-image model with one shared point.
    pub(crate) fn tiny_model() -> SparseModel {
        let mut model = SparseModel::default();
        model.cameras.insert(1, fisheye_camera(1));
        for id in [1u32, 2] {
            model.images.insert(
                id,
                ImageRecord {
                    id,
                    name: format!("frame_{id:04}.png"),
                    rotation: [1.0, 0.0, 0.0, 0.0],
                    translation: [0.0, 0.0, id as f64 * 0.1],
                    camera_id: 1,
                    observations: vec![
                        Observation { xy: [100.5, 200.25], point3d_id: Some(7) },
                        Observation { xy: [300.0, 400.0], point3d_id: None },
                    ],
                },
            );
        }
        model.points.insert(
            7,
            Point3D {
                id: 7,
                xyz: [0.1, -0.2, 1.5],
                color: [120, 80, 60],
                error: 0.42,
                track: vec![(1, 0), (2, 0)],
            },
        );
        model
    }

    #[test]
    fn validate_consistent_model_is_clean() {
        assert!(validate_model(&tiny_model()).is_empty());
    }

    #[test]
    fn validate_reports_missing_point() {
        let mut m = tiny_model();
        m.images.get_mut(&1).unwrap().observations[1].point3d_id = Some(99);
        let v = validate_model(&m);
        assert_eq!(v.len(), 1);
        assert!(v[0].contains("99"), "violation should name point 99: {}", v[0]);
    }

    #[test]
    fn validate_reports_bad_quaternion() {
        let mut m = tiny_model();
        m.images.get_mut(&2).unwrap().rotation = [1.1, 0.0, 0.0, 0.0];
        let v = validate_model(&m);
        assert_eq!(v.len(), 1);
        assert!(v[0].contains("image 2"));
    }

    #[test]
    fn hand_built_camera_bytes_parse() {
        // One OPENCV_FISHEYE camera, zero images, zero points, assembled
        // byte-by-byte from the binary layout.
        let dir = tempdir().unwrap();
        let mut cam_bytes = Vec::new();
        cam_bytes.write_u64::<LittleEndian>(1).unwrap();
        cam_bytes.write_u32::<LittleEndian>(1).unwrap(); // id
        cam_bytes.write_i32::<LittleEndian>(5).unwrap(); // OPENCV_FISHEYE
        cam_bytes.write_u64::<LittleEndian>(1440).unwrap();
        cam_bytes.write_u64::<LittleEndian>(1080).unwrap();
        let params = [730.0, 731.5, 720.0, 540.0, -0.01, 0.02, -0.003, 0.0005];
        for p in params {
            cam_bytes.write_f64::<LittleEndian>(p).unwrap();
        }
        std::fs::write(dir.path().join("cameras.bin"), &cam_bytes).unwrap();
        let empty_count = 0u64.to_le_bytes();
        std::fs::write(dir.path().join("images.bin"), empty_count).unwrap();
        std::fs::write(dir.path().join("points3D.bin"), empty_count).unwrap();

        let m = read_model(dir.path(), ModelFormat::Auto).unwrap();
        assert_eq!(m.cameras.len(), 1);
        assert_eq!(m.images.len(), 0);
        assert_eq!(m.points.len(), 0);
        let cam = &m.cameras[&1];
        assert_eq!(cam.model, CameraModel::OpencvFisheye);
        assert_eq!(cam.width, 1440);
        assert_eq!(cam.height, 1080);
        assert_eq!(cam.params, params.to_vec());
    }

    #[test]
    fn empty_directory_is_missing_file() {
        let dir = tempdir().unwrap();
        match read_model(dir.path(), ModelFormat::Auto) {
            Err(ColmapError::MissingFile(_)) => {}
            other => panic!("expected MissingFile, got {other:?}"),
        }
    }

    #[test]
    fn unknown_camera_model_is_hard_error() {
        let dir = tempdir().unwrap();
        let mut cam_bytes = Vec::new();
        cam_bytes.write_u64::<LittleEndian>(1).unwrap();
        cam_bytes.write_u32::<LittleEndian>(3).unwrap();
        cam_bytes.write_i32::<LittleEndian>(4).unwrap(); // OPENCV: unsupported
        cam_bytes.write_u64::<LittleEndian>(640).unwrap();
        cam_bytes.write_u64::<LittleEndian>(480).unwrap();
        std::fs::write(dir.path().join("cameras.bin"), &cam_bytes).unwrap();
        std::fs::write(dir.path().join("images.bin"), 0u64.to_le_bytes()).unwrap();
        std::fs::write(dir.path().join("points3D.bin"), 0u64.to_le_bytes()).unwrap();
        match read_model(dir.path(), ModelFormat::Binary) {
            Err(ColmapError::UnknownCameraModel { id: 4, camera_id: 3 }) => {}
            other => panic!("expected UnknownCameraModel, got {other:?}"),
        }
    }

    #[test]
    fn binary_round_trip_exact() {
        let dir = tempdir().unwrap();
        let m = tiny_model();
        write_model(&m, dir.path(), ModelFormat::Binary).unwrap();
        let back = read_model(dir.path(), ModelFormat::Binary).unwrap();
        assert_eq!(m, back);

        // byte idempotence
        let dir2 = tempdir().unwrap();
        write_model(&back, dir2.path(), ModelFormat::Binary).unwrap();
        for f in ["cameras.bin", "images.bin", "points3D.bin"] {
            let a = std::fs::read(dir.path().join(f)).unwrap();
            let b = std::fs::read(dir2.path().join(f)).unwrap();
            assert_eq!(a, b, "{f} differs after re-serialization");
        }
    }

    #[test]
    fn text_round_trip_exact() {
        let dir = tempdir().unwrap();
        let m = tiny_model();
        write_model(&m, dir.path(), ModelFormat::Text).unwrap();
        let back = read_model(dir.path(), ModelFormat::Text).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn auto_prefers_binary() {
        let dir = tempdir().unwrap();
        let m = tiny_model();
        write_model(&m, dir.path(), ModelFormat::Binary).unwrap();
        let mut m2 = m.clone();
        m2.images.get_mut(&1).unwrap().name = "other.png".into();
        write_model(&m2, dir.path(), ModelFormat::Text).unwrap();
        let back = read_model(dir.path(), ModelFormat::Auto).unwrap();
        assert_eq!(back.images[&1].name, m.images[&1].name);
    }

    #[test]
    fn write_rejects_short_track() {
        let dir = tempdir().unwrap();
        let mut m = tiny_model();
        m.points.get_mut(&7).unwrap().track.truncate(1);
        m.images.get_mut(&2).unwrap().observations[0].point3d_id = None;
        match write_model(&m, dir.path(), ModelFormat::Binary) {
            Err(ColmapError::InvalidModel(msg)) => assert!(msg.contains("track length")),
            other => panic!("expected InvalidModel, got {other:?}"),
        }
    }

    #[test]
    fn empty_model_writes_headers_only() {
        let dir = tempdir().unwrap();
        let m = SparseModel::default();
        write_model(&m, dir.path(), ModelFormat::Binary).unwrap();
        for f in ["cameras.bin", "images.bin", "points3D.bin"] {
            let bytes = std::fs::read(dir.path().join(f)).unwrap();
            assert_eq!(bytes, 0u64.to_le_bytes());
        }
        let back = read_model(dir.path(), ModelFormat::Binary).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn text_parsing_tolerates_comments_and_whitespace() {
        let dir = tempdir().unwrap();
        std::fs::write(
            dir.path().join("cameras.txt"),
            "# comment\n\n  1   PINHOLE  640 480   500 500 320 240  \n",
        )
        .unwrap();
        std::fs::write(dir.path().join("images.txt"), "# empty\n").unwrap();
        std::fs::write(dir.path().join("points3D.txt"), "").unwrap();
        let m = read_model(dir.path(), ModelFormat::Text).unwrap();
        assert_eq!(m.cameras[&1].model, CameraModel::Pinhole);
        assert_eq!(m.cameras[&1].params, vec![500.0, 500.0, 320.0, 240.0]);
    }

    #[test]
    fn dangling_track_reference_is_read_error() {
        let dir = tempdir().unwrap();
        let m = tiny_model();
        write_model(&m, dir.path(), ModelFormat::Text).unwrap();
        // Corrupt: point 7 now references image 9.
        let pts = std::fs::read_to_string(dir.path().join("points3D.txt")).unwrap();
        std::fs::write(dir.path().join("points3D.txt"), pts.replace(" 2 0", " 9 0")).unwrap();
        match read_model(dir.path(), ModelFormat::Text) {
            Err(ColmapError::DanglingReference(msg)) => assert!(msg.contains("image 9")),
            other => panic!("expected DanglingReference, got {other:?}"),
        }
    }
}
