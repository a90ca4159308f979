//! Reconstruction evaluation: eight quality metrics over a single sparse
//! model (precision, reconstructed-image fraction, point count, track
//! length, mean reprojection error overall and over the 10000 best points,
//! spatial spread, specular fraction) and four coverage metrics over a set
//! of submaps.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use crate::colmap::SparseModel;
use crate::geometry::{self, GeometryError};
use crate::refnet::Keypoint;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("image {0} has observations but no detections were supplied")]
    MissingDetections(u32),
    #[error("image {0} has observations but no frame pixels were supplied")]
    MissingFrame(u32),
    #[error("total image count {total} is below the model's image count {in_model}")]
    BadTotal { total: usize, in_model: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("report io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualityMetrics {
    /// Mean over images of the fraction of detections that made it into the
    /// point cloud.
    pub precision: f64,
    /// Registered images / total images fed to the reconstruction.
    pub reconstructed_images: f64,
    pub points3d: usize,
    /// Mean images per 3D point.
    pub track_length: f64,
    /// Mean per-point reprojection error, px.
    pub mae: f64,
    /// Same, over the 10000 smallest per-point errors (all, if fewer).
    pub mae_10k: f64,
    /// Mean over images of the fraction of occupied 16x16 grid cells.
    pub spread: f64,
    /// Fraction of reconstructed observations on pixels with intensity
    /// >= 180.
    pub specular: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageMetrics {
    /// Images registered in at least one submap.
    pub reconstructed: usize,
    pub reconstructed_pct: f64,
    pub reconstructions: usize,
    /// Mean registered-image count per submap.
    pub average_size: f64,
}

#[derive(Debug, Clone)]
pub struct MetricsOptions {
    /// Match tolerance linking a detection to a recorded observation, px.
    pub link_tolerance: f64,
    /// Grayscale threshold for the specular test, 0-255.
    pub specular_threshold: f64,
    /// Grid resolution for the spread metric.
    pub spread_grid: usize,
    /// Number of best points in the trimmed reprojection-error mean.
    pub mae_k: usize,
    /// Average precision over all input images rather than only the
    /// registered ones.
    pub precision_over_all_images: bool,
}

impl Default for MetricsOptions {
    fn default() -> Self {
        MetricsOptions {
            link_tolerance: 0.5,
            specular_threshold: 180.0,
            spread_grid: 16,
            mae_k: 10_000,
            precision_over_all_images: false,
        }
    }
}

/// Quality metrics plus per-image linkage diagnostics: observations that
/// matched no supplied detection within the tolerance.
pub fn quality_metrics(
    model: &SparseModel,
    detections: &BTreeMap<u32, Vec<Keypoint>>,
    frames: &BTreeMap<u32, Array2<u8>>,
    total_images: usize,
    options: &MetricsOptions,
) -> Result<(QualityMetrics, BTreeMap<u32, usize>), MetricsError> {
    if total_images < model.images.len() {
        return Err(MetricsError::BadTotal { total: total_images, in_model: model.images.len() });
    }

    // precision: per registered image, the fraction of its detections that
    // appear as reconstructed observations
    let mut link_failures: BTreeMap<u32, usize> = BTreeMap::new();
    let mut per_image_precision = Vec::new();
    for img in model.images.values() {
        let keypoints = detections
            .get(&img.id)
            .ok_or(MetricsError::MissingDetections(img.id))?;
        let reconstructed: Vec<[f64; 2]> = img
            .observations
            .iter()
            .filter(|o| o.point3d_id.is_some())
            .map(|o| o.xy)
            .collect();
        let tol = options.link_tolerance;
        let linked = |xy: [f64; 2], set: &[[f64; 2]]| {
            set.iter()
                .any(|o| (o[0] - xy[0]).abs() <= tol && (o[1] - xy[1]).abs() <= tol)
        };
        let hit = keypoints.iter().filter(|k| linked(k.xy, &reconstructed)).count();
        if !keypoints.is_empty() {
            per_image_precision.push(hit as f64 / keypoints.len() as f64);
        }
        // diagnostics: reconstructed observations with no matching detection
        let det_xy: Vec<[f64; 2]> = keypoints.iter().map(|k| k.xy).collect();
        let orphans = reconstructed.iter().filter(|&&o| !linked(o, &det_xy)).count();
        if orphans > 0 {
            link_failures.insert(img.id, orphans);
        }
    }
    let precision = if options.precision_over_all_images {
        // images outside the model contribute zero
        per_image_precision.iter().sum::<f64>() / total_images.max(1) as f64
    } else if per_image_precision.is_empty() {
        0.0
    } else {
        per_image_precision.iter().sum::<f64>() / per_image_precision.len() as f64
    };

    let reconstructed_images = model.images.len() as f64 / total_images.max(1) as f64;
    let points3d = model.points.len();
    let track_length = if points3d == 0 {
        0.0
    } else {
        model.points.values().map(|p| p.track.len() as f64).sum::<f64>() / points3d as f64
    };

    let report = geometry::reprojection_errors(model)?;
    let mut errors: Vec<f64> = report.errors.values().copied().collect();
    let mae = if errors.is_empty() {
        0.0
    } else {
        errors.iter().sum::<f64>() / errors.len() as f64
    };
    errors.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = options.mae_k.min(errors.len());
    let mae_10k = if k == 0 { 0.0 } else { errors[..k].iter().sum::<f64>() / k as f64 };

    // spread: per registered image, occupied cells of a g x g grid
    let g = options.spread_grid;
    let mut per_image_spread = Vec::new();
    for img in model.images.values() {
        let cam = &model.cameras[&img.camera_id];
        let (w, h) = (cam.width as f64, cam.height as f64);
        let mut occupied = vec![false; g * g];
        for o in &img.observations {
            if o.point3d_id.is_none() {
                continue;
            }
            let cx = ((o.xy[0] / w * g as f64).floor() as isize).clamp(0, g as isize - 1) as usize;
            let cy = ((o.xy[1] / h * g as f64).floor() as isize).clamp(0, g as isize - 1) as usize;
            occupied[cy * g + cx] = true;
        }
        per_image_spread
            .push(occupied.iter().filter(|&&c| c).count() as f64 / (g * g) as f64);
    }
    let spread = if per_image_spread.is_empty() {
        0.0
    } else {
        per_image_spread.iter().sum::<f64>() / per_image_spread.len() as f64
    };

    // specular: over every reconstructed observation, the frame pixel at
    // the rounded coordinates
    let mut spec_hits = 0usize;
    let mut spec_total = 0usize;
    for img in model.images.values() {
        let frame = frames.get(&img.id).ok_or(MetricsError::MissingFrame(img.id))?;
        let (h, w) = frame.dim();
        for o in &img.observations {
            if o.point3d_id.is_none() {
                continue;
            }
            let x = (o.xy[0].round() as isize).clamp(0, w as isize - 1) as usize;
            let y = (o.xy[1].round() as isize).clamp(0, h as isize - 1) as usize;
            spec_total += 1;
            if frame[[y, x]] as f64 >= options.specular_threshold {
                spec_hits += 1;
            }
        }
    }
    let specular = if spec_total == 0 { 0.0 } else { spec_hits as f64 / spec_total as f64 };

    Ok((
        QualityMetrics {
            precision,
            reconstructed_images,
            points3d,
            track_length,
            mae,
            mae_10k,
            spread,
            specular,
        },
        link_failures,
    ))
}

pub fn coverage_metrics(models: &[&SparseModel], total_frames: usize) -> CoverageMetrics {
    let mut union = std::collections::BTreeSet::new();
    let mut sizes = Vec::with_capacity(models.len());
    for m in models {
        sizes.push(m.images.len());
        union.extend(m.images.keys().copied());
    }
    let reconstructed = union.len();
    CoverageMetrics {
        reconstructed,
        reconstructed_pct: if total_frames == 0 {
            0.0
        } else {
            reconstructed as f64 / total_frames as f64
        },
        reconstructions: models.len(),
        average_size: if models.is_empty() {
            0.0
        } else {
            sizes.iter().sum::<usize>() as f64 / models.len() as f64
        },
    }
}

// ---------------------------------------------------------------------------
// report rendering: aligned text table plus a machine-readable key=value file

pub fn format_quality_table(m: &QualityMetrics) -> String {
    let rows = quality_rows(m);
    render_table(&rows)
}

pub fn format_coverage_table(m: &CoverageMetrics) -> String {
    let rows = coverage_rows(m);
    render_table(&rows)
}

fn quality_rows(m: &QualityMetrics) -> Vec<(&'static str, String)> {
    vec![
        ("Precision", format!("{:.4}", m.precision)),
        ("Reconstructed images", format!("{:.4}", m.reconstructed_images)),
        ("3D points", format!("{}", m.points3d)),
        ("Track length", format!("{:.4}", m.track_length)),
        ("MAE", format!("{:.6}", m.mae)),
        ("MAE 10K", format!("{:.6}", m.mae_10k)),
        ("Spread", format!("{:.4}", m.spread)),
        ("Specular", format!("{:.4}", m.specular)),
    ]
}

fn coverage_rows(m: &CoverageMetrics) -> Vec<(&'static str, String)> {
    vec![
        ("Reconstructed", format!("{}", m.reconstructed)),
        ("Reconstructed %", format!("{:.4}", m.reconstructed_pct)),
        ("Reconstructions", format!("{}", m.reconstructions)),
        ("Average size", format!("{:.4}", m.average_size)),
    ]
}

fn render_table(rows: &[(&'static str, String)]) -> String {
    let name_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
    let mut out = String::new();
    for (name, value) in rows {
        out.push_str(&format!("{name:<name_w$}  {value}\n"));
    }
    out
}

fn kv_key(name: &str) -> String {
    name.to_lowercase().replace('%', "pct").replace(' ', "_")
}

pub fn write_quality_report(m: &QualityMetrics, path: &Path) -> Result<(), MetricsError> {
    write_kv(&quality_rows(m), path)
}

pub fn write_coverage_report(m: &CoverageMetrics, path: &Path) -> Result<(), MetricsError> {
    write_kv(&coverage_rows(m), path)
}

fn write_kv(rows: &[(&'static str, String)], path: &Path) -> Result<(), MetricsError> {
    let io_err = |e| MetricsError::Io { path: path.display().to_string(), source: e };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    for (name, value) in rows {
        writeln!(f, "{}={}", kv_key(name), value).map_err(io_err)?;
    }
    Ok(())
}
