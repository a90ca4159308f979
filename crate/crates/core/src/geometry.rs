//! Camera projection, epipolar geometry and trajectory alignment.
//!
//! All operations are pure functions on immutable inputs. RANSAC randomness
//! comes from an explicitly seeded generator so results are reproducible.

use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::colmap::{Camera, CameraModel, ImageRecord, SparseModel};

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("camera {0} is not OPENCV_FISHEYE")]
    WrongCameraModel(u32),
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("fisheye unprojection did not converge after {0} iterations")]
    NoConvergence(usize),
    #[error("need at least {need} correspondences, got {got}")]
    TooFewPairs { need: usize, got: usize },
    #[error("no fundamental matrix with at least 8 inliers")]
    NoConsensus,
    #[error("trajectories must have equal length >= 3 (got {0} and {1})")]
    BadTrajectory(usize, usize),
    #[error("degenerate trajectory: {0}")]
    DegenerateTrajectory(String),
}

/// Rank-2, unit-Frobenius-norm fundamental matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FundamentalMatrix {
    entries: Matrix3<f64>,
}

impl FundamentalMatrix {
    /// Project an arbitrary 3x3 matrix onto the constraint set: smallest
    /// singular value zeroed, then scaled to unit Frobenius norm.
    pub fn from_matrix(m: Matrix3<f64>) -> Self {
        let svd = m.svd(true, true);
        let u = svd.u.unwrap();
        let vt = svd.v_t.unwrap();
        let mut s = svd.singular_values;
        s[2] = 0.0;
        let mut f = u * Matrix3::from_diagonal(&s) * vt;
        let norm = f.norm();
        if norm > 0.0 {
            f /= norm;
        }
        FundamentalMatrix { entries: f }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.entries
    }

    /// Epipolar line in image b induced by a point in image a: l = F [p;1].
    pub fn line(&self, p_a: [f64; 2]) -> [f64; 3] {
        let l = self.entries * Vector3::new(p_a[0], p_a[1], 1.0);
        [l[0], l[1], l[2]]
    }

    pub fn transpose(&self) -> FundamentalMatrix {
        FundamentalMatrix {
            entries: self.entries.transpose(),
        }
    }
}

/// Similarity transform y = s R x + t.
#[derive(Debug, Clone)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl SimilarityTransform {
    pub fn apply(&self, x: [f64; 3]) -> [f64; 3] {
        let y = self.scale * self.rotation * Vector3::from(x) + self.translation;
        [y[0], y[1], y[2]]
    }
}

/// Kannala-Brandt / OPENCV_FISHEYE forward projection.
pub fn project_fisheye(camera: &Camera, point_cam: [f64; 3]) -> Result<[f64; 2], GeometryError> {
    if camera.model != CameraModel::OpencvFisheye {
        return Err(GeometryError::WrongCameraModel(camera.id));
    }
    let [x, y, z] = point_cam;
    if z <= 0.0 {
        return Err(GeometryError::BehindCamera(z));
    }
    let (a, b) = (x / z, y / z);
    let r = (a * a + b * b).sqrt();
    let [fx, fy, cx, cy] = [camera.params[0], camera.params[1], camera.params[2], camera.params[3]];
    let [k1, k2, k3, k4] = [camera.params[4], camera.params[5], camera.params[6], camera.params[7]];
    let s = if r == 0.0 {
        1.0
    } else {
        let theta = r.atan();
        let t2 = theta * theta;
        let theta_d = theta * (1.0 + t2 * (k1 + t2 * (k2 + t2 * (k3 + t2 * k4))));
        theta_d / r
    };
    Ok([fx * a * s + cx, fy * b * s + cy])
}

/// Inverse of [`project_fisheye`]: Newton iteration on theta_d -> theta,
/// converged to |delta| < 1e-12 within 20 iterations. Returns a unit bearing.
pub fn unproject_fisheye(camera: &Camera, pixel: [f64; 2]) -> Result<[f64; 3], GeometryError> {
    if camera.model != CameraModel::OpencvFisheye {
        return Err(GeometryError::WrongCameraModel(camera.id));
    }
    let [fx, fy, cx, cy] = [camera.params[0], camera.params[1], camera.params[2], camera.params[3]];
    let [k1, k2, k3, k4] = [camera.params[4], camera.params[5], camera.params[6], camera.params[7]];
    let mx = (pixel[0] - cx) / fx;
    let my = (pixel[1] - cy) / fy;
    let theta_d = (mx * mx + my * my).sqrt();
    if theta_d == 0.0 {
        return Ok([0.0, 0.0, 1.0]);
    }

    let mut theta = theta_d;
    let mut converged = false;
    for _ in 0..20 {
        let t2 = theta * theta;
        let f = theta * (1.0 + t2 * (k1 + t2 * (k2 + t2 * (k3 + t2 * k4)))) - theta_d;
        let df = 1.0 + t2 * (3.0 * k1 + t2 * (5.0 * k2 + t2 * (7.0 * k3 + t2 * 9.0 * k4)));
        let step = f / df;
        theta -= step;
        if step.abs() < 1e-12 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(GeometryError::NoConvergence(20));
    }

    let r = theta.tan();
    let dir = Vector3::new(mx / theta_d * r, my / theta_d * r, 1.0).normalize();
    Ok([dir[0], dir[1], dir[2]])
}

/// Rotation matrix from a scalar-first unit quaternion.
pub fn quat_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// p_cam = R(q) p_world + t.
pub fn world_to_camera(image: &ImageRecord, point_world: [f64; 3]) -> [f64; 3] {
    let p = quat_to_matrix(image.rotation) * Vector3::from(point_world)
        + Vector3::from(image.translation);
    [p[0], p[1], p[2]]
}

/// Camera center in world coordinates: c = -R^T t.
pub fn camera_center(image: &ImageRecord) -> [f64; 3] {
    let c = -quat_to_matrix(image.rotation).transpose() * Vector3::from(image.translation);
    [c[0], c[1], c[2]]
}

/// Per-point mean reprojection error in pixels. Observations whose point
/// falls behind the camera are excluded and reported in `flagged`.
pub struct ReprojectionReport {
    pub errors: std::collections::BTreeMap<u64, f64>,
    /// (point_id, image_id) pairs skipped because z <= 0.
    pub flagged: Vec<(u64, u32)>,
}

pub fn reprojection_errors(model: &SparseModel) -> Result<ReprojectionReport, GeometryError> {
    let mut errors = std::collections::BTreeMap::new();
    let mut flagged = Vec::new();
    for p in model.points.values() {
        let mut sum = 0.0;
        let mut n = 0usize;
        for &(img_id, obs_idx) in &p.track {
            let img = &model.images[&img_id];
            let cam = &model.cameras[&img.camera_id];
            let pc = world_to_camera(img, p.xyz);
            match project_fisheye(cam, pc) {
                Ok(uv) => {
                    let obs = &img.observations[obs_idx as usize];
                    sum += ((uv[0] - obs.xy[0]).powi(2) + (uv[1] - obs.xy[1]).powi(2)).sqrt();
                    n += 1;
                }
                Err(GeometryError::BehindCamera(_)) => flagged.push((p.id, img_id)),
                Err(e) => return Err(e),
            }
        }
        if n > 0 {
            errors.insert(p.id, sum / n as f64);
        }
    }
    Ok(ReprojectionReport { errors, flagged })
}

/// Distance from p_b to the epipolar line F [p_a; 1]. A degenerate line
/// (both spatial coefficients zero) yields infinity.
pub fn epipolar_distance(f: &FundamentalMatrix, p_a: [f64; 2], p_b: [f64; 2]) -> f64 {
    let l = f.line(p_a);
    let denom = (l[0] * l[0] + l[1] * l[1]).sqrt();
    if denom == 0.0 {
        return f64::INFINITY;
    }
    (l[0] * p_b[0] + l[1] * p_b[1] + l[2]).abs() / denom
}

/// Symmetric epipolar distance: max of the two directed line distances.
pub fn symmetric_epipolar_distance(f: &FundamentalMatrix, p_a: [f64; 2], p_b: [f64; 2]) -> f64 {
    let d_ab = epipolar_distance(f, p_a, p_b);
    let d_ba = epipolar_distance(&f.transpose(), p_b, p_a);
    d_ab.max(d_ba)
}

/// Hartley normalization: translate centroid to origin, scale mean distance
/// to sqrt(2). Returns the transform as a 3x3 matrix.
fn normalization_transform(points: &[[f64; 2]]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let mean_dist = points
        .iter()
        .map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    let s = if mean_dist > 0.0 { 2f64.sqrt() / mean_dist } else { 1.0 };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

/// Normalized eight-point solve over the given correspondences. Returns None
/// for degenerate configurations (rank-deficient design matrix).
pub(crate) fn eight_point(pairs: &[([f64; 2], [f64; 2])]) -> Option<FundamentalMatrix> {
    let pts_a: Vec<[f64; 2]> = pairs.iter().map(|p| p.0).collect();
    let pts_b: Vec<[f64; 2]> = pairs.iter().map(|p| p.1).collect();
    let ta = normalization_transform(&pts_a);
    let tb = normalization_transform(&pts_b);

    // At least 9 rows: the thin SVD of an 8x9 matrix only exposes 8 right
    // singular vectors, which excludes the null vector we need. Zero rows
    // change nothing else.
    let mut design = nalgebra::DMatrix::<f64>::zeros(pairs.len().max(9), 9);
    for (i, (pa, pb)) in pairs.iter().enumerate() {
        let a = ta * Vector3::new(pa[0], pa[1], 1.0);
        let b = tb * Vector3::new(pb[0], pb[1], 1.0);
        // Constraint b^T F a = 0, F stacked row-major.
        design[(i, 0)] = b[0] * a[0];
        design[(i, 1)] = b[0] * a[1];
        design[(i, 2)] = b[0];
        design[(i, 3)] = b[1] * a[0];
        design[(i, 4)] = b[1] * a[1];
        design[(i, 5)] = b[1];
        design[(i, 6)] = a[0];
        design[(i, 7)] = a[1];
        design[(i, 8)] = 1.0;
    }

    let svd = design.svd(false, true);
    let vt = svd.v_t?;
    // Null vector = row of V^T for the smallest singular value.
    let sv = &svd.singular_values;
    let mut min_idx = 0;
    for i in 1..sv.len() {
        if sv[i] < sv[min_idx] {
            min_idx = i;
        }
    }
    if sv.len() == 9 && sv[min_idx.min(7)] < 1e-12 {
        // More than a one-dimensional null space: degenerate sample.
        let mut sorted: Vec<f64> = sv.iter().copied().collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if sorted[1] < 1e-12 {
            return None;
        }
    }
    let f_row = vt.row(min_idx);
    let fn_mat = Matrix3::new(
        f_row[0], f_row[1], f_row[2], f_row[3], f_row[4], f_row[5], f_row[6], f_row[7], f_row[8],
    );
    // Undo normalization: F = Tb^T Fn Ta.
    Some(FundamentalMatrix::from_matrix(tb.transpose() * fn_mat * ta))
}

/// RANSAC fundamental-matrix estimation with the normalized eight-point
/// solver on minimal samples. Inlier criterion is the symmetric epipolar
/// distance; the winner is re-fit on all of its inliers. Deterministic for
/// a given seed; the iteration count is fixed, not adaptive.
pub fn estimate_fundamental_ransac(
    pairs: &[([f64; 2], [f64; 2])],
    inlier_threshold: f64,
    max_iters: usize,
    seed: u64,
) -> Result<(FundamentalMatrix, Vec<bool>), GeometryError> {
    if pairs.len() < 8 {
        return Err(GeometryError::TooFewPairs { need: 8, got: pairs.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices: Vec<usize> = (0..pairs.len()).collect();

    let mut best: Option<(usize, Vec<bool>)> = None;
    for _ in 0..max_iters {
        let sample: Vec<usize> = indices.choose_multiple(&mut rng, 8).copied().collect();
        let minimal: Vec<_> = sample.iter().map(|&i| pairs[i]).collect();
        let Some(f) = eight_point(&minimal) else {
            continue; // degenerate sample, draw again
        };
        let mask: Vec<bool> = pairs
            .iter()
            .map(|&(pa, pb)| symmetric_epipolar_distance(&f, pa, pb) < inlier_threshold)
            .collect();
        let count = mask.iter().filter(|&&m| m).count();
        if count >= 8 && best.as_ref().map_or(true, |(c, _)| count > *c) {
            best = Some((count, mask));
        }
    }
    let (_, mask) = best.ok_or(GeometryError::NoConsensus)?;

    // Final re-fit on all inliers of the best model.
    let inliers: Vec<_> = pairs
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| m)
        .map(|(&p, _)| p)
        .collect();
    let f = eight_point(&inliers).ok_or(GeometryError::NoConsensus)?;
    let mask: Vec<bool> = pairs
        .iter()
        .map(|&(pa, pb)| symmetric_epipolar_distance(&f, pa, pb) < inlier_threshold)
        .collect();
    Ok((f, mask))
}

/// Closed-form least-squares similarity alignment (covariance SVD) of
/// `traj_est` onto `traj_gt`, plus the RMS trajectory error after alignment.
pub fn umeyama_align(
    traj_est: &[[f64; 3]],
    traj_gt: &[[f64; 3]],
) -> Result<(SimilarityTransform, f64), GeometryError> {
    if traj_est.len() != traj_gt.len() || traj_est.len() < 3 {
        return Err(GeometryError::BadTrajectory(traj_est.len(), traj_gt.len()));
    }
    let n = traj_est.len() as f64;
    let mean = |t: &[[f64; 3]]| {
        let mut m = Vector3::zeros();
        for p in t {
            m += Vector3::from(*p);
        }
        m / n
    };
    let mu_x = mean(traj_est);
    let mu_y = mean(traj_gt);

    let mut sigma = Matrix3::zeros();
    let mut var_x = 0.0;
    for (x, y) in traj_est.iter().zip(traj_gt) {
        let dx = Vector3::from(*x) - mu_x;
        let dy = Vector3::from(*y) - mu_y;
        sigma += dy * dx.transpose() / n;
        var_x += dx.norm_squared() / n;
    }
    if var_x < 1e-300 {
        return Err(GeometryError::DegenerateTrajectory(
            "all estimated poses coincide".into(),
        ));
    }

    let svd = sigma.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let d = &svd.singular_values;
    // Rank of the covariance must be at least 2 for a unique rotation.
    if d[1] < 1e-12 * d[0].max(1e-300) {
        return Err(GeometryError::DegenerateTrajectory(
            "trajectory points are collinear (rank-deficient covariance)".into(),
        ));
    }
    let mut s_mat = Matrix3::identity();
    if (u.determinant() * vt.determinant()) < 0.0 {
        s_mat[(2, 2)] = -1.0;
    }
    let rotation = u * s_mat * vt;
    let scale = (Matrix3::from_diagonal(d) * s_mat).trace() / var_x;
    let translation = mu_y - scale * rotation * mu_x;

    let transform = SimilarityTransform { scale, rotation, translation };
    let mut sq = 0.0;
    for (x, y) in traj_est.iter().zip(traj_gt) {
        let e = Vector3::from(transform.apply(*x)) - Vector3::from(*y);
        sq += e.norm_squared();
    }
    let rms_ate = (sq / n).sqrt();
    Ok((transform, rms_ate))
}
