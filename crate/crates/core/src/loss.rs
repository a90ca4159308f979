//! Training objective: per-cell detection cross-entropy, the pairwise
//! tracking loss over correspondence sets, their weighted total, and
//! analytic reverse-mode gradients for all logits and raw descriptor
//! entries.
//!
//! Detection logits are (65, Hc, Wc): 64 in-cell positions plus a dustbin
//! per 8x8 cell. Descriptor fields are (Hc, Wc, 256), stored raw; unit
//! normalization happens after bilinear sampling so dot products lie in
//! [-1, 1].

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};
use thiserror::Error;

use crate::tracks::CorrespondenceSet;

pub const DUSTBIN: usize = 64;
pub const CELL: usize = 8;
pub const DESC_DIM: usize = 256;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty correspondence set for pair ({0}, {1})")]
    EmptyCorrespondences(usize, usize),
    #[error("missing correspondence set for pair ({0}, {1})")]
    MissingPair(usize, usize),
}

#[derive(Debug, Clone, Copy)]
pub struct LossParams {
    /// Balance between detection and description terms.
    pub lambda: f64,
    /// Positive-pair weight in the triplet kernel.
    pub lambda_t: f64,
    /// Positive margin.
    pub m_p: f64,
    /// Negative margin.
    pub m_n: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams { lambda: 1.0, lambda_t: 1.0, m_p: 1.0, m_n: 0.2 }
    }
}

/// Per-cell hard labels from a full-resolution heatmap: the in-cell raster
/// position of the cell's maximum if it exceeds 1e-6, else the dustbin.
/// Ties break toward the lowest raster index.
pub fn detection_labels(y: &Array2<f64>, hc: usize, wc: usize) -> Result<Array2<usize>, LossError> {
    let (h, w) = y.dim();
    if h != hc * CELL || w != wc * CELL {
        return Err(LossError::ShapeMismatch(format!(
            "heatmap {h}x{w} does not match {hc}x{wc} cells of {CELL}"
        )));
    }
    let mut labels = Array2::from_elem((hc, wc), DUSTBIN);
    for cy in 0..hc {
        for cx in 0..wc {
            let mut best = 0.0;
            let mut best_pos = DUSTBIN;
            for iy in 0..CELL {
                for ix in 0..CELL {
                    let v = y[[cy * CELL + iy, cx * CELL + ix]];
                    if v > best && v > 1e-6 {
                        best = v;
                        best_pos = iy * CELL + ix;
                    }
                }
            }
            labels[[cy, cx]] = best_pos;
        }
    }
    Ok(labels)
}

fn softmax_column(x: &Array3<f64>, cy: usize, cx: usize) -> [f64; 65] {
    let mut m = f64::NEG_INFINITY;
    for k in 0..65 {
        m = m.max(x[[k, cy, cx]]);
    }
    let mut p = [0.0; 65];
    let mut sum = 0.0;
    for k in 0..65 {
        p[k] = (x[[k, cy, cx]] - m).exp();
        sum += p[k];
    }
    for v in &mut p {
        *v /= sum;
    }
    p
}

/// Mean over cells of 65-way softmax cross-entropy against the hard labels
/// derived from `y`.
pub fn loss_detection(x: &Array3<f64>, y: &Array2<f64>) -> Result<f64, LossError> {
    let (c, hc, wc) = x.dim();
    if c != 65 {
        return Err(LossError::ShapeMismatch(format!("expected 65 logit channels, got {c}")));
    }
    let labels = detection_labels(y, hc, wc)?;
    let mut total = 0.0;
    for cy in 0..hc {
        for cx in 0..wc {
            let p = softmax_column(x, cy, cx);
            total -= p[labels[[cy, cx]]].max(1e-300).ln();
        }
    }
    Ok(total / (hc * wc) as f64)
}

/// Gradient of [`loss_detection`] with respect to the logits.
pub fn grad_detection(x: &Array3<f64>, y: &Array2<f64>) -> Result<(f64, Array3<f64>), LossError> {
    let (c, hc, wc) = x.dim();
    if c != 65 {
        return Err(LossError::ShapeMismatch(format!("expected 65 logit channels, got {c}")));
    }
    let labels = detection_labels(y, hc, wc)?;
    let inv = 1.0 / (hc * wc) as f64;
    let mut grad = Array3::zeros((65, hc, wc));
    let mut total = 0.0;
    for cy in 0..hc {
        for cx in 0..wc {
            let p = softmax_column(x, cy, cx);
            let label = labels[[cy, cx]];
            total -= p[label].max(1e-300).ln();
            for k in 0..65 {
                grad[[k, cy, cx]] = (p[k] - f64::from(k == label)) * inv;
            }
        }
    }
    Ok((total * inv, grad))
}

/// Bilinear sampling support: grid node (cy, cx) sits at the center of its
/// 8x8 pixel cell, i.e. pixel (8 cx + 3.5, 8 cy + 3.5). Returns the four
/// (cy, cx, weight) taps for a pixel coordinate.
fn bilinear_taps(xy: [f64; 2], hc: usize, wc: usize) -> [(usize, usize, f64); 4] {
    let u = ((xy[0] - 3.5) / CELL as f64).clamp(0.0, (wc - 1) as f64);
    let v = ((xy[1] - 3.5) / CELL as f64).clamp(0.0, (hc - 1) as f64);
    let x0 = u.floor() as usize;
    let y0 = v.floor() as usize;
    let x1 = (x0 + 1).min(wc - 1);
    let y1 = (y0 + 1).min(hc - 1);
    let fx = u - x0 as f64;
    let fy = v - y0 as f64;
    [
        (y0, x0, (1.0 - fx) * (1.0 - fy)),
        (y0, x1, fx * (1.0 - fy)),
        (y1, x0, (1.0 - fx) * fy),
        (y1, x1, fx * fy),
    ]
}

/// Bilinearly sample the raw descriptor field at a pixel coordinate and
/// unit-normalize. Also returns the raw vector, its norm and the taps, which
/// the backward pass needs.
pub struct SampledDescriptor {
    pub unit: Vec<f64>,
    raw: Vec<f64>,
    norm: f64,
    taps: [(usize, usize, f64); 4],
}

pub fn sample_descriptor(field: &Array3<f64>, xy: [f64; 2]) -> SampledDescriptor {
    let (hc, wc, dim) = field.dim();
    let taps = bilinear_taps(xy, hc, wc);
    let mut raw = vec![0.0; dim];
    for &(cy, cx, w) in &taps {
        for (k, r) in raw.iter_mut().enumerate() {
            *r += w * field[[cy, cx, k]];
        }
    }
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let unit = raw.iter().map(|v| v / norm).collect();
    SampledDescriptor { unit, raw, norm, taps }
}

impl SampledDescriptor {
    /// Scatter a gradient with respect to the unit vector back onto the raw
    /// descriptor field: through L2 normalization, then the bilinear taps.
    fn backprop(&self, grad_unit: &[f64], field_grad: &mut Array3<f64>) {
        // d(unit)/d(raw) = (I - unit unit^T) / norm
        let dot: f64 = grad_unit
            .iter()
            .zip(&self.unit)
            .map(|(g, u)| g * u)
            .sum();
        for &(cy, cx, w) in &self.taps {
            for k in 0..self.raw.len() {
                let g_raw = (grad_unit[k] - dot * self.unit[k]) / self.norm;
                field_grad[[cy, cx, k]] += w * g_raw;
            }
        }
    }
}

/// The triplet kernel over one pair of sampled unit descriptors.
fn triplet_kernel(dot: f64, positive: bool, params: &LossParams) -> f64 {
    if positive {
        params.lambda_t * (params.m_p - dot).max(0.0)
    } else {
        (dot - params.m_n).max(0.0)
    }
}

fn triplet_kernel_slope(dot: f64, positive: bool, params: &LossParams) -> f64 {
    if positive {
        if params.m_p - dot > 0.0 {
            -params.lambda_t
        } else {
            0.0
        }
    } else if dot - params.m_n > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Tracking loss over one image pair: the full |T|^2 grid, positives on the
/// diagonal, normalized by |T|^2.
pub fn loss_pair_tracking(
    d_a: &Array3<f64>,
    d_b: &Array3<f64>,
    t_ab: &CorrespondenceSet,
    params: &LossParams,
) -> Result<f64, LossError> {
    if t_ab.pairs.is_empty() {
        return Err(LossError::EmptyCorrespondences(
            t_ab.image_a as usize,
            t_ab.image_b as usize,
        ));
    }
    let sa: Vec<_> = t_ab.pairs.iter().map(|p| sample_descriptor(d_a, p.0)).collect();
    let sb: Vec<_> = t_ab.pairs.iter().map(|p| sample_descriptor(d_b, p.1)).collect();
    let m = t_ab.pairs.len();
    let mut total = 0.0;
    for (i, a) in sa.iter().enumerate() {
        for (j, b) in sb.iter().enumerate() {
            let dot: f64 = a.unit.iter().zip(&b.unit).map(|(x, y)| x * y).sum();
            total += triplet_kernel(dot, i == j, params);
        }
    }
    Ok(total / (m * m) as f64)
}

/// Tracking loss plus gradients with respect to both raw descriptor fields.
pub fn grad_pair_tracking(
    d_a: &Array3<f64>,
    d_b: &Array3<f64>,
    t_ab: &CorrespondenceSet,
    params: &LossParams,
) -> Result<(f64, Array3<f64>, Array3<f64>), LossError> {
    if t_ab.pairs.is_empty() {
        return Err(LossError::EmptyCorrespondences(
            t_ab.image_a as usize,
            t_ab.image_b as usize,
        ));
    }
    let sa: Vec<_> = t_ab.pairs.iter().map(|p| sample_descriptor(d_a, p.0)).collect();
    let sb: Vec<_> = t_ab.pairs.iter().map(|p| sample_descriptor(d_b, p.1)).collect();
    let m = t_ab.pairs.len();
    let inv = 1.0 / (m * m) as f64;
    let dim = d_a.dim().2;

    let mut grad_a = Array3::zeros(d_a.dim());
    let mut grad_b = Array3::zeros(d_b.dim());
    let mut grad_units_a = vec![vec![0.0; dim]; m];
    let mut grad_units_b = vec![vec![0.0; dim]; m];
    let mut total = 0.0;
    for (i, a) in sa.iter().enumerate() {
        for (j, b) in sb.iter().enumerate() {
            let dot: f64 = a.unit.iter().zip(&b.unit).map(|(x, y)| x * y).sum();
            total += triplet_kernel(dot, i == j, params);
            let slope = triplet_kernel_slope(dot, i == j, params) * inv;
            if slope != 0.0 {
                for k in 0..dim {
                    grad_units_a[i][k] += slope * b.unit[k];
                    grad_units_b[j][k] += slope * a.unit[k];
                }
            }
        }
    }
    for (i, a) in sa.iter().enumerate() {
        a.backprop(&grad_units_a[i], &mut grad_a);
    }
    for (j, b) in sb.iter().enumerate() {
        b.backprop(&grad_units_b[j], &mut grad_b);
    }
    Ok((total * inv, grad_a, grad_b))
}

/// Total objective: sum of per-image detection losses plus lambda times the
/// sum of tracking losses over all image pairs (a < b).
pub fn loss_total(
    logits: &[Array3<f64>],
    descriptors: &[Array3<f64>],
    heatmaps: &[Array2<f64>],
    t_sets: &BTreeMap<(usize, usize), CorrespondenceSet>,
    params: &LossParams,
) -> Result<f64, LossError> {
    let n = logits.len();
    if descriptors.len() != n || heatmaps.len() != n {
        return Err(LossError::ShapeMismatch(
            "logits, descriptors and heatmaps must have matching length".into(),
        ));
    }
    let mut total = 0.0;
    for i in 0..n {
        total += loss_detection(&logits[i], &heatmaps[i])?;
    }
    for a in 0..n {
        for b in (a + 1)..n {
            let t = t_sets.get(&(a, b)).ok_or(LossError::MissingPair(a, b))?;
            total += params.lambda * loss_pair_tracking(&descriptors[a], &descriptors[b], t, params)?;
        }
    }
    Ok(total)
}

/// Gradients of the total loss for every logit and every raw descriptor
/// entry. Accumulation order is fixed (image index, then pair index) so the
/// result is bit-reproducible.
pub fn grad_loss(
    logits: &[Array3<f64>],
    descriptors: &[Array3<f64>],
    heatmaps: &[Array2<f64>],
    t_sets: &BTreeMap<(usize, usize), CorrespondenceSet>,
    params: &LossParams,
) -> Result<(f64, Vec<Array3<f64>>, Vec<Array3<f64>>), LossError> {
    let n = logits.len();
    if descriptors.len() != n || heatmaps.len() != n {
        return Err(LossError::ShapeMismatch(
            "logits, descriptors and heatmaps must have matching length".into(),
        ));
    }
    let mut total = 0.0;
    let mut grad_logits = Vec::with_capacity(n);
    let mut grad_desc: Vec<Array3<f64>> =
        descriptors.iter().map(|d| Array3::zeros(d.dim())).collect();
    for i in 0..n {
        let (l, g) = grad_detection(&logits[i], &heatmaps[i])?;
        total += l;
        grad_logits.push(g);
    }
    for a in 0..n {
        for b in (a + 1)..n {
            let t = t_sets.get(&(a, b)).ok_or(LossError::MissingPair(a, b))?;
            let (l, ga, gb) = grad_pair_tracking(&descriptors[a], &descriptors[b], t, params)?;
            total += params.lambda * l;
            grad_desc[a].zip_mut_with(&ga, |x, &y| *x += params.lambda * y);
            grad_desc[b].zip_mut_with(&gb, |x, &y| *x += params.lambda * y);
        }
    }
    Ok((total, grad_logits, grad_desc))
}
