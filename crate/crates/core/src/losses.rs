//! The loss stack: four 2D-supervision terms (stage 1), plus Eikonal,
//! smoothness, and uncertainty-weighted depth-head terms (stage 2).
//!
//! These are the value-path definitions used for reporting and oracle tests;
//! the trainer builds the same expressions on the autodiff tape and the two
//! agree to float precision (checked in train's tests).

use crate::field::SdfField;
use crate::geometry::Aabb;
use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("batch sizes differ: {0} vs {1}")]
    SizeMismatch(usize, usize),
    #[error("no valid rays/pixels in batch")]
    AllMasked,
    #[error("sequence norm must be positive, got {0}")]
    BadSequenceNorm(f64),
    #[error("uncertainty must be positive everywhere (min {0})")]
    NonPositiveSigma(f64),
    #[error("stage {stage} total is missing term '{term}'")]
    MissingTerm { stage: u8, term: &'static str },
}

/// Loss weights and hyperparameters. λ₁..λ₆ follow the published defaults;
/// the Huber width and uncertainty weight are exposed because no reference
/// values exist for them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda: [f64; 6],
    pub huber_eps: f64,
    pub alpha_u: f64,
    /// Smoothness perturbation radius as a fraction of scene scale.
    pub smooth_eps_frac: f64,
    /// Regularization batch sizes (uniform + near-surface).
    pub reg_uniform: usize,
    pub reg_surface: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: [0.1, 0.05, 1.0, 0.01, 0.01, 0.1],
            huber_eps: 1.0,
            alpha_u: 0.5,
            smooth_eps_frac: 0.01,
            reg_uniform: 32,
            reg_surface: 32,
        }
    }
}

/// Elementwise Huber penalty (quadratic within `eps`, linear beyond).
pub fn huber(d: f64, eps: f64) -> f64 {
    if d.abs() <= eps {
        0.5 * d * d
    } else {
        eps * (d.abs() - 0.5 * eps)
    }
}

/// Mean over rays of the per-ray RGB L1.
pub fn rgb_loss(rendered: &[[f64; 3]], observed: &[[f64; 3]]) -> Result<f64, LossError> {
    if rendered.len() != observed.len() {
        return Err(LossError::SizeMismatch(rendered.len(), observed.len()));
    }
    if rendered.is_empty() {
        return Err(LossError::AllMasked);
    }
    let sum: f64 = rendered
        .iter()
        .zip(observed)
        .map(|(r, o)| (0..3).map(|c| (r[c] - o[c]).abs()).sum::<f64>())
        .sum();
    Ok(sum / rendered.len() as f64)
}

/// L1 between rendered depth (already in normalized units) and
/// gt / sequence_norm, mean over valid rays.
pub fn depth_render_loss(
    rendered: &[f64],
    gt: &[f64],
    sequence_norm: f64,
    valid: &[bool],
) -> Result<f64, LossError> {
    if rendered.len() != gt.len() || rendered.len() != valid.len() {
        return Err(LossError::SizeMismatch(rendered.len(), gt.len()));
    }
    if sequence_norm <= 0.0 {
        return Err(LossError::BadSequenceNorm(sequence_norm));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..rendered.len() {
        if valid[i] {
            sum += (rendered[i] - gt[i] / sequence_norm).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(LossError::AllMasked);
    }
    Ok(sum / n as f64)
}

/// L1 plus angular term between normalized rendered normals and unit gt
/// normals; zero-norm rendered normals are masked and counted.
pub fn normal_loss(
    rendered: &[Vector3<f64>],
    gt: &[Vector3<f64>],
    valid: &[bool],
) -> Result<(f64, usize), LossError> {
    if rendered.len() != gt.len() || rendered.len() != valid.len() {
        return Err(LossError::SizeMismatch(rendered.len(), gt.len()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut masked = 0usize;
    for i in 0..rendered.len() {
        if !valid[i] {
            continue;
        }
        let norm = rendered[i].norm();
        if norm < 1e-12 {
            masked += 1;
            continue;
        }
        let nh = rendered[i] / norm;
        let l1: f64 = (0..3).map(|c| (nh[c] - gt[i][c]).abs()).sum();
        let angular = (1.0 - nh.dot(&gt[i])).abs();
        sum += l1 + angular;
        n += 1;
    }
    if n == 0 {
        return Err(LossError::AllMasked);
    }
    Ok((sum / n as f64, masked))
}

/// Huber loss between predicted and ground-truth camera encodings, summed
/// over the 9 components, mean over views; view 0 (frozen) is excluded and
/// the gt quaternion is sign-aligned to the prediction first.
pub fn camera_loss(
    predicted: &[[f64; 9]],
    gt: &[[f64; 9]],
    huber_eps: f64,
) -> Result<f64, LossError> {
    if predicted.len() != gt.len() {
        return Err(LossError::SizeMismatch(predicted.len(), gt.len()));
    }
    if predicted.len() < 2 {
        return Err(LossError::AllMasked);
    }
    let mut sum = 0.0;
    for i in 1..predicted.len() {
        let (p, mut g) = (predicted[i], gt[i]);
        let qdot: f64 = (0..4).map(|k| p[k] * g[k]).sum();
        if qdot < 0.0 {
            for v in g.iter_mut().take(4) {
                *v = -*v;
            }
        }
        for k in 0..9 {
            sum += huber(p[k] - g[k], huber_eps);
        }
    }
    Ok(sum / (predicted.len() - 1) as f64)
}

/// Uniform points in the bounds plus near-surface points, each with a
/// perturbed twin x⁺ inside a ball of radius eps.
pub struct RegularizationBatch {
    pub points: Vec<Vector3<f64>>,
    pub twins: Vec<Vector3<f64>>,
}

/// Near-surface source: a ray with a current rendered depth estimate.
pub struct SurfaceAnchor {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub depth: f64,
}

pub fn sample_regularization_points(
    bounds: &Aabb,
    anchors: &[SurfaceAnchor],
    n_uniform: usize,
    n_surface: usize,
    eps_s: f64,
    seed: u64,
) -> RegularizationBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n_uniform + n_surface);
    for _ in 0..n_uniform {
        points.push(Vector3::new(
            rng.random_range(bounds.min.x..bounds.max.x),
            rng.random_range(bounds.min.y..bounds.max.y),
            rng.random_range(bounds.min.z..bounds.max.z),
        ));
    }
    if !anchors.is_empty() {
        let normal = Normal::new(0.0, eps_s).expect("positive std");
        for k in 0..n_surface {
            let a = &anchors[rng.random_range(0..anchors.len())];
            let _ = k;
            let t = (a.depth + normal.sample(&mut rng)).max(0.0);
            points.push(a.origin + t * a.direction);
        }
    }
    let twins = points
        .iter()
        .map(|p| p + ball_noise(&mut rng, eps_s))
        .collect();
    RegularizationBatch { points, twins }
}

fn ball_noise(rng: &mut ChaCha8Rng, radius: f64) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if v.norm_squared() <= 1.0 {
            return v * radius;
        }
    }
}

/// Mean squared deviation of the SDF gradient norm from 1.
pub fn eikonal_loss(field: &dyn SdfField, points: &[Vector3<f64>]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let sum: f64 = points
        .iter()
        .map(|p| {
            let n = field.gradient(p).norm();
            (n - 1.0) * (n - 1.0)
        })
        .sum();
    sum / points.len() as f64
}

/// Mean L2 distance between unit gradients at each point and its twin;
/// zero-norm gradients are masked.
pub fn smoothness_loss(field: &dyn SdfField, batch: &RegularizationBatch) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, q) in batch.points.iter().zip(&batch.twins) {
        let gp = field.gradient(p);
        let gq = field.gradient(q);
        let (np, nq) = (gp.norm(), gq.norm());
        if np < 1e-12 || nq < 1e-12 {
            continue;
        }
        sum += (gp / np - gq / nq).norm();
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Confidence-weighted depth-head loss: Σ⊙|D̂−D| on values and on forward
/// image differences, minus α·log Σ; mean over valid pixels.
pub fn vggt_depth_loss(
    dhat: &[f64],
    sigma: &[f64],
    gt: &[f64],
    valid: &[bool],
    width: usize,
    height: usize,
    alpha_u: f64,
) -> Result<f64, LossError> {
    assert_eq!(dhat.len(), width * height);
    if dhat.len() != gt.len() || dhat.len() != sigma.len() || dhat.len() != valid.len() {
        return Err(LossError::SizeMismatch(dhat.len(), gt.len()));
    }
    let min_sigma = sigma.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_sigma <= 0.0 {
        return Err(LossError::NonPositiveSigma(min_sigma));
    }
    let mut value_term = 0.0;
    let mut log_term = 0.0;
    let mut n = 0usize;
    for i in 0..dhat.len() {
        if valid[i] {
            value_term += sigma[i] * (dhat[i] - gt[i]).abs();
            log_term += sigma[i].ln();
            n += 1;
        }
    }
    if n == 0 {
        return Err(LossError::AllMasked);
    }
    // forward differences: a pair counts when both endpoints are valid
    let mut grad_term = 0.0;
    let mut gn = 0usize;
    let mut add_pair = |i: usize, j: usize| {
        if valid[i] && valid[j] {
            let pd = dhat[j] - dhat[i];
            let gd = gt[j] - gt[i];
            grad_term += sigma[i] * (pd - gd).abs();
            gn += 1;
        }
    };
    for y in 0..height {
        for x in 0..width.saturating_sub(1) {
            add_pair(y * width + x, y * width + x + 1);
        }
    }
    for y in 0..height.saturating_sub(1) {
        for x in 0..width {
            add_pair(y * width + x, (y + 1) * width + x);
        }
    }
    let grad_mean = if gn == 0 { 0.0 } else { grad_term / gn as f64 };
    Ok(value_term / n as f64 + grad_mean - alpha_u * log_term / n as f64)
}

/// Per-term values with the weighted stage total.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub stage: u8,
    pub terms: BTreeMap<&'static str, f64>,
    pub weighted_total: f64,
}

pub const STAGE1_TERMS: [&str; 4] = ["rgb", "depth-render", "normal", "camera"];
pub const STAGE2_TERMS: [&str; 3] = ["eikonal", "smooth", "vggt-depth"];

/// Stage 1: rgb + λ₁·depth-render + λ₂·normal + λ₃·camera.
/// Stage 2 adds λ₄·eikonal + λ₅·smooth + λ₆·vggt-depth.
pub fn stage_total(
    terms: &BTreeMap<&'static str, f64>,
    weights: &LossWeights,
    stage: u8,
) -> Result<LossReport, LossError> {
    let need = |term: &'static str| -> Result<f64, LossError> {
        terms
            .get(term)
            .copied()
            .ok_or(LossError::MissingTerm { stage, term })
    };
    let mut total = need("rgb")?;
    total += weights.lambda[0] * need("depth-render")?;
    total += weights.lambda[1] * need("normal")?;
    total += weights.lambda[2] * need("camera")?;
    if stage >= 2 {
        total += weights.lambda[3] * need("eikonal")?;
        total += weights.lambda[4] * need("smooth")?;
        total += weights.lambda[5] * need("vggt-depth")?;
    }
    Ok(LossReport {
        stage,
        terms: terms.clone(),
        weighted_total: total,
    })
}
