//! Reconstruction evaluation: point-cloud metrics, image metrics, depth and
//! normal metrics, and trajectory errors after Sim(3) alignment.

use crate::geometry::{umeyama_sim3, Camera, GeometryError};
use nalgebra::{Matrix3, Vector3};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("images differ in size: {0} vs {1}")]
    SizeMismatch(usize, usize),
    #[error("mask selects no pixels")]
    EmptyMask,
    #[error("trajectory needs at least 3 poses, got {0}")]
    TooFewPoses(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Named scalar map for report files.
pub type MetricMap = BTreeMap<String, f64>;

// ── exact nearest neighbors ──────────────────────────────────────────

/// Exact nearest-neighbor search over a static point set (median-split
/// kd-tree with branch-and-bound queries).
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    // node layout: leaf stores point index; inner stores split axis/value
    nodes: Vec<KdNode>,
    root: usize,
}

enum KdNode {
    Leaf {
        index: usize,
    },
    Inner {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

impl KdTree {
    pub fn build(points: &[Vector3<f64>]) -> KdTree {
        assert!(!points.is_empty());
        let mut tree = KdTree {
            points: points.to_vec(),
            nodes: Vec::with_capacity(2 * points.len()),
            root: 0,
        };
        let mut idx: Vec<usize> = (0..points.len()).collect();
        tree.root = tree.build_node(&mut idx, 0);
        tree
    }

    fn build_node(&mut self, idx: &mut [usize], depth: usize) -> usize {
        if idx.len() == 1 {
            self.nodes.push(KdNode::Leaf { index: idx[0] });
            return self.nodes.len() - 1;
        }
        let axis = depth % 3;
        idx.sort_by(|&a, &b| {
            self.points[a][axis]
                .partial_cmp(&self.points[b][axis])
                .expect("finite coordinates")
        });
        let mid = idx.len() / 2;
        let value = self.points[idx[mid]][axis];
        let (lo, hi) = idx.split_at_mut(mid);
        let left = self.build_node(lo, depth + 1);
        let right = self.build_node(hi, depth + 1);
        self.nodes.push(KdNode::Inner {
            axis,
            value,
            left,
            right,
        });
        self.nodes.len() - 1
    }

    /// Distance to the nearest stored point.
    pub fn nearest_distance(&self, q: &Vector3<f64>) -> f64 {
        let mut best = f64::INFINITY;
        self.search(self.root, q, &mut best);
        best.sqrt()
    }

    fn search(&self, node: usize, q: &Vector3<f64>, best: &mut f64) {
        match &self.nodes[node] {
            KdNode::Leaf { index } => {
                let d = (self.points[*index] - q).norm_squared();
                if d < *best {
                    *best = d;
                }
            }
            KdNode::Inner {
                axis,
                value,
                left,
                right,
            } => {
                let delta = q[*axis] - value;
                let (near, far) = if delta < 0.0 {
                    (*left, *right)
                } else {
                    (*right, *left)
                };
                self.search(near, q, best);
                if delta * delta < *best {
                    self.search(far, q, best);
                }
            }
        }
    }
}

/// Accuracy/completeness/chamfer/precision/recall/F-score between point sets.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMetrics {
    pub acc_mean: f64,
    pub acc_median: f64,
    pub comp_mean: f64,
    pub comp_median: f64,
    pub chamfer: f64,
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
    pub threshold: f64,
}

impl PointMetrics {
    pub fn to_map(&self) -> MetricMap {
        let mut m = MetricMap::new();
        m.insert("acc-mean".into(), self.acc_mean);
        m.insert("acc-median".into(), self.acc_median);
        m.insert("comp-mean".into(), self.comp_mean);
        m.insert("comp-median".into(), self.comp_median);
        m.insert("chamfer".into(), self.chamfer);
        m.insert("precision".into(), self.precision);
        m.insert("recall".into(), self.recall);
        m.insert("fscore".into(), self.fscore);
        m
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Exact nearest-neighbor distances predicted→gt (accuracy) and
/// gt→predicted (completeness); chamfer is the mean of the two means.
pub fn point_metrics(
    predicted: &[Vector3<f64>],
    gt: &[Vector3<f64>],
    threshold: f64,
) -> Result<PointMetrics, MetricError> {
    if predicted.is_empty() || gt.is_empty() {
        return Err(MetricError::EmptyCloud);
    }
    let gt_tree = KdTree::build(gt);
    let pred_tree = KdTree::build(predicted);
    let mut acc: Vec<f64> = predicted
        .iter()
        .map(|p| gt_tree.nearest_distance(p))
        .collect();
    let mut comp: Vec<f64> = gt
        .iter()
        .map(|p| pred_tree.nearest_distance(p))
        .collect();
    let acc_mean = acc.iter().sum::<f64>() / acc.len() as f64;
    let comp_mean = comp.iter().sum::<f64>() / comp.len() as f64;
    let precision = acc.iter().filter(|&&d| d < threshold).count() as f64 / acc.len() as f64;
    let recall = comp.iter().filter(|&&d| d < threshold).count() as f64 / comp.len() as f64;
    let fscore = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    acc.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    comp.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    Ok(PointMetrics {
        acc_mean,
        acc_median: median(&acc),
        comp_mean,
        comp_median: median(&comp),
        chamfer: 0.5 * (acc_mean + comp_mean),
        precision,
        recall,
        fscore,
        threshold,
    })
}

// ── image metrics ────────────────────────────────────────────────────

/// PSNR in dB over all channels; reports are capped at 99 for MSE < 1e-10.
pub fn psnr(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(MetricError::SizeMismatch(a.len(), b.len()));
    }
    let mse = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse < 1e-10 {
        return Ok(99.0);
    }
    Ok(-10.0 * mse.log10())
}

/// SSIM with an 11×11 Gaussian window (σ = 1.5), standard stabilizers
/// C₁ = (0.01L)², C₂ = (0.03L)², L = 1; channel means over valid window
/// positions, averaged over channels.
pub fn ssim(
    a: &[f64],
    b: &[f64],
    width: usize,
    height: usize,
    channels: usize,
) -> Result<f64, MetricError> {
    if a.len() != b.len() || a.len() != width * height * channels {
        return Err(MetricError::SizeMismatch(a.len(), b.len()));
    }
    const WIN: usize = 11;
    const SIGMA: f64 = 1.5;
    if width < WIN || height < WIN {
        return Err(MetricError::SizeMismatch(width, height));
    }
    let mut kernel = [0.0; WIN];
    let mut ksum = 0.0;
    for (i, k) in kernel.iter_mut().enumerate() {
        let d = i as f64 - (WIN as f64 - 1.0) / 2.0;
        *k = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
        ksum += *k;
    }
    for k in &mut kernel {
        *k /= ksum;
    }
    let c1 = 0.01f64 * 0.01;
    let c2 = 0.03f64 * 0.03;
    let mut total = 0.0;
    for ch in 0..channels {
        let px = |img: &[f64], x: usize, y: usize| img[(y * width + x) * channels + ch];
        let mut acc = 0.0;
        let mut count = 0usize;
        for wy in 0..=height - WIN {
            for wx in 0..=width - WIN {
                let (mut ma, mut mb) = (0.0, 0.0);
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for dy in 0..WIN {
                    for dx in 0..WIN {
                        let w = kernel[dy] * kernel[dx];
                        let (pa, pb) = (px(a, wx + dx, wy + dy), px(b, wx + dx, wy + dy));
                        ma += w * pa;
                        mb += w * pb;
                        va += w * pa * pa;
                        vb += w * pb * pb;
                        cov += w * pa * pb;
                    }
                }
                va -= ma * ma;
                vb -= mb * mb;
                cov -= ma * mb;
                let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                acc += s;
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    Ok(total / channels as f64)
}

// ── depth metrics ────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub delta_125: f64,
    /// Median-alignment scale applied to the prediction.
    pub scale: f64,
}

impl DepthMetrics {
    pub fn to_map(&self) -> MetricMap {
        let mut m = MetricMap::new();
        m.insert("absrel".into(), self.abs_rel);
        m.insert("delta-1.25".into(), self.delta_125);
        m
    }
}

/// Median-scaled AbsRel and δ<1.25 over masked pixels.
pub fn depth_metrics(
    predicted: &[f64],
    gt: &[f64],
    mask: &[bool],
) -> Result<DepthMetrics, MetricError> {
    if predicted.len() != gt.len() || predicted.len() != mask.len() {
        return Err(MetricError::SizeMismatch(predicted.len(), gt.len()));
    }
    let mut pred_v = Vec::new();
    let mut gt_v = Vec::new();
    for i in 0..predicted.len() {
        if mask[i] && gt[i] > 0.0 {
            pred_v.push(predicted[i]);
            gt_v.push(gt[i]);
        }
    }
    if pred_v.is_empty() {
        return Err(MetricError::EmptyMask);
    }
    let mut ps = pred_v.clone();
    let mut gs = gt_v.clone();
    ps.sort_by(|a, b| a.partial_cmp(b).expect("finite depths"));
    gs.sort_by(|a, b| a.partial_cmp(b).expect("finite depths"));
    let med_p = median(&ps);
    let scale = if med_p.abs() > 1e-12 {
        median(&gs) / med_p
    } else {
        1.0
    };
    let mut abs_rel = 0.0;
    let mut hits = 0usize;
    for (p, g) in pred_v.iter().zip(&gt_v) {
        let sp = scale * p;
        abs_rel += (sp - g).abs() / g;
        let r = (sp / g).max(g / sp.max(1e-300));
        if r < 1.25 {
            hits += 1;
        }
    }
    Ok(DepthMetrics {
        abs_rel: abs_rel / pred_v.len() as f64,
        delta_125: hits as f64 / pred_v.len() as f64,
        scale,
    })
}

// ── normal metrics ───────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct NormalMetrics {
    pub mean_deg: f64,
    pub median_deg: f64,
    pub pct_within_22_5: f64,
    pub pct_within_30: f64,
}

impl NormalMetrics {
    pub fn to_map(&self) -> MetricMap {
        let mut m = MetricMap::new();
        m.insert("normal-mean-deg".into(), self.mean_deg);
        m.insert("normal-med-deg".into(), self.median_deg);
        m.insert("pct-22.5".into(), self.pct_within_22_5);
        m.insert("pct-30".into(), self.pct_within_30);
        m
    }
}

/// Angular error statistics between unit normal maps over masked pixels.
pub fn normal_metrics(
    predicted: &[Vector3<f64>],
    gt: &[Vector3<f64>],
    mask: &[bool],
) -> Result<NormalMetrics, MetricError> {
    if predicted.len() != gt.len() || predicted.len() != mask.len() {
        return Err(MetricError::SizeMismatch(predicted.len(), gt.len()));
    }
    let mut angles: Vec<f64> = Vec::new();
    for i in 0..predicted.len() {
        if mask[i] {
            let dot = predicted[i].dot(&gt[i]).clamp(-1.0, 1.0);
            angles.push(dot.acos().to_degrees());
        }
    }
    if angles.is_empty() {
        return Err(MetricError::EmptyMask);
    }
    let mean = angles.iter().sum::<f64>() / angles.len() as f64;
    let within = |t: f64| angles.iter().filter(|&&a| a < t).count() as f64 / angles.len() as f64;
    let pct_within_22_5 = 100.0 * within(22.5);
    let pct_within_30 = 100.0 * within(30.0);
    angles.sort_by(|a, b| a.partial_cmp(b).expect("finite angles"));
    Ok(NormalMetrics {
        mean_deg: mean,
        median_deg: median(&angles),
        pct_within_22_5,
        pct_within_30,
    })
}

// ── trajectory metrics ───────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryMetrics {
    /// RMSE of camera centers after Sim(3) alignment.
    pub ate: f64,
    /// RMSE of relative-translation deltas over consecutive pairs.
    pub rpe_trans: f64,
    /// RMSE of relative-rotation geodesic angles, degrees.
    pub rpe_rot_deg: f64,
    pub scale: f64,
}

impl TrajectoryMetrics {
    pub fn to_map(&self) -> MetricMap {
        let mut m = MetricMap::new();
        m.insert("ate".into(), self.ate);
        m.insert("rpe-trans".into(), self.rpe_trans);
        m.insert("rpe-rot-deg".into(), self.rpe_rot_deg);
        m
    }
}

/// Umeyama-aligns predicted camera centers to ground truth, then reports
/// ATE and relative pose errors over consecutive pairs.
pub fn trajectory_metrics(
    predicted: &[Camera],
    gt: &[Camera],
) -> Result<TrajectoryMetrics, MetricError> {
    if predicted.len() != gt.len() || predicted.len() < 3 {
        return Err(MetricError::TooFewPoses(predicted.len().min(gt.len())));
    }
    let pc: Vec<Vector3<f64>> = predicted.iter().map(|c| c.center).collect();
    let gc: Vec<Vector3<f64>> = gt.iter().map(|c| c.center).collect();
    let sim = umeyama_sim3(&pc, &gc)?;
    let mut se = 0.0;
    for (p, g) in pc.iter().zip(&gc) {
        se += (sim.apply(p) - g).norm_squared();
    }
    let ate = (se / pc.len() as f64).sqrt();

    // relative motion between consecutive poses, expressed in the earlier
    // camera's frame; the alignment cancels except for the scale
    let rel = |cams: &[Camera], i: usize, scale: f64| -> (Matrix3<f64>, Vector3<f64>) {
        let r_i = cams[i].rotation.to_rotation_matrix().into_inner();
        let r_j = cams[i + 1].rotation.to_rotation_matrix().into_inner();
        let t = scale * (r_i * (cams[i + 1].center - cams[i].center));
        (r_i * r_j.transpose(), t)
    };
    let mut te = 0.0;
    let mut re = 0.0;
    let n_rel = predicted.len() - 1;
    for i in 0..n_rel {
        let (rp, tp) = rel(predicted, i, sim.scale);
        let (rg, tg) = rel(gt, i, 1.0);
        te += (tp - tg).norm_squared();
        let cos = ((rp * rg.transpose()).trace() - 1.0) / 2.0;
        let ang = cos.clamp(-1.0, 1.0).acos().to_degrees();
        re += ang * ang;
    }
    Ok(TrajectoryMetrics {
        ate,
        rpe_trans: (te / n_rel as f64).sqrt(),
        rpe_rot_deg: (re / n_rel as f64).sqrt(),
        scale: sim.scale,
    })
}
