//! Relative-pose accuracy: RRA@γ, RTA@γ, mAA(30) and the relative rotation
//! similarity RRS.
//!
//! All quantities are taken over unordered camera pairs `i < j`. Translation
//! directions are differences of camera centers, so they do not depend on
//! the frame each translation vector is expressed in. Thresholds are strict.

use std::collections::BTreeMap;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::pose::{relative_rotation, CameraPose, RotationMatrix};

/// Geodesic angle between two rotations, in degrees.
pub fn rotation_angle(ra: &RotationMatrix, rb: &RotationMatrix) -> f64 {
    let tr = (ra.matrix() * rb.matrix().transpose()).trace();
    ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Angle between two direction vectors, in degrees. Two near-zero vectors
/// count as agreeing (0°), exactly one near-zero vector as opposite (180°).
pub fn translation_angle(pred: &Vector3<f64>, gt: &Vector3<f64>) -> f64 {
    const EPS: f64 = 1e-12;
    let (np, ng) = (pred.norm(), gt.norm());
    match (np > EPS, ng > EPS) {
        (false, false) => 0.0,
        (true, false) | (false, true) => 180.0,
        (true, true) => (pred.dot(gt) / (np * ng)).clamp(-1.0, 1.0).acos().to_degrees(),
    }
}

/// Predicted and ground-truth poses of the same cameras.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSet {
    pub predicted: Vec<CameraPose>,
    pub ground_truth: Vec<CameraPose>,
}

impl PoseSet {
    pub fn new(predicted: Vec<CameraPose>, ground_truth: Vec<CameraPose>) -> Result<Self> {
        if predicted.len() != ground_truth.len() {
            return Err(Error::InvalidInput(format!(
                "{} predicted poses but {} ground-truth poses",
                predicted.len(),
                ground_truth.len()
            )));
        }
        if predicted.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 cameras, got {}",
                predicted.len()
            )));
        }
        Ok(Self {
            predicted,
            ground_truth,
        })
    }

    pub fn len(&self) -> usize {
        self.predicted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predicted.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Threshold in degrees → fraction of pairs.
    pub rra: BTreeMap<u32, f64>,
    pub rta: BTreeMap<u32, f64>,
    pub maa30: f64,
    pub rrs: f64,
    pub pairs: usize,
}

/// Default thresholds reported alongside mAA(30).
pub const GAMMAS: [u32; 3] = [5, 15, 30];

/// Rotation and translation angular errors for every pair `i < j`.
pub fn pair_errors(poses: &PoseSet) -> Vec<(f64, f64)> {
    let n = poses.len();
    let pc: Vec<Vector3<f64>> = poses.predicted.iter().map(CameraPose::center).collect();
    let gc: Vec<Vector3<f64>> = poses.ground_truth.iter().map(CameraPose::center).collect();
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let rp = relative_rotation(&poses.predicted[i].rotation, &poses.predicted[j].rotation);
            let rg = relative_rotation(&poses.ground_truth[i].rotation, &poses.ground_truth[j].rotation);
            let r_err = rotation_angle(&rp, &rg);
            let t_err = translation_angle(&(pc[j] - pc[i]), &(gc[j] - gc[i]));
            out.push((r_err, t_err));
        }
    }
    out
}

/// Mean cosine similarity `trace(A·Bᵀ)/3` over unordered pairs of predicted
/// relative rotations. With a single relative rotation there is nothing to
/// compare and the value is 1.
pub fn relative_rotation_similarity(predicted: &[CameraPose]) -> f64 {
    let n = predicted.len();
    let mut rel = Vec::with_capacity(n * (n.saturating_sub(1)) / 2);
    for i in 0..n {
        for j in i + 1..n {
            rel.push(relative_rotation(&predicted[i].rotation, &predicted[j].rotation));
        }
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for p in 0..rel.len() {
        for q in p + 1..rel.len() {
            sum += (rel[p].matrix().component_mul(rel[q].matrix())).sum() / 3.0;
            count += 1;
        }
    }
    if count == 0 {
        1.0
    } else {
        sum / count as f64
    }
}

pub fn compute_report(poses: &PoseSet, gammas: &[u32]) -> Result<MetricsReport> {
    if poses.len() < 2 {
        return Err(Error::InvalidInput("need at least 2 cameras".into()));
    }
    let errors = pair_errors(poses);
    let m = errors.len() as f64;
    let frac = |f: &dyn Fn(&(f64, f64)) -> bool| errors.iter().filter(|e| f(e)).count() as f64 / m;
    let rra_at = |g: f64| frac(&|e| e.0 < g);
    let rta_at = |g: f64| frac(&|e| e.1 < g);
    let rra = gammas.iter().map(|&g| (g, rra_at(g as f64))).collect();
    let rta = gammas.iter().map(|&g| (g, rta_at(g as f64))).collect();
    let maa30 = (1..=30)
        .map(|t| rra_at(t as f64).min(rta_at(t as f64)))
        .sum::<f64>()
        / 30.0;
    Ok(MetricsReport {
        rra,
        rta,
        maa30,
        rrs: relative_rotation_similarity(&poses.predicted),
        pairs: errors.len(),
    })
}
