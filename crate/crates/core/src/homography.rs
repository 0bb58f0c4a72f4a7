//! Robust planar homography fitting and its decomposition when the plane is
//! known in the first camera's frame.

use nalgebra::{Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kaleido::{dlt_homography, PerspectiveMap};
use crate::pose::{Intrinsics, RotationMatrix};

/// Sample-consensus settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub iterations: usize,
    pub inlier_px: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            inlier_px: 2.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HomographyFit {
    pub map: PerspectiveMap,
    pub inliers: Vec<bool>,
}

impl HomographyFit {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

fn transfer_error(h: &Matrix3<f64>, a: [f64; 2], b: [f64; 2]) -> f64 {
    let p = h * Vector3::new(a[0], a[1], 1.0);
    if p.z.abs() < 1e-12 {
        return f64::INFINITY;
    }
    (p.x / p.z - b[0]).hypot(p.y / p.z - b[1])
}

fn mark_inliers(h: &Matrix3<f64>, src: &[[f64; 2]], dst: &[[f64; 2]], tol: f64) -> Vec<bool> {
    src.iter()
        .zip(dst)
        .map(|(&a, &b)| transfer_error(h, a, b) < tol)
        .collect()
}

fn subset(points: &[[f64; 2]], keep: &[bool]) -> Vec<[f64; 2]> {
    points
        .iter()
        .zip(keep)
        .filter(|(_, &k)| k)
        .map(|(p, _)| *p)
        .collect()
}

/// Seeded RANSAC over 4-point DLT hypotheses. The hypothesis with the most
/// inliers wins, ties going to the earliest iteration; the winner is refit
/// on its inliers by least squares.
pub fn fit_homography_ransac(
    src: &[[f64; 2]],
    dst: &[[f64; 2]],
    cfg: &RansacConfig,
) -> Result<HomographyFit> {
    let n = src.len();
    if n < 4 || dst.len() != n {
        return Err(Error::EstimationFailed(format!(
            "need at least 4 correspondences, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, Matrix3<f64>)> = None;
    for _ in 0..cfg.iterations {
        let idx = sample(&mut rng, n, 4);
        let s: Vec<[f64; 2]> = idx.iter().map(|i| src[i]).collect();
        let d: Vec<[f64; 2]> = idx.iter().map(|i| dst[i]).collect();
        let Some(h) = dlt_homography(&s, &d) else {
            continue;
        };
        if h.determinant().abs() < 1e-12 * h.norm().powi(3) {
            continue;
        }
        let count = mark_inliers(&h, src, dst, cfg.inlier_px)
            .iter()
            .filter(|&&b| b)
            .count();
        if best.as_ref().is_none_or(|(c, _)| count > *c) {
            best = Some((count, h));
        }
    }
    let (count, mut h) = best.ok_or_else(|| {
        Error::EstimationFailed("no non-degenerate minimal sample".into())
    })?;
    if count < 4 {
        return Err(Error::EstimationFailed(format!(
            "best consensus has only {count} inliers"
        )));
    }
    let mut inliers = mark_inliers(&h, src, dst, cfg.inlier_px);
    for _ in 0..2 {
        let s = subset(src, &inliers);
        let d = subset(dst, &inliers);
        match dlt_homography(&s, &d) {
            Some(refit) => {
                let next = mark_inliers(&refit, src, dst, cfg.inlier_px);
                if next.iter().filter(|&&b| b).count() < 4 {
                    break;
                }
                h = refit;
                inliers = next;
            }
            None => break,
        }
    }
    Ok(HomographyFit {
        map: PerspectiveMap::from_matrix(h)?,
        inliers,
    })
}

/// Plane `n·X = d` in a camera frame, with `n` a unit vector and `d > 0` the
/// distance from the camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub normal: Vector3<f64>,
    pub distance: f64,
}

/// Relative pose `X_b = R·X_a + t` recovered from a plane-induced homography.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanarMotion {
    pub rotation: RotationMatrix,
    pub translation: Vector3<f64>,
}

/// Recovers `(R, t)` from `H ≃ K(R + t·nᵀ/d)K⁻¹` with the plane known in the
/// first frame. The scale comes from the middle singular value, the sign from
/// requiring positive depth of `probes` (pixels of the first view on the
/// plane) in the second view.
pub fn decompose_with_plane(
    h: &PerspectiveMap,
    intr: &Intrinsics,
    plane: &Plane,
    probes: &[[f64; 2]],
) -> Result<PlanarMotion> {
    let k = intr.matrix();
    let k_inv = k.try_inverse().expect("intrinsics are invertible");
    let g = k_inv * h.matrix() * k;
    let sv = g.svd(false, false).singular_values;
    let mut s = sv.as_slice().to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    let scale = s[1];
    if !(scale > 1e-12) {
        return Err(Error::EstimationFailed("homography is rank deficient".into()));
    }
    let mut g = g / scale;
    let positive = probes
        .iter()
        .filter(|p| (g * Vector3::new((p[0] - intr.cx) / intr.fx, (p[1] - intr.cy) / intr.fy, 1.0)).z > 0.0)
        .count();
    if 2 * positive < probes.len() {
        g = -g;
    }
    let n = plane.normal.normalize();
    let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let m1 = n.cross(&helper).normalize();
    let m2 = n.cross(&m1);
    let a1 = g * m1;
    let a2 = g * m2;
    let a3 = a1.cross(&a2);
    let src = Matrix3::from_columns(&[m1, m2, n]);
    let dst = Matrix3::from_columns(&[a1, a2, a3]);
    let rotation = RotationMatrix::closest_to(&(dst * src.transpose()))
        .map_err(|e| Error::EstimationFailed(format!("rotation fit failed: {e}")))?;
    let translation = (g * n - rotation.matrix() * n) * plane.distance;
    if !translation.iter().all(|v| v.is_finite()) {
        return Err(Error::EstimationFailed("non-finite translation".into()));
    }
    Ok(PlanarMotion {
        rotation,
        translation,
    })
}

/// Homography induced by a plane between two cameras with relative motion.
pub fn plane_homography(intr: &Intrinsics, motion: &PlanarMotion, plane: &Plane) -> Result<PerspectiveMap> {
    let k = intr.matrix();
    let k_inv = k.try_inverse().expect("intrinsics are invertible");
    let g = motion.rotation.matrix() + motion.translation * plane.normal.transpose() / plane.distance;
    PerspectiveMap::from_matrix(k * g * k_inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::rotation_angle;
    use crate::pose::look_at_pose;
    use rand::Rng;

    fn setup(yaw_b: f64) -> (Intrinsics, Plane, PlanarMotion) {
        let intr = Intrinsics::from_fov(128, 128, 60.0).unwrap();
        let a = look_at_pose(2.4, 55.0, 10.0).unwrap();
        let b = look_at_pose(2.6, 40.0, yaw_b).unwrap();
        let rel = b.compose(&a.inverse());
        let plane = Plane {
            normal: -(a.rotation * Vector3::y()),
            distance: a.center().y,
        };
        (
            intr,
            plane,
            PlanarMotion {
                rotation: rel.rotation,
                translation: rel.translation,
            },
        )
    }

    fn correspondences(h: &PerspectiveMap, n: usize, seed: u64) -> (Vec<[f64; 2]>, Vec<[f64; 2]>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let src: Vec<[f64; 2]> = (0..n)
            .map(|_| [rng.random_range(30.0..98.0), rng.random_range(40.0..100.0)])
            .collect();
        let dst = src.iter().map(|&p| h.apply(p).unwrap()).collect();
        (src, dst)
    }

    #[test]
    fn exact_correspondences_recover_motion() {
        let (intr, plane, motion) = setup(60.0);
        let h = plane_homography(&intr, &motion, &plane).unwrap();
        let (src, dst) = correspondences(&h, 40, 1);
        let fit = fit_homography_ransac(&src, &dst, &RansacConfig::default()).unwrap();
        assert_eq!(fit.inlier_count(), 40);
        let est = decompose_with_plane(&fit.map, &intr, &plane, &src).unwrap();
        assert!(rotation_angle(&est.rotation, &motion.rotation) < 0.5);
        assert!((est.translation - motion.translation).norm() < 1e-6);
    }

    #[test]
    fn outliers_are_rejected() {
        let (intr, plane, motion) = setup(200.0);
        let h = plane_homography(&intr, &motion, &plane).unwrap();
        let (src, mut dst) = correspondences(&h, 60, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for d in dst.iter_mut().take(18) {
            *d = [rng.random_range(0.0..128.0), rng.random_range(0.0..128.0)];
        }
        let fit = fit_homography_ransac(&src, &dst, &RansacConfig::default()).unwrap();
        let est = decompose_with_plane(&fit.map, &intr, &plane, &src).unwrap();
        assert!(rotation_angle(&est.rotation, &motion.rotation) < 2.0);
    }

    #[test]
    fn ransac_is_deterministic() {
        let (intr, plane, motion) = setup(120.0);
        let h = plane_homography(&intr, &motion, &plane).unwrap();
        let (src, mut dst) = correspondences(&h, 30, 3);
        dst[0] = [1.0, 1.0];
        let cfg = RansacConfig::default();
        let a = fit_homography_ransac(&src, &dst, &cfg).unwrap();
        let b = fit_homography_ransac(&src, &dst, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_points() {
        let p = [[0.0, 0.0]; 3];
        assert!(matches!(
            fit_homography_ransac(&p, &p, &RansacConfig::default()),
            Err(Error::EstimationFailed(_))
        ));
    }
}
