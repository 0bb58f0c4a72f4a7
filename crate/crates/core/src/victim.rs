//! Built-in two-view pose estimator used as the attack target.
//!
//! Both views' discs are rectified onto the ground plane, the first with the
//! plane known in its camera's frame and the second from the outline of its
//! disc mask. The in-plane rotation between the rectified discs comes from a
//! circular correlation of their polar profiles, with a weak prior toward
//! small relative camera rotations. The resulting plane homography guides
//! zero-mean, unit-norm patch matching between the first view warped into the
//! second and the second view. A robust homography over the matches is
//! decomposed with the known plane, and both views' pixel rays are
//! intersected with the estimated plane to give pointmaps in the first
//! camera's frame.
//!
//! [`detect_and_match`] is the unguided matcher: oriented patches around
//! gradient keypoints compared by normalized cross-correlation.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{sample_scalar, Grid, Mask, RgbImage};
use crate::homography::{
    decompose_with_plane, fit_homography_ransac, plane_homography, PlanarMotion, Plane, RansacConfig,
};
use crate::kaleido::PerspectiveMap;
use crate::metrics::rotation_angle;
use crate::rectify::{best_shift, blur, circular_correlation, fit_frame, frame_from_plane, polar_profile};
use crate::pose::{CameraPose, Intrinsics, RotationMatrix};
use crate::scene::Pointmap;

/// Matcher and estimator settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatcherConfig {
    pub keypoints: usize,
    /// Side of the square correlation window, odd.
    pub window: usize,
    pub min_score: f64,
    /// Maximum pixel distance between a keypoint and its candidates.
    pub search_radius: f64,
    /// Candidates per keypoint of the first view are drawn from the
    /// `candidate_factor · keypoints` strongest keypoints of the second.
    pub candidate_factor: usize,
    /// Minimum spacing between keypoints.
    pub nms_radius: f64,
    /// Score penalty per pixel of displacement, normalized by the search
    /// radius, which breaks near-ties in favor of nearby candidates.
    pub proximity_weight: f64,
    /// Search radius of guided matching around the predicted position.
    pub guided_radius: f64,
    /// Correlation penalty per 180° of relative camera rotation when
    /// choosing the in-plane rotation between the rectified discs.
    pub rotation_prior: f64,
    pub polar_rings: usize,
    pub polar_bins: usize,
    pub ransac: RansacConfig,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            keypoints: 150,
            window: 11,
            min_score: 0.5,
            search_radius: 96.0,
            candidate_factor: 3,
            nms_radius: 3.0,
            proximity_weight: 0.02,
            guided_radius: 8.0,
            rotation_prior: 0.1,
            polar_rings: 16,
            polar_bins: 180,
            ransac: RansacConfig::default(),
        }
    }
}

/// Minimum surviving matches for pose estimation.
pub const MIN_MATCHES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub a: [f64; 2],
    pub b: [f64; 2],
    pub score: f64,
}

/// Sobel gradient magnitude.
fn gradient_magnitude(gray: &Grid<f32>) -> Grid<f32> {
    let (w, h) = (gray.width(), gray.height());
    let g = |r: usize, c: usize| gray[(r.min(h - 1), c.min(w - 1))];
    Grid::from_fn(w, h, |r, c| {
        if r == 0 || c == 0 || r + 1 >= h || c + 1 >= w {
            return 0.0;
        }
        let gx = (g(r - 1, c + 1) + 2.0 * g(r, c + 1) + g(r + 1, c + 1))
            - (g(r - 1, c - 1) + 2.0 * g(r, c - 1) + g(r + 1, c - 1));
        let gy = (g(r + 1, c - 1) + 2.0 * g(r + 1, c) + g(r + 1, c + 1))
            - (g(r - 1, c - 1) + 2.0 * g(r - 1, c) + g(r - 1, c + 1));
        (gx * gx + gy * gy).sqrt()
    })
}

/// Pixels whose `(2r+1)²` neighbourhood lies inside `mask` and the image.
fn erode(mask: &Mask, r: usize) -> Mask {
    let (w, h) = (mask.width(), mask.height());
    // summed-area table of the mask
    let mut sat = vec![0u32; (w + 1) * (h + 1)];
    for row in 0..h {
        for col in 0..w {
            sat[(row + 1) * (w + 1) + col + 1] = mask[(row, col)] as u32
                + sat[row * (w + 1) + col + 1]
                + sat[(row + 1) * (w + 1) + col]
                - sat[row * (w + 1) + col];
        }
    }
    let side = (2 * r + 1) as u32;
    Grid::from_fn(w, h, |row, col| {
        if row < r || col < r || row + r >= h || col + r >= w {
            return false;
        }
        let (r0, c0, r1, c1) = (row - r, col - r, row + r + 1, col + r + 1);
        let s = sat[r1 * (w + 1) + c1] + sat[r0 * (w + 1) + c0]
            - sat[r0 * (w + 1) + c1]
            - sat[r1 * (w + 1) + c0];
        s == side * side
    })
}

/// Strongest-gradient pixels in `region`, at least `spacing` apart.
fn detect(grad: &Grid<f32>, region: &Mask, count: usize, spacing: f64) -> Vec<[usize; 2]> {
    let w = grad.width();
    let mut cand: Vec<(f32, usize)> = region
        .data()
        .iter()
        .enumerate()
        .filter(|&(i, &m)| m && grad.data()[i] > 1e-6)
        .map(|(i, _)| (grad.data()[i], i))
        .collect();
    cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut taken = Grid::new(w, grad.height(), false);
    let s = spacing.ceil() as isize;
    let mut out = Vec::with_capacity(count);
    for (_, i) in cand {
        if out.len() == count {
            break;
        }
        let (row, col) = ((i / w) as isize, (i % w) as isize);
        let mut clear = true;
        'scan: for dr in -s..=s {
            for dc in -s..=s {
                if ((dr * dr + dc * dc) as f64) >= spacing * spacing {
                    continue;
                }
                let (r, c) = (row + dr, col + dc);
                if r >= 0 && c >= 0 && (r as usize) < grad.height() && (c as usize) < w && taken[(r as usize, c as usize)] {
                    clear = false;
                    break 'scan;
                }
            }
        }
        if clear {
            taken[(row as usize, col as usize)] = true;
            out.push([row as usize, col as usize]);
        }
    }
    out
}

/// Orientation from the intensity centroid of a disc of radius `radius`.
fn orientation(gray: &Grid<f32>, at: [f64; 2], radius: isize) -> f64 {
    let (mut m10, mut m01) = (0.0f64, 0.0f64);
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            if dx * dx + dy * dy > radius * radius {
                continue;
            }
            let v = sample_scalar(gray, at[0] + dx as f64, at[1] + dy as f64) as f64;
            m10 += dx as f64 * v;
            m01 += dy as f64 * v;
        }
    }
    m01.atan2(m10)
}

/// Zero-mean, unit-norm oriented patch; `None` for flat patches.
fn descriptor(gray: &Grid<f32>, at: [f64; 2], angle: f64, half: isize) -> Option<Vec<f32>> {
    let (s, c) = angle.sin_cos();
    let mut v = Vec::with_capacity(((2 * half + 1) * (2 * half + 1)) as usize);
    for j in -half..=half {
        for i in -half..=half {
            let (u, w) = (i as f64, j as f64);
            v.push(sample_scalar(gray, at[0] + c * u - s * w, at[1] + s * u + c * w));
        }
    }
    let mean = v.iter().sum::<f32>() / v.len() as f32;
    let mut norm = 0.0f32;
    for x in v.iter_mut() {
        *x -= mean;
        norm += *x * *x;
    }
    let norm = norm.sqrt();
    if norm < 1e-4 {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Some(v)
}

fn zncc(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f32>() as f64
}

struct Feature {
    at: [f64; 2],
    angle: f64,
    desc: Vec<f32>,
}

fn features(gray: &Grid<f32>, points: &[[usize; 2]], half: isize) -> Vec<Feature> {
    points
        .par_iter()
        .filter_map(|&[row, col]| {
            let at = [col as f64, row as f64];
            let angle = orientation(gray, at, half + 1);
            descriptor(gray, at, angle, half).map(|desc| Feature { at, angle, desc })
        })
        .collect()
}

/// Matches gradient keypoints of `img_a` inside `mask_a` into `img_b`.
/// Candidates in `img_b` are restricted to `mask_b` when given.
pub fn detect_and_match(
    img_a: &RgbImage,
    img_b: &RgbImage,
    mask_a: &Mask,
    mask_b: Option<&Mask>,
    cfg: &MatcherConfig,
) -> Result<Vec<Match>> {
    if cfg.keypoints < MIN_MATCHES {
        return Err(Error::InvalidConfig(format!(
            "need at least {MIN_MATCHES} keypoints, got {}",
            cfg.keypoints
        )));
    }
    if cfg.window % 2 == 0 || cfg.window < 3 {
        return Err(Error::InvalidConfig(format!(
            "correlation window must be odd and at least 3, got {}",
            cfg.window
        )));
    }
    if !img_a.same_shape(mask_a) {
        return Err(Error::InvalidInput("mask does not match image a".into()));
    }
    let half = (cfg.window / 2) as isize;
    let margin = cfg.window / 2 + 2;
    let gray_a = img_a.luma();
    let gray_b = img_b.luma();
    let region_a = erode(mask_a, margin);
    let region_b = match mask_b {
        Some(m) => erode(m, margin),
        None => erode(&Grid::new(img_b.width(), img_b.height(), true), margin),
    };
    let kp_a = detect(&gradient_magnitude(&gray_a), &region_a, cfg.keypoints, cfg.nms_radius);
    let kp_b = detect(
        &gradient_magnitude(&gray_b),
        &region_b,
        cfg.keypoints * cfg.candidate_factor,
        cfg.nms_radius,
    );
    let fa = features(&gray_a, &kp_a, half);
    let fb = features(&gray_b, &kp_b, half);
    let r2 = cfg.search_radius * cfg.search_radius;
    let matches: Vec<Match> = fa
        .par_iter()
        .filter_map(|f| {
            let mut best: Option<(f64, f64, &Feature)> = None;
            for g in &fb {
                let d2 = (g.at[0] - f.at[0]).powi(2) + (g.at[1] - f.at[1]).powi(2);
                if d2 > r2 {
                    continue;
                }
                let score = zncc(&f.desc, &g.desc);
                let ranked = score - cfg.proximity_weight * d2.sqrt() / cfg.search_radius.max(1.0);
                if best.as_ref().is_none_or(|(r, _, _)| ranked > *r) {
                    best = Some((ranked, score, g));
                }
            }
            let (_, score, g) = best?;
            let (b, score) = refine(&gray_b, &f.desc, g, score, half);
            (score >= cfg.min_score).then_some(Match { a: f.at, b, score })
        })
        .collect();
    if matches.len() < MIN_MATCHES {
        return Err(Error::InsufficientMatches {
            found: matches.len(),
            required: MIN_MATCHES,
        });
    }
    Ok(matches)
}

/// Offset of the vertex of the parabola through `(-1, m)`, `(0, c)`, `(1, p)`,
/// or zero when it is not a maximum.
fn parabola_vertex(m: f64, c: f64, p: f64) -> f64 {
    let den = m - 2.0 * c + p;
    if den < -1e-12 {
        (0.5 * (m - p) / den).clamp(-0.5, 0.5)
    } else {
        0.0
    }
}

/// Local integer search around a candidate followed by a parabolic
/// sub-pixel fit, keeping the candidate's orientation.
fn refine(gray: &Grid<f32>, desc: &[f32], g: &Feature, score: f64, half: isize) -> ([f64; 2], f64) {
    if score >= 1.0 - 1e-5 {
        return (g.at, score);
    }
    let eval = |dx: f64, dy: f64| {
        descriptor(gray, [g.at[0] + dx, g.at[1] + dy], g.angle, half)
            .map(|d| zncc(desc, &d))
            .unwrap_or(-1.0)
    };
    let mut best = (0isize, 0isize, score);
    for dy in -2isize..=2 {
        for dx in -2isize..=2 {
            if dx == 0 && dy == 0 {
                continue;
            }
            let s = eval(dx as f64, dy as f64);
            if s > best.2 {
                best = (dx, dy, s);
            }
        }
    }
    let (bx, by, bs) = best;
    let (x, y) = (bx as f64, by as f64);
    let ox = parabola_vertex(eval(x - 1.0, y), bs, eval(x + 1.0, y));
    let oy = parabola_vertex(eval(x, y - 1.0), bs, eval(x, y + 1.0));
    ([g.at[0] + x + ox, g.at[1] + y + oy], bs)
}

/// Relative motion from rectifying both discs and aligning their polar
/// profiles.
pub fn rectified_motion(input: &VictimInput, cfg: &MatcherConfig) -> Result<PlanarMotion> {
    if cfg.polar_rings == 0 || cfg.polar_bins < 8 {
        return Err(Error::InvalidConfig(format!(
            "polar profile needs at least one ring and 8 bins, got {}x{}",
            cfg.polar_rings, cfg.polar_bins
        )));
    }
    let intr = input.intrinsics;
    let fa = frame_from_plane(&input.plane_a, input.mask_a, input.center_a, intr)
        .ok_or_else(|| Error::EstimationFailed("disc outline in view a is unusable".into()))?;
    let fb = fit_frame(input.mask_b, input.center_b, intr)
        .ok_or_else(|| Error::EstimationFailed("disc outline in view b is unusable".into()))?;
    let fb = fb.scaled(fa.radius / fb.radius);
    let pa = polar_profile(&blur(&input.image_a.luma()), input.mask_a, intr, &fa, cfg.polar_rings, cfg.polar_bins);
    let pb = polar_profile(&blur(&input.image_b.luma()), input.mask_b, intr, &fb, cfg.polar_rings, cfg.polar_bins);
    let motion = |phi: f64| -> Result<PlanarMotion> {
        let rz = *RotationMatrix::rot_z(phi).matrix();
        let rotation = RotationMatrix::closest_to(&(fb.basis * rz * fa.basis.transpose()))?;
        let translation = fb.center - rotation.matrix() * fa.center;
        Ok(PlanarMotion { rotation, translation })
    };
    let score = circular_correlation(&pa, &pb);
    let phi = best_shift(&score, |phi| {
        motion(phi).map_or(f64::INFINITY, |m| {
            cfg.rotation_prior * rotation_angle(&m.rotation, &RotationMatrix::identity()) / 180.0
        })
    })
    .ok_or_else(|| Error::EstimationFailed("rectified discs do not overlap".into()))?;
    motion(phi)
}

/// Norm of the zero-mean `(2·half+1)²` window around every pixel, zero where
/// the window leaves the image.
fn window_norms(gray: &Grid<f32>, half: usize) -> Grid<f32> {
    let (w, h) = (gray.width(), gray.height());
    let mut s1 = vec![0f64; (w + 1) * (h + 1)];
    let mut s2 = vec![0f64; (w + 1) * (h + 1)];
    for r in 0..h {
        for c in 0..w {
            let v = gray[(r, c)] as f64;
            let i = (r + 1) * (w + 1) + c + 1;
            s1[i] = v + s1[i - 1] + s1[i - w - 1] - s1[i - w - 2];
            s2[i] = v * v + s2[i - 1] + s2[i - w - 1] - s2[i - w - 2];
        }
    }
    let n = ((2 * half + 1) * (2 * half + 1)) as f64;
    Grid::from_fn(w, h, |r, c| {
        if r < half || c < half || r + half >= h || c + half >= w {
            return 0.0;
        }
        let box_sum = |s: &[f64]| {
            let (r0, c0, r1, c1) = (r - half, c - half, r + half + 1, c + half + 1);
            s[r1 * (w + 1) + c1] - s[r0 * (w + 1) + c1] - s[r1 * (w + 1) + c0] + s[r0 * (w + 1) + c0]
        };
        let (a, b) = (box_sum(&s1), box_sum(&s2));
        (b - a * a / n).max(0.0).sqrt() as f32
    })
}

/// Matches keypoints of `img_a` warped into view b by `h` against `img_b`,
/// searching within `radius` pixels of each warped keypoint.
pub fn guided_matches(
    img_a: &RgbImage,
    img_b: &RgbImage,
    mask_a: &Mask,
    mask_b: &Mask,
    h: &PerspectiveMap,
    radius: f64,
    cfg: &MatcherConfig,
) -> Result<Vec<Match>> {
    let half = (cfg.window / 2) as isize;
    let margin = cfg.window / 2 + 2;
    let gray_a = img_a.luma();
    let gray_b = img_b.luma();
    let (w, hgt) = (gray_b.width(), gray_b.height());
    let inv = h.inverse();
    let back = Grid::from_fn(w, hgt, |r, c| {
        inv.apply([c as f64, r as f64]).filter(|p| {
            p[0] >= 0.0
                && p[1] >= 0.0
                && p[0] <= (gray_a.width() - 1) as f64
                && p[1] <= (gray_a.height() - 1) as f64
                && mask_a[(p[1].round() as usize, p[0].round() as usize)]
        })
    });
    let warped = Grid::from_fn(w, hgt, |r, c| back[(r, c)].map_or(0.0, |p| sample_scalar(&gray_a, p[0], p[1])));
    let region = erode(
        &Grid::from_fn(w, hgt, |r, c| back[(r, c)].is_some() && mask_b[(r, c)]),
        margin,
    );
    let kp = detect(&gradient_magnitude(&warped), &region, cfg.keypoints, cfg.nms_radius);
    let reach = radius.floor() as isize;
    let span = (2 * reach + 1) as usize;
    let norms = window_norms(&gray_b, half as usize);
    let side = (2 * half + 1) as usize;
    let matches: Vec<Match> = kp
        .par_iter()
        .filter_map(|&[row, col]| {
            let desc = descriptor(&warped, [col as f64, row as f64], 0.0, half)?;
            let mut scores = vec![f64::NAN; span * span];
            let mut best: Option<(f64, isize, isize)> = None;
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    if ((dx * dx + dy * dy) as f64) > radius * radius {
                        continue;
                    }
                    let (y, x) = (row as isize + dy, col as isize + dx);
                    if y < half || x < half || y + half >= hgt as isize || x + half >= w as isize {
                        continue;
                    }
                    let norm = norms[(y as usize, x as usize)];
                    if norm < 1e-4 {
                        continue;
                    }
                    let mut dot = 0.0f32;
                    for (j, rd) in desc.chunks_exact(side).enumerate() {
                        let start = ((y - half) as usize + j) * w + (x - half) as usize;
                        dot += rd.iter().zip(&gray_b.data()[start..start + side]).map(|(a, b)| a * b).sum::<f32>();
                    }
                    let s = (dot / norm) as f64;
                    scores[((dy + reach) as usize) * span + (dx + reach) as usize] = s;
                    if best.is_none_or(|(b, _, _)| s > b) {
                        best = Some((s, dx, dy));
                    }
                }
            }
            let (score, dx, dy) = best?;
            let at = |dx: isize, dy: isize| {
                if dx.abs() > reach || dy.abs() > reach {
                    return f64::NAN;
                }
                scores[((dy + reach) as usize) * span + (dx + reach) as usize]
            };
            let ox = parabola_vertex(at(dx - 1, dy), score, at(dx + 1, dy));
            let oy = parabola_vertex(at(dx, dy - 1), score, at(dx, dy + 1));
            let b = [(col as isize + dx) as f64 + ox, (row as isize + dy) as f64 + oy];
            let a = back[(row, col)]?;
            (score >= cfg.min_score).then_some(Match { a, b, score })
        })
        .collect();
    if matches.len() < MIN_MATCHES {
        return Err(Error::InsufficientMatches {
            found: matches.len(),
            required: MIN_MATCHES,
        });
    }
    Ok(matches)
}

/// Relative pose of camera b with respect to camera a.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatedRelPose {
    pub rotation: RotationMatrix,
    /// Unit translation direction, or zero for a pure rotation.
    pub direction: Vector3<f64>,
    /// Metric translation implied by the known plane distance.
    pub translation: Vector3<f64>,
    pub inliers: usize,
    pub homography: PerspectiveMap,
}

impl EstimatedRelPose {
    pub fn is_pure_rotation(&self) -> bool {
        self.direction == Vector3::zeros()
    }

    /// Pose of camera b when camera a has pose `a`.
    pub fn pose_b(&self, a: &CameraPose) -> CameraPose {
        CameraPose {
            rotation: self.rotation,
            translation: self.translation,
        }
        .compose(a)
    }
}

/// Robust homography over the matches, decomposed with the ground plane
/// given in camera a's frame.
pub fn estimate_pose(
    matches: &[Match],
    intr: &Intrinsics,
    plane: &Plane,
    ransac: &RansacConfig,
) -> Result<EstimatedRelPose> {
    if matches.len() < MIN_MATCHES {
        return Err(Error::InsufficientMatches {
            found: matches.len(),
            required: MIN_MATCHES,
        });
    }
    let src: Vec<[f64; 2]> = matches.iter().map(|m| m.a).collect();
    let dst: Vec<[f64; 2]> = matches.iter().map(|m| m.b).collect();
    let fit = fit_homography_ransac(&src, &dst, ransac)?;
    let probes: Vec<[f64; 2]> = src
        .iter()
        .zip(&fit.inliers)
        .filter(|(_, &k)| k)
        .map(|(p, _)| *p)
        .collect();
    let motion = decompose_with_plane(&fit.map, intr, plane, &probes)?;
    let norm = motion.translation.norm();
    let direction = if norm > 1e-9 {
        motion.translation / norm
    } else {
        Vector3::zeros()
    };
    Ok(EstimatedRelPose {
        rotation: motion.rotation,
        direction,
        translation: motion.translation,
        inliers: fit.inlier_count(),
        homography: fit.map,
    })
}

fn plane_pointmap(intr: &Intrinsics, plane: &Plane, to_a: impl Fn(Vector3<f64>) -> Vector3<f64>) -> Pointmap {
    let (w, h) = (intr.width, intr.height);
    let mut coords = Grid::new(w, h, [0.0f32; 3]);
    let mut valid = Grid::new(w, h, false);
    for row in 0..h {
        for col in 0..w {
            let ray = intr.ray(col as f64, row as f64);
            let denom = plane.normal.dot(&ray);
            if denom.abs() < 1e-12 {
                continue;
            }
            let s = plane.distance / denom;
            if s <= 0.0 {
                continue;
            }
            let p = to_a(ray * s);
            coords[(row, col)] = [p.x as f32, p.y as f32, p.z as f32];
            valid[(row, col)] = true;
        }
    }
    Pointmap { coords, valid }
}

/// Intersects every pixel ray of both views with the estimated plane and
/// expresses both pointmaps in camera a's frame.
pub fn pointmaps_from_estimate(
    est: &EstimatedRelPose,
    intr: &Intrinsics,
    plane: &Plane,
) -> Result<(Pointmap, Pointmap)> {
    if !(plane.distance > 0.0) {
        return Err(Error::EstimationFailed("plane is behind the camera".into()));
    }
    let r = *est.rotation.matrix();
    let t = est.translation;
    let n_b = r * plane.normal;
    let d_b = plane.distance + n_b.dot(&t);
    if !(d_b > 0.0) {
        return Err(Error::EstimationFailed(
            "estimated plane is behind camera b".into(),
        ));
    }
    let pa = plane_pointmap(intr, plane, |p| p);
    let pb = plane_pointmap(
        intr,
        &Plane {
            normal: n_b,
            distance: d_b,
        },
        |p| r.transpose() * (p - t),
    );
    Ok((pa, pb))
}

/// The ground plane `y = 0` in the frame of a camera with pose `pose`.
pub fn ground_plane_in(pose: &CameraPose) -> Plane {
    Plane {
        normal: -(pose.rotation * Vector3::y()),
        distance: pose.center().y,
    }
}

/// What a victim sees of a view pair.
#[derive(Debug, Clone, Copy)]
pub struct VictimInput<'a> {
    pub image_a: &'a RgbImage,
    pub image_b: &'a RgbImage,
    pub mask_a: &'a Mask,
    pub mask_b: &'a Mask,
    pub center_a: [f64; 2],
    pub center_b: [f64; 2],
    pub intrinsics: &'a Intrinsics,
    /// Ground plane in camera a's frame.
    pub plane_a: Plane,
}

/// Pointmaps of both views in camera a's frame, plus image gradients of the
/// loss when the victim can supply them.
#[derive(Debug, Clone, PartialEq)]
pub struct VictimOutput {
    pub pointmap_a: Pointmap,
    pub pointmap_b: Pointmap,
    pub image_gradients: Option<(RgbImage, RgbImage)>,
}

/// A pointmap regressor under attack.
pub trait Victim: Sync {
    fn infer(&self, input: &VictimInput, want_gradients: bool) -> Result<VictimOutput>;

    /// Whether `infer` can return image gradients.
    fn provides_gradients(&self) -> bool {
        false
    }
}

/// Correspondence-and-homography estimator.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BuiltinVictim {
    pub config: MatcherConfig,
}

impl BuiltinVictim {
    pub fn new(config: MatcherConfig) -> Self {
        Self { config }
    }

    pub fn estimate(&self, input: &VictimInput) -> Result<EstimatedRelPose> {
        let cfg = &self.config;
        if cfg.window % 2 == 0 || cfg.window < 3 {
            return Err(Error::InvalidConfig(format!(
                "correlation window must be odd and at least 3, got {}",
                cfg.window
            )));
        }
        if !(cfg.guided_radius >= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "guided search radius must be at least 1, got {}",
                cfg.guided_radius
            )));
        }
        let init = rectified_motion(input, cfg)?;
        let mut h = plane_homography(input.intrinsics, &init, &input.plane_a)?;
        let mut est = None;
        for radius in [cfg.guided_radius, (cfg.guided_radius / 2.0).max(1.0)] {
            let matches = guided_matches(input.image_a, input.image_b, input.mask_a, input.mask_b, &h, radius, cfg)?;
            let e = estimate_pose(&matches, input.intrinsics, &input.plane_a, &cfg.ransac)?;
            h = e.homography;
            est = Some(e);
        }
        Ok(est.expect("at least one refinement round"))
    }

    /// Pose of camera b relative to camera a.
    pub fn relative_pose(&self, input: &VictimInput) -> Result<CameraPose> {
        let est = self.estimate(input)?;
        Ok(CameraPose {
            rotation: est.rotation,
            translation: est.translation,
        })
    }
}

impl Victim for BuiltinVictim {
    fn infer(&self, input: &VictimInput, _want_gradients: bool) -> Result<VictimOutput> {
        let est = self.estimate(input)?;
        let (pointmap_a, pointmap_b) = pointmaps_from_estimate(&est, input.intrinsics, &input.plane_a)?;
        Ok(VictimOutput {
            pointmap_a,
            pointmap_b,
            image_gradients: None,
        })
    }
}
