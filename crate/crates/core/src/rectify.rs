//! Metric rectification of a circular ground disc seen by a calibrated
//! camera, and recovery of the in-plane rotation between two views of it.
//!
//! A view's disc frame holds the disc center in camera coordinates, an
//! orthonormal basis whose first two columns span the ground plane and whose
//! third column is the plane normal pointing toward the camera, and the disc
//! radius. With the plane unknown, the normal is found by requiring the
//! back-projected outline of the disc mask to be a circle around the
//! back-projected disc center.

use nalgebra::{Matrix3, Vector3};

use crate::grid::{sample_scalar, Grid, Mask};
use crate::homography::Plane;
use crate::pose::Intrinsics;

/// Disc on a plane, in a camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscFrame {
    pub center: Vector3<f64>,
    /// Columns: two in-plane axes and the normal pointing toward the camera.
    pub basis: Matrix3<f64>,
    pub radius: f64,
}

impl DiscFrame {
    fn new(center: Vector3<f64>, up: Vector3<f64>, radius: f64) -> Self {
        let up = up.normalize();
        let mut e1 = Vector3::x() - up * up.x;
        if e1.norm() < 1e-6 {
            e1 = Vector3::y() - up * up.y;
        }
        let e1 = e1.normalize();
        let e2 = up.cross(&e1);
        Self {
            center,
            basis: Matrix3::from_columns(&[e1, e2, up]),
            radius,
        }
    }

    /// Same frame with every length multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        Self {
            center: self.center * k,
            basis: self.basis,
            radius: self.radius * k,
        }
    }

    /// Point at polar position `(rho, theta)` in the disc plane.
    pub fn point(&self, rho: f64, theta: f64) -> Vector3<f64> {
        let (s, c) = theta.sin_cos();
        self.center + self.basis.column(0) * (rho * c) + self.basis.column(1) * (rho * s)
    }
}

/// Midpoints between mask pixels and their unmasked 4-neighbours. Pixels on
/// the image border are skipped since the outline may continue beyond it.
pub fn mask_edges(mask: &Mask) -> Vec<[f64; 2]> {
    let (w, h) = (mask.width(), mask.height());
    let mut out = Vec::new();
    for r in 1..h.saturating_sub(1) {
        for c in 1..w.saturating_sub(1) {
            if !mask[(r, c)] {
                continue;
            }
            for (dr, dc) in [(0isize, 1isize), (0, -1), (1, 0), (-1, 0)] {
                let (rr, cc) = ((r as isize + dr) as usize, (c as isize + dc) as usize);
                if !mask[(rr, cc)] {
                    out.push([c as f64 + 0.5 * dc as f64, r as f64 + 0.5 * dr as f64]);
                }
            }
        }
    }
    out
}

fn median(v: &mut [f64]) -> f64 {
    let mid = v.len() / 2;
    *v.select_nth_unstable_by(mid, f64::total_cmp).1
}

/// Radii of the outline rays on the plane `n·X = 1` around the center ray's
/// intersection, or `None` when a ray misses the plane.
fn radii(rays: &[Vector3<f64>], center: &Vector3<f64>, n: &Vector3<f64>) -> Option<Vec<f64>> {
    let dc = n.dot(center);
    if dc <= 1e-9 {
        return None;
    }
    let c = center / dc;
    rays.iter()
        .map(|r| {
            let d = n.dot(r);
            (d > 1e-9).then(|| (r / d - c).norm())
        })
        .collect()
}

/// Trimmed mean squared log deviation of the radii from their median, and
/// the median itself.
fn circle_cost(rays: &[Vector3<f64>], center: &Vector3<f64>, n: &Vector3<f64>) -> Option<(f64, f64)> {
    let mut rad = radii(rays, center, n)?;
    let med = median(&mut rad);
    if !(med > 1e-12) {
        return None;
    }
    let mut dev: Vec<f64> = rad.iter().map(|r| (r / med).ln().powi(2)).collect();
    dev.sort_by(f64::total_cmp);
    let keep = (dev.len() * 4 / 5).max(1);
    Some((dev[..keep].iter().sum::<f64>() / keep as f64, med))
}

fn normal(tilt: f64, azimuth: f64) -> Vector3<f64> {
    let (st, ct) = tilt.sin_cos();
    let (sa, ca) = azimuth.sin_cos();
    Vector3::new(st * ca, st * sa, ct)
}

/// Minimum number of outline points for a frame estimate.
pub const MIN_EDGES: usize = 24;

/// Disc frame when the plane is known. The radius is the median distance of
/// the mask outline from the center on the plane.
pub fn frame_from_plane(plane: &Plane, mask: &Mask, center_px: [f64; 2], intr: &Intrinsics) -> Option<DiscFrame> {
    let edges = mask_edges(mask);
    if edges.len() < MIN_EDGES || !(plane.distance > 0.0) {
        return None;
    }
    let rays: Vec<Vector3<f64>> = edges.iter().map(|p| intr.ray(p[0], p[1])).collect();
    let n = plane.normal.normalize();
    let cr = intr.ray(center_px[0], center_px[1]);
    let mut rad = radii(&rays, &cr, &n)?;
    let r = median(&mut rad) * plane.distance;
    let center = cr * (plane.distance / n.dot(&cr));
    Some(DiscFrame::new(center, -n, r))
}

/// Disc frame with the plane unknown, at unit plane distance.
pub fn fit_frame(mask: &Mask, center_px: [f64; 2], intr: &Intrinsics) -> Option<DiscFrame> {
    let edges = mask_edges(mask);
    if edges.len() < MIN_EDGES {
        return None;
    }
    let rays: Vec<Vector3<f64>> = edges.iter().map(|p| intr.ray(p[0], p[1])).collect();
    let cr = intr.ray(center_px[0], center_px[1]);
    let stride = (rays.len() / 64).max(1);
    let coarse: Vec<Vector3<f64>> = rays.iter().step_by(stride).copied().collect();

    let mut seeds: Vec<(f64, f64, f64)> = Vec::new();
    for ti in 0..=29 {
        let tilt = (3.0 * ti as f64).to_radians();
        let steps = if ti == 0 { 1 } else { 45 };
        for ai in 0..steps {
            let az = (8.0 * ai as f64).to_radians();
            if let Some((cost, _)) = circle_cost(&coarse, &cr, &normal(tilt, az)) {
                seeds.push((cost, tilt, az));
            }
        }
    }
    seeds.sort_by(|a, b| a.0.total_cmp(&b.0));

    let eval = |rays: &[Vector3<f64>], t: f64, a: f64| {
        if !(0.0..(89.5f64).to_radians()).contains(&t) {
            return f64::INFINITY;
        }
        circle_cost(rays, &cr, &normal(t, a)).map_or(f64::INFINITY, |c| c.0)
    };
    let descend = |rays: &[Vector3<f64>], t: f64, a: f64, mut step: f64, stop: f64| {
        let (mut t, mut a) = (t, a);
        let mut cost = eval(rays, t, a);
        while step > stop {
            let astep = step / t.sin().max(0.05);
            let moves = [(step, 0.0), (-step, 0.0), (0.0, astep), (0.0, -astep)];
            let found = moves
                .iter()
                .map(|&(dt, da)| (eval(rays, t + dt, a + da), t + dt, a + da))
                .filter(|m| m.0 < cost)
                .min_by(|x, y| x.0.total_cmp(&y.0));
            match found {
                Some((c, nt, na)) => {
                    cost = c;
                    t = nt;
                    a = na;
                }
                None => step *= 0.5,
            }
        }
        (cost, t, a)
    };
    let coarse_best = seeds
        .iter()
        .take(3)
        .map(|&(_, t, a)| descend(&coarse, t, a, 3f64.to_radians(), 0.1f64.to_radians()))
        .min_by(|x, y| x.0.total_cmp(&y.0))
        .unwrap_or((f64::INFINITY, 0.0, 0.0));
    let best = descend(&rays, coarse_best.1, coarse_best.2, 0.2f64.to_radians(), 1e-4);
    if !best.0.is_finite() {
        return None;
    }
    let n = normal(best.1, best.2);
    let (_, r) = circle_cost(&rays, &cr, &n)?;
    Some(DiscFrame::new(cr / n.dot(&cr), -n, r))
}

/// Polar resampling of a disc.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarProfile {
    pub rings: usize,
    pub bins: usize,
    /// Ring-major samples; NaN where the disc is not visible.
    pub values: Vec<f32>,
}

/// Samples `gray` on `rings × bins` polar positions of the disc between 15%
/// and 90% of its radius, keeping only positions inside `mask`.
pub fn polar_profile(
    gray: &Grid<f32>,
    mask: &Mask,
    intr: &Intrinsics,
    frame: &DiscFrame,
    rings: usize,
    bins: usize,
) -> PolarProfile {
    let (w, h) = (gray.width() as f64, gray.height() as f64);
    let mut values = Vec::with_capacity(rings * bins);
    for k in 0..rings {
        let rho = frame.radius * (0.15 + 0.75 * (k as f64 + 0.5) / rings as f64);
        for j in 0..bins {
            let theta = std::f64::consts::TAU * j as f64 / bins as f64;
            let v = intr
                .project(&frame.point(rho, theta))
                .ok()
                .filter(|p| p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= w - 1.0 && p[1] <= h - 1.0)
                .filter(|p| mask[(p[1].round() as usize, p[0].round() as usize)])
                .map_or(f32::NAN, |p| sample_scalar(gray, p[0], p[1]));
            values.push(v);
        }
    }
    PolarProfile { rings, bins, values }
}

/// Normalized cross-correlation of `a(θ)` with `b(θ + shift)` for every bin
/// shift; NaN where too few samples overlap.
pub fn circular_correlation(a: &PolarProfile, b: &PolarProfile) -> Vec<f64> {
    assert_eq!((a.rings, a.bins), (b.rings, b.bins));
    let (rings, bins) = (a.rings, a.bins);
    let min_overlap = (rings * bins / 4).max(8);
    (0..bins)
        .map(|s| {
            let (mut n, mut sa, mut sb, mut saa, mut sbb, mut sab) = (0usize, 0.0, 0.0, 0.0, 0.0, 0.0);
            for k in 0..rings {
                let ra = &a.values[k * bins..(k + 1) * bins];
                let rb = &b.values[k * bins..(k + 1) * bins];
                for j in 0..bins {
                    let (x, y) = (ra[j] as f64, rb[(j + s) % bins] as f64);
                    if x.is_nan() || y.is_nan() {
                        continue;
                    }
                    n += 1;
                    sa += x;
                    sb += y;
                    saa += x * x;
                    sbb += y * y;
                    sab += x * y;
                }
            }
            if n < min_overlap {
                return f64::NAN;
            }
            let nf = n as f64;
            let cov = sab - sa * sb / nf;
            let va = saa - sa * sa / nf;
            let vb = sbb - sb * sb / nf;
            if va <= 1e-12 || vb <= 1e-12 {
                return f64::NAN;
            }
            cov / (va * vb).sqrt()
        })
        .collect()
}

/// Shift in radians maximizing `score[s] - penalty(angle_s)`, refined to
/// sub-bin precision by a parabola through the neighbouring scores.
pub fn best_shift(score: &[f64], penalty: impl Fn(f64) -> f64) -> Option<f64> {
    let bins = score.len();
    let step = std::f64::consts::TAU / bins as f64;
    let (s, _) = score
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .map(|(s, v)| (s, v - penalty(s as f64 * step)))
        .max_by(|x, y| x.1.total_cmp(&y.1))?;
    let (m, c, p) = (score[(s + bins - 1) % bins], score[s], score[(s + 1) % bins]);
    let den = m - 2.0 * c + p;
    let off = if den < -1e-12 && m.is_finite() && p.is_finite() {
        (0.5 * (m - p) / den).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    Some((s as f64 + off) * step)
}

/// 1-2-1 binomial blur in both directions.
pub fn blur(gray: &Grid<f32>) -> Grid<f32> {
    let (w, h) = (gray.width(), gray.height());
    let at = |g: &Grid<f32>, r: isize, c: isize| {
        g[(r.clamp(0, h as isize - 1) as usize, c.clamp(0, w as isize - 1) as usize)]
    };
    let horiz = Grid::from_fn(w, h, |r, c| {
        let (r, c) = (r as isize, c as isize);
        0.25 * at(gray, r, c - 1) + 0.5 * at(gray, r, c) + 0.25 * at(gray, r, c + 1)
    });
    Grid::from_fn(w, h, |r, c| {
        let (r, c) = (r as isize, c as isize);
        0.25 * at(&horiz, r - 1, c) + 0.5 * at(&horiz, r, c) + 0.25 * at(&horiz, r + 1, c)
    })
}
