//! Projected orientation consistency.
//!
//! A pointmap channel restricted to the disc region is summarized by a flow
//! direction: the disc is bisected by a line through its center and the
//! channel means on the two halves are differenced. Three line orientations
//! 30° apart, each paired with its perpendicular, are averaged so that a
//! partially occluded disc still yields a stable direction. The loss of a
//! view pair is the sum over channels of the cosine between their flows.
//!
//! Pixel `(row, col)` sits at `(x, y) = (col, row)`; line normals are measured
//! from the image `+x` axis towards `+y`.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::pose::{projected_orientation, CameraPose, Intrinsics, RotationMatrix};
use crate::scene::{Pointmap, RenderPlan, SceneConfig, Viewpoint};

/// Flow norms below this count as degenerate.
pub const EPS: f64 = 1e-9;

/// Normal angles of the three bisection lines, in degrees.
pub const LINE_ANGLES_DEG: [f64; 3] = [0.0, 30.0, 60.0];

/// A line through the disc center, described by its normal angle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BisectionLine {
    angle: f64,
}

impl BisectionLine {
    /// `angle` in radians; folded into `[0, π)`.
    pub fn new(angle: f64) -> Self {
        Self {
            angle: angle.rem_euclid(std::f64::consts::PI),
        }
    }

    pub fn from_degrees(deg: f64) -> Self {
        Self::new(deg.to_radians())
    }

    pub fn angle(&self) -> f64 {
        self.angle
    }

    /// Unit normal `ü`.
    pub fn normal(&self) -> [f64; 2] {
        [self.angle.cos(), self.angle.sin()]
    }

    /// Normal `ü'` of the perpendicular line, `ü` turned by +90°.
    pub fn perpendicular_normal(&self) -> [f64; 2] {
        let [x, y] = self.normal();
        [-y, x]
    }

    pub fn perpendicular(&self) -> BisectionLine {
        BisectionLine::new(self.angle + std::f64::consts::FRAC_PI_2)
    }

    /// Normal with an explicit orientation, for tests of the sign convention.
    fn normal_signed(&self, flip: bool) -> [f64; 2] {
        let [x, y] = self.normal();
        if flip {
            [-x, -y]
        } else {
            [x, y]
        }
    }
}

/// The two halves of a region. Pixel indices are flat, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSplit {
    pub m1: Vec<usize>,
    pub m2: Vec<usize>,
}

fn split_with_normal(mask: &Mask, center: [f64; 2], u: [f64; 2]) -> Result<RegionSplit> {
    let mut m1 = Vec::new();
    let mut m2 = Vec::new();
    let w = mask.width();
    for (i, &inside) in mask.data().iter().enumerate() {
        if !inside {
            continue;
        }
        let x = (i % w) as f64 - center[0];
        let y = (i / w) as f64 - center[1];
        if x * u[0] + y * u[1] > 0.0 {
            m2.push(i);
        } else {
            m1.push(i);
        }
    }
    if m1.is_empty() || m2.is_empty() {
        return Err(Error::DegenerateSplit(format!(
            "one side is empty ({} / {} pixels)",
            m1.len(),
            m2.len()
        )));
    }
    Ok(RegionSplit { m1, m2 })
}

/// Splits the masked pixels by the sign of `(m − center)·ü`; zero goes to `M1`.
pub fn bisect(mask: &Mask, center: [f64; 2], line: &BisectionLine) -> Result<RegionSplit> {
    split_with_normal(mask, center, line.normal())
}

/// As [`bisect`] with the normal reversed, which swaps `M1` and `M2` away
/// from the line itself.
pub fn bisect_flipped(mask: &Mask, center: [f64; 2], line: &BisectionLine) -> Result<RegionSplit> {
    split_with_normal(mask, center, line.normal_signed(true))
}

/// `mean(M2) − mean(M1)` of the channel over pixels of the split that are
/// valid in `valid`.
pub fn coordinate_variation(channel: &Grid<f64>, valid: &Mask, split: &RegionSplit) -> Result<f64> {
    let mean = |set: &[usize]| -> Option<f64> {
        let (mut s, mut n) = (0.0, 0usize);
        for &i in set {
            let v = channel.data()[i];
            if valid.data()[i] && v.is_finite() {
                s += v;
                n += 1;
            }
        }
        (n > 0).then(|| s / n as f64)
    };
    match (mean(&split.m1), mean(&split.m2)) {
        (Some(a), Some(b)) => Ok(b - a),
        _ => Err(Error::DegenerateSplit(
            "no valid pixels left on one side".into(),
        )),
    }
}

/// `τ = δ(l)·ü + δ(l')·ü'`.
pub fn flow_direction(
    channel: &Grid<f64>,
    valid: &Mask,
    mask: &Mask,
    center: [f64; 2],
    line: &BisectionLine,
) -> Result<[f64; 2]> {
    let u = line.normal();
    let up = line.perpendicular_normal();
    let d = coordinate_variation(channel, valid, &split_with_normal(mask, center, u)?)?;
    let dp = coordinate_variation(channel, valid, &split_with_normal(mask, center, up)?)?;
    Ok([d * u[0] + dp * up[0], d * u[1] + dp * up[1]])
}

/// Mean of [`flow_direction`] over the three standard lines, skipping lines
/// whose split is degenerate.
pub fn average_flow_direction(
    channel: &Grid<f64>,
    valid: &Mask,
    mask: &Mask,
    center: [f64; 2],
) -> Result<[f64; 2]> {
    let mut acc = [0.0; 2];
    let mut used = 0;
    for deg in LINE_ANGLES_DEG {
        match flow_direction(channel, valid, mask, center, &BisectionLine::from_degrees(deg)) {
            Ok(t) => {
                acc[0] += t[0];
                acc[1] += t[1];
                used += 1;
            }
            Err(Error::DegenerateSplit(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(Error::DegenerateRegion(
            "every bisection of the region is degenerate".into(),
        ));
    }
    Ok([acc[0] / used as f64, acc[1] / used as f64])
}

/// Per-pixel linear weights with `τ̄ = Σₚ wₚ·Oᵢ(p)` for every channel.
#[derive(Debug, Clone)]
pub struct FlowWeights {
    pub pixels: Vec<(usize, [f64; 2])>,
}

impl FlowWeights {
    /// Weights over the pixels that are in `mask` and valid in the pointmap.
    pub fn new(pointmap: &Pointmap, mask: &Mask, center: [f64; 2]) -> Result<Self> {
        if !pointmap.coords.same_shape(mask) {
            return Err(Error::InvalidInput("mask and pointmap shapes differ".into()));
        }
        let w = mask.width();
        let region: Vec<usize> = mask
            .data()
            .iter()
            .enumerate()
            .filter(|&(i, &m)| {
                m && pointmap.valid.data()[i]
                    && pointmap.coords.data()[i].iter().all(|v| v.is_finite())
            })
            .map(|(i, _)| i)
            .collect();
        // the six normals: each line and its perpendicular
        let normals: Vec<[f64; 2]> = LINE_ANGLES_DEG
            .iter()
            .flat_map(|&deg| {
                let l = BisectionLine::from_degrees(deg);
                [l.normal(), l.perpendicular_normal()]
            })
            .collect();
        let side = |i: usize, u: [f64; 2]| {
            let x = (i % w) as f64 - center[0];
            let y = (i / w) as f64 - center[1];
            x * u[0] + y * u[1] > 0.0
        };
        let mut counts = [[0usize; 2]; 6];
        for &i in &region {
            for (k, &u) in normals.iter().enumerate() {
                counts[k][side(i, u) as usize] += 1;
            }
        }
        let lines_ok: Vec<bool> = (0..3)
            .map(|j| (2 * j..2 * j + 2).all(|k| counts[k][0] > 0 && counts[k][1] > 0))
            .collect();
        let used = lines_ok.iter().filter(|&&ok| ok).count();
        if used == 0 {
            return Err(Error::DegenerateRegion(
                "every bisection of the region is degenerate".into(),
            ));
        }
        let scale = 1.0 / used as f64;
        let pixels = region
            .iter()
            .map(|&i| {
                let mut wv = [0.0; 2];
                for (k, &u) in normals.iter().enumerate() {
                    if !lines_ok[k / 2] {
                        continue;
                    }
                    let s = if side(i, u) {
                        1.0 / counts[k][1] as f64
                    } else {
                        -1.0 / counts[k][0] as f64
                    };
                    wv[0] += scale * s * u[0];
                    wv[1] += scale * s * u[1];
                }
                (i, wv)
            })
            .collect();
        Ok(Self { pixels })
    }

    /// `τ̄` of all three channels.
    pub fn flows(&self, pointmap: &Pointmap) -> [[f64; 2]; 3] {
        let data = pointmap.coords.data();
        let mut out = [[0.0; 2]; 3];
        for &(i, w) in &self.pixels {
            let p = data[i];
            for c in 0..3 {
                out[c][0] += w[0] * p[c] as f64;
                out[c][1] += w[1] * p[c] as f64;
            }
        }
        out
    }
}

/// A pointmap with the region and center the loss looks at.
#[derive(Debug, Clone, Copy)]
pub struct PocView<'a> {
    pub pointmap: &'a Pointmap,
    pub mask: &'a Mask,
    pub center: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub per_channel: [f64; 3],
    pub degenerate: [bool; 3],
}

impl LossValue {
    /// Flags as a `0`/`1` string, one character per channel.
    pub fn flag_string(&self) -> String {
        self.degenerate.iter().map(|&d| if d { '1' } else { '0' }).collect()
    }
}

fn norm2(v: [f64; 2]) -> f64 {
    v[0].hypot(v[1])
}

fn combine(ta: &[[f64; 2]; 3], tb: &[[f64; 2]; 3]) -> LossValue {
    let mut per_channel = [0.0; 3];
    let mut degenerate = [false; 3];
    for c in 0..3 {
        let (na, nb) = (norm2(ta[c]), norm2(tb[c]));
        if na < EPS || nb < EPS {
            degenerate[c] = true;
        } else {
            per_channel[c] = ((ta[c][0] * tb[c][0] + ta[c][1] * tb[c][1]) / (na * nb)).clamp(-1.0, 1.0);
        }
    }
    LossValue {
        total: per_channel.iter().sum(),
        per_channel,
        degenerate,
    }
}

/// Flow directions of one view.
pub fn view_flows(view: &PocView) -> Result<[[f64; 2]; 3]> {
    Ok(FlowWeights::new(view.pointmap, view.mask, view.center)?.flows(view.pointmap))
}

/// `L_poc = Σᵢ cos(τ̄ᵢᵃ, τ̄ᵢᵇ)`.
pub fn poc_loss(a: &PocView, b: &PocView) -> Result<LossValue> {
    Ok(combine(&view_flows(a)?, &view_flows(b)?))
}

/// `L_poc` from precomputed flows.
pub fn poc_loss_from_flows(ta: &[[f64; 2]; 3], tb: &[[f64; 2]; 3]) -> LossValue {
    combine(ta, tb)
}

/// Gradient of `cos(u, v)` with respect to `u`.
fn cos_grad(u: [f64; 2], v: [f64; 2]) -> [f64; 2] {
    let (nu, nv) = (norm2(u), norm2(v));
    let dot = u[0] * v[0] + u[1] * v[1];
    let k = dot / (nu * nu * nu * nv);
    [v[0] / (nu * nv) - k * u[0], v[1] / (nu * nv) - k * u[1]]
}

/// Loss together with its gradient with respect to both pointmaps.
pub fn poc_loss_with_grad(a: &PocView, b: &PocView) -> Result<(LossValue, Grid<[f32; 3]>, Grid<[f32; 3]>)> {
    let wa = FlowWeights::new(a.pointmap, a.mask, a.center)?;
    let wb = FlowWeights::new(b.pointmap, b.mask, b.center)?;
    let ta = wa.flows(a.pointmap);
    let tb = wb.flows(b.pointmap);
    let loss = combine(&ta, &tb);
    let scatter = |weights: &FlowWeights, pm: &Pointmap, own: &[[f64; 2]; 3], other: &[[f64; 2]; 3]| {
        let mut g = Grid::new(pm.width(), pm.height(), [0.0f32; 3]);
        let dir: Vec<[f64; 2]> = (0..3)
            .map(|c| {
                if loss.degenerate[c] {
                    [0.0; 2]
                } else {
                    cos_grad(own[c], other[c])
                }
            })
            .collect();
        for &(i, w) in &weights.pixels {
            let px = &mut g.data_mut()[i];
            for c in 0..3 {
                px[c] = (dir[c][0] * w[0] + dir[c][1] * w[1]) as f32;
            }
        }
        g
    };
    let ga = scatter(&wa, a.pointmap, &ta, &tb);
    let gb = scatter(&wb, b.pointmap, &tb, &ta);
    Ok((loss, ga, gb))
}

/// `L_oc = Σᵢ rᵢᵃ·rᵢᵇ = trace(Ra·Rbᵀ)`.
pub fn oc_loss(ra: &RotationMatrix, rb: &RotationMatrix) -> f64 {
    (ra.matrix() * rb.matrix().transpose()).trace()
}

/// Re-expresses a pointmap from camera `from` in the frame of camera `to`.
pub fn transfer_pointmap(pm: &Pointmap, from: &CameraPose, to: &CameraPose) -> Pointmap {
    let rel = to.compose(&from.inverse());
    Pointmap {
        coords: pm.coords.map(|p| {
            let q = rel.world_to_camera(&Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64));
            [q.x as f32, q.y as f32, q.z as f32]
        }),
        valid: pm.valid.clone(),
    }
}

/// Per-channel comparison between flow cosines and ground-plane orientation cosines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelCorrelation {
    pub samples: usize,
    pub pearson: Option<f64>,
    pub sign_agreement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationReport {
    pub pairs: usize,
    pub channels: [ChannelCorrelation; 3],
    /// Per pair: `(cos τ̄ᵢ, cos r̂ᵢ)` or `None` when skipped.
    pub samples: Vec<[Option<(f64, f64)>; 3]>,
    pub insufficient: bool,
}

/// Minimum usable samples per channel for a meaningful correlation.
pub const MIN_SAMPLES: usize = 30;

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

fn cos3(a: &Vector3<f64>, b: &Vector3<f64>) -> Option<f64> {
    let (na, nb) = (a.norm(), b.norm());
    (na >= EPS && nb >= EPS).then(|| (a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Flow cosines of the ideal pointmaps of a view pair, both expressed in the
/// frame of the first camera.
pub fn pair_flows(
    scene: &SceneConfig,
    intr: &Intrinsics,
    a: &CameraPose,
    b: &CameraPose,
) -> Result<([[f64; 2]; 3], [[f64; 2]; 3])> {
    let pa = RenderPlan::new(scene, a, intr)?;
    let pb = RenderPlan::new(scene, b, intr)?;
    let ob = transfer_pointmap(pb.pointmap(), b, a);
    let ta = view_flows(&PocView {
        pointmap: pa.pointmap(),
        mask: pa.disc_mask(),
        center: pa.disc_center(),
    })?;
    let tb = view_flows(&PocView {
        pointmap: &ob,
        mask: pb.disc_mask(),
        center: pb.disc_center(),
    })?;
    Ok((ta, tb))
}

/// Checks numerically that flow cosines of ideal pointmaps track the cosines
/// of the ground-plane projections of the camera orientation rows.
pub fn verify_projection_correspondence(
    pairs: &[(Viewpoint, Viewpoint)],
    scene: &SceneConfig,
    intr: &Intrinsics,
) -> Result<CorrelationReport> {
    use rayon::prelude::*;
    let samples: Vec<[Option<(f64, f64)>; 3]> = pairs
        .par_iter()
        .map(|(va, vb)| -> Result<[Option<(f64, f64)>; 3]> {
            let (a, b) = (va.pose()?, vb.pose()?);
            let (ta, tb) = match pair_flows(scene, intr, &a, &b) {
                Ok(t) => t,
                Err(Error::DegenerateRegion(_)) => return Ok([None; 3]),
                Err(e) => return Err(e),
            };
            let loss = combine(&ta, &tb);
            let ha = projected_orientation(&a.rotation);
            let hb = projected_orientation(&b.rotation);
            Ok([0, 1, 2].map(|c| {
                if loss.degenerate[c] {
                    return None;
                }
                cos3(&ha.rows[c], &hb.rows[c]).map(|r| (loss.per_channel[c], r))
            }))
        })
        .collect::<Result<_>>()?;
    let channels = [0, 1, 2].map(|c| {
        let (xs, ys): (Vec<f64>, Vec<f64>) = samples.iter().filter_map(|s| s[c]).unzip();
        let agree = xs
            .iter()
            .zip(&ys)
            .filter(|(x, y)| x.signum() == y.signum())
            .count();
        ChannelCorrelation {
            samples: xs.len(),
            pearson: pearson(&xs, &ys),
            sign_agreement: (!xs.is_empty()).then(|| agree as f64 / xs.len() as f64),
        }
    });
    let insufficient = channels.iter().any(|c| c.samples < MIN_SAMPLES);
    Ok(CorrelationReport {
        pairs: pairs.len(),
        channels,
        samples,
        insufficient,
    })
}
