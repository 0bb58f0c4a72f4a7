//! Kaleidoscopic disc construction.
//!
//! A rectangular segment image is mapped onto each of the `N` wedges of a
//! disc by a perspective map taking the segment rectangle `A'B'C'D'` onto the
//! rotated rectangle `AₙBₙCₙDₙ`. Disc pixels are assigned to exactly one
//! wedge by polar angle, so the `N` projected images add up without overlap.
//!
//! Frames:
//! * segment frame `x'O'y'`: origin at the segment center, `x'` runs along
//!   the `h` rows and `y'` along the `w` columns;
//! * disc frame `xOy`: origin at the disc center, `x` along image columns and
//!   `y` along image rows. Disc pixel `(row, col)` sits at
//!   `(col + 0.5 - ρ, row + 0.5 - ρ)`.

use std::f64::consts::{FRAC_PI_2, TAU};

use nalgebra::{DMatrix, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::grid::{bilinear_taps, Grid, Mask, RgbImage, Taps};

/// The single texture tile replicated into every wedge.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentImage {
    pixels: RgbImage,
}

impl SegmentImage {
    pub fn new(pixels: RgbImage) -> Result<Self> {
        if pixels.width() < 2 || pixels.height() < 2 {
            return Err(Error::InvalidSpec(format!(
                "segment must be at least 2x2, got {}x{}",
                pixels.height(),
                pixels.width()
            )));
        }
        if let Some(bad) = pixels
            .data()
            .iter()
            .flatten()
            .find(|v| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::InvalidSpec(format!(
                "segment channel value {bad} outside [0, 1]"
            )));
        }
        Ok(Self { pixels })
    }

    /// Uniform fill, e.g. for constant-color tests.
    pub fn filled(height: usize, width: usize, value: [f32; 3]) -> Result<Self> {
        Self::new(Grid::new(width, height, value))
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn pixels(&self) -> &RgbImage {
        &self.pixels
    }

    pub fn into_pixels(self) -> RgbImage {
        self.pixels
    }

    /// Applies `f` to every channel value and clamps the result to `[0, 1]`.
    pub fn map_clamped(&self, mut f: impl FnMut(usize, f32) -> f32) -> SegmentImage {
        let mut pixels = self.pixels.clone();
        for (i, px) in pixels.data_mut().iter_mut().enumerate() {
            for (c, v) in px.iter_mut().enumerate() {
                *v = f(i * 3 + c, *v).clamp(0.0, 1.0);
            }
        }
        SegmentImage { pixels }
    }
}

/// Disc geometry derived from the segment count and radius.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscSpec {
    pub radius_px: usize,
    pub segments: usize,
    pub theta: f64,
    pub rho1: f64,
    pub rho2: f64,
    pub beta: f64,
}

impl DiscSpec {
    pub fn new(segments: usize, radius_px: usize) -> Result<Self> {
        let (theta, _, _) = segment_dims(segments, radius_px)?;
        let rho = radius_px as f64;
        let rho1 = rho * (theta / 2.0).sin();
        Ok(Self {
            radius_px,
            segments,
            theta,
            rho1,
            rho2: (rho1 * rho1 + rho * rho).sqrt(),
            beta: (rho1 / rho).atan(),
        })
    }

    /// `(h, w)` of the segment image.
    pub fn segment_size(&self) -> (usize, usize) {
        let (_, h, w) = segment_dims(self.segments, self.radius_px).expect("validated in new");
        (h, w)
    }

    /// Side length of the square disc image.
    pub fn disc_size(&self) -> usize {
        2 * self.radius_px
    }

    /// Wedge owning the disc-frame point `(x, y)`; wedge `n` is centered on
    /// the polar angle `nθ`.
    #[inline]
    pub fn wedge_of(&self, x: f64, y: f64) -> usize {
        let a = (y.atan2(x) + self.theta / 2.0).rem_euclid(TAU);
        ((a / self.theta).floor() as usize).min(self.segments - 1)
    }
}

/// Segment angle and segment image size `(θ, h, w)` for `N` segments of a
/// disc with radius `ρ` pixels.
pub fn segment_dims(segments: usize, radius_px: usize) -> Result<(f64, usize, usize)> {
    if segments < 2 {
        return Err(Error::InvalidSpec(format!(
            "need at least 2 segments, got {segments}"
        )));
    }
    if radius_px < 2 {
        return Err(Error::InvalidSpec(format!(
            "disc radius must be at least 2 px, got {radius_px}"
        )));
    }
    let theta = TAU / segments as f64;
    let rho = radius_px as f64;
    // Guard against sin() landing a hair above an exact integer.
    let w = (2.0 * rho * (theta / 2.0).sin() - 1e-9).ceil() as usize;
    Ok((theta, radius_px, w))
}

/// Four ordered corners `A, B, C, D`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadCorners(pub [[f64; 2]; 4]);

impl QuadCorners {
    pub fn rotated(&self, angle: f64) -> QuadCorners {
        let (s, c) = angle.sin_cos();
        QuadCorners(self.0.map(|[x, y]| [c * x - s * y, s * x + c * y]))
    }
}

/// Corners of the segment rectangle in the segment frame.
pub fn segment_corners(h: usize, w: usize) -> QuadCorners {
    let (hh, hw) = (h as f64 / 2.0, w as f64 / 2.0);
    QuadCorners([[-hh, -hw], [hh, -hw], [hh, hw], [-hh, hw]])
}

/// Corners `AₙBₙCₙDₙ` of the rectangle covering wedge `n`, in the disc frame.
pub fn disc_corners(spec: &DiscSpec, n: usize) -> Result<QuadCorners> {
    if n >= spec.segments {
        return Err(Error::IndexOutOfRange {
            index: n,
            segments: spec.segments,
        });
    }
    let a = n as f64 * spec.theta;
    let polar = |r: f64, phi: f64| [r * phi.cos(), r * phi.sin()];
    Ok(QuadCorners([
        polar(spec.rho1, a + FRAC_PI_2),
        polar(spec.rho1, a - FRAC_PI_2),
        polar(spec.rho2, a - spec.beta),
        polar(spec.rho2, a + spec.beta),
    ]))
}

/// Homogeneous 3x3 planar map, normalized so that `m[(2,2)] = 1` when possible.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerspectiveMap {
    m: Matrix3<f64>,
}

impl PerspectiveMap {
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let det = m.determinant();
        if !det.is_finite() || det.abs() < 1e-300 {
            return Err(Error::SingularConfiguration(
                "perspective matrix is singular".into(),
            ));
        }
        Ok(Self { m: normalize_homography(m) })
    }

    pub fn identity() -> Self {
        Self {
            m: Matrix3::identity(),
        }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    /// Maps a point, returning `None` when it lands on the line at infinity.
    #[inline]
    pub fn apply(&self, p: [f64; 2]) -> Option<[f64; 2]> {
        let m = &self.m;
        let w = m[(2, 0)] * p[0] + m[(2, 1)] * p[1] + m[(2, 2)];
        if w.abs() < 1e-300 {
            return None;
        }
        Some([
            (m[(0, 0)] * p[0] + m[(0, 1)] * p[1] + m[(0, 2)]) / w,
            (m[(1, 0)] * p[0] + m[(1, 1)] * p[1] + m[(1, 2)]) / w,
        ])
    }

    pub fn inverse(&self) -> PerspectiveMap {
        let inv = self
            .m
            .try_inverse()
            .expect("nonsingular by construction");
        PerspectiveMap {
            m: normalize_homography(inv),
        }
    }

    pub fn compose(&self, first: &PerspectiveMap) -> PerspectiveMap {
        PerspectiveMap {
            m: normalize_homography(self.m * first.m),
        }
    }
}

fn normalize_homography(m: Matrix3<f64>) -> Matrix3<f64> {
    let s = m[(2, 2)];
    if s.abs() > 1e-12 * m.norm() {
        m / s
    } else {
        m / m.norm()
    }
}

/// Similarity taking the points to zero mean and mean distance `√2`.
pub(crate) fn normalizing_transform(points: &[[f64; 2]]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let mean_dist = points
        .iter()
        .map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    let s = if mean_dist > 0.0 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

/// Direct linear transform over `n ≥ 4` correspondences with Hartley
/// normalization; least squares when `n > 4`.
pub(crate) fn dlt_homography(src: &[[f64; 2]], dst: &[[f64; 2]]) -> Option<Matrix3<f64>> {
    debug_assert_eq!(src.len(), dst.len());
    let n = src.len();
    if n < 4 {
        return None;
    }
    let ts = normalizing_transform(src);
    let td = normalizing_transform(dst);
    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (k, (s, d)) in src.iter().zip(dst).enumerate() {
        let p = ts * Vector3::new(s[0], s[1], 1.0);
        let q = td * Vector3::new(d[0], d[1], 1.0);
        let (x, y) = (p[0], p[1]);
        let (u, v) = (q[0], q[1]);
        let r = 2 * k;
        a.row_mut(r)
            .copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, -u]);
        a.row_mut(r + 1)
            .copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, -v]);
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let (min_idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let h = v_t.row(min_idx);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let m = td.try_inverse()? * hn * ts;
    m.iter().all(|v| v.is_finite()).then_some(m)
}

fn has_collinear_triple(q: &QuadCorners) -> bool {
    let p = &q.0;
    let scale = p
        .iter()
        .flat_map(|a| p.iter().map(move |b| (a[0] - b[0]).hypot(a[1] - b[1])))
        .fold(0.0f64, f64::max);
    if scale == 0.0 {
        return true;
    }
    let triples = [(0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)];
    triples.iter().any(|&(i, j, k)| {
        let cross = (p[j][0] - p[i][0]) * (p[k][1] - p[i][1])
            - (p[j][1] - p[i][1]) * (p[k][0] - p[i][0]);
        cross.abs() <= 1e-10 * scale * scale
    })
}

/// Perspective map taking each `src` corner onto the matching `dst` corner.
pub fn solve_perspective(src: &QuadCorners, dst: &QuadCorners) -> Result<PerspectiveMap> {
    if has_collinear_triple(src) || has_collinear_triple(dst) {
        return Err(Error::SingularConfiguration(
            "three corners are collinear".into(),
        ));
    }
    let m = dlt_homography(&src.0, &dst.0).ok_or_else(|| {
        Error::SingularConfiguration("no finite perspective map through the corners".into())
    })?;
    PerspectiveMap::from_matrix(m)
}

/// The `N` forward maps `Pₙ` from the segment frame to the disc frame.
pub fn wedge_maps(spec: &DiscSpec) -> Result<Vec<PerspectiveMap>> {
    let (h, w) = spec.segment_size();
    let src = segment_corners(h, w);
    (0..spec.segments)
        .map(|n| solve_perspective(&src, &disc_corners(spec, n)?))
        .collect()
}

/// Composed kaleidoscopic disc.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscImage {
    pub radius_px: usize,
    pub pixels: RgbImage,
    pub mask: Mask,
}

impl DiscImage {
    /// Wraps externally produced pixels, zeroing everything outside the disc.
    pub fn from_pixels(mut pixels: RgbImage) -> Result<Self> {
        if pixels.width() != pixels.height() || pixels.width() < 4 || pixels.width() % 2 != 0 {
            return Err(Error::InvalidSpec(format!(
                "disc image must be square with even side, got {}x{}",
                pixels.width(),
                pixels.height()
            )));
        }
        let radius_px = pixels.width() / 2;
        let mask = disc_mask(radius_px);
        for (px, &inside) in pixels.data_mut().iter_mut().zip(mask.data()) {
            if !inside {
                *px = [0.0; 3];
            }
        }
        Ok(Self {
            radius_px,
            pixels,
            mask,
        })
    }

    /// Disc filled with one color.
    pub fn uniform(radius_px: usize, color: [f32; 3]) -> Result<Self> {
        Self::from_pixels(Grid::new(2 * radius_px, 2 * radius_px, color))
    }
}

/// Pixel-center disc mask of radius `ρ` on a `2ρ × 2ρ` grid.
pub fn disc_mask(radius_px: usize) -> Mask {
    let rho = radius_px as f64;
    Grid::from_fn(2 * radius_px, 2 * radius_px, |row, col| {
        let x = col as f64 + 0.5 - rho;
        let y = row as f64 + 0.5 - rho;
        x * x + y * y <= rho * rho
    })
}

/// Precomputed sampling plan from segment pixels to disc pixels. The disc is
/// linear in the segment, so the plan also provides the transpose used to
/// pull disc gradients back onto the segment.
#[derive(Debug, Clone)]
pub struct CompositionPlan {
    spec: DiscSpec,
    seg_h: usize,
    seg_w: usize,
    taps: Vec<Taps>,
    wedge: Vec<u16>,
    mask: Mask,
}

/// Marker for disc pixels outside every wedge.
pub const NO_WEDGE: u16 = u16::MAX;

impl CompositionPlan {
    pub fn new(spec: &DiscSpec) -> Result<Self> {
        let (seg_h, seg_w) = spec.segment_size();
        let inverse: Vec<PerspectiveMap> =
            wedge_maps(spec)?.iter().map(PerspectiveMap::inverse).collect();
        let rho = spec.radius_px as f64;
        let side = spec.disc_size();
        let mask = disc_mask(spec.radius_px);
        let (hh, hw) = (seg_h as f64 / 2.0, seg_w as f64 / 2.0);
        let mut taps = vec![Taps::EMPTY; side * side];
        let mut wedge = vec![NO_WEDGE; side * side];
        for row in 0..side {
            for col in 0..side {
                let i = row * side + col;
                if !mask.data()[i] {
                    continue;
                }
                let x = col as f64 + 0.5 - rho;
                let y = row as f64 + 0.5 - rho;
                let n = spec.wedge_of(x, y);
                wedge[i] = n as u16;
                let Some([xs, ys]) = inverse[n].apply([x, y]) else {
                    continue;
                };
                const TOL: f64 = 1e-9;
                if xs.abs() > hh + TOL || ys.abs() > hw + TOL {
                    continue;
                }
                taps[i] = bilinear_taps(seg_w, seg_h, ys + hw - 0.5, xs + hh - 0.5);
            }
        }
        Ok(Self {
            spec: *spec,
            seg_h,
            seg_w,
            taps,
            wedge,
            mask,
        })
    }

    pub fn spec(&self) -> &DiscSpec {
        &self.spec
    }

    /// Wedge index of every disc pixel, `NO_WEDGE` outside the disc.
    pub fn wedge_assignment(&self) -> &[u16] {
        &self.wedge
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    /// Composes raw segment values (no range check), as used for probes.
    pub fn compose_raw(&self, segment: &RgbImage) -> Result<DiscImage> {
        if segment.height() != self.seg_h || segment.width() != self.seg_w {
            return Err(Error::InvalidSpec(format!(
                "segment is {}x{}, disc spec needs {}x{}",
                segment.height(),
                segment.width(),
                self.seg_h,
                self.seg_w
            )));
        }
        let side = self.spec.disc_size();
        let src = segment.data();
        let data = self.taps.iter().map(|t| t.sample3(src)).collect();
        Ok(DiscImage {
            radius_px: self.spec.radius_px,
            pixels: Grid::from_vec(side, side, data)?,
            mask: self.mask.clone(),
        })
    }

    pub fn compose(&self, segment: &SegmentImage) -> Result<DiscImage> {
        self.compose_raw(segment.pixels())
    }

    /// Transpose of `compose`: accumulates per-disc-pixel gradients onto the
    /// segment pixels they were sampled from.
    pub fn backward(&self, disc_grad: &[[f32; 3]]) -> Result<RgbImage> {
        if disc_grad.len() != self.taps.len() {
            return Err(Error::InvalidInput(format!(
                "disc gradient has {} pixels, expected {}",
                disc_grad.len(),
                self.taps.len()
            )));
        }
        let mut out = vec![[0.0f32; 3]; self.seg_h * self.seg_w];
        for (t, g) in self.taps.iter().zip(disc_grad) {
            t.scatter3(*g, &mut out);
        }
        Grid::from_vec(self.seg_w, self.seg_h, out)
    }
}

/// Builds the `N`-fold disc from one segment.
pub fn compose_disc(segment: &SegmentImage, spec: &DiscSpec) -> Result<DiscImage> {
    CompositionPlan::new(spec)?.compose(segment)
}

/// Mean absolute channel difference between the disc and its copy rotated by
/// `angle` about the center. Only pixels whose rotated bilinear footprint lies
/// entirely inside the disc are compared.
pub fn rotation_residual(disc: &DiscImage, angle: f64) -> f64 {
    let side = disc.pixels.width();
    let rho = disc.radius_px as f64;
    let (s, c) = angle.sin_cos();
    let mask = disc.mask.data();
    let data = disc.pixels.data();
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for row in 0..side {
        for col in 0..side {
            let i = row * side + col;
            if !mask[i] {
                continue;
            }
            let x = col as f64 + 0.5 - rho;
            let y = row as f64 + 0.5 - rho;
            // value at p in the rotated image comes from R(-angle) p
            let xs = c * x + s * y;
            let ys = -s * x + c * y;
            let fx = xs + rho - 0.5;
            let fy = ys + rho - 0.5;
            if fx < 0.0 || fy < 0.0 || fx > (side - 1) as f64 || fy > (side - 1) as f64 {
                continue;
            }
            let t = bilinear_taps(side, side, fx, fy);
            if (0..4).any(|k| t.weight[k] > 0.0 && !mask[t.index[k] as usize]) {
                continue;
            }
            let v = t.sample3(data);
            let p = data[i];
            sum += (0..3).map(|k| (v[k] - p[k]).abs() as f64).sum::<f64>();
            count += 3;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// `1 −` the rotation residual at the wedge angle `2π/N`.
pub fn symmetry_score(disc: &DiscImage, segments: usize) -> f64 {
    1.0 - rotation_residual(disc, TAU / segments.max(1) as f64)
}

/// Reads segment `n` back out of a composed disc through the forward map
/// `Pₙ`. Returns the recovered segment and the pixels whose footprint lies
/// inside wedge `n` with `margin_px` to spare; the rest of the segment
/// rectangle is drawn by neighbouring wedges and cannot be recovered.
pub fn extract_segment(
    disc: &DiscImage,
    spec: &DiscSpec,
    n: usize,
    margin_px: f64,
) -> Result<(RgbImage, Mask)> {
    let forward = solve_perspective(
        &segment_corners(spec.segment_size().0, spec.segment_size().1),
        &disc_corners(spec, n)?,
    )?;
    let (h, w) = spec.segment_size();
    let rho = spec.radius_px as f64;
    let side = spec.disc_size();
    let center = n as f64 * spec.theta;
    let mut pixels = Grid::new(w, h, [0.0f32; 3]);
    let mut covered = Grid::new(w, h, false);
    for r in 0..h {
        for c in 0..w {
            let xs = r as f64 + 0.5 - h as f64 / 2.0;
            let ys = c as f64 + 0.5 - w as f64 / 2.0;
            let Some([x, y]) = forward.apply([xs, ys]) else {
                continue;
            };
            let radius = x.hypot(y);
            if radius > rho - margin_px {
                continue;
            }
            // distance to the two wedge boundary rays
            let rel = y.atan2(x) - center;
            let rel = (rel + std::f64::consts::PI).rem_euclid(TAU) - std::f64::consts::PI;
            let half = spec.theta / 2.0;
            if rel.abs() > half {
                continue;
            }
            let to_edge = radius * (half - rel.abs()).sin();
            if spec.segments > 2 && to_edge < margin_px {
                continue;
            }
            let t = bilinear_taps(side, side, x + rho - 0.5, y + rho - 0.5);
            pixels[(r, c)] = t.sample3(disc.pixels.data());
            covered[(r, c)] = true;
        }
    }
    Ok((pixels, covered))
}
