//! Ray-cast renderer for a textured disc lying on the ground plane `y = 0`,
//! with an optional box occluder and a constant background albedo.
//!
//! Besides the image, every render yields the exact camera-frame pointmap and
//! the mask of pixels that see the disc. The image is linear in the disc
//! texture, which [`RenderPlan`] exploits to re-shade a fixed view cheaply and
//! to pull image gradients back onto the texture.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{bilinear_taps, Grid, Mask, RgbImage, Taps};
use crate::kaleido::DiscImage;
use crate::pose::{look_at_pose, CameraPose, Intrinsics};

/// Camera-frame 3D coordinates per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Pointmap {
    pub coords: Grid<[f32; 3]>,
    pub valid: Mask,
}

impl Pointmap {
    pub fn new(coords: Grid<[f32; 3]>, valid: Mask) -> Result<Self> {
        if !coords.same_shape(&valid) {
            return Err(Error::InvalidInput(format!(
                "pointmap is {}x{} but validity mask is {}x{}",
                coords.width(),
                coords.height(),
                valid.width(),
                valid.height()
            )));
        }
        Ok(Self { coords, valid })
    }

    pub fn width(&self) -> usize {
        self.coords.width()
    }

    pub fn height(&self) -> usize {
        self.coords.height()
    }

    /// Channel `i` as a scalar field (invalid pixels carry whatever is stored).
    pub fn channel(&self, i: usize) -> Grid<f64> {
        self.coords.map(|p| p[i] as f64)
    }

    /// Multiplies every coordinate by `k`.
    pub fn scaled(&self, k: f32) -> Pointmap {
        Pointmap {
            coords: self.coords.map(|p| [p[0] * k, p[1] * k, p[2] * k]),
            valid: self.valid.clone(),
        }
    }
}

/// Axis-aligned box standing in for the scene object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Occluder {
    pub center: Vector3<f64>,
    /// Full side lengths along x, y, z.
    pub extents: Vector3<f64>,
    pub albedo: [f32; 3],
}

impl Occluder {
    /// Entry distance of the ray `origin + t·dir`, if it hits the box at `t > 0`.
    fn hit(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let half = self.extents / 2.0;
        let lo = self.center - half;
        let hi = self.center + half;
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if dir[a].abs() < 1e-300 {
                if origin[a] < lo[a] || origin[a] > hi[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[a];
            let (mut ta, mut tb) = ((lo[a] - origin[a]) * inv, (hi[a] - origin[a]) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        if t1 < t0 || t1 <= 0.0 {
            return None;
        }
        Some(if t0 > 0.0 { t0 } else { t1 })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub disc: DiscImage,
    pub disc_radius_m: f64,
    pub occluder: Option<Occluder>,
    pub background: [f32; 3],
}

impl SceneConfig {
    pub fn new(
        disc: DiscImage,
        disc_radius_m: f64,
        occluder: Option<Occluder>,
        background: [f32; 3],
    ) -> Result<Self> {
        if !(disc_radius_m > 0.0 && disc_radius_m.is_finite()) {
            return Err(Error::InvalidScene(format!(
                "disc radius must be positive, got {disc_radius_m}"
            )));
        }
        if let Some(o) = &occluder {
            if !o.extents.iter().all(|&e| e > 0.0 && e.is_finite()) {
                return Err(Error::InvalidScene(format!(
                    "occluder extents must be positive, got {:?}",
                    o.extents.as_slice()
                )));
            }
        }
        Ok(Self {
            disc,
            disc_radius_m,
            occluder,
            background,
        })
    }

    /// Continuous disc-image position `(col, row)` of a ground point.
    #[inline]
    pub fn disc_pixel(&self, x: f64, z: f64) -> [f64; 2] {
        let rho = self.disc.radius_px as f64;
        let s = rho / self.disc_radius_m;
        [x * s + rho - 0.5, z * s + rho - 0.5]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub image: RgbImage,
    pub pointmap: Pointmap,
    pub disc_mask: Mask,
    pub pose: CameraPose,
    pub intrinsics: Intrinsics,
    /// Pixel position of the world origin, i.e. the disc center.
    pub disc_center: [f64; 2],
}

#[derive(Debug, Clone, Copy)]
enum Shade {
    Fixed([f32; 3]),
    Disc(Taps),
}

/// Geometry of one view, with the texture left symbolic.
#[derive(Debug, Clone)]
pub struct RenderPlan {
    shades: Vec<Shade>,
    pointmap: Pointmap,
    disc_mask: Mask,
    pose: CameraPose,
    intrinsics: Intrinsics,
    disc_center: [f64; 2],
    disc_side: usize,
}

struct PixelHit {
    shade: Shade,
    point: [f32; 3],
    valid: bool,
    on_disc: bool,
}

/// Bilinear taps restricted to in-disc texels, renormalized to sum to one.
fn disc_taps(disc: &DiscImage, col: f64, row: f64) -> Taps {
    let side = disc.pixels.width();
    let mut t = bilinear_taps(side, side, col, row);
    let mask = disc.mask.data();
    let mut total = 0.0f32;
    for k in 0..4 {
        if !mask[t.index[k] as usize] {
            t.weight[k] = 0.0;
        }
        total += t.weight[k];
    }
    if total > 0.0 {
        for w in &mut t.weight {
            *w /= total;
        }
        t
    } else {
        let c = col.round().clamp(0.0, (side - 1) as f64) as usize;
        let r = row.round().clamp(0.0, (side - 1) as f64) as usize;
        Taps {
            index: [(r * side + c) as u32, 0, 0, 0],
            weight: [1.0, 0.0, 0.0, 0.0],
        }
    }
}

impl RenderPlan {
    pub fn new(scene: &SceneConfig, pose: &CameraPose, intr: &Intrinsics) -> Result<Self> {
        let center = pose.center();
        if !(center.y > 0.0) {
            return Err(Error::InvalidScene(format!(
                "camera center at height {} is not above the ground plane",
                center.y
            )));
        }
        let origin_cam = pose.world_to_camera(&Vector3::zeros());
        let disc_center = intr.project(&origin_cam).map_err(|_| {
            Error::InvalidScene("the disc center is behind the camera".into())
        })?;
        let rt = pose.rotation.matrix().transpose();
        let r2 = scene.disc_radius_m * scene.disc_radius_m;
        let (w, h) = (intr.width, intr.height);
        let trace = |row: usize, col: usize| -> PixelHit {
            let d_cam = intr.ray(col as f64, row as f64);
            let d = rt * d_cam;
            let t_plane = (d.y < 0.0).then(|| -center.y / d.y);
            let t_box = scene.occluder.as_ref().and_then(|o| o.hit(&center, &d));
            let to_point = |t: f64| {
                let p = d_cam * t;
                [p.x as f32, p.y as f32, p.z as f32]
            };
            match (t_plane, t_box) {
                (_, Some(tb)) if t_plane.is_none_or(|tp| tb < tp) => PixelHit {
                    shade: Shade::Fixed(scene.occluder.as_ref().expect("hit implies box").albedo),
                    point: to_point(tb),
                    valid: true,
                    on_disc: false,
                },
                (Some(tp), _) => {
                    let hit = center + d * tp;
                    let on_disc = hit.x * hit.x + hit.z * hit.z <= r2;
                    let shade = if on_disc {
                        let [c, r] = scene.disc_pixel(hit.x, hit.z);
                        Shade::Disc(disc_taps(&scene.disc, c, r))
                    } else {
                        Shade::Fixed(scene.background)
                    };
                    PixelHit {
                        shade,
                        point: to_point(tp),
                        valid: true,
                        on_disc,
                    }
                }
                _ => PixelHit {
                    shade: Shade::Fixed(scene.background),
                    point: [0.0; 3],
                    valid: false,
                    on_disc: false,
                },
            }
        };
        let hits: Vec<PixelHit> = (0..h)
            .into_par_iter()
            .flat_map_iter(|row| (0..w).map(move |col| (row, col)))
            .map(|(row, col)| trace(row, col))
            .collect();
        let mut shades = Vec::with_capacity(w * h);
        let mut coords = Vec::with_capacity(w * h);
        let mut valid = Vec::with_capacity(w * h);
        let mut disc_mask = Vec::with_capacity(w * h);
        for hit in hits {
            shades.push(hit.shade);
            coords.push(hit.point);
            valid.push(hit.valid);
            disc_mask.push(hit.on_disc);
        }
        Ok(Self {
            shades,
            pointmap: Pointmap {
                coords: Grid::from_vec(w, h, coords)?,
                valid: Grid::from_vec(w, h, valid)?,
            },
            disc_mask: Grid::from_vec(w, h, disc_mask)?,
            pose: *pose,
            intrinsics: *intr,
            disc_center,
            disc_side: scene.disc.pixels.width(),
        })
    }

    pub fn pointmap(&self) -> &Pointmap {
        &self.pointmap
    }

    pub fn disc_mask(&self) -> &Mask {
        &self.disc_mask
    }

    pub fn disc_center(&self) -> [f64; 2] {
        self.disc_center
    }

    fn check_disc(&self, side: usize) -> Result<()> {
        if side != self.disc_side {
            return Err(Error::InvalidScene(format!(
                "plan was built for a {0}x{0} disc, got {1}x{1}",
                self.disc_side, side
            )));
        }
        Ok(())
    }

    /// Shades the view with raw disc pixel values.
    pub fn shade(&self, disc_pixels: &RgbImage) -> Result<RgbImage> {
        self.check_disc(disc_pixels.width())?;
        let src = disc_pixels.data();
        let data = self
            .shades
            .iter()
            .map(|s| match s {
                Shade::Fixed(c) => *c,
                Shade::Disc(t) => t.sample3(src),
            })
            .collect();
        Grid::from_vec(self.intrinsics.width, self.intrinsics.height, data)
    }

    pub fn view(&self, disc: &DiscImage) -> Result<RenderedView> {
        Ok(RenderedView {
            image: self.shade(&disc.pixels)?,
            pointmap: self.pointmap.clone(),
            disc_mask: self.disc_mask.clone(),
            pose: self.pose,
            intrinsics: self.intrinsics,
            disc_center: self.disc_center,
        })
    }

    /// Transpose of [`shade`](Self::shade) with respect to the disc pixels.
    pub fn backward(&self, image_grad: &RgbImage) -> Result<RgbImage> {
        if image_grad.len() != self.shades.len() {
            return Err(Error::InvalidInput(format!(
                "image gradient has {} pixels, expected {}",
                image_grad.len(),
                self.shades.len()
            )));
        }
        let mut out = vec![[0.0f32; 3]; self.disc_side * self.disc_side];
        for (s, g) in self.shades.iter().zip(image_grad.data()) {
            if let Shade::Disc(t) = s {
                t.scatter3(*g, &mut out);
            }
        }
        Grid::from_vec(self.disc_side, self.disc_side, out)
    }
}

pub fn render_view(scene: &SceneConfig, pose: &CameraPose, intr: &Intrinsics) -> Result<RenderedView> {
    RenderPlan::new(scene, pose, intr)?.view(&scene.disc)
}

/// Closed intervals for viewpoint sampling (degrees and meters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewpointRanges {
    pub pitch: (f64, f64),
    pub yaw: (f64, f64),
    pub distance: (f64, f64),
}

impl Default for ViewpointRanges {
    fn default() -> Self {
        Self {
            pitch: (10.0, 85.0),
            yaw: (0.0, 360.0),
            distance: (2.0, 3.0),
        }
    }
}

impl ViewpointRanges {
    /// Fixed pitch of 55° and distance of 2.4 m with free yaw.
    pub fn dt1() -> Self {
        Self {
            pitch: (55.0, 55.0),
            yaw: (0.0, 360.0),
            distance: (2.4, 2.4),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("pitch", self.pitch), ("yaw", self.yaw), ("distance", self.distance)] {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(Error::InvalidConfig(format!(
                    "{name} range [{lo}, {hi}] is empty"
                )));
            }
        }
        if self.pitch.0 <= 0.0 || self.pitch.1 >= 90.0 {
            return Err(Error::InvalidConfig(format!(
                "pitch range [{}, {}] must lie inside (0, 90)",
                self.pitch.0, self.pitch.1
            )));
        }
        if self.distance.0 <= 0.0 {
            return Err(Error::InvalidConfig("distances must be positive".into()));
        }
        Ok(())
    }
}

/// A camera placement on the viewing sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Viewpoint {
    pub distance: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl Viewpoint {
    pub fn pose(&self) -> Result<CameraPose> {
        look_at_pose(self.distance, self.pitch, self.yaw)
    }
}

fn uniform_in(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Uniform viewpoint within `ranges`.
pub fn sample_viewpoint(rng: &mut impl Rng, ranges: &ViewpointRanges) -> Result<Viewpoint> {
    ranges.validate()?;
    let distance = uniform_in(rng, ranges.distance);
    let pitch = uniform_in(rng, ranges.pitch);
    let yaw = uniform_in(rng, ranges.yaw);
    Ok(Viewpoint {
        distance,
        pitch,
        yaw,
    })
}

/// One draw of the photometric augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub brightness: f32,
    pub noise_sigma: f32,
    pub noise_seed: u64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        brightness: 1.0,
        noise_sigma: 0.0,
        noise_seed: 0,
    };

    /// Brightness in `[0.8, 1.2]`, noise level in `[0, 2/255]`.
    pub fn draw(rng: &mut impl Rng) -> Self {
        Self {
            brightness: 0.8 + 0.4 * rng.random::<f32>(),
            noise_sigma: 2.0 / 255.0 * rng.random::<f32>(),
            noise_seed: rng.random(),
        }
    }

    /// Applies the augmentation; returns the image and the per-channel
    /// derivative of output with respect to input (zero where clipped).
    pub fn apply(&self, image: &RgbImage) -> (RgbImage, RgbImage) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
        let noise = Normal::new(0.0f32, self.noise_sigma.max(0.0)).expect("finite sigma");
        let mut out = image.clone();
        let mut slope = image.clone();
        for (o, s) in out.data_mut().iter_mut().zip(slope.data_mut()) {
            for c in 0..3 {
                let n = if self.noise_sigma > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                let v = self.brightness * o[c] + n;
                s[c] = if (0.0..=1.0).contains(&v) {
                    self.brightness
                } else {
                    0.0
                };
                o[c] = v.clamp(0.0, 1.0);
            }
        }
        (out, slope)
    }
}

/// Random brightness and noise; geometry untouched.
pub fn augment(view: &RenderedView, rng: &mut impl Rng) -> RenderedView {
    let params = AugmentParams::draw(rng);
    RenderedView {
        image: params.apply(&view.image).0,
        ..view.clone()
    }
}
