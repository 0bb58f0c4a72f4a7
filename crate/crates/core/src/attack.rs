//! Kaleidoscopic background optimization.
//!
//! Each iteration composes the disc from the current segment, draws a random
//! pair of viewpoints, renders and augments both views, queries the victim,
//! scores its pointmaps with `L_poc`, and moves every segment pixel one step
//! of size `α` along the sign of the estimated gradient. Every `T_c`
//! iterations the segment is pulled into the printable gamut and saved.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Grid, RgbImage};
use crate::io::{write_rgb_png, KeyValues};
use crate::kaleido::{CompositionPlan, DiscImage, DiscSpec, SegmentImage};
use crate::metrics::{compute_report, MetricsReport, PoseSet};
use crate::poc::{poc_loss, LossValue, PocView};
use crate::pose::{CameraPose, Intrinsics};
use crate::scene::{AugmentParams, Occluder, RenderPlan, SceneConfig, Viewpoint, ViewpointRanges};
use crate::victim::{ground_plane_in, Victim, VictimInput};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VictimKind {
    Builtin,
    Bridge,
}

impl FromStr for VictimKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "builtin" => Ok(VictimKind::Builtin),
            "bridge" => Ok(VictimKind::Bridge),
            other => Err(Error::TypeMismatch {
                key: "victim".into(),
                value: other.into(),
            }),
        }
    }
}

impl fmt::Display for VictimKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VictimKind::Builtin => "builtin",
            VictimKind::Bridge => "bridge",
        })
    }
}

/// Keys accepted in an attack config file.
pub const CONFIG_KEYS: [&str; 16] = [
    "iterations",
    "clip_cadence",
    "alpha",
    "segments",
    "segment_height",
    "spsa_samples",
    "seed",
    "victim",
    "ink_limit",
    "pitch_min",
    "pitch_max",
    "yaw_min",
    "yaw_max",
    "dist_min",
    "dist_max",
    "disc_radius_m",
];

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub iterations: usize,
    pub clip_cadence: usize,
    pub alpha: f64,
    pub segments: usize,
    /// Segment height `h`, equal to the disc radius in pixels.
    pub segment_height: usize,
    pub spsa_samples: usize,
    /// Half-amplitude of the SPSA probes.
    pub spsa_c: f64,
    pub seed: u64,
    pub victim: VictimKind,
    /// Total ink limit in percent.
    pub ink_limit: f64,
    pub ranges: ViewpointRanges,
    pub disc_radius_m: f64,
    pub image_size: usize,
    pub fov_deg: f64,
    pub augment: bool,
    pub occluder: Option<Occluder>,
    pub background: [f32; 3],
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            clip_cadence: 50,
            alpha: 1.0 / 255.0,
            segments: 12,
            segment_height: 64,
            spsa_samples: 8,
            spsa_c: 2.0 / 255.0,
            seed: 0,
            victim: VictimKind::Builtin,
            ink_limit: 300.0,
            ranges: ViewpointRanges::default(),
            disc_radius_m: 1.0,
            image_size: 128,
            fov_deg: 60.0,
            augment: true,
            occluder: None,
            background: [0.5; 3],
        }
    }
}

impl AttackConfig {
    /// Parses `key = value` text; missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text, &CONFIG_KEYS)?;
        let d = Self::default();
        let cfg = Self {
            iterations: kv.get_or("iterations", d.iterations)?,
            clip_cadence: kv.get_or("clip_cadence", d.clip_cadence)?,
            alpha: kv.get_or("alpha", d.alpha)?,
            segments: kv.get_or("segments", d.segments)?,
            segment_height: kv.get_or("segment_height", d.segment_height)?,
            spsa_samples: kv.get_or("spsa_samples", d.spsa_samples)?,
            seed: kv.get_or("seed", d.seed)?,
            victim: kv.get_or("victim", d.victim)?,
            ink_limit: kv.get_or("ink_limit", d.ink_limit)?,
            ranges: ViewpointRanges {
                pitch: (
                    kv.get_or("pitch_min", d.ranges.pitch.0)?,
                    kv.get_or("pitch_max", d.ranges.pitch.1)?,
                ),
                yaw: (
                    kv.get_or("yaw_min", d.ranges.yaw.0)?,
                    kv.get_or("yaw_max", d.ranges.yaw.1)?,
                ),
                distance: (
                    kv.get_or("dist_min", d.ranges.distance.0)?,
                    kv.get_or("dist_max", d.ranges.distance.1)?,
                ),
            },
            disc_radius_m: kv.get_or("disc_radius_m", d.disc_radius_m)?,
            ..d
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.iterations < 1 {
            return fail("iterations must be at least 1".into());
        }
        if self.clip_cadence < 1 {
            return fail("clip_cadence must be at least 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return fail(format!("alpha must be positive, got {}", self.alpha));
        }
        if self.spsa_samples < 1 {
            return fail("spsa_samples must be at least 1".into());
        }
        if !(self.spsa_c > 0.0) {
            return fail(format!("spsa probe size must be positive, got {}", self.spsa_c));
        }
        if !(self.ink_limit > 0.0 && self.ink_limit <= 400.0) {
            return fail(format!("ink_limit must be in (0, 400], got {}", self.ink_limit));
        }
        if !(self.disc_radius_m > 0.0) {
            return fail(format!("disc_radius_m must be positive, got {}", self.disc_radius_m));
        }
        if self.image_size < 16 {
            return fail(format!("image size {} is too small", self.image_size));
        }
        self.ranges.validate()?;
        DiscSpec::new(self.segments, self.segment_height)?;
        Ok(())
    }

    pub fn disc_spec(&self) -> Result<DiscSpec> {
        DiscSpec::new(self.segments, self.segment_height)
    }

    pub fn intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::from_fov(self.image_size, self.image_size, self.fov_deg)
    }

    /// Scene around a given disc using this config's geometry and dressing.
    pub fn scene(&self, disc: DiscImage) -> Result<SceneConfig> {
        SceneConfig::new(disc, self.disc_radius_m, self.occluder, self.background)
    }
}

/// `clamp(v + α·sign(g), 0, 1)` per channel, with `sign(0) = 0`.
pub fn sign_update(seg: &SegmentImage, grad: &RgbImage, alpha: f32) -> Result<SegmentImage> {
    if !seg.pixels().same_shape(grad) {
        return Err(Error::InvalidInput(format!(
            "gradient is {}x{}, segment is {}x{}",
            grad.height(),
            grad.width(),
            seg.height(),
            seg.width()
        )));
    }
    let g = grad.data();
    Ok(seg.map_clamped(|i, v| {
        let s = g[i / 3][i % 3];
        let step = if s > 0.0 {
            alpha
        } else if s < 0.0 {
            -alpha
        } else {
            0.0
        };
        v + step
    }))
}

/// Naive RGB→CMYK round trip that scales C, M, Y down whenever the total ink
/// exceeds `ink_limit` percent. Pixels within the limit are returned as is.
pub fn gamut_clip_pixel(px: [f32; 3], ink_limit: f64) -> [f32; 3] {
    const TOL: f64 = 1e-6;
    let limit = ink_limit / 100.0;
    let rgb = px.map(|v| (v as f64).clamp(0.0, 1.0));
    let k = 1.0 - rgb.iter().copied().fold(0.0, f64::max);
    if k >= 1.0 {
        return px;
    }
    let cmy = rgb.map(|v| (1.0 - v - k) / (1.0 - k));
    let total = cmy.iter().sum::<f64>() + k;
    if total <= limit + TOL {
        return px;
    }
    let cmy_sum: f64 = cmy.iter().sum();
    let scale = if k >= limit { 0.0 } else { (limit - k) / cmy_sum };
    cmy.map(|c| ((1.0 - c * scale) * (1.0 - k)) as f32)
}

pub fn gamut_clip(seg: &SegmentImage, ink_limit: f64) -> Result<SegmentImage> {
    if !(ink_limit > 0.0 && ink_limit <= 400.0) {
        return Err(Error::InvalidConfig(format!(
            "ink_limit must be in (0, 400], got {ink_limit}"
        )));
    }
    let pixels = seg.pixels().map(|&p| gamut_clip_pixel(p, ink_limit));
    SegmentImage::new(pixels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientMethod {
    Spsa,
    Exact,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub values: RgbImage,
    pub method: GradientMethod,
    /// Perturbation samples whose two probes both succeeded.
    pub samples_used: usize,
}

/// Simultaneous-perturbation estimate of the gradient of `loss` at `x`:
/// the mean over samples of `(L(x + cΔ) − L(x − cΔ)) / 2c · Δ` with Rademacher
/// `Δ`. Probes that fail drop their sample; probes are evaluated in parallel.
pub fn estimate_gradient_spsa<F>(
    x: &RgbImage,
    samples: usize,
    c: f64,
    rng: &mut impl Rng,
    loss: F,
) -> Result<GradientEstimate>
where
    F: Fn(&RgbImage) -> Result<f64> + Sync,
{
    if samples < 1 {
        return Err(Error::InvalidConfig("SPSA needs at least one sample".into()));
    }
    let n = x.len();
    let deltas: Vec<Vec<[f32; 3]>> = (0..samples)
        .map(|_| {
            (0..n)
                .map(|_| [0, 1, 2].map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }))
                .collect()
        })
        .collect();
    let probe = |delta: &[[f32; 3]], sign: f32| {
        let mut p = x.clone();
        for (v, d) in p.data_mut().iter_mut().zip(delta) {
            for ch in 0..3 {
                v[ch] += sign * c as f32 * d[ch];
            }
        }
        loss(&p)
    };
    let diffs: Vec<Option<f64>> = deltas
        .par_iter()
        .map(|d| {
            let (plus, minus) = rayon::join(|| probe(d, 1.0), || probe(d, -1.0));
            match (plus, minus) {
                (Ok(p), Ok(m)) => Some((p - m) / (2.0 * c)),
                (p, m) => {
                    if let Err(e) = p.and(m) {
                        debug!("SPSA probe dropped: {e}");
                    }
                    None
                }
            }
        })
        .collect();
    let used = diffs.iter().flatten().count();
    if used == 0 {
        return Err(Error::Victim("every SPSA probe failed".into()));
    }
    let mut acc = vec![[0.0f64; 3]; n];
    for (d, delta) in diffs.iter().zip(&deltas) {
        if let Some(s) = d {
            for (a, dv) in acc.iter_mut().zip(delta) {
                for ch in 0..3 {
                    a[ch] += s * dv[ch] as f64;
                }
            }
        }
    }
    let values = acc
        .iter()
        .map(|a| a.map(|v| (v / used as f64) as f32))
        .collect();
    Ok(GradientEstimate {
        values: Grid::from_vec(x.width(), x.height(), values)?,
        method: GradientMethod::Spsa,
        samples_used: used,
    })
}

/// A sampled view pair with its augmentation draws, ready to be evaluated
/// against any segment.
pub struct PairEvaluator<'a> {
    composition: &'a CompositionPlan,
    intrinsics: Intrinsics,
    pub viewpoints: (Viewpoint, Viewpoint),
    plan_a: RenderPlan,
    plan_b: RenderPlan,
    aug_a: AugmentParams,
    aug_b: AugmentParams,
    pose_a: CameraPose,
}

impl<'a> PairEvaluator<'a> {
    pub fn new(
        composition: &'a CompositionPlan,
        scene: &SceneConfig,
        intrinsics: Intrinsics,
        viewpoints: (Viewpoint, Viewpoint),
        augment: (AugmentParams, AugmentParams),
    ) -> Result<Self> {
        let pose_a = viewpoints.0.pose()?;
        let pose_b = viewpoints.1.pose()?;
        Ok(Self {
            composition,
            intrinsics,
            viewpoints,
            plan_a: RenderPlan::new(scene, &pose_a, &intrinsics)?,
            plan_b: RenderPlan::new(scene, &pose_b, &intrinsics)?,
            aug_a: augment.0,
            aug_b: augment.1,
            pose_a,
        })
    }

    /// `L_poc` of the victim's pointmaps for the given raw segment values,
    /// and the segment gradient when requested and available.
    pub fn evaluate(
        &self,
        segment: &RgbImage,
        victim: &dyn Victim,
        want_gradient: bool,
    ) -> Result<(LossValue, Option<RgbImage>)> {
        let disc = self.composition.compose_raw(segment)?;
        let (img_a, slope_a) = self.aug_a.apply(&self.plan_a.shade(&disc.pixels)?);
        let (img_b, slope_b) = self.aug_b.apply(&self.plan_b.shade(&disc.pixels)?);
        let input = VictimInput {
            image_a: &img_a,
            image_b: &img_b,
            mask_a: self.plan_a.disc_mask(),
            mask_b: self.plan_b.disc_mask(),
            center_a: self.plan_a.disc_center(),
            center_b: self.plan_b.disc_center(),
            intrinsics: &self.intrinsics,
            plane_a: ground_plane_in(&self.pose_a),
        };
        let out = victim.infer(&input, want_gradient)?;
        let loss = poc_loss(
            &PocView {
                pointmap: &out.pointmap_a,
                mask: self.plan_a.disc_mask(),
                center: self.plan_a.disc_center(),
            },
            &PocView {
                pointmap: &out.pointmap_b,
                mask: self.plan_b.disc_mask(),
                center: self.plan_b.disc_center(),
            },
        )?;
        let grad = match (want_gradient, out.image_gradients) {
            (true, Some((ga, gb))) => Some(self.chain(&ga, &slope_a, &gb, &slope_b)?),
            _ => None,
        };
        Ok((loss, grad))
    }

    /// Pulls image gradients back through augmentation, rendering and
    /// composition onto the segment.
    pub fn chain(&self, ga: &RgbImage, slope_a: &RgbImage, gb: &RgbImage, slope_b: &RgbImage) -> Result<RgbImage> {
        let scale = |g: &RgbImage, s: &RgbImage| -> Result<RgbImage> {
            if !g.same_shape(s) {
                return Err(Error::Victim("gradient image has the wrong size".into()));
            }
            let data = g
                .data()
                .iter()
                .zip(s.data())
                .map(|(a, b)| [a[0] * b[0], a[1] * b[1], a[2] * b[2]])
                .collect();
            Grid::from_vec(g.width(), g.height(), data)
        };
        let mut disc_grad = self.plan_a.backward(&scale(ga, slope_a)?)?;
        let from_b = self.plan_b.backward(&scale(gb, slope_b)?)?;
        for (d, e) in disc_grad.data_mut().iter_mut().zip(from_b.data()) {
            for c in 0..3 {
                d[c] += e[c];
            }
        }
        self.composition.backward(disc_grad.data())
    }
}

/// Draws a view pair sharing one distance, as in the trace's `pair` field.
pub fn sample_pair(rng: &mut impl Rng, ranges: &ViewpointRanges) -> Result<(Viewpoint, Viewpoint)> {
    ranges.validate()?;
    let u = |rng: &mut dyn rand::RngCore, (lo, hi): (f64, f64)| lo + (hi - lo) * rng.random::<f64>();
    let distance = u(rng, ranges.distance);
    let p1 = u(rng, ranges.pitch);
    let y1 = u(rng, ranges.yaw);
    let p2 = u(rng, ranges.pitch);
    let y2 = u(rng, ranges.yaw);
    Ok((
        Viewpoint {
            distance,
            pitch: p1,
            yaw: y1,
        },
        Viewpoint {
            distance,
            pitch: p2,
            yaw: y2,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub segment: PathBuf,
    pub disc: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackRecord {
    pub iteration: usize,
    pub loss: LossValue,
    pub pair: (Viewpoint, Viewpoint),
    pub checkpoint: Option<Checkpoint>,
}

impl fmt::Display for AttackRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (a, b) = &self.pair;
        write!(
            f,
            "iter={} loss={} pair={},{},{},{},{} flags={}",
            self.iteration,
            self.loss.total,
            a.distance,
            a.pitch,
            a.yaw,
            b.pitch,
            b.yaw,
            self.loss.flag_string()
        )?;
        if let Some(cp) = &self.checkpoint {
            write!(f, " checkpoint={}", cp.segment.display())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttackTrace {
    pub records: Vec<AttackRecord>,
    pub skipped: Vec<usize>,
}

impl AttackTrace {
    /// Mean loss over records whose iteration lies in `range`.
    pub fn window_mean(&self, range: std::ops::Range<usize>) -> Option<f64> {
        let vals: Vec<f64> = self
            .records
            .iter()
            .filter(|r| range.contains(&r.iteration))
            .map(|r| r.loss.total)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn to_text(&self) -> String {
        self.records.iter().map(|r| format!("{r}\n")).collect()
    }
}

/// Per-iteration hook, e.g. for streaming the trace to disk.
pub type Observer<'a> = &'a mut dyn FnMut(&AttackRecord);

fn iteration_rng(seed: u64, t: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t as u64 + 1);
    rng
}

/// Uniform noise in `[0, 1]`, as the initial segment.
pub fn initial_segment(cfg: &AttackConfig) -> Result<SegmentImage> {
    let (h, w) = cfg.disc_spec()?.segment_size();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    SegmentImage::new(crate::texture::uniform_noise(w, h, &mut rng))
}

/// Runs the optimization from `init` (or uniform noise). Checkpoints go to
/// `out_dir` when given.
pub fn run_attack(
    cfg: &AttackConfig,
    victim: &dyn Victim,
    init: Option<SegmentImage>,
    out_dir: Option<&Path>,
    mut observer: Option<Observer>,
) -> Result<(SegmentImage, AttackTrace)> {
    cfg.validate()?;
    let spec = cfg.disc_spec()?;
    let composition = CompositionPlan::new(&spec)?;
    let intr = cfg.intrinsics()?;
    let mut seg = match init {
        Some(s) => s,
        None => initial_segment(cfg)?,
    };
    let (h, w) = spec.segment_size();
    if seg.height() != h || seg.width() != w {
        return Err(Error::InvalidSpec(format!(
            "initial segment is {}x{}, expected {h}x{w}",
            seg.height(),
            seg.width()
        )));
    }
    // geometry only; the texture is supplied per evaluation
    let scene = cfg.scene(composition.compose(&seg)?)?;
    let exact = cfg.victim == VictimKind::Bridge && victim.provides_gradients();
    let max_consecutive = cfg.iterations / 4;
    let mut consecutive = 0usize;
    let mut trace = AttackTrace::default();
    for t in 0..cfg.iterations {
        let mut rng = iteration_rng(cfg.seed, t);
        let pair = sample_pair(&mut rng, &cfg.ranges)?;
        let aug = if cfg.augment {
            (AugmentParams::draw(&mut rng), AugmentParams::draw(&mut rng))
        } else {
            (AugmentParams::IDENTITY, AugmentParams::IDENTITY)
        };
        let step = PairEvaluator::new(&composition, &scene, intr, pair, aug).and_then(|ev| {
            let (loss, grad) = ev.evaluate(seg.pixels(), victim, exact)?;
            let grad = match grad {
                Some(g) => g,
                None => {
                    estimate_gradient_spsa(seg.pixels(), cfg.spsa_samples, cfg.spsa_c, &mut rng, |x| {
                        ev.evaluate(x, victim, false).map(|(l, _)| l.total)
                    })?
                    .values
                }
            };
            Ok((loss, grad))
        });
        let (loss, grad) = match step {
            Ok(v) => {
                consecutive = 0;
                v
            }
            Err(e) => {
                warn!("iteration {t} skipped: {e}");
                trace.skipped.push(t);
                consecutive += 1;
                if consecutive > max_consecutive {
                    return Err(Error::AttackAborted(format!(
                        "{consecutive} consecutive failed iterations (last: {e})"
                    )));
                }
                continue;
            }
        };
        seg = sign_update(&seg, &grad, cfg.alpha as f32)?;
        let mut checkpoint = None;
        if t % cfg.clip_cadence == 0 {
            seg = gamut_clip(&seg, cfg.ink_limit)?;
            if let Some(dir) = out_dir {
                checkpoint = Some(save_checkpoint(dir, t, &seg, &composition)?);
            }
        }
        let record = AttackRecord {
            iteration: t,
            loss,
            pair,
            checkpoint,
        };
        info!("{record}");
        if let Some(obs) = observer.as_mut() {
            obs(&record);
        }
        trace.records.push(record);
    }
    Ok((seg, trace))
}

fn save_checkpoint(dir: &Path, t: usize, seg: &SegmentImage, plan: &CompositionPlan) -> Result<Checkpoint> {
    std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let cp = Checkpoint {
        segment: dir.join(format!("segment_{t:05}.png")),
        disc: dir.join(format!("disc_{t:05}.png")),
    };
    write_rgb_png(&cp.segment, seg.pixels())?;
    write_rgb_png(&cp.disc, &plan.compose(seg)?.pixels)?;
    Ok(cp)
}

/// Pose metrics on one group of cameras. `relative_pose` returns the pose of
/// camera b relative to camera a; every camera is estimated against the
/// first, whose pose is given. Failed estimates fall back to the reference
/// pose.
pub fn evaluate_group(
    relative_pose: &(dyn Fn(&VictimInput) -> Result<CameraPose> + Sync),
    scene: &SceneConfig,
    intr: &Intrinsics,
    viewpoints: &[Viewpoint],
) -> Result<MetricsReport> {
    let poses: Vec<CameraPose> = viewpoints.iter().map(Viewpoint::pose).collect::<Result<_>>()?;
    let plans: Vec<RenderPlan> = poses
        .iter()
        .map(|p| RenderPlan::new(scene, p, intr))
        .collect::<Result<_>>()?;
    let images: Vec<RgbImage> = plans
        .iter()
        .map(|p| p.shade(&scene.disc.pixels))
        .collect::<Result<_>>()?;
    let reference = poses[0];
    let predicted: Vec<CameraPose> = (0..poses.len())
        .into_par_iter()
        .map(|j| {
            if j == 0 {
                return reference;
            }
            let input = VictimInput {
                image_a: &images[0],
                image_b: &images[j],
                mask_a: plans[0].disc_mask(),
                mask_b: plans[j].disc_mask(),
                center_a: plans[0].disc_center(),
                center_b: plans[j].disc_center(),
                intrinsics: intr,
                plane_a: ground_plane_in(&reference),
            };
            relative_pose(&input)
                .map(|rel| rel.compose(&reference))
                .unwrap_or(reference)
        })
        .collect();
    compute_report(&PoseSet::new(predicted, poses)?, &crate::metrics::GAMMAS)
}
