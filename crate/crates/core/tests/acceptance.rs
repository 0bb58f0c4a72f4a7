//! End-to-end acceptance checks. Each test prints one `[PASS]`/`[FAIL]` line
//! with the measured values, then asserts.

use std::time::Instant;

use kba_core::attack::{evaluate_group, gamut_clip_pixel, run_attack, sign_update, AttackConfig};
use kba_core::grid::Grid;
use kba_core::io::{decode_pmap, encode_pmap};
use kba_core::kaleido::{
    compose_disc, disc_corners, rotation_residual, solve_perspective, CompositionPlan, DiscImage, DiscSpec,
    QuadCorners, SegmentImage,
};
use kba_core::metrics::{compute_report, rotation_angle, PoseSet, GAMMAS};
use kba_core::poc::{pair_flows, poc_loss_from_flows, verify_projection_correspondence};
use kba_core::pose::{look_at_pose, CameraPose, Intrinsics, RotationMatrix};
use kba_core::scene::{render_view, sample_viewpoint, Pointmap, SceneConfig, Viewpoint, ViewpointRanges};
use kba_core::texture::natural_texture;
use kba_core::victim::{ground_plane_in, BuiltinVictim, MatcherConfig, VictimInput};
use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(name: &str, pass: bool, detail: &str, start: Instant) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("[{tag}] {name}: {detail} ({:.1} s)", start.elapsed().as_secs_f64());
}

fn min_triangle_area(q: &[[f64; 2]; 4]) -> f64 {
    let area = |a: [f64; 2], b: [f64; 2], c: [f64; 2]| {
        ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])).abs() / 2.0
    };
    [(0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)]
        .iter()
        .map(|&(i, j, k)| area(q[i], q[j], q[k]))
        .fold(f64::INFINITY, f64::min)
}

fn random_quad(rng: &mut ChaCha8Rng) -> QuadCorners {
    loop {
        let q = [(); 4].map(|_| [rng.random_range(-256.0..256.0), rng.random_range(-256.0..256.0)]);
        if min_triangle_area(&q) > 500.0 {
            return QuadCorners(q);
        }
    }
}

#[test]
fn geometry_exactness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (src, dst) = (random_quad(&mut rng), random_quad(&mut rng));
        let map = solve_perspective(&src, &dst).unwrap();
        for (s, d) in src.0.iter().zip(&dst.0) {
            let p = map.apply(*s).unwrap();
            worst = worst.max((p[0] - d[0]).hypot(p[1] - d[1]));
        }
    }
    let mut worst_rot = 0.0f64;
    for n_seg in [4, 8, 12, 24] {
        let spec = DiscSpec::new(n_seg, 256).unwrap();
        let base = disc_corners(&spec, 0).unwrap();
        for n in 0..n_seg {
            let q = disc_corners(&spec, n).unwrap();
            let r = base.rotated(n as f64 * spec.theta);
            for (a, b) in q.0.iter().zip(&r.0) {
                worst_rot = worst_rot.max((a[0] - b[0]).abs().max((a[1] - b[1]).abs()));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= 1e-9 && worst_rot <= 1e-10 && secs < 5.0;
    report(
        "geometry exactness",
        pass,
        &format!("max corner reprojection {worst:.2e} px, max rotation mismatch {worst_rot:.2e}"),
        start,
    );
    assert!(pass);
}

#[test]
fn n_fold_symmetry() {
    let start = Instant::now();
    let mut residuals = Vec::new();
    for n in [4usize, 8, 12] {
        let spec = DiscSpec::new(n, 256).unwrap();
        let (h, w) = spec.segment_size();
        let seg = SegmentImage::new(natural_texture(w, h, 31)).unwrap();
        let disc = compose_disc(&seg, &spec).unwrap();
        residuals.push((n, rotation_residual(&disc, spec.theta)));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = residuals.iter().all(|&(_, r)| r < 2.0 / 255.0) && secs < 10.0;
    let detail = residuals
        .iter()
        .map(|(n, r)| format!("N={n} residual {:.3}/255", r * 255.0))
        .collect::<Vec<_>>()
        .join(", ");
    report("N-fold symmetry", pass, &detail, start);
    assert!(pass);
}

#[test]
fn projection_correspondence() {
    let start = Instant::now();
    let disc = DiscImage::from_pixels(natural_texture(256, 256, 5)).unwrap();
    let scene = SceneConfig::new(disc, 1.0, None, [0.5; 3]).unwrap();
    let intr = Intrinsics::from_fov(128, 128, 60.0).unwrap();
    let ranges = ViewpointRanges::default();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let pairs: Vec<(Viewpoint, Viewpoint)> = (0..100)
        .map(|_| {
            (
                sample_viewpoint(&mut rng, &ranges).unwrap(),
                sample_viewpoint(&mut rng, &ranges).unwrap(),
            )
        })
        .collect();
    let rep = verify_projection_correspondence(&pairs, &scene, &intr).unwrap();
    let mut pass = !rep.insufficient;
    let mut detail = String::new();
    for (c, ch) in rep.channels.iter().enumerate() {
        let r = ch.pearson.unwrap_or(f64::NAN);
        pass &= r >= 0.9;
        detail += &format!("c{} r={r:.3} (n={}), ", c + 1, ch.samples);
    }
    // same yaw, different pitch and distance: identical projected orientation
    let mut min_same = f64::INFINITY;
    for _ in 0..10 {
        let yaw = rng.random_range(0.0..360.0);
        let a = look_at_pose(rng.random_range(2.0..3.0), rng.random_range(10.0..85.0), yaw).unwrap();
        let b = look_at_pose(rng.random_range(2.0..3.0), rng.random_range(10.0..85.0), yaw).unwrap();
        let (ta, tb) = pair_flows(&scene, &intr, &a, &b).unwrap();
        min_same = min_same.min(poc_loss_from_flows(&ta, &tb).total);
    }
    pass &= min_same >= 2.9;
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 60.0;
    detail += &format!("identical-orientation min L_poc {min_same:.4}");
    report("projection correspondence", pass, &detail, start);
    assert!(pass);
}

fn random_rotation(rng: &mut ChaCha8Rng) -> RotationMatrix {
    let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ));
    RotationMatrix::closest_to(&q.to_rotation_matrix().into_inner()).unwrap()
}

fn random_pose(rng: &mut ChaCha8Rng) -> CameraPose {
    let t = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
    CameraPose::new(random_rotation(rng), t).unwrap()
}

struct Oracle {
    rra: Vec<f64>,
    rta: Vec<f64>,
    maa30: f64,
    rrs: f64,
}

fn quat(r: &Matrix3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_matrix(r)
}

/// Metrics straight from their definitions, using quaternions for angles.
fn oracle(pred: &[CameraPose], gt: &[CameraPose]) -> Oracle {
    let n = pred.len();
    let center = |p: &CameraPose| -(p.rotation.matrix().transpose() * p.translation);
    let mut errs = Vec::new();
    let mut rel_pred = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let rp = quat(pred[i].rotation.matrix()) * quat(pred[j].rotation.matrix()).inverse();
            let rg = quat(gt[i].rotation.matrix()) * quat(gt[j].rotation.matrix()).inverse();
            let d = rp * rg.inverse();
            let r_err = (2.0 * d.imag().norm().atan2(d.w.abs())).to_degrees();
            let a = center(&pred[j]) - center(&pred[i]);
            let b = center(&gt[j]) - center(&gt[i]);
            let t_err = a.cross(&b).norm().atan2(a.dot(&b)).to_degrees();
            errs.push((r_err, t_err));
            rel_pred.push(rp.to_rotation_matrix().into_inner());
        }
    }
    let m = errs.len() as f64;
    let rra_at = |g: f64| errs.iter().filter(|e| e.0 < g).count() as f64 / m;
    let rta_at = |g: f64| errs.iter().filter(|e| e.1 < g).count() as f64 / m;
    let mut maa = 0.0;
    for t in 1..=30 {
        maa += rra_at(t as f64).min(rta_at(t as f64));
    }
    let mut sims = Vec::new();
    for p in 0..rel_pred.len() {
        for q in p + 1..rel_pred.len() {
            let (a, b) = (&rel_pred[p], &rel_pred[q]);
            let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
            sims.push(dot / (a.norm() * b.norm()));
        }
    }
    Oracle {
        rra: GAMMAS.iter().map(|&g| rra_at(g as f64)).collect(),
        rta: GAMMAS.iter().map(|&g| rta_at(g as f64)).collect(),
        maa30: maa / 30.0,
        rrs: if sims.is_empty() { 1.0 } else { sims.iter().sum::<f64>() / sims.len() as f64 },
    }
}

#[test]
fn metrics_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    let mut perfect = true;
    for k in 0..1000 {
        let n = rng.random_range(3..=10);
        let gt: Vec<CameraPose> = (0..n).map(|_| random_pose(&mut rng)).collect();
        // mix exact, slightly perturbed and unrelated predictions
        let pred: Vec<CameraPose> = gt
            .iter()
            .map(|g| match k % 3 {
                0 => random_pose(&mut rng),
                _ => {
                    let axis = Vector3::new(rng.random_range(-1.0..1.0), 1.0, rng.random_range(-1.0..1.0));
                    let noise = RotationMatrix::from_axis_angle(&axis, rng.random_range(0.0..0.6));
                    let dt = Vector3::new(rng.random_range(-0.5..0.5), 0.0, rng.random_range(-0.5..0.5));
                    CameraPose::new(noise * g.rotation, g.translation + dt).unwrap()
                }
            })
            .collect();
        let r = compute_report(&PoseSet::new(pred.clone(), gt.clone()).unwrap(), &GAMMAS).unwrap();
        let o = oracle(&pred, &gt);
        for (i, g) in GAMMAS.iter().enumerate() {
            worst = worst.max((r.rra[g] - o.rra[i]).abs()).max((r.rta[g] - o.rta[i]).abs());
        }
        worst = worst.max((r.maa30 - o.maa30).abs()).max((r.rrs - o.rrs).abs());

        let p = compute_report(&PoseSet::new(gt.clone(), gt).unwrap(), &GAMMAS).unwrap();
        perfect &= p.maa30 == 1.0 && p.rra.values().all(|&v| v == 1.0) && p.rta.values().all(|&v| v == 1.0);
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= 1e-9 && perfect && secs < 30.0;
    report(
        "metrics oracle",
        pass,
        &format!("max deviation {worst:.2e}, perfect predictions score 1: {perfect}"),
        start,
    );
    assert!(pass);
}

/// Yaw of camera b's center as seen from above, in degrees.
fn azimuth(p: &CameraPose) -> f64 {
    let c = p.center();
    c.x.atan2(c.z).to_degrees()
}

fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

struct MechanismStats {
    median: f64,
    aliased: usize,
    failed: usize,
}

fn mechanism_run(scene: &SceneConfig, intr: &Intrinsics, trials: usize) -> MechanismStats {
    let victim = BuiltinVictim::new(MatcherConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut errs = Vec::new();
    let (mut aliased, mut failed) = (0, 0);
    for t in 0..trials {
        let ya: f64 = rng.random_range(0.0..360.0);
        let yb = ya + 30.0 * (1 + t % 11) as f64;
        let a = look_at_pose(2.4, 55.0, ya).unwrap();
        let b = look_at_pose(2.4, 55.0, yb).unwrap();
        let va = render_view(scene, &a, intr).unwrap();
        let vb = render_view(scene, &b, intr).unwrap();
        let input = VictimInput {
            image_a: &va.image,
            image_b: &vb.image,
            mask_a: &va.disc_mask,
            mask_b: &vb.disc_mask,
            center_a: va.disc_center,
            center_b: vb.disc_center,
            intrinsics: intr,
            plane_a: ground_plane_in(&a),
        };
        match victim.estimate(&input) {
            Ok(est) => {
                let truth = b.compose(&a.inverse());
                errs.push(rotation_angle(&est.rotation, &truth.rotation));
                if angle_diff(azimuth(&est.pose_b(&a)), ya) < 15.0 {
                    aliased += 1;
                }
            }
            Err(_) => {
                failed += 1;
                errs.push(180.0);
            }
        }
    }
    errs.sort_by(f64::total_cmp);
    MechanismStats {
        median: errs[errs.len() / 2],
        aliased,
        failed,
    }
}

#[test]
fn mechanism_reproduction() {
    let start = Instant::now();
    let intr = Intrinsics::from_fov(128, 128, 60.0).unwrap();
    let spec = DiscSpec::new(12, 128).unwrap();
    let (h, w) = spec.segment_size();
    let plain = DiscImage::from_pixels(natural_texture(256, 256, 21)).unwrap();
    let kaleido = compose_disc(&SegmentImage::new(natural_texture(w, h, 21)).unwrap(), &spec).unwrap();
    let trials = 44;
    let p = mechanism_run(&SceneConfig::new(plain, 1.0, None, [0.5; 3]).unwrap(), &intr, trials);
    let k = mechanism_run(&SceneConfig::new(kaleido, 1.0, None, [0.5; 3]).unwrap(), &intr, trials);
    let ratio = k.median / p.median.max(1e-9);
    let alias_rate = k.aliased as f64 / trials as f64;
    let secs = start.elapsed().as_secs_f64();
    let pass = ratio >= 10.0 && alias_rate >= 0.6 && secs < 300.0;
    report(
        "mechanism reproduction",
        pass,
        &format!(
            "median rotation error plain {:.2}° vs kaleidoscopic {:.2}° ({ratio:.1}x), aliasing {}/{trials}, failures {}/{}",
            p.median, k.median, k.aliased, p.failed, k.failed
        ),
        start,
    );
    assert!(pass);
}

fn held_out_maa(disc: &DiscImage, cfg: &AttackConfig) -> f64 {
    let scene = cfg.scene(disc.clone()).unwrap();
    let intr = cfg.intrinsics().unwrap();
    let victim = BuiltinVictim::new(MatcherConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0ff5);
    let groups = 12;
    let mut total = 0.0;
    for _ in 0..groups {
        let views: Vec<Viewpoint> = (0..5).map(|_| sample_viewpoint(&mut rng, &cfg.ranges).unwrap()).collect();
        total += evaluate_group(&|inp| victim.relative_pose(inp), &scene, &intr, &views)
            .unwrap()
            .maa30;
    }
    total / groups as f64
}

#[test]
fn attack_loop_efficacy() {
    let start = Instant::now();
    let cfg = AttackConfig::default();
    let victim = BuiltinVictim::new(MatcherConfig::default());
    let (seg, trace) = run_attack(&cfg, &victim, None, None, None).unwrap();
    let first = trace.window_mean(0..50).unwrap_or(f64::NAN);
    let last = trace
        .window_mean(cfg.iterations - 50..cfg.iterations)
        .unwrap_or(f64::NAN);
    let spec = cfg.disc_spec().unwrap();
    let plan = CompositionPlan::new(&spec).unwrap();
    let (h, w) = spec.segment_size();
    let natural = SegmentImage::new(natural_texture(w, h, 21)).unwrap();
    let maa_opt = held_out_maa(&plan.compose(&seg).unwrap(), &cfg);
    let maa_nat = held_out_maa(&plan.compose(&natural).unwrap(), &cfg);
    let secs = start.elapsed().as_secs_f64();
    let pass = last - first >= 0.5 && maa_opt < maa_nat && secs < 900.0;
    report(
        "attack loop efficacy",
        pass,
        &format!(
            "windowed L_poc first {first:.3} last {last:.3} (gain {:.3}), skipped {}/{}, held-out mAA(30) optimized {maa_opt:.3} vs natural kaleidoscopic {maa_nat:.3}",
            last - first,
            trace.skipped.len(),
            cfg.iterations
        ),
        start,
    );
    assert!(pass);
}

#[test]
fn sign_update_behavior() {
    let start = Instant::now();
    let a = 1.0f32 / 255.0;
    let vals = [0.0f32, 0.5, 1.0, a, 1.0 - a];
    let grads = [-2.0f32, -1e-30, 0.0, 1e-30, 3.0];
    let n = vals.len() * grads.len();
    let seg = SegmentImage::new(
        Grid::from_vec(n, 2, (0..2 * n).map(|i| [vals[(i % n) / grads.len()]; 3]).collect()).unwrap(),
    )
    .unwrap();
    let g = Grid::from_vec(n, 2, (0..2 * n).map(|i| [grads[i % grads.len()]; 3]).collect()).unwrap();
    let out = sign_update(&seg, &g, a).unwrap();
    let mut pass = true;
    for (i, p) in out.pixels().data().iter().enumerate() {
        let v = vals[(i % n) / grads.len()];
        let gr = grads[i % grads.len()];
        let want = if gr > 0.0 {
            (v + a).min(1.0)
        } else if gr < 0.0 {
            (v - a).max(0.0)
        } else {
            v
        };
        pass &= p.iter().all(|&x| x == want);
    }
    // repeated steps move by exact multiples of α until the bound holds them
    let mut s = SegmentImage::filled(2, 2, [0.5; 3]).unwrap();
    let up = Grid::new(2, 2, [1.0f32; 3]);
    for k in 1..=200 {
        s = sign_update(&s, &up, a).unwrap();
        let expect = (0..k).fold(0.5f32, |v, _| (v + a).min(1.0));
        pass &= s.pixels().data().iter().flatten().all(|&x| x == expect);
    }
    pass &= s.pixels().data().iter().flatten().all(|&x| x == 1.0);
    report(
        "sign update",
        pass,
        "bounds are fixed points, sign(0) is a no-op, steps are α",
        start,
    );
    assert!(pass);
}

#[test]
fn gamut_clip_idempotence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut mismatches = 0;
    let mut changed = 0;
    // the naive round trip never exceeds 300% ink, so lower limits are
    // included to exercise the clipping branch
    let limits = [300.0, 250.0, 200.0, 150.0, 100.0];
    for i in 0..100_000 {
        let limit = limits[i % limits.len()];
        let px = [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
        let once = gamut_clip_pixel(px, limit);
        if once != px {
            changed += 1;
        }
        let twice = gamut_clip_pixel(once, limit);
        if once.map(f32::to_bits) != twice.map(f32::to_bits) {
            mismatches += 1;
        }
    }
    let pass = mismatches == 0;
    report(
        "gamut clip idempotence",
        pass,
        &format!("{mismatches} mismatches over 100000 pixels ({changed} clipped)"),
        start,
    );
    assert!(pass);
}

#[test]
fn pmap_round_trip() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut failures = 0;
    for _ in 0..200 {
        let (w, h) = (rng.random_range(1..64), rng.random_range(1..64));
        let coords = Grid::from_fn(w, h, |_, _| {
            [0; 3].map(|_| f32::from_bits(rng.random::<u32>() & 0x7f7f_ffff) * if rng.random() { 1.0 } else { -1.0 })
        });
        let valid = Grid::from_fn(w, h, |_, _| rng.random_bool(0.7));
        // invalid entries still carry finite values
        let pm = Pointmap::new(coords, valid).unwrap();
        let back = decode_pmap(&encode_pmap(&pm)).unwrap();
        let same = back.valid == pm.valid
            && back
                .coords
                .data()
                .iter()
                .zip(pm.coords.data())
                .all(|(a, b)| a.map(f32::to_bits) == b.map(f32::to_bits));
        if !same {
            failures += 1;
        }
    }
    let pass = failures == 0;
    report(
        "PMAP round trip",
        pass,
        &format!("{failures} of 200 random pointmaps differ after decoding"),
        start,
    );
    assert!(pass);
}

