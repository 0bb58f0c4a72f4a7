mod common;

use common::{BlindVictim, ToyVictim};
use kba_core::attack::{
    estimate_gradient_spsa, gamut_clip, gamut_clip_pixel, initial_segment, run_attack, sample_pair, sign_update,
    AttackConfig, PairEvaluator,
};
use kba_core::grid::{Grid, RgbImage};
use kba_core::kaleido::{symmetry_score, CompositionPlan, SegmentImage};
use kba_core::scene::AugmentParams;
use kba_core::texture::natural_texture;
use kba_core::victim::{Victim, VictimInput, VictimOutput};
use kba_core::{BuiltinVictim, Error, MatcherConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small() -> AttackConfig {
    AttackConfig {
        segment_height: 24,
        image_size: 48,
        ..AttackConfig::default()
    }
}

fn cosine(a: &RgbImage, b: &RgbImage) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.data().iter().zip(b.data()) {
        for c in 0..3 {
            ab += x[c] as f64 * y[c] as f64;
            aa += (x[c] as f64).powi(2);
            bb += (y[c] as f64).powi(2);
        }
    }
    ab / (aa.sqrt() * bb.sqrt())
}

#[test]
fn single_blind_iteration_returns_clipped_init() {
    let cfg = AttackConfig {
        iterations: 1,
        ink_limit: 150.0,
        ..small()
    };
    let init = initial_segment(&cfg).unwrap();
    let (seg, trace) = run_attack(&cfg, &BlindVictim, Some(init.clone()), None, None).unwrap();
    assert_eq!(trace.records.len(), 1);
    assert_eq!(seg, gamut_clip(&init, 150.0).unwrap());
    assert_ne!(seg, init);
}

#[test]
fn builtin_trace_is_reproducible() {
    let cfg = AttackConfig {
        iterations: 6,
        clip_cadence: 2,
        spsa_samples: 2,
        segment_height: 48,
        image_size: 96,
        seed: 9,
        ranges: kba_core::ViewpointRanges::dt1(),
        ..AttackConfig::default()
    };
    let victim = BuiltinVictim::new(MatcherConfig::default());
    let (s1, t1) = run_attack(&cfg, &victim, None, None, None).unwrap();
    let (s2, t2) = run_attack(&cfg, &victim, None, None, None).unwrap();
    assert_eq!(t1.to_text(), t2.to_text());
    assert_eq!(t1.skipped, t2.skipped);
    assert_eq!(s1, s2);
    for r in &t1.records {
        let line = r.to_string();
        assert!(line.starts_with(&format!("iter={} loss=", r.iteration)), "{line}");
        assert!(line.contains(" pair=") && line.contains(" flags="), "{line}");
    }
}

#[test]
fn checkpoints_are_written_and_stay_symmetric() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = AttackConfig {
        iterations: 5,
        clip_cadence: 2,
        segment_height: 64,
        image_size: 48,
        ..AttackConfig::default()
    };
    let (h, w) = cfg.disc_spec().unwrap().segment_size();
    let init = SegmentImage::new(natural_texture(w, h, 2)).unwrap();
    let mut seen = Vec::new();
    let mut obs = |r: &kba_core::AttackRecord| seen.push(r.iteration);
    let (seg, trace) = run_attack(&cfg, &ToyVictim, Some(init), Some(dir.path()), Some(&mut obs)).unwrap();
    assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    let cps: Vec<_> = trace.records.iter().filter_map(|r| r.checkpoint.clone()).collect();
    assert_eq!(cps.len(), 3);
    for cp in &cps {
        assert!(cp.segment.exists() && cp.disc.exists());
    }
    let plan = CompositionPlan::new(&cfg.disc_spec().unwrap()).unwrap();
    assert!(symmetry_score(&plan.compose(&seg).unwrap(), cfg.segments) >= 0.98);
    for p in seg.pixels().data() {
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

struct FailingVictim;

impl Victim for FailingVictim {
    fn infer(&self, _: &VictimInput, _: bool) -> kba_core::Result<VictimOutput> {
        Err(Error::Victim("unreachable model".into()))
    }
}

#[test]
fn persistent_failures_abort() {
    let cfg = AttackConfig {
        iterations: 12,
        ..small()
    };
    assert!(matches!(
        run_attack(&cfg, &FailingVictim, None, None, None),
        Err(Error::AttackAborted(_))
    ));
}

#[test]
fn spsa_sees_nothing_through_a_blind_victim() {
    let cfg = small();
    let plan = CompositionPlan::new(&cfg.disc_spec().unwrap()).unwrap();
    let seg = initial_segment(&cfg).unwrap();
    let scene = cfg.scene(plan.compose(&seg).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pair = sample_pair(&mut rng, &cfg.ranges).unwrap();
    let ev = PairEvaluator::new(
        &plan,
        &scene,
        cfg.intrinsics().unwrap(),
        pair,
        (AugmentParams::IDENTITY, AugmentParams::IDENTITY),
    )
    .unwrap();
    let g = estimate_gradient_spsa(seg.pixels(), 4, 2.0 / 255.0, &mut rng, |x| {
        ev.evaluate(x, &BlindVictim, false).map(|(l, _)| l.total)
    })
    .unwrap();
    assert!(g.values.data().iter().flatten().all(|&v| v == 0.0));
    let next = sign_update(&seg, &g.values, 1.0 / 255.0).unwrap();
    assert_eq!(next, seg);
}

#[test]
fn spsa_cosine_follows_sample_count() {
    // for a linear-gradient loss, the mean cosine to the true gradient is
    // close to sqrt(S / (S + d - 1)) for S Rademacher samples in d dimensions
    let x = natural_texture(16, 8, 5);
    let d = x.len() * 3;
    let loss = |p: &RgbImage| Ok(p.data().iter().flatten().map(|&v| (v * v) as f64).sum());
    let truth = x.map(|p| p.map(|v| 2.0 * v));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for samples in [8usize, 32, 4 * d] {
        let trials = if samples > 100 { 10 } else { 100 };
        let mean: f64 = (0..trials)
            .map(|_| {
                let g = estimate_gradient_spsa(&x, samples, 2.0 / 255.0, &mut rng, loss).unwrap();
                cosine(&g.values, &truth)
            })
            .sum::<f64>()
            / trials as f64;
        let expected = (samples as f64 / (samples + d - 1) as f64).sqrt();
        assert!((mean - expected).abs() < 0.15 * expected, "S={samples}: {mean} vs {expected}");
        if samples == 4 * d {
            assert!(mean > 0.7);
        }
    }
}

#[test]
fn chained_gradient_matches_finite_differences() {
    let cfg = small();
    let plan = CompositionPlan::new(&cfg.disc_spec().unwrap()).unwrap();
    let (h, w) = cfg.disc_spec().unwrap().segment_size();
    let seg = SegmentImage::new(natural_texture(w, h, 8)).unwrap();
    let scene = cfg.scene(plan.compose(&seg).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pair = sample_pair(&mut rng, &cfg.ranges).unwrap();
    let aug = (AugmentParams::draw(&mut rng), AugmentParams::draw(&mut rng));
    let ev = PairEvaluator::new(&plan, &scene, cfg.intrinsics().unwrap(), pair, aug).unwrap();
    let (_, grad) = ev.evaluate(seg.pixels(), &ToyVictim, true).unwrap();
    let grad = grad.unwrap();
    // the ten segment entries with the largest analytic gradient
    let mut idx: Vec<(usize, usize)> = (0..grad.len()).flat_map(|i| (0..3).map(move |c| (i, c))).collect();
    idx.sort_by(|a, b| grad.data()[b.0][b.1].abs().total_cmp(&grad.data()[a.0][a.1].abs()));
    let eps = 1e-3f32;
    let (mut dot, mut na, mut nf) = (0.0, 0.0, 0.0);
    for &(i, c) in idx.iter().take(10) {
        let bump = |s: f32| {
            let mut p = seg.pixels().clone();
            p.data_mut()[i][c] += s * eps;
            ev.evaluate(&p, &ToyVictim, false).unwrap().0.total
        };
        let fd = (bump(1.0) - bump(-1.0)) / (2.0 * eps as f64);
        let an = grad.data()[i][c] as f64;
        dot += fd * an;
        na += an * an;
        nf += fd * fd;
    }
    let cos = dot / (na.sqrt() * nf.sqrt());
    assert!(cos > 0.95, "cosine {cos}");
}

#[test]
fn exact_sign_steps_ascend() {
    let cfg = small();
    let plan = CompositionPlan::new(&cfg.disc_spec().unwrap()).unwrap();
    let (h, w) = cfg.disc_spec().unwrap().segment_size();
    let seg = SegmentImage::new(natural_texture(w, h, 12)).unwrap();
    let scene = cfg.scene(plan.compose(&seg).unwrap()).unwrap();
    let mut up = 0;
    let trials = 30;
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + t);
        let pair = sample_pair(&mut rng, &cfg.ranges).unwrap();
        let ev = PairEvaluator::new(
            &plan,
            &scene,
            cfg.intrinsics().unwrap(),
            pair,
            (AugmentParams::IDENTITY, AugmentParams::IDENTITY),
        )
        .unwrap();
        let (before, grad) = ev.evaluate(seg.pixels(), &ToyVictim, true).unwrap();
        let next = sign_update(&seg, &grad.unwrap(), cfg.alpha as f32).unwrap();
        let (after, _) = ev.evaluate(next.pixels(), &ToyVictim, false).unwrap();
        if after.total >= before.total {
            up += 1;
        }
    }
    assert!(up * 10 >= trials * 9, "{up}/{trials}");
}

#[test]
fn gamut_clip_respects_limit() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let seg = SegmentImage::new(kba_core::texture::uniform_noise(40, 30, &mut rng)).unwrap();
    let clipped = gamut_clip(&seg, 200.0).unwrap();
    for p in clipped.pixels().data() {
        let k = 1.0 - p.iter().copied().fold(0.0f32, f32::max) as f64;
        if k < 1.0 {
            let ink: f64 = p.iter().map(|&v| (1.0 - v as f64 - k) / (1.0 - k)).sum::<f64>() + k;
            assert!(ink <= 2.0 + 1e-5, "{ink}");
        }
    }
    assert!(matches!(gamut_clip(&seg, 0.0), Err(Error::InvalidConfig(_))));
    assert!(matches!(gamut_clip(&seg, 401.0), Err(Error::InvalidConfig(_))));
}

proptest! {
    #[test]
    fn gamut_clip_is_idempotent(r in 0.0f32..=1.0, g in 0.0f32..=1.0, b in 0.0f32..=1.0, limit in 1.0f64..=400.0) {
        let once = gamut_clip_pixel([r, g, b], limit);
        prop_assert_eq!(gamut_clip_pixel(once, limit), once);
    }

    #[test]
    fn sign_update_moves_by_at_most_alpha(v in proptest::collection::vec(0.0f32..=1.0, 12), g in proptest::collection::vec(-1.0f32..=1.0, 12)) {
        let seg = SegmentImage::new(Grid::from_vec(2, 2, v.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()).unwrap()).unwrap();
        let grad = Grid::from_vec(2, 2, g.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()).unwrap();
        let a = 1.0f32 / 255.0;
        let out = sign_update(&seg, &grad, a).unwrap();
        for ((o, s), d) in out.pixels().data().iter().zip(seg.pixels().data()).zip(grad.data()) {
            for c in 0..3 {
                prop_assert!((0.0..=1.0).contains(&o[c]));
                prop_assert!((o[c] - s[c]).abs() <= a + f32::EPSILON);
                if d[c] > 0.0 { prop_assert!(o[c] >= s[c]); }
                if d[c] < 0.0 { prop_assert!(o[c] <= s[c]); }
                if d[c] == 0.0 { prop_assert_eq!(o[c], s[c]); }
            }
        }
    }
}
