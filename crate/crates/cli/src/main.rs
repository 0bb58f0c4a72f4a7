use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use kba_core::attack::{run_attack, AttackConfig, AttackRecord, VictimKind};
use kba_core::bridge::BridgeVictim;
use kba_core::io::{emit_heatmap, read_mask_png, read_pmap, read_poses, read_rgb_png, write_mask_png, write_pmap,
    write_poses, write_rgb_png};
use kba_core::kaleido::{compose_disc, symmetry_score, CompositionPlan, DiscImage, DiscSpec, SegmentImage};
use kba_core::metrics::{compute_report, PoseSet, GAMMAS};
use kba_core::poc::{poc_loss, verify_projection_correspondence, PocView};
use kba_core::pose::{look_at_pose, CameraPose, Intrinsics};
use kba_core::scene::{render_view, sample_viewpoint, SceneConfig, ViewpointRanges};
use kba_core::texture::natural_texture;
use kba_core::victim::{BuiltinVictim, MatcherConfig, Victim};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod scene_file;

use scene_file::SceneFile;

#[derive(Parser)]
#[command(name = "kba", version, about = "Kaleidoscopic background discs and pose-attack tooling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compose an N-fold symmetric disc from a segment image.
    Compose(ComposeArgs),
    /// Render views of a disc scene with pointmaps and masks.
    Render(RenderArgs),
    /// Projected orientation consistency loss between two pointmaps.
    Loss(LossArgs),
    /// Relative-pose metrics of predicted against ground-truth poses.
    Metrics(MetricsArgs),
    /// Optimize a segment image against a victim.
    Attack(AttackArgs),
    /// Correlate flow cosines of ideal pointmaps with projected orientations.
    #[command(name = "verify-eq23")]
    VerifyEq23(VerifyArgs),
    /// Score the N-fold rotational symmetry of a disc image.
    SymmetryCheck(SymmetryArgs),
}

#[derive(Args)]
struct ComposeArgs {
    /// Segment image (PNG) whose size matches the disc spec.
    #[arg(long)]
    segment: PathBuf,
    #[arg(long, default_value_t = 12)]
    segments: usize,
    /// Disc radius in pixels; defaults to the segment height.
    #[arg(long)]
    radius: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Print the symmetry score of the composed disc.
    #[arg(long)]
    symmetry_check: bool,
}

#[derive(Args)]
struct RenderArgs {
    /// Scene description (`key = value`).
    #[arg(long)]
    scene: PathBuf,
    /// Viewpoint as `distance,pitch,yaw`; repeatable.
    #[arg(long = "view", value_parser = parse_view)]
    views: Vec<(f64, f64, f64)>,
    /// File of world-to-camera poses, one per line.
    #[arg(long)]
    poses: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write a heatmap per pointmap channel.
    #[arg(long)]
    heatmaps: bool,
}

#[derive(Args)]
struct LossArgs {
    #[arg(long)]
    pmap_a: PathBuf,
    #[arg(long)]
    pmap_b: PathBuf,
    #[arg(long)]
    mask_a: PathBuf,
    #[arg(long)]
    mask_b: PathBuf,
    /// Disc center `x,y` in view a; defaults to the mask centroid.
    #[arg(long, value_parser = parse_pair)]
    center_a: Option<[f64; 2]>,
    #[arg(long, value_parser = parse_pair)]
    center_b: Option<[f64; 2]>,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
}

#[derive(Args)]
struct AttackArgs {
    /// Attack config (`key = value`); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Initial segment image instead of uniform noise.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Exchange directory of the model bridge.
    #[arg(long)]
    exchange: Option<PathBuf>,
    /// Seconds to wait for each bridge response.
    #[arg(long, default_value_t = 120.0)]
    timeout: f64,
    /// Estimate gradients with SPSA even when the bridge can supply them.
    #[arg(long)]
    no_bridge_gradients: bool,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 100)]
    pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Render width and height in pixels.
    #[arg(long, default_value_t = 128)]
    size: usize,
    /// Scene description; a procedural texture disc is used when omitted.
    #[arg(long)]
    scene: Option<PathBuf>,
}

#[derive(Args)]
struct SymmetryArgs {
    #[arg(long)]
    disc: PathBuf,
    #[arg(long, default_value_t = 12)]
    segments: usize,
}

/// Bad command-line input that the core library never sees.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn parse_floats<const N: usize>(s: &str) -> Result<[f64; N], String> {
    let vals: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    vals.try_into().map_err(|_| format!("expected {N} comma-separated numbers"))
}

fn parse_view(s: &str) -> Result<(f64, f64, f64), String> {
    let [d, p, y] = parse_floats::<3>(s)?;
    Ok((d, p, y))
}

fn parse_pair(s: &str) -> Result<[f64; 2], String> {
    parse_floats::<2>(s)
}

fn require_file(path: &Path) -> anyhow::Result<()> {
    if !path.is_file() {
        return Err(usage(format!("input file {} does not exist", path.display())));
    }
    Ok(())
}

fn create_dir(path: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn compose(args: &ComposeArgs) -> anyhow::Result<()> {
    require_file(&args.segment)?;
    let seg = SegmentImage::new(read_rgb_png(&args.segment)?)?;
    let spec = DiscSpec::new(args.segments, args.radius.unwrap_or(seg.height()))?;
    let disc = compose_disc(&seg, &spec)?;
    write_rgb_png(&args.out, &disc.pixels)?;
    if args.symmetry_check {
        println!("symmetry_score={:.6}", symmetry_score(&disc, args.segments));
    }
    Ok(())
}

fn load_scene(path: &Path) -> anyhow::Result<(SceneConfig, Intrinsics)> {
    require_file(path)?;
    let text = std::fs::read_to_string(path)?;
    let file = SceneFile::parse(&text, path.parent().unwrap_or(Path::new(".")))?;
    for p in file.image_paths() {
        require_file(p)?;
    }
    Ok((file.load()?, file.intrinsics()?))
}

fn render(args: &RenderArgs) -> anyhow::Result<()> {
    let (scene, intr) = load_scene(&args.scene)?;
    let mut poses: Vec<CameraPose> = args
        .views
        .iter()
        .map(|&(d, p, y)| look_at_pose(d, p, y))
        .collect::<kba_core::Result<_>>()?;
    if let Some(path) = &args.poses {
        require_file(path)?;
        poses.extend(read_poses(path)?);
    }
    if poses.is_empty() {
        return Err(usage("give at least one --view or a --poses file"));
    }
    create_dir(&args.out)?;
    for (k, pose) in poses.iter().enumerate() {
        let v = render_view(&scene, pose, &intr)?;
        write_rgb_png(&args.out.join(format!("view_{k}_image.png")), &v.image)?;
        write_pmap(&args.out.join(format!("view_{k}_pointmap.pmap")), &v.pointmap)?;
        write_mask_png(&args.out.join(format!("view_{k}_mask.png")), &v.disc_mask)?;
        if args.heatmaps {
            for c in 0..3 {
                let path = args.out.join(format!("view_{k}_heatmap_c{}.png", c + 1));
                emit_heatmap(&v.pointmap.channel(c), &v.pointmap.valid, &path)?;
            }
        }
        println!(
            "view={k} disc_center={},{} disc_pixels={}",
            v.disc_center[0],
            v.disc_center[1],
            v.disc_mask.count()
        );
    }
    write_poses(&args.out.join("poses.txt"), &poses)?;
    Ok(())
}

fn loss(args: &LossArgs) -> anyhow::Result<()> {
    for p in [&args.pmap_a, &args.pmap_b, &args.mask_a, &args.mask_b] {
        require_file(p)?;
    }
    let (pa, pb) = (read_pmap(&args.pmap_a)?, read_pmap(&args.pmap_b)?);
    let (ma, mb) = (read_mask_png(&args.mask_a)?, read_mask_png(&args.mask_b)?);
    let center = |given: Option<[f64; 2]>, mask: &kba_core::Mask, name: &str| {
        given
            .or_else(|| mask.centroid())
            .ok_or_else(|| usage(format!("mask {name} is empty")))
    };
    let va = PocView {
        pointmap: &pa,
        mask: &ma,
        center: center(args.center_a, &ma, "a")?,
    };
    let vb = PocView {
        pointmap: &pb,
        mask: &mb,
        center: center(args.center_b, &mb, "b")?,
    };
    let l = poc_loss(&va, &vb)?;
    println!(
        "poc_loss {} c1 {} c2 {} c3 {} flags {}",
        l.total,
        l.per_channel[0],
        l.per_channel[1],
        l.per_channel[2],
        l.flag_string()
    );
    Ok(())
}

fn metrics(args: &MetricsArgs) -> anyhow::Result<()> {
    require_file(&args.pred)?;
    require_file(&args.gt)?;
    let set = PoseSet::new(read_poses(&args.pred)?, read_poses(&args.gt)?)?;
    let r = compute_report(&set, &GAMMAS)?;
    let mut cols: Vec<(String, f64)> = Vec::new();
    for g in GAMMAS {
        cols.push((format!("RRA@{g}"), r.rra[&g]));
    }
    for g in GAMMAS {
        cols.push((format!("RTA@{g}"), r.rta[&g]));
    }
    cols.push(("mAA(30)".into(), r.maa30));
    cols.push(("RRS".into(), r.rrs));
    let header: Vec<String> = cols.iter().map(|(k, _)| format!("{k:>8}")).collect();
    let row: Vec<String> = cols.iter().map(|(_, v)| format!("{v:>8.4}")).collect();
    println!("{}", header.join(" "));
    println!("{}", row.join(" "));
    for (k, v) in &cols {
        println!("{k}={v}");
    }
    println!("pairs={}", r.pairs);
    Ok(())
}

fn attack(args: &AttackArgs) -> anyhow::Result<()> {
    let cfg = match &args.config {
        Some(path) => {
            require_file(path)?;
            AttackConfig::parse(&std::fs::read_to_string(path)?)?
        }
        None => AttackConfig::default(),
    };
    let init = match &args.init {
        Some(path) => {
            require_file(path)?;
            Some(SegmentImage::new(read_rgb_png(path)?)?)
        }
        None => None,
    };
    let victim: Box<dyn Victim> = match cfg.victim {
        VictimKind::Builtin => Box::new(BuiltinVictim::new(MatcherConfig::default())),
        VictimKind::Bridge => {
            let Some(dir) = &args.exchange else {
                return Err(usage("victim = bridge needs --exchange <dir>"));
            };
            if !(args.timeout > 0.0) {
                return Err(usage("--timeout must be positive"));
            }
            Box::new(BridgeVictim::new(
                dir,
                Duration::from_secs_f64(args.timeout),
                !args.no_bridge_gradients,
            )?)
        }
    };
    create_dir(&args.out)?;
    let trace_path = args.out.join("trace.txt");
    let mut trace_file = BufWriter::new(
        File::create(&trace_path).with_context(|| format!("creating {}", trace_path.display()))?,
    );
    let mut write_err = None;
    let mut obs = |r: &AttackRecord| {
        if write_err.is_none() {
            if let Err(e) = writeln!(trace_file, "{r}").and_then(|_| trace_file.flush()) {
                write_err = Some(e);
            }
        }
    };
    let (seg, trace) = run_attack(&cfg, victim.as_ref(), init, Some(&args.out), Some(&mut obs))?;
    if let Some(e) = write_err {
        bail!("writing {}: {e}", trace_path.display());
    }
    let plan = CompositionPlan::new(&cfg.disc_spec()?)?;
    write_rgb_png(&args.out.join("segment_final.png"), seg.pixels())?;
    write_rgb_png(&args.out.join("disc_final.png"), &plan.compose(&seg)?.pixels)?;
    println!(
        "iterations={} completed={} skipped={}",
        cfg.iterations,
        trace.records.len(),
        trace.skipped.len()
    );
    if let Some(last) = trace.records.last() {
        println!("final_loss={}", last.loss.total);
    }
    Ok(())
}

fn verify(args: &VerifyArgs) -> anyhow::Result<()> {
    if args.pairs == 0 {
        return Err(usage("--pairs must be at least 1"));
    }
    let (scene, intr) = match &args.scene {
        Some(path) => load_scene(path)?,
        None => (
            SceneConfig::new(
                DiscImage::from_pixels(natural_texture(256, 256, args.seed))?,
                1.0,
                None,
                [0.5; 3],
            )?,
            Intrinsics::from_fov(args.size, args.size, 60.0)?,
        ),
    };
    let ranges = ViewpointRanges::default();
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let pairs = (0..args.pairs)
        .map(|_| Ok((sample_viewpoint(&mut rng, &ranges)?, sample_viewpoint(&mut rng, &ranges)?)))
        .collect::<kba_core::Result<Vec<_>>>()?;
    let rep = verify_projection_correspondence(&pairs, &scene, &intr)?;
    let fmt = |v: Option<f64>| v.map_or("nan".to_string(), |x| x.to_string());
    for (c, ch) in rep.channels.iter().enumerate() {
        println!(
            "c{}_samples={} c{}_pearson={} c{}_sign_agreement={}",
            c + 1,
            ch.samples,
            c + 1,
            fmt(ch.pearson),
            c + 1,
            fmt(ch.sign_agreement)
        );
    }
    println!("pairs={} insufficient={}", rep.pairs, rep.insufficient);
    Ok(())
}

fn symmetry(args: &SymmetryArgs) -> anyhow::Result<()> {
    require_file(&args.disc)?;
    let disc = DiscImage::from_pixels(read_rgb_png(&args.disc)?)?;
    if args.segments < 2 {
        return Err(usage("--segments must be at least 2"));
    }
    println!("symmetry_score={:.6}", symmetry_score(&disc, args.segments));
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match err.downcast_ref::<kba_core::Error>() {
        Some(e) if e.is_validation() => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Compose(a) => compose(a),
        Command::Render(a) => render(a),
        Command::Loss(a) => loss(a),
        Command::Metrics(a) => metrics(a),
        Command::Attack(a) => attack(a),
        Command::VerifyEq23(a) => verify(a),
        Command::SymmetryCheck(a) => symmetry(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
