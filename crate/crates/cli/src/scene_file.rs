//! Scene description files for the `render` subcommand.

use std::path::{Path, PathBuf};

use kba_core::io::{read_rgb_png, KeyValues};
use kba_core::kaleido::{compose_disc, DiscImage, DiscSpec, SegmentImage};
use kba_core::pose::Intrinsics;
use kba_core::scene::{Occluder, SceneConfig};
use kba_core::{Error, Result};

pub const SCENE_KEYS: [&str; 11] = [
    "disc",
    "segment",
    "segments",
    "disc_radius_m",
    "width",
    "height",
    "fov_deg",
    "background",
    "occluder_center",
    "occluder_extents",
    "occluder_albedo",
];

fn color(v: [f64; 3]) -> [f32; 3] {
    v.map(|x| x as f32)
}

/// Where the disc texture comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DiscSource {
    Disc(PathBuf),
    Segment { path: PathBuf, segments: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneFile {
    pub source: DiscSource,
    pub disc_radius_m: f64,
    pub width: usize,
    pub height: usize,
    pub fov_deg: f64,
    pub background: [f32; 3],
    pub occluder: Option<([f64; 3], [f64; 3], [f32; 3])>,
}

impl SceneFile {
    /// Parses the text; relative image paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let kv = KeyValues::parse(text, &SCENE_KEYS)?;
        let resolve = |p: String| base.join(p);
        let source = match (kv.get::<String>("disc")?, kv.get::<String>("segment")?) {
            (Some(d), None) => DiscSource::Disc(resolve(d)),
            (None, Some(s)) => DiscSource::Segment {
                path: resolve(s),
                segments: kv.get_or("segments", 12)?,
            },
            (Some(_), Some(_)) => {
                return Err(Error::InvalidConfig("give either `disc` or `segment`, not both".into()))
            }
            (None, None) => return Err(Error::MissingKey("disc".into())),
        };
        let occluder = match kv.get_triple("occluder_center")? {
            Some(c) => Some((
                c,
                kv.get_triple("occluder_extents")?
                    .ok_or_else(|| Error::MissingKey("occluder_extents".into()))?,
                color(kv.get_triple("occluder_albedo")?.unwrap_or([0.3; 3])),
            )),
            None => None,
        };
        Ok(Self {
            source,
            disc_radius_m: kv.get_or("disc_radius_m", 1.0)?,
            width: kv.get_or("width", 128)?,
            height: kv.get_or("height", 128)?,
            fov_deg: kv.get_or("fov_deg", 60.0)?,
            background: color(kv.get_triple("background")?.unwrap_or([0.5; 3])),
            occluder,
        })
    }

    pub fn intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::from_fov(self.width, self.height, self.fov_deg)
    }

    pub fn image_paths(&self) -> Vec<&Path> {
        match &self.source {
            DiscSource::Disc(p) => vec![p.as_path()],
            DiscSource::Segment { path, .. } => vec![path.as_path()],
        }
    }

    pub fn load(&self) -> Result<SceneConfig> {
        let disc = match &self.source {
            DiscSource::Disc(p) => DiscImage::from_pixels(read_rgb_png(p)?)?,
            DiscSource::Segment { path, segments } => {
                let seg = SegmentImage::new(read_rgb_png(path)?)?;
                compose_disc(&seg, &DiscSpec::new(*segments, seg.height())?)?
            }
        };
        let occluder = self.occluder.map(|(c, e, albedo)| Occluder {
            center: c.into(),
            extents: e.into(),
            albedo,
        });
        SceneConfig::new(disc, self.disc_radius_m, occluder, self.background)
    }
}
