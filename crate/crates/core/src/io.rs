//! File formats: PMAP pointmaps, pose text files, PNG images and masks,
//! heatmaps, and flat `key = value` configuration text.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use image::{GrayImage, ImageBuffer, Rgb};
use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask, RgbImage};
use crate::pose::{CameraPose, RotationMatrix};
use crate::scene::Pointmap;

pub const PMAP_MAGIC: [u8; 4] = *b"PMAP";
pub const PMAP_VERSION: u32 = 1;
const PMAP_HEADER: usize = 16;

/// Serializes a pointmap: magic, version, height, width, `f32` triples,
/// validity bytes. All integers and floats little-endian.
pub fn encode_pmap(p: &Pointmap) -> Vec<u8> {
    let n = p.coords.len();
    let mut out = Vec::with_capacity(PMAP_HEADER + n * 13);
    out.extend_from_slice(&PMAP_MAGIC);
    out.extend_from_slice(&PMAP_VERSION.to_le_bytes());
    out.extend_from_slice(&(p.height() as u32).to_le_bytes());
    out.extend_from_slice(&(p.width() as u32).to_le_bytes());
    for xyz in p.coords.data() {
        for v in xyz {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend(p.valid.data().iter().map(|&b| b as u8));
    out
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

pub fn decode_pmap(bytes: &[u8]) -> Result<Pointmap> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            expected: PMAP_HEADER,
            actual: bytes.len(),
        });
    }
    if bytes[..4] != PMAP_MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < PMAP_HEADER {
        return Err(Error::Truncated {
            expected: PMAP_HEADER,
            actual: bytes.len(),
        });
    }
    let version = read_u32(bytes, 4);
    if version != PMAP_VERSION {
        return Err(Error::VersionMismatch(version));
    }
    let h = read_u32(bytes, 8) as usize;
    let w = read_u32(bytes, 12) as usize;
    let n = h
        .checked_mul(w)
        .ok_or_else(|| Error::Malformed(format!("dimensions {h}x{w} overflow")))?;
    let expected = n
        .checked_mul(13)
        .and_then(|b| b.checked_add(PMAP_HEADER))
        .ok_or_else(|| Error::Malformed(format!("dimensions {h}x{w} overflow")))?;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after payload",
            bytes.len() - expected
        )));
    }
    let floats = &bytes[PMAP_HEADER..PMAP_HEADER + 12 * n];
    let coords: Vec<[f32; 3]> = floats
        .chunks_exact(12)
        .map(|c| {
            [0, 4, 8].map(|k| f32::from_le_bytes(c[k..k + 4].try_into().expect("4 bytes")))
        })
        .collect();
    let valid = bytes[PMAP_HEADER + 12 * n..]
        .iter()
        .enumerate()
        .map(|(i, &b)| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::Malformed(format!(
                "validity byte {other} at pixel {i}"
            ))),
        })
        .collect::<Result<Vec<bool>>>()?;
    Pointmap::new(Grid::from_vec(w, h, coords)?, Grid::from_vec(w, h, valid)?)
}

pub fn read_pmap(path: &Path) -> Result<Pointmap> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    decode_pmap(&bytes)
}

pub fn write_pmap(path: &Path, p: &Pointmap) -> Result<()> {
    std::fs::write(path, encode_pmap(p)).map_err(|e| Error::file(path, e))
}

/// One pose per line: row-major rotation then translation, world→camera.
pub fn format_poses(poses: &[CameraPose]) -> String {
    let mut s = String::new();
    for p in poses {
        let r = p.rotation.matrix();
        let vals = (0..3)
            .flat_map(|i| (0..3).map(move |j| r[(i, j)]))
            .chain(p.translation.iter().copied());
        let line: Vec<String> = vals.map(|v| format!("{v:.16e}")).collect();
        writeln!(s, "{}", line.join(" ")).expect("writing to a String");
    }
    s
}

pub fn parse_poses(text: &str) -> Result<Vec<CameraPose>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals = line
            .split_whitespace()
            .map(f64::from_str)
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::Malformed(format!("line {}: {e}", n + 1)))?;
        if vals.len() != 12 {
            return Err(Error::Malformed(format!(
                "line {}: expected 12 numbers, got {}",
                n + 1,
                vals.len()
            )));
        }
        let r = Matrix3::from_row_slice(&vals[..9]);
        let t = Vector3::new(vals[9], vals[10], vals[11]);
        let rotation = RotationMatrix::new(r).map_err(|e| Error::InvalidPose(format!("line {}: {e}", n + 1)))?;
        out.push(CameraPose::new(rotation, t)?);
    }
    Ok(out)
}

pub fn read_poses(path: &Path) -> Result<Vec<CameraPose>> {
    parse_poses(&std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?)
}

pub fn write_poses(path: &Path, poses: &[CameraPose]) -> Result<()> {
    std::fs::write(path, format_poses(poses)).map_err(|e| Error::file(path, e))
}

/// `floor(255·v + 0.5)` after clamping to `[0, 1]`.
#[inline]
pub fn quantize(v: f32) -> u8 {
    (255.0 * v.clamp(0.0, 1.0) as f64 + 0.5).floor() as u8
}

pub fn write_rgb_png(path: &Path, img: &RgbImage) -> Result<()> {
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_raw(
        img.width() as u32,
        img.height() as u32,
        img.data().iter().flat_map(|p| p.map(quantize)).collect(),
    )
    .expect("buffer matches dimensions");
    buf.save(path)?;
    Ok(())
}

pub fn read_rgb_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img
        .pixels()
        .map(|p| p.0.map(|v| v as f32 / 255.0))
        .collect();
    Grid::from_vec(w as usize, h as usize, data)
}

pub fn write_mask_png(path: &Path, mask: &Mask) -> Result<()> {
    let buf = GrayImage::from_raw(
        mask.width() as u32,
        mask.height() as u32,
        mask.data().iter().map(|&b| if b { 255 } else { 0 }).collect(),
    )
    .expect("buffer matches dimensions");
    buf.save(path)?;
    Ok(())
}

/// Reads a single-channel mask; any nonzero value counts as set.
pub fn read_mask_png(path: &Path) -> Result<Mask> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Grid::from_vec(w as usize, h as usize, img.pixels().map(|p| p.0[0] > 0).collect())
}

/// Dark-to-bright ramp (black, purple, orange, pale yellow).
const RAMP: [[f32; 3]; 5] = [
    [0.001, 0.000, 0.014],
    [0.341, 0.062, 0.429],
    [0.735, 0.216, 0.330],
    [0.978, 0.557, 0.035],
    [0.988, 0.998, 0.645],
];

/// Ramp color at `t ∈ [0, 1]`.
pub fn ramp_color(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0) * (RAMP.len() - 1) as f64;
    let i = (t.floor() as usize).min(RAMP.len() - 2);
    let f = (t - i as f64) as f32;
    let (a, b) = (RAMP[i], RAMP[i + 1]);
    [0, 1, 2].map(|c| quantize(a[c] + f * (b[c] - a[c])))
}

/// Colors a scalar field by min-max normalization over the masked finite
/// pixels. A constant field maps to the middle of the ramp; pixels outside
/// the mask are black.
pub fn heatmap(channel: &Grid<f64>, mask: &Mask) -> Grid<[u8; 3]> {
    let (lo, hi) = channel
        .data()
        .iter()
        .zip(mask.data())
        .filter(|(v, &m)| m && v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&v, _)| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    let data = channel
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&v, &m)| {
            if !m || !v.is_finite() {
                [0, 0, 0]
            } else if span > 0.0 {
                ramp_color((v - lo) / span)
            } else {
                ramp_color(0.5)
            }
        })
        .collect();
    Grid::from_vec(channel.width(), channel.height(), data).expect("same shape")
}

pub fn emit_heatmap(channel: &Grid<f64>, mask: &Mask, path: &Path) -> Result<()> {
    let hm = heatmap(channel, mask);
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_raw(
        hm.width() as u32,
        hm.height() as u32,
        hm.data().iter().flatten().copied().collect(),
    )
    .expect("buffer matches dimensions");
    buf.save(path)?;
    Ok(())
}

/// Parsed `key = value` lines, with `#` starting a comment.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    /// Parses the text, rejecting keys outside `allowed`.
    pub fn parse(text: &str, allowed: &[&str]) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Malformed(format!("line {}: expected `key = value`", n + 1))
            })?;
            let key = key.trim();
            if !allowed.contains(&key) {
                return Err(Error::UnknownKey(key.to_string()));
            }
            if entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(Error::Malformed(format!("line {}: duplicate key `{key}`", n + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.raw(key)
            .map(|v| {
                v.parse().map_err(|_| Error::TypeMismatch {
                    key: key.to_string(),
                    value: v.to_string(),
                })
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?.ok_or_else(|| Error::MissingKey(key.to_string()))
    }

    /// Comma-separated triple such as `0.5, 0.5, 0.5`.
    pub fn get_triple(&self, key: &str) -> Result<Option<[f64; 3]>> {
        let Some(v) = self.raw(key) else {
            return Ok(None);
        };
        let mismatch = || Error::TypeMismatch {
            key: key.to_string(),
            value: v.to_string(),
        };
        let parts: Vec<f64> = v
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| mismatch()))
            .collect::<Result<_>>()?;
        let arr: [f64; 3] = parts.try_into().map_err(|_| mismatch())?;
        Ok(Some(arr))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_pointmap() -> Pointmap {
        let coords = Grid::from_fn(3, 2, |r, c| [r as f32, c as f32 * 0.5, -1.25]);
        let valid = Grid::from_fn(3, 2, |r, c| (r + c) % 2 == 0);
        Pointmap::new(coords, valid).unwrap()
    }

    #[test]
    fn pmap_layout_is_fixed() {
        let bytes = encode_pmap(&sample_pointmap());
        assert_eq!(&bytes[..4], &[0x50, 0x4D, 0x41, 0x50]);
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &3u32.to_le_bytes());
        assert_eq!(bytes.len(), 16 + 6 * 12 + 6);
        assert_eq!(&bytes[16 + 72..], &[1, 0, 1, 0, 1, 0]);
    }

    #[test]
    fn pmap_errors_are_distinct() {
        let good = encode_pmap(&sample_pointmap());
        assert_eq!(decode_pmap(&good).unwrap(), sample_pointmap());
        let mut bad = good.clone();
        bad[0] = b'Q';
        assert!(matches!(decode_pmap(&bad), Err(Error::BadMagic)));
        assert!(matches!(
            decode_pmap(&good[..good.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        let mut v2 = good.clone();
        v2[4] = 2;
        assert!(matches!(decode_pmap(&v2), Err(Error::VersionMismatch(2))));
        let mut extra = good.clone();
        extra.push(0);
        assert!(matches!(decode_pmap(&extra), Err(Error::Malformed(_))));
        let mut flag = good;
        let last = flag.len() - 1;
        flag[last] = 7;
        assert!(matches!(decode_pmap(&flag), Err(Error::Malformed(_))));
    }

    #[test]
    fn poses_round_trip_exactly() {
        let poses = vec![
            crate::pose::look_at_pose(2.3, 41.0, 17.0).unwrap(),
            crate::pose::look_at_pose(2.9, 12.0, 301.0).unwrap(),
        ];
        let back = parse_poses(&format_poses(&poses)).unwrap();
        assert_eq!(back, poses);
        assert!(matches!(parse_poses("1 2 3"), Err(Error::Malformed(_))));
    }

    #[test]
    fn quantization_rounds_half_up() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(1.5 / 255.0), 2);
        assert_eq!(quantize(-3.0), 0);
    }

    #[test]
    fn heatmap_behaviour() {
        let mask = Grid::new(4, 1, true);
        let flat = heatmap(&Grid::new(4, 1, 2.0), &mask);
        assert!(flat.data().iter().all(|p| *p == flat.data()[0]));
        let ramp = heatmap(&Grid::from_fn(4, 1, |_, c| c as f64), &mask);
        let lum: Vec<u32> = ramp.data().iter().map(|p| p.iter().map(|&v| v as u32).sum()).collect();
        assert!(lum.windows(2).all(|w| w[0] < w[1]));
        let mut with_nan = Grid::from_fn(4, 1, |_, c| c as f64);
        with_nan[(0, 3)] = f64::NAN;
        let mut partial = mask.clone();
        partial[(0, 3)] = false;
        let hm = heatmap(&with_nan, &partial);
        assert_eq!(hm[(0, 3)], [0, 0, 0]);
        assert_eq!(hm[(0, 2)], ramp_color(1.0));
    }

    #[test]
    fn key_values() {
        let kv = KeyValues::parse("# c\n alpha = 0.5 # trailing\n\nseed=3\n", &["alpha", "seed"]).unwrap();
        assert_eq!(kv.get::<f64>("alpha").unwrap(), Some(0.5));
        assert_eq!(kv.get_or::<u64>("seed", 0).unwrap(), 3);
        assert!(matches!(
            KeyValues::parse("x = 1", &["alpha"]),
            Err(Error::UnknownKey(k)) if k == "x"
        ));
        let bad = KeyValues::parse("seed = abc", &["seed"]).unwrap();
        assert!(matches!(bad.get::<u64>("seed"), Err(Error::TypeMismatch { .. })));
        assert!(matches!(bad.require::<u64>("alpha"), Err(Error::MissingKey(_))));
    }
}
