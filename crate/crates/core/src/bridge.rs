//! Client side of the directory exchange with an external pointmap model.
//!
//! A request `<id>` is a folder `req_<id>/` holding the two images and masks
//! as PNG, then `req_<id>.txt` with `key=value` lines, written atomically.
//! The server answers with `resp_<id>/` holding `pointmap_a.pmap`,
//! `pointmap_b.pmap` and, when gradients were asked for, `grad_a.pmap` and
//! `grad_b.pmap`; it then writes `resp_<id>.done`, or `resp_<id>.err`
//! carrying a message.

use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use log::debug;

use crate::error::{Error, Result};
use crate::grid::{Grid, RgbImage};
use crate::io::{read_pmap, write_mask_png, write_rgb_png, KeyValues};
use crate::scene::Pointmap;
use crate::victim::{Victim, VictimInput, VictimOutput};

/// Keys of a request file.
pub const REQUEST_KEYS: [&str; 9] = [
    "mode",
    "image_a",
    "image_b",
    "mask_a",
    "mask_b",
    "center_a_x",
    "center_a_y",
    "center_b_x",
    "center_b_y",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RequestMode {
    Infer,
    InferGrad,
}

impl RequestMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RequestMode::Infer => "infer",
            RequestMode::InferGrad => "infer+grad",
        }
    }
}

impl std::str::FromStr for RequestMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "infer" => Ok(RequestMode::Infer),
            "infer+grad" => Ok(RequestMode::InferGrad),
            other => Err(Error::TypeMismatch {
                key: "mode".into(),
                value: other.into(),
            }),
        }
    }
}

/// A parsed request, as a server sees it.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeRequest {
    pub id: u64,
    pub mode: RequestMode,
    pub image_a: PathBuf,
    pub image_b: PathBuf,
    pub mask_a: PathBuf,
    pub mask_b: PathBuf,
    pub center_a: [f64; 2],
    pub center_b: [f64; 2],
}

impl BridgeRequest {
    pub fn to_text(&self) -> String {
        format!(
            "mode={}\nimage_a={}\nimage_b={}\nmask_a={}\nmask_b={}\ncenter_a_x={}\ncenter_a_y={}\ncenter_b_x={}\ncenter_b_y={}\n",
            self.mode.as_str(),
            self.image_a.display(),
            self.image_b.display(),
            self.mask_a.display(),
            self.mask_b.display(),
            self.center_a[0],
            self.center_a[1],
            self.center_b[0],
            self.center_b[1],
        )
    }

    pub fn parse(id: u64, text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text, &REQUEST_KEYS)?;
        Ok(Self {
            id,
            mode: kv.require("mode")?,
            image_a: PathBuf::from(kv.require::<String>("image_a")?),
            image_b: PathBuf::from(kv.require::<String>("image_b")?),
            mask_a: PathBuf::from(kv.require::<String>("mask_a")?),
            mask_b: PathBuf::from(kv.require::<String>("mask_b")?),
            center_a: [kv.require("center_a_x")?, kv.require("center_a_y")?],
            center_b: [kv.require("center_b_x")?, kv.require("center_b_y")?],
        })
    }
}

pub fn request_file(dir: &Path, id: u64) -> PathBuf {
    dir.join(format!("req_{id}.txt"))
}

pub fn request_payload_dir(dir: &Path, id: u64) -> PathBuf {
    dir.join(format!("req_{id}"))
}

pub fn response_dir(dir: &Path, id: u64) -> PathBuf {
    dir.join(format!("resp_{id}"))
}

pub fn done_sentinel(dir: &Path, id: u64) -> PathBuf {
    dir.join(format!("resp_{id}.done"))
}

pub fn error_sentinel(dir: &Path, id: u64) -> PathBuf {
    dir.join(format!("resp_{id}.err"))
}

/// Writes `contents` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents).map_err(|e| Error::file(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::file(path, e))
}

/// Reinterprets a gradient PMAP as per-pixel RGB gradients.
pub fn gradient_image(p: &Pointmap) -> RgbImage {
    p.coords.clone()
}

/// Packs an RGB gradient into the PMAP layout, every entry valid.
pub fn gradient_pmap(g: &RgbImage) -> Pointmap {
    Pointmap {
        coords: g.clone(),
        valid: Grid::new(g.width(), g.height(), true),
    }
}

#[derive(Debug)]
pub struct BridgeVictim {
    dir: PathBuf,
    timeout: Duration,
    poll: Duration,
    gradients: bool,
    next_id: Mutex<u64>,
}

impl BridgeVictim {
    /// Connects to an exchange directory. Ids continue after the largest
    /// request id already present.
    pub fn new(dir: impl Into<PathBuf>, timeout: Duration, gradients: bool) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::file(&dir, e))?;
        let mut last = 0;
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::file(&dir, e))? {
            let name = entry.map_err(|e| Error::file(&dir, e))?.file_name();
            let name = name.to_string_lossy();
            if let Some(id) = name
                .strip_prefix("req_")
                .and_then(|s| s.strip_suffix(".txt"))
                .and_then(|s| s.parse::<u64>().ok())
            {
                last = last.max(id);
            }
        }
        Ok(Self {
            dir,
            timeout,
            poll: Duration::from_millis(2),
            gradients,
            next_id: Mutex::new(last + 1),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn exchange(&self, id: u64, input: &VictimInput, mode: RequestMode) -> Result<VictimOutput> {
        let payload = request_payload_dir(&self.dir, id);
        std::fs::create_dir_all(&payload).map_err(|e| Error::file(&payload, e))?;
        let req = BridgeRequest {
            id,
            mode,
            image_a: payload.join("image_a.png"),
            image_b: payload.join("image_b.png"),
            mask_a: payload.join("mask_a.png"),
            mask_b: payload.join("mask_b.png"),
            center_a: input.center_a,
            center_b: input.center_b,
        };
        write_rgb_png(&req.image_a, input.image_a)?;
        write_rgb_png(&req.image_b, input.image_b)?;
        write_mask_png(&req.mask_a, input.mask_a)?;
        write_mask_png(&req.mask_b, input.mask_b)?;
        write_atomic(&request_file(&self.dir, id), req.to_text().as_bytes())?;
        debug!("bridge request {id} sent");

        let done = done_sentinel(&self.dir, id);
        let err = error_sentinel(&self.dir, id);
        let start = Instant::now();
        loop {
            if done.exists() {
                break;
            }
            if err.exists() {
                let msg = std::fs::read_to_string(&err).unwrap_or_default();
                return Err(Error::Victim(format!("bridge request {id} failed: {}", msg.trim())));
            }
            if start.elapsed() > self.timeout {
                return Err(Error::Victim(format!(
                    "bridge request {id} timed out after {:?}",
                    self.timeout
                )));
            }
            thread::sleep(self.poll);
        }
        let resp = response_dir(&self.dir, id);
        let pointmap_a = read_pmap(&resp.join("pointmap_a.pmap"))?;
        let pointmap_b = read_pmap(&resp.join("pointmap_b.pmap"))?;
        let image_gradients = match mode {
            RequestMode::Infer => None,
            RequestMode::InferGrad => Some((
                gradient_image(&read_pmap(&resp.join("grad_a.pmap"))?),
                gradient_image(&read_pmap(&resp.join("grad_b.pmap"))?),
            )),
        };
        for (p, want) in [(&pointmap_a, input.image_a), (&pointmap_b, input.image_b)] {
            if p.width() != want.width() || p.height() != want.height() {
                return Err(Error::Victim(format!(
                    "bridge pointmap is {}x{}, image is {}x{}",
                    p.height(),
                    p.width(),
                    want.height(),
                    want.width()
                )));
            }
        }
        Ok(VictimOutput {
            pointmap_a,
            pointmap_b,
            image_gradients,
        })
    }

    fn cleanup(&self, id: u64) {
        let _ = std::fs::remove_dir_all(request_payload_dir(&self.dir, id));
        let _ = std::fs::remove_dir_all(response_dir(&self.dir, id));
        let _ = std::fs::remove_file(done_sentinel(&self.dir, id));
        let _ = std::fs::remove_file(error_sentinel(&self.dir, id));
    }
}

impl Victim for BridgeVictim {
    fn infer(&self, input: &VictimInput, want_gradients: bool) -> Result<VictimOutput> {
        // one request in flight per exchange directory
        let mut next = self.next_id.lock().map_err(|_| Error::Victim("bridge lock poisoned".into()))?;
        let id = *next;
        *next += 1;
        let mode = if want_gradients && self.gradients {
            RequestMode::InferGrad
        } else {
            RequestMode::Infer
        };
        let out = self.exchange(id, input, mode);
        self.cleanup(id);
        out
    }

    fn provides_gradients(&self) -> bool {
        self.gradients
    }
}
