#![allow(dead_code)]

use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use kba_core::bridge::{
    done_sentinel, error_sentinel, gradient_pmap, request_file, response_dir, write_atomic, BridgeRequest,
};
use kba_core::grid::{Grid, Mask, RgbImage};
use kba_core::io::{read_mask_png, read_rgb_png, write_pmap};
use kba_core::poc::{poc_loss_with_grad, PocView};
use kba_core::scene::Pointmap;
use kba_core::victim::{Victim, VictimInput, VictimOutput};
use kba_core::Result;

const GAIN: f32 = 20.0;
const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Toy differentiable regressor: every coordinate is a pixel-grid offset
/// from the disc center, mirrored for the second view, plus a multiple of
/// the pixel's luma.
pub fn toy_pointmap(img: &RgbImage, mask: &Mask, center: [f64; 2], mirror: bool) -> Pointmap {
    let l = img.luma();
    let s = if mirror { -1.0 } else { 1.0 };
    let coords = Grid::from_fn(img.width(), img.height(), |r, c| {
        let v = GAIN * l[(r, c)];
        let (x, y) = ((s * (c as f64 - center[0])) as f32, (s * (r as f64 - center[1])) as f32);
        [x + v, y + v, 0.5 * (x - y) + v]
    });
    Pointmap::new(coords, mask.clone()).unwrap()
}

pub struct ToyResult {
    pub pointmap_a: Pointmap,
    pub pointmap_b: Pointmap,
    pub loss: f64,
    pub grad_a: RgbImage,
    pub grad_b: RgbImage,
}

pub fn toy_model(
    img_a: &RgbImage,
    img_b: &RgbImage,
    mask_a: &Mask,
    mask_b: &Mask,
    center_a: [f64; 2],
    center_b: [f64; 2],
) -> Result<ToyResult> {
    let pointmap_a = toy_pointmap(img_a, mask_a, center_a, false);
    let pointmap_b = toy_pointmap(img_b, mask_b, center_b, true);
    let (loss, ga, gb) = poc_loss_with_grad(
        &PocView {
            pointmap: &pointmap_a,
            mask: mask_a,
            center: center_a,
        },
        &PocView {
            pointmap: &pointmap_b,
            mask: mask_b,
            center: center_b,
        },
    )?;
    let to_image = |g: &Grid<[f32; 3]>| g.map(|p| LUMA.map(|w| w * GAIN * (p[0] + p[1] + p[2])));
    Ok(ToyResult {
        pointmap_a,
        pointmap_b,
        loss: loss.total,
        grad_a: to_image(&ga),
        grad_b: to_image(&gb),
    })
}

/// The toy regressor as an in-process victim.
pub struct ToyVictim;

impl Victim for ToyVictim {
    fn infer(&self, input: &VictimInput, want_gradients: bool) -> Result<VictimOutput> {
        let r = toy_model(
            input.image_a,
            input.image_b,
            input.mask_a,
            input.mask_b,
            input.center_a,
            input.center_b,
        )?;
        Ok(VictimOutput {
            pointmap_a: r.pointmap_a,
            pointmap_b: r.pointmap_b,
            image_gradients: want_gradients.then_some((r.grad_a, r.grad_b)),
        })
    }

    fn provides_gradients(&self) -> bool {
        true
    }
}

/// A victim whose pointmaps ignore the texture.
pub struct BlindVictim;

impl Victim for BlindVictim {
    fn infer(&self, input: &VictimInput, _want_gradients: bool) -> Result<VictimOutput> {
        let flat = Grid::new(input.image_a.width(), input.image_a.height(), [0.5f32; 3]);
        let r = toy_model(&flat, &flat, input.mask_a, input.mask_b, input.center_a, input.center_b)?;
        Ok(VictimOutput {
            pointmap_a: r.pointmap_a,
            pointmap_b: r.pointmap_b,
            image_gradients: None,
        })
    }
}

/// Serves the toy regressor over an exchange directory until stopped.
pub struct MockServer {
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
    pub losses: Arc<Mutex<Vec<(u64, f64)>>>,
}

impl MockServer {
    pub fn start(dir: &Path) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let losses = Arc::new(Mutex::new(Vec::new()));
        let dir = dir.to_path_buf();
        let (s, l) = (stop.clone(), losses.clone());
        let handle = thread::spawn(move || {
            let mut id = 1;
            while !s.load(Ordering::Relaxed) {
                let req = request_file(&dir, id);
                if !req.exists() {
                    thread::sleep(Duration::from_millis(1));
                    continue;
                }
                match serve_one(&dir, id, &req) {
                    Ok(loss) => {
                        l.lock().unwrap().push((id, loss));
                        write_atomic(&done_sentinel(&dir, id), b"").unwrap();
                    }
                    Err(e) => write_atomic(&error_sentinel(&dir, id), e.to_string().as_bytes()).unwrap(),
                }
                id += 1;
            }
        });
        Self {
            stop,
            handle: Some(handle),
            losses,
        }
    }
}

fn serve_one(dir: &Path, id: u64, req: &Path) -> Result<f64> {
    let text = std::fs::read_to_string(req)?;
    let r = BridgeRequest::parse(id, &text)?;
    let res = toy_model(
        &read_rgb_png(&r.image_a)?,
        &read_rgb_png(&r.image_b)?,
        &read_mask_png(&r.mask_a)?,
        &read_mask_png(&r.mask_b)?,
        r.center_a,
        r.center_b,
    )?;
    let out = response_dir(dir, id);
    std::fs::create_dir_all(&out)?;
    write_pmap(&out.join("pointmap_a.pmap"), &res.pointmap_a)?;
    write_pmap(&out.join("pointmap_b.pmap"), &res.pointmap_b)?;
    if r.mode == kba_core::bridge::RequestMode::InferGrad {
        write_pmap(&out.join("grad_a.pmap"), &gradient_pmap(&res.grad_a))?;
        write_pmap(&out.join("grad_b.pmap"), &gradient_pmap(&res.grad_b))?;
    }
    Ok(res.loss)
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
