//! Procedural stand-ins for natural photographs.
//!
//! Fractal value noise gives an isotropic, non-repeating texture with energy
//! at every scale, which is what the matcher needs to be competent and what a
//! natural-image segment looks like to it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::grid::{Grid, RgbImage};

struct Lattice {
    cells: usize,
    values: Vec<f32>,
}

impl Lattice {
    fn new(cells: usize, rng: &mut impl Rng) -> Self {
        let n = cells + 1;
        Self {
            cells,
            values: (0..n * n).map(|_| rng.random::<f32>()).collect(),
        }
    }

    /// Smoothstep-interpolated value at `(u, v)` in `[0, 1]²`.
    fn at(&self, u: f32, v: f32) -> f32 {
        let n = self.cells + 1;
        let x = u * self.cells as f32;
        let y = v * self.cells as f32;
        let x0 = (x.floor() as usize).min(self.cells - 1);
        let y0 = (y.floor() as usize).min(self.cells - 1);
        let s = |t: f32| t * t * (3.0 - 2.0 * t);
        let fx = s(x - x0 as f32);
        let fy = s(y - y0 as f32);
        let g = |r: usize, c: usize| self.values[r * n + c];
        let top = g(y0, x0) * (1.0 - fx) + g(y0, x0 + 1) * fx;
        let bottom = g(y0 + 1, x0) * (1.0 - fx) + g(y0 + 1, x0 + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

fn fractal(width: usize, height: usize, base_cells: usize, rng: &mut impl Rng) -> Grid<f32> {
    let octaves: Vec<(Lattice, f32)> = (0..6)
        .map(|k| (Lattice::new(base_cells << k, rng), 0.55f32.powi(k as i32)))
        .collect();
    let field = Grid::from_fn(width, height, |row, col| {
        let u = (col as f32 + 0.5) / width as f32;
        let v = (row as f32 + 0.5) / height as f32;
        octaves.iter().map(|(l, a)| a * l.at(u, v)).sum::<f32>()
    });
    let (lo, hi) = field
        .data()
        .iter()
        .fold((f32::MAX, f32::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = (hi - lo).max(1e-6);
    field.map(|&v| (v - lo) / span)
}

/// Seeded RGB texture in `[0.05, 0.95]` with a shared luminance structure
/// and weaker independent chroma.
pub fn natural_texture(width: usize, height: usize, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = (width.max(height) / 32).clamp(2, 8);
    let luma = fractal(width, height, base, &mut rng);
    let chroma: Vec<Grid<f32>> = (0..3).map(|_| fractal(width, height, base, &mut rng)).collect();
    Grid::from_fn(width, height, |row, col| {
        let l = luma[(row, col)];
        let mut px = [0.0f32; 3];
        for (c, v) in px.iter_mut().enumerate() {
            *v = 0.05 + 0.9 * (0.65 * l + 0.35 * chroma[c][(row, col)]);
        }
        px
    })
}

/// Independent uniform noise per channel.
pub fn uniform_noise(width: usize, height: usize, rng: &mut impl Rng) -> RgbImage {
    Grid::from_fn(width, height, |_, _| {
        [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn texture_is_deterministic_and_in_range() {
        let a = natural_texture(40, 30, 9);
        let b = natural_texture(40, 30, 9);
        assert_eq!(a, b);
        assert_ne!(a, natural_texture(40, 30, 10));
        assert!(a.data().iter().flatten().all(|v| (0.05..=0.95).contains(v)));
    }

    #[test]
    fn texture_has_contrast() {
        let t = natural_texture(64, 64, 1).luma();
        let mean = t.data().iter().sum::<f32>() / t.len() as f32;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f32>() / t.len() as f32;
        assert!(var.sqrt() > 0.08);
    }
}
