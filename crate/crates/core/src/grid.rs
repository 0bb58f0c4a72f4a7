//! Row-major 2D grids used for images, masks and pointmaps.
//!
//! Continuous pixel coordinates follow the convention that the center of
//! pixel `(row, col)` sits at `(x, y) = (col, row)`.

use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

/// RGB image with channels in `[0, 1]`.
pub type RgbImage = Grid<[f32; 3]>;
/// Boolean coverage mask.
pub type Mask = Grid<bool>;
/// Scalar field, e.g. one pointmap channel.
pub type ScalarField = Grid<f64>;

impl<T: Clone> Grid<T> {
    pub fn new(width: usize, height: usize, fill: T) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "grid of {width}x{height} needs {} elements, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                data.push(f(row, col));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index_of(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    #[inline]
    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn get(&self, row: usize, col: usize) -> Option<&T> {
        (row < self.height && col < self.width).then(|| &self.data[row * self.width + col])
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl<T> Index<(usize, usize)> for Grid<T> {
    type Output = T;

    #[inline]
    fn index(&self, (row, col): (usize, usize)) -> &T {
        &self.data[row * self.width + col]
    }
}

impl<T> IndexMut<(usize, usize)> for Grid<T> {
    #[inline]
    fn index_mut(&mut self, (row, col): (usize, usize)) -> &mut T {
        &mut self.data[row * self.width + col]
    }
}

impl Grid<bool> {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Centroid `(x, y)` of the set pixels.
    pub fn centroid(&self) -> Option<[f64; 2]> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for row in 0..self.height {
            for col in 0..self.width {
                if self.data[row * self.width + col] {
                    sx += col as f64;
                    sy += row as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| [sx / n as f64, sy / n as f64])
    }
}

impl Grid<[f32; 3]> {
    /// Rec. 601 luma.
    pub fn luma(&self) -> Grid<f32> {
        self.map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
    }
}

/// Up to four bilinear taps into a grid, as flat indices and weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Taps {
    pub index: [u32; 4],
    pub weight: [f32; 4],
}

impl Taps {
    pub const EMPTY: Taps = Taps {
        index: [0; 4],
        weight: [0.0; 4],
    };

    #[inline]
    pub fn sample3(&self, data: &[[f32; 3]]) -> [f32; 3] {
        let mut out = [0.0f32; 3];
        for k in 0..4 {
            let w = self.weight[k];
            if w != 0.0 {
                let p = data[self.index[k] as usize];
                out[0] += w * p[0];
                out[1] += w * p[1];
                out[2] += w * p[2];
            }
        }
        out
    }

    /// Accumulates `grad` into `dst` with the tap weights (transpose of `sample3`).
    #[inline]
    pub fn scatter3(&self, grad: [f32; 3], dst: &mut [[f32; 3]]) {
        for k in 0..4 {
            let w = self.weight[k];
            if w != 0.0 {
                let d = &mut dst[self.index[k] as usize];
                d[0] += w * grad[0];
                d[1] += w * grad[1];
                d[2] += w * grad[2];
            }
        }
    }
}

/// Bilinear taps at continuous position `(x, y)` with clamp-to-edge borders.
#[inline]
pub fn bilinear_taps(width: usize, height: usize, x: f64, y: f64) -> Taps {
    let max_x = (width - 1) as f64;
    let max_y = (height - 1) as f64;
    let x = x.clamp(0.0, max_x);
    let y = y.clamp(0.0, max_y);
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = (x - x0) as f32;
    let fy = (y - y0) as f32;
    let x0 = x0 as usize;
    let y0 = y0 as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    Taps {
        index: [
            (y0 * width + x0) as u32,
            (y0 * width + x1) as u32,
            (y1 * width + x0) as u32,
            (y1 * width + x1) as u32,
        ],
        weight: [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ],
    }
}

/// Bilinear sample of a scalar grid with clamp-to-edge borders.
#[inline]
pub fn sample_scalar(grid: &Grid<f32>, x: f64, y: f64) -> f32 {
    let t = bilinear_taps(grid.width, grid.height, x, y);
    let d = &grid.data;
    t.weight[0] * d[t.index[0] as usize]
        + t.weight[1] * d[t.index[1] as usize]
        + t.weight[2] * d[t.index[2] as usize]
        + t.weight[3] * d[t.index[3] as usize]
}
