//! Dense row-major 2-D fields and the [`Image`] type built on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest side length accepted for an [`Image`].
pub const MIN_IMAGE_SIDE: usize = 16;

/// An `H×W` grid of reals. Used for noise fields, similarity maps and
/// anything else that is not constrained to the image range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "grid {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
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
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Bilinear sample at real-valued `(row, col)`; coordinates are clamped
    /// to the grid so the result is always a convex combination of samples.
    pub fn sample_bilinear(&self, row: f64, col: f64) -> f64 {
        let r = row.clamp(0.0, (self.height - 1) as f64);
        let c = col.clamp(0.0, (self.width - 1) as f64);
        let r0 = r.floor() as usize;
        let c0 = c.floor() as usize;
        let r1 = (r0 + 1).min(self.height - 1);
        let c1 = (c0 + 1).min(self.width - 1);
        let fr = r - r0 as f64;
        let fc = c - c0 as f64;
        let top = self.get(r0, c0) + fc * (self.get(r0, c1) - self.get(r0, c0));
        let bottom = self.get(r1, c0) + fc * (self.get(r1, c1) - self.get(r1, c0));
        top + fr * (bottom - top)
    }

    /// Bilinear resize with pixel-center alignment.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Grid {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let rows = Resampler::new(self.height, height);
        let cols = Resampler::new(self.width, width);
        rows.apply_2d(&cols, self)
    }

    pub fn resize_nearest(&self, height: usize, width: usize) -> Grid {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        Grid::from_fn(height, width, |r, c| {
            let sr = (((r as f64 + 0.5) * sy).floor() as usize).min(self.height - 1);
            let sc = (((c as f64 + 0.5) * sx).floor() as usize).min(self.width - 1);
            self.get(sr, sc)
        })
    }
}

/// One-axis linear interpolation weights for pixel-center aligned resizing.
/// Each output index reads two input indices; the same weights drive the
/// forward resize and its adjoint (used when backpropagating through an
/// upsample).
#[derive(Clone, Debug)]
pub struct Resampler {
    src_len: usize,
    taps: Vec<(usize, usize, f64)>,
}

impl Resampler {
    pub fn new(src_len: usize, dst_len: usize) -> Self {
        let scale = src_len as f64 / dst_len as f64;
        let last = (src_len - 1) as f64;
        let taps = (0..dst_len)
            .map(|i| {
                let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(src_len - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect();
        Self { src_len, taps }
    }

    pub fn dst_len(&self) -> usize {
        self.taps.len()
    }

    pub fn src_len(&self) -> usize {
        self.src_len
    }

    /// Resamples `grid` along rows with `self` and along columns with `cols`.
    pub fn apply_2d(&self, cols: &Resampler, grid: &Grid) -> Grid {
        debug_assert_eq!(grid.height(), self.src_len);
        debug_assert_eq!(grid.width(), cols.src_len);
        // columns first, then rows
        let mut tmp = vec![0.0; grid.height() * cols.dst_len()];
        for r in 0..grid.height() {
            for (c, &(c0, c1, w)) in cols.taps.iter().enumerate() {
                let a = grid.get(r, c0);
                let b = grid.get(r, c1);
                tmp[r * cols.dst_len() + c] = a + w * (b - a);
            }
        }
        let mut out = Grid::zeros(self.dst_len(), cols.dst_len());
        for (r, &(r0, r1, w)) in self.taps.iter().enumerate() {
            for c in 0..cols.dst_len() {
                let a = tmp[r0 * cols.dst_len() + c];
                let b = tmp[r1 * cols.dst_len() + c];
                out.set(r, c, a + w * (b - a));
            }
        }
        out
    }

    /// Adjoint of [`Resampler::apply_2d`]: scatters a gradient on the
    /// resampled grid back onto the source grid.
    pub fn adjoint_2d(&self, cols: &Resampler, grad: &Grid) -> Grid {
        debug_assert_eq!(grad.height(), self.dst_len());
        debug_assert_eq!(grad.width(), cols.dst_len());
        let mut tmp = vec![0.0; self.src_len * cols.dst_len()];
        for (r, &(r0, r1, w)) in self.taps.iter().enumerate() {
            for c in 0..cols.dst_len() {
                let g = grad.get(r, c);
                tmp[r0 * cols.dst_len() + c] += (1.0 - w) * g;
                tmp[r1 * cols.dst_len() + c] += w * g;
            }
        }
        let mut out = Grid::zeros(self.src_len, cols.src_len);
        for r in 0..self.src_len {
            for (c, &(c0, c1, w)) in cols.taps.iter().enumerate() {
                let g = tmp[r * cols.dst_len() + c];
                let row = &mut out.as_mut_slice()[r * cols.src_len..(r + 1) * cols.src_len];
                row[c0] += (1.0 - w) * g;
                row[c1] += w * g;
            }
        }
        out
    }
}

/// A single-channel image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image(Grid);

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        Self::from_grid(Grid::new(height, width, pixels)?)
    }

    pub fn from_grid(grid: Grid) -> Result<Self> {
        if grid.height() < MIN_IMAGE_SIDE || grid.width() < MIN_IMAGE_SIDE {
            return Err(Error::InvalidInput(format!(
                "image {}x{} is below the minimum side {MIN_IMAGE_SIDE}",
                grid.height(),
                grid.width()
            )));
        }
        if let Some(v) = grid
            .as_slice()
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::InvalidInput(format!(
                "image intensity {v} outside [0, 1]"
            )));
        }
        Ok(Self(grid))
    }

    /// Clamps every value into `[0, 1]` (non-finite values become 0).
    pub fn from_grid_clamped(grid: Grid) -> Result<Self> {
        Self::from_grid(grid.map(|v| {
            if v.is_finite() {
                v.clamp(0.0, 1.0)
            } else {
                0.0
            }
        }))
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.0.get(row, col)
    }

    pub fn pixels(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn grid(&self) -> &Grid {
        &self.0
    }

    pub fn into_grid(self) -> Grid {
        self.0
    }

    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Image> {
        Image::from_grid_clamped(self.0.resize_bilinear(height, width))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_small_and_out_of_range_images() {
        assert!(Image::new(8, 8, vec![0.0; 64]).is_err());
        assert!(Image::new(16, 16, vec![1.5; 256]).is_err());
        assert!(Image::new(16, 16, vec![f64::NAN; 256]).is_err());
        assert!(Image::new(16, 16, vec![0.5; 256]).is_ok());
    }

    #[test]
    fn bilinear_resize_preserves_constants() {
        let g = Grid::filled(8, 8, 0.37);
        let up = g.resize_bilinear(64, 64);
        assert!(up.as_slice().iter().all(|&v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn adjoint_matches_forward_inner_product() {
        let src = Grid::from_fn(3, 5, |r, c| (r * 7 + c * 3) as f64 * 0.1 - 0.4);
        let dst = Grid::from_fn(11, 9, |r, c| ((r * 13 + c * 5) % 7) as f64 - 3.0);
        let rows = Resampler::new(3, 11);
        let cols = Resampler::new(5, 9);
        let fwd = rows.apply_2d(&cols, &src);
        let adj = rows.adjoint_2d(&cols, &dst);
        let lhs: f64 = fwd
            .as_slice()
            .iter()
            .zip(dst.as_slice())
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = src
            .as_slice()
            .iter()
            .zip(adj.as_slice())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
