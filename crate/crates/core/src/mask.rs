//! Anomaly-region masks: thresholded Perlin noise for free-form lesions and
//! rasterized ellipses/rectangles (with their radius function) for the
//! radial deformation task.

use std::collections::VecDeque;
use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::rng::{derive_seed, rng_from_seed};

/// Bounds on the positive-area fraction of every generated mask.
pub const MIN_AREA_FRACTION: f64 = 0.02;
pub const MAX_AREA_FRACTION: f64 = 0.30;

/// Relative tolerance around the requested Perlin target area.
pub const AREA_TOLERANCE: f64 = 0.20;

/// Components smaller than this (in pixels) are dropped from Perlin masks.
pub const MIN_COMPONENT_PIXELS: usize = 9;

const PERLIN_ATTEMPTS: u64 = 16;
const PARAMETRIC_ATTEMPTS: u64 = 64;

/// Semi-axis (or half-extent) range as a fraction of the image side.
pub const SEMI_AXIS_RANGE: (f64, f64) = (0.08, 0.25);

/// A real-valued `(row, col)` position or direction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub row: f64,
    pub col: f64,
}

impl Point {
    pub const fn new(row: f64, col: f64) -> Self {
        Self { row, col }
    }

    pub fn norm(self) -> f64 {
        self.row.hypot(self.col)
    }

    pub fn sub(self, other: Point) -> Point {
        Point::new(self.row - other.row, self.col - other.col)
    }

    pub fn add(self, other: Point) -> Point {
        Point::new(self.row + other.row, self.col + other.col)
    }

    pub fn scale(self, s: f64) -> Point {
        Point::new(self.row * s, self.col * s)
    }

    pub fn from_angle(angle: f64) -> Point {
        Point::new(angle.cos(), angle.sin())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
}

/// Mask kind. `Perlin` covers every free-form mask without parametric
/// metadata, including masks loaded from disk.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Perlin,
    Ellipse,
    Rectangle,
}

impl From<ShapeKind> for MaskKind {
    fn from(kind: ShapeKind) -> Self {
        match kind {
            ShapeKind::Ellipse => MaskKind::Ellipse,
            ShapeKind::Rectangle => MaskKind::Rectangle,
        }
    }
}

/// Parametric shape: center `c`, rotation, and semi-axes (ellipse) or
/// half-extents (rectangle). At rotation 0 the first semi-axis lies along the
/// row direction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub kind: ShapeKind,
    pub center: Point,
    pub rotation: f64,
    pub semi_axes: (f64, f64),
}

impl ShapeParams {
    /// Coordinates of `p - center` in the shape frame.
    fn to_frame(&self, offset: Point) -> (f64, f64) {
        let (s, c) = self.rotation.sin_cos();
        (
            offset.row * c + offset.col * s,
            -offset.row * s + offset.col * c,
        )
    }

    pub fn contains(&self, p: Point) -> bool {
        let (u, v) = self.to_frame(p.sub(self.center));
        let (a, b) = self.semi_axes;
        match self.kind {
            ShapeKind::Ellipse => (u / a).powi(2) + (v / b).powi(2) <= 1.0,
            ShapeKind::Rectangle => u.abs() <= a && v.abs() <= b,
        }
    }

    /// Half-extents of the axis-aligned bounding box `(rows, cols)`.
    pub fn half_extents(&self) -> (f64, f64) {
        let (s, c) = self.rotation.sin_cos();
        let (a, b) = self.semi_axes;
        match self.kind {
            ShapeKind::Ellipse => (
                ((a * c).powi(2) + (b * s).powi(2)).sqrt(),
                ((a * s).powi(2) + (b * c).powi(2)).sqrt(),
            ),
            ShapeKind::Rectangle => (a * c.abs() + b * s.abs(), a * s.abs() + b * c.abs()),
        }
    }

    /// Distance from the center to the boundary along `direction`.
    pub fn radius(&self, direction: Point) -> f64 {
        let n = direction.norm();
        let (u, v) = self.to_frame(direction.scale(1.0 / n));
        let (a, b) = self.semi_axes;
        match self.kind {
            ShapeKind::Ellipse => 1.0 / ((u / a).powi(2) + (v / b).powi(2)).sqrt(),
            ShapeKind::Rectangle => {
                let tu = if u == 0.0 { f64::INFINITY } else { a / u.abs() };
                let tv = if v == 0.0 { f64::INFINITY } else { b / v.abs() };
                tu.min(tv)
            }
        }
    }
}

/// Binary `H×W` anomaly mask with optional parametric metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
    shape: Option<ShapeParams>,
}

impl AnomalyMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
            shape: None,
        }
    }

    /// Builds a free-form mask from 0/1 values.
    pub fn from_binary(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidInput("mask values must be 0 or 1".into()));
        }
        Ok(Self {
            height,
            width,
            data,
            shape: None,
        })
    }

    /// Rasterizes a parametric shape: a pixel is positive iff its center lies
    /// inside the shape.
    pub fn from_shape(height: usize, width: usize, shape: ShapeParams) -> Self {
        let mut data = vec![0u8; height * width];
        for r in 0..height {
            for c in 0..width {
                if shape.contains(Point::new(r as f64, c as f64)) {
                    data[r * width + c] = 1;
                }
            }
        }
        Self {
            height,
            width,
            data,
            shape: Some(shape),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn kind(&self) -> MaskKind {
        self.shape.map_or(MaskKind::Perlin, |s| s.kind.into())
    }

    pub fn shape(&self) -> Option<&ShapeParams> {
        self.shape.as_ref()
    }

    pub fn values(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn area_fraction(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Positive locations in row-major order.
    pub fn positions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(move |(i, _)| (i / self.width, i % self.width))
    }

    /// Inclusive bounding box `(row0, col0, row1, col1)` of the positive set.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        self.positions().fold(None, |acc, (r, c)| match acc {
            None => Some((r, c, r, c)),
            Some((r0, c0, r1, c1)) => Some((r0.min(r), c0.min(c), r1.max(r), c1.max(c))),
        })
    }

    pub fn touches_border(&self) -> bool {
        self.positions()
            .any(|(r, c)| r == 0 || c == 0 || r + 1 == self.height || c + 1 == self.width)
    }

    /// Copy with the outermost one-pixel frame cleared and metadata dropped.
    pub fn interior(&self) -> AnomalyMask {
        let mut out = self.clone();
        out.shape = None;
        for r in 0..self.height {
            for c in 0..self.width {
                if r == 0 || c == 0 || r + 1 == self.height || c + 1 == self.width {
                    out.data[r * self.width + c] = 0;
                }
            }
        }
        out
    }

    pub fn to_grid(&self) -> Grid {
        Grid::new(
            self.height,
            self.width,
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("mask dimensions are consistent")
    }

    /// Nearest-neighbour resize; metadata is dropped unless the size is unchanged.
    pub fn resize_nearest(&self, height: usize, width: usize) -> AnomalyMask {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let g = self.to_grid().resize_nearest(height, width);
        AnomalyMask {
            height,
            width,
            data: g.as_slice().iter().map(|&v| u8::from(v >= 0.5)).collect(),
            shape: None,
        }
    }
}

/// Boundary distance of a parametric mask along `direction`.
pub fn radius_in_direction(mask: &AnomalyMask, direction: Point) -> Result<f64> {
    match mask.shape() {
        Some(shape) => {
            if direction.norm() == 0.0 || !direction.norm().is_finite() {
                return Err(Error::InvalidInput(
                    "direction must be a nonzero vector".into(),
                ));
            }
            Ok(shape.radius(direction))
        }
        None => Err(Error::UnsupportedShape(
            "radius is only defined for ellipse and rectangle masks".into(),
        )),
    }
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Single-octave gradient-lattice (Perlin) noise on a `size×size` grid.
/// Lattice points sit every `lattice_period` pixels; when the period does not
/// divide `size` the field is cropped from the next multiple.
pub fn perlin_field(seed: u64, size: usize, lattice_period: usize) -> Result<Grid> {
    if lattice_period < 2 {
        return Err(Error::InvalidInput(format!(
            "lattice period must be at least 2, got {lattice_period}"
        )));
    }
    if size == 0 {
        return Err(Error::InvalidInput("field size must be positive".into()));
    }
    let cells = size.div_ceil(lattice_period);
    let side = cells + 1;
    let mut rng = rng_from_seed(seed);
    let gradients: Vec<Point> = (0..side * side)
        .map(|_| Point::from_angle(rng.random_range(0.0..2.0 * PI)))
        .collect();
    let period = lattice_period as f64;
    Ok(Grid::from_fn(size, size, |r, c| {
        let y = r as f64 / period;
        let x = c as f64 / period;
        let (iy, ix) = (r / lattice_period, c / lattice_period);
        let fy = y - iy as f64;
        let fx = x - ix as f64;
        let dot = |gy: usize, gx: usize, dy: f64, dx: f64| {
            let g = gradients[gy * side + gx];
            g.row * dy + g.col * dx
        };
        let n00 = dot(iy, ix, fy, fx);
        let n01 = dot(iy, ix + 1, fy, fx - 1.0);
        let n10 = dot(iy + 1, ix, fy - 1.0, fx);
        let n11 = dot(iy + 1, ix + 1, fy - 1.0, fx - 1.0);
        let (u, v) = (fade(fx), fade(fy));
        lerp(lerp(n00, n01, u), lerp(n10, n11, u), v)
    }))
}

/// Marks every value strictly above `threshold`.
pub fn binarize(field: &Grid, threshold: f64) -> AnomalyMask {
    AnomalyMask {
        height: field.height(),
        width: field.width(),
        data: field
            .as_slice()
            .iter()
            .map(|&v| u8::from(v > threshold))
            .collect(),
        shape: None,
    }
}

/// Bisects for the threshold whose positive fraction is closest to `target`.
pub fn threshold_for_area(field: &Grid, target: f64) -> f64 {
    let n = field.len() as f64;
    let fraction = |t: f64| field.as_slice().iter().filter(|&&v| v > t).count() as f64 / n;
    // fraction(lo) >= target > fraction(hi) throughout
    let mut lo = field.min() - 1e-9;
    let mut hi = field.max();
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        if fraction(mid) >= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if (fraction(lo) - target).abs() <= (fraction(hi) - target).abs() {
        lo
    } else {
        hi
    }
}

/// Removes 4-connected components smaller than `min_pixels`.
pub fn drop_small_components(mask: &AnomalyMask, min_pixels: usize) -> AnomalyMask {
    let (h, w) = (mask.height, mask.width);
    let mut out = mask.clone();
    let mut seen = vec![false; h * w];
    let mut queue = VecDeque::new();
    let mut component = Vec::new();
    for start in 0..h * w {
        if seen[start] || mask.data[start] == 0 {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        component.clear();
        while let Some(i) = queue.pop_front() {
            component.push(i);
            let (r, c) = (i / w, i % w);
            let mut visit = |j: usize| {
                if !seen[j] && mask.data[j] != 0 {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
        }
        if component.len() < min_pixels {
            for &i in &component {
                out.data[i] = 0;
            }
        }
    }
    out
}

fn area_band(target: f64) -> (f64, f64) {
    (
        (target * (1.0 - AREA_TOLERANCE)).max(MIN_AREA_FRACTION),
        (target * (1.0 + AREA_TOLERANCE)).min(MAX_AREA_FRACTION),
    )
}

/// Free-form lesion mask: a Perlin field thresholded so that the positive
/// fraction lands within ±20% of `target_area`.
pub fn perlin_mask(seed: u64, size: usize, target_area: f64) -> Result<AnomalyMask> {
    perlin_mask_within(seed, size, target_area, |_, _| true)
}

/// [`perlin_mask`] restricted to the pixels where `allowed` holds; the area
/// fraction is still measured against the whole image.
pub fn perlin_mask_within(
    seed: u64,
    size: usize,
    target_area: f64,
    allowed: impl Fn(usize, usize) -> bool,
) -> Result<AnomalyMask> {
    if !(MIN_AREA_FRACTION..=MAX_AREA_FRACTION).contains(&target_area) {
        return Err(Error::InvalidInput(format!(
            "target area {target_area} outside [{MIN_AREA_FRACTION}, {MAX_AREA_FRACTION}]"
        )));
    }
    let (lo, hi) = area_band(target_area);
    for attempt in 0..PERLIN_ATTEMPTS {
        let mut rng = rng_from_seed(derive_seed(seed, "perlin-mask", attempt));
        let period = if rng.random_bool(0.5) {
            size / 4
        } else {
            size / 8
        }
        .max(2);
        let mut field = perlin_field(rng.random(), size, period)?;
        for r in 0..size {
            for c in 0..size {
                if !allowed(r, c) {
                    field.set(r, c, -2.0);
                }
            }
        }
        let threshold = threshold_for_area(&field, target_area);
        let mask = drop_small_components(&binarize(&field, threshold), MIN_COMPONENT_PIXELS);
        let fraction = mask.area_fraction();
        if (lo..=hi).contains(&fraction) {
            return Ok(mask);
        }
    }
    Err(Error::DegenerateField(format!(
        "no Perlin field met area {target_area} after {PERLIN_ATTEMPTS} attempts"
    )))
}

/// Draws a random ellipse/rectangle: semi-axes uniform in 8%–25% of the side,
/// rotation uniform in `[0, π)`, centre uniform over positions where the
/// whole shape stays strictly inside the image.
pub fn sample_shape(seed: u64, size: usize, kind: ShapeKind) -> ShapeParams {
    let mut rng = rng_from_seed(seed);
    let side = size as f64;
    let (lo, hi) = SEMI_AXIS_RANGE;
    let a = rng.random_range(lo * side..hi * side);
    let b = rng.random_range(lo * side..hi * side);
    let rotation = rng.random_range(0.0..PI);
    let mut shape = ShapeParams {
        kind,
        center: Point::new(0.0, 0.0),
        rotation,
        semi_axes: (a, b),
    };
    let (er, ec) = shape.half_extents();
    let uniform = |rng: &mut crate::rng::Rng, e: f64| {
        let (min, max) = (1.0 + e, side - 2.0 - e);
        if max > min {
            rng.random_range(min..max)
        } else {
            0.5 * (side - 1.0)
        }
    };
    let row = uniform(&mut rng, er);
    let col = uniform(&mut rng, ec);
    shape.center = Point::new(row, col);
    shape
}

/// Ellipse or rectangle mask with populated metadata.
pub fn parametric_mask(seed: u64, size: usize, kind: ShapeKind) -> Result<AnomalyMask> {
    for attempt in 0..PARAMETRIC_ATTEMPTS {
        let shape = sample_shape(derive_seed(seed, "parametric-mask", attempt), size, kind);
        let mask = AnomalyMask::from_shape(size, size, shape);
        let f = mask.area_fraction();
        if (MIN_AREA_FRACTION..=MAX_AREA_FRACTION).contains(&f) && !mask.touches_border() {
            return Ok(mask);
        }
    }
    Err(Error::DegenerateField(format!(
        "no {kind:?} of admissible area fits a {size}x{size} image"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lattice_points_are_zero() {
        let f = perlin_field(3, 64, 16).unwrap();
        for &(r, c) in &[(0, 0), (16, 0), (0, 16), (32, 48), (48, 48)] {
            assert_eq!(f.get(r, c), 0.0);
        }
    }

    #[test]
    fn perlin_is_deterministic_and_bounded() {
        let a = perlin_field(3, 64, 16).unwrap();
        let b = perlin_field(3, 64, 16).unwrap();
        assert_eq!(a, b);
        assert!(a.min() >= -1.0 && a.max() <= 1.0);
        assert_ne!(a, perlin_field(4, 64, 16).unwrap());
    }

    #[test]
    fn perlin_rejects_tiny_period() {
        assert!(perlin_field(1, 64, 1).is_err());
    }

    #[test]
    fn non_dividing_period_is_cropped() {
        let f = perlin_field(9, 50, 16).unwrap();
        assert_eq!((f.height(), f.width()), (50, 50));
        assert_eq!(f.get(48, 32), 0.0);
    }

    #[test]
    fn adjacent_pixels_vary_slowly() {
        for period in [8, 16] {
            let f = perlin_field(11, 64, period).unwrap();
            let bound = 4.0 / period as f64;
            for r in 0..64 {
                for c in 0..64 {
                    if r + 1 < 64 {
                        assert!((f.get(r, c) - f.get(r + 1, c)).abs() < bound);
                    }
                    if c + 1 < 64 {
                        assert!((f.get(r, c) - f.get(r, c + 1)).abs() < bound);
                    }
                }
            }
        }
    }

    #[test]
    fn perlin_mask_hits_target_band() {
        let m = perlin_mask(5, 64, 0.10).unwrap();
        let f = m.area_fraction();
        assert!((0.08..=0.12).contains(&f), "fraction {f}");
        assert!(m.values().iter().all(|&v| v <= 1));
        assert_eq!(m.kind(), MaskKind::Perlin);
    }

    #[test]
    fn perlin_mask_rejects_out_of_range_target() {
        assert!(perlin_mask(5, 64, 0.5).is_err());
        assert!(perlin_mask(5, 64, 0.01).is_err());
    }

    #[test]
    fn infinite_threshold_gives_empty_mask() {
        let f = perlin_field(5, 64, 16).unwrap();
        assert!(binarize(&f, f64::INFINITY).is_empty());
        assert_eq!(binarize(&f, f64::NEG_INFINITY).count(), 64 * 64);
    }

    #[test]
    fn small_components_are_removed() {
        let mut data = vec![0u8; 20 * 20];
        // 2x2 speck and a 3x4 block
        for (r, c) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
            data[r * 20 + c] = 1;
        }
        for r in 10..13 {
            for c in 10..14 {
                data[r * 20 + c] = 1;
            }
        }
        let m = AnomalyMask::from_binary(20, 20, data).unwrap();
        let kept = drop_small_components(&m, MIN_COMPONENT_PIXELS);
        assert_eq!(kept.count(), 12);
        assert!(!kept.get(1, 1));
    }

    #[test]
    fn ellipse_membership_along_major_axis() {
        let shape = ShapeParams {
            kind: ShapeKind::Ellipse,
            center: Point::new(32.0, 32.0),
            rotation: 0.0,
            semi_axes: (10.0, 6.0),
        };
        let m = AnomalyMask::from_shape(64, 64, shape);
        assert!(m.get(32 + 9, 32));
        assert!(!m.get(32 + 12, 32));
    }

    #[test]
    fn rectangle_area_matches_formula() {
        for &(h1, h2) in &[(6.0, 9.0), (10.0, 4.0), (12.5, 7.5)] {
            let shape = ShapeParams {
                kind: ShapeKind::Rectangle,
                center: Point::new(31.5, 32.0),
                rotation: 0.0,
                semi_axes: (h1, h2),
            };
            let m = AnomalyMask::from_shape(64, 64, shape);
            let expected = 4.0 * h1 * h2;
            let band = 2.0 * (2.0 * h1 + 2.0 * h2) + 4.0;
            assert!((m.count() as f64 - expected).abs() <= band);
        }
    }

    #[test]
    fn parametric_mask_is_deterministic_and_in_band() {
        for kind in [ShapeKind::Ellipse, ShapeKind::Rectangle] {
            for seed in 0..50 {
                let a = parametric_mask(seed, 64, kind).unwrap();
                let b = parametric_mask(seed, 64, kind).unwrap();
                assert_eq!(a, b);
                let f = a.area_fraction();
                assert!((MIN_AREA_FRACTION..=MAX_AREA_FRACTION).contains(&f));
                assert!(!a.touches_border());
                let s = a.shape().unwrap();
                assert!(s.semi_axes.0 >= 0.08 * 64.0 && s.semi_axes.0 < 0.25 * 64.0);
                assert!((0.0..PI).contains(&s.rotation));
            }
        }
    }

    #[test]
    fn radius_examples() {
        let circle = AnomalyMask::from_shape(
            64,
            64,
            ShapeParams {
                kind: ShapeKind::Ellipse,
                center: Point::new(32.0, 32.0),
                rotation: 0.7,
                semi_axes: (10.0, 10.0),
            },
        );
        for k in 0..16 {
            let r = radius_in_direction(&circle, Point::from_angle(k as f64 * 0.4)).unwrap();
            assert!((r - 10.0).abs() < 1e-12);
        }
        let ellipse = AnomalyMask::from_shape(
            64,
            64,
            ShapeParams {
                kind: ShapeKind::Ellipse,
                center: Point::new(32.0, 32.0),
                rotation: 0.0,
                semi_axes: (10.0, 5.0),
            },
        );
        let minor = radius_in_direction(&ellipse, Point::new(0.0, 1.0)).unwrap();
        assert!((minor - 5.0).abs() < 1e-12);
        let diag = radius_in_direction(&ellipse, Point::new(1.0, 1.0)).unwrap();
        assert!((diag - 40f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn radius_needs_parametric_mask() {
        let m = perlin_mask(1, 64, 0.1).unwrap();
        assert!(matches!(
            radius_in_direction(&m, Point::new(1.0, 0.0)),
            Err(Error::UnsupportedShape(_))
        ));
    }
}
