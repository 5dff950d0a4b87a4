//! Anomaly synthesis: turns a normal image `X` and a region mask `Y` into a
//! synthetic anomaly `X̂`. Three tasks are available and the training loader
//! draws among them with equal probability.

use std::f64::consts::SQRT_2;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Image};
use crate::mask::{
    parametric_mask, perlin_mask, perlin_mask_within, AnomalyMask, MaskKind, Point, ShapeKind,
    ShapeParams, MAX_AREA_FRACTION, MIN_AREA_FRACTION,
};
use crate::rng::{derive_seed, rng_from_seed, Rng};

const PLACEMENT_ATTEMPTS: usize = 16;

/// Poisson iterations stop once the max residual drops below this.
pub const POISSON_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthesisTask {
    CutPaste,
    GaussIntensityChange,
    Source,
}

impl SynthesisTask {
    pub const ALL: [SynthesisTask; 3] = [
        SynthesisTask::CutPaste,
        SynthesisTask::GaussIntensityChange,
        SynthesisTask::Source,
    ];

    pub fn accepts(self, kind: MaskKind) -> bool {
        match self {
            SynthesisTask::Source => kind != MaskKind::Perlin,
            _ => true,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SynthesisTask::CutPaste => "cutpaste",
            SynthesisTask::GaussIntensityChange => "gauss",
            SynthesisTask::Source => "source",
        }
    }
}

impl fmt::Display for SynthesisTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SynthesisTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "cutpaste" => Ok(SynthesisTask::CutPaste),
            "gauss" | "gaussintensitychange" | "intensity" => {
                Ok(SynthesisTask::GaussIntensityChange)
            }
            "source" => Ok(SynthesisTask::Source),
            other => Err(Error::InvalidInput(format!(
                "unknown synthesis task {other:?}"
            ))),
        }
    }
}

/// Draws one of the three tasks with probability 1/3 each.
pub fn sample_task(rng: &mut Rng) -> SynthesisTask {
    SynthesisTask::ALL[rng.random_range(0..3)]
}

/// Parameter ranges for the synthesis tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    /// `|γ|` is drawn uniformly from this half-open range, sign ±1 equiprobable.
    pub gamma_magnitude: (f64, f64),
    /// `α` is drawn uniformly from this half-open range.
    pub alpha_range: (f64, f64),
    /// Gaussian filter width for the intensity field at a 64-pixel side;
    /// scales linearly with the image side.
    pub sigma_g_at_64: f64,
    /// Relative task weights in the order cutpaste, gauss, source.
    pub task_weights: [f64; 3],
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            gamma_magnitude: (0.4, 0.6),
            alpha_range: (SQRT_2, 4.0),
            sigma_g_at_64: 4.0,
            task_weights: [1.0, 1.0, 1.0],
        }
    }
}

/// Parameters actually used by one synthesis call.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum SynthesisRecord {
    CutPaste {
        offset: (isize, isize),
        poisson_iterations: usize,
    },
    GaussIntensityChange {
        gamma: f64,
        sigma_g: f64,
    },
    Source {
        alpha: f64,
        center: Point,
    },
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        let (g0, g1) = self.gamma_magnitude;
        let (a0, a1) = self.alpha_range;
        if !(g0 > 0.0 && g0 < g1) {
            return Err(Error::Config(format!("invalid gamma range [{g0}, {g1})")));
        }
        if !(a0 >= 1.0 && a0 < a1) {
            return Err(Error::Config(format!("invalid alpha range [{a0}, {a1})")));
        }
        if !(self.sigma_g_at_64 > 0.0) {
            return Err(Error::Config("sigma_g must be positive".into()));
        }
        if self
            .task_weights
            .iter()
            .any(|w| !(*w >= 0.0) || !w.is_finite())
            || self.task_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::Config(
                "task weights must be nonnegative and not all zero".into(),
            ));
        }
        Ok(())
    }

    /// Task draw honouring `task_weights`; equal weights reduce to [`sample_task`].
    pub fn sample_task(&self, rng: &mut Rng) -> SynthesisTask {
        let w = self.task_weights;
        if w[0] == w[1] && w[1] == w[2] {
            return sample_task(rng);
        }
        let total: f64 = w.iter().sum();
        let mut u = rng.random_range(0.0..total);
        for (task, weight) in SynthesisTask::ALL.iter().zip(w) {
            if u < weight {
                return *task;
            }
            u -= weight;
        }
        // rounding leftovers go to the last task with nonzero weight
        *SynthesisTask::ALL
            .iter()
            .zip(w)
            .rev()
            .find(|(_, w)| *w > 0.0)
            .map(|(t, _)| t)
            .expect("validated weights")
    }

    pub fn sigma_g(&self, side: usize) -> f64 {
        self.sigma_g_at_64 * side as f64 / 64.0
    }

    pub fn sample_gamma(&self, rng: &mut Rng) -> f64 {
        let (lo, hi) = self.gamma_magnitude;
        let magnitude = rng.random_range(lo..hi);
        if rng.random_bool(0.5) {
            magnitude
        } else {
            -magnitude
        }
    }

    pub fn sample_alpha(&self, rng: &mut Rng) -> f64 {
        let (lo, hi) = self.alpha_range;
        rng.random_range(lo..hi)
    }

    /// Applies `task` to `(x, y)`, drawing task parameters from `seed`.
    pub fn synthesize(
        &self,
        x: &Image,
        y: &AnomalyMask,
        task: SynthesisTask,
        seed: u64,
    ) -> Result<(Image, SynthesisRecord)> {
        check_same_shape(x, y)?;
        if !task.accepts(y.kind()) {
            return Err(Error::UnsupportedShape(format!(
                "task {task} requires an ellipse or rectangle mask, got {:?}",
                y.kind()
            )));
        }
        let mut rng = rng_from_seed(derive_seed(seed, "synthesis-params", 0));
        match task {
            SynthesisTask::CutPaste => {
                let (image, offset, poisson_iterations) = cutpaste_detailed(x, y, seed)?;
                Ok((
                    image,
                    SynthesisRecord::CutPaste {
                        offset,
                        poisson_iterations,
                    },
                ))
            }
            SynthesisTask::GaussIntensityChange => {
                let gamma = self.sample_gamma(&mut rng);
                let sigma_g = self.sigma_g(x.width());
                let image = gauss_intensity_change_with(x, y, gamma, sigma_g, seed)?;
                Ok((
                    image,
                    SynthesisRecord::GaussIntensityChange { gamma, sigma_g },
                ))
            }
            SynthesisTask::Source => {
                let alpha = self.sample_alpha(&mut rng);
                let image = source_deform(x, y, alpha)?;
                let center = y.shape().expect("checked by accepts").center;
                Ok((image, SynthesisRecord::Source { alpha, center }))
            }
        }
    }
}

/// A synthesized training or test pair.
#[derive(Clone, Debug)]
pub struct SampledAnomaly {
    pub image: Image,
    pub mask: AnomalyMask,
    pub task: SynthesisTask,
    pub record: SynthesisRecord,
}

/// Mask resamples allowed when a CutPaste placement fails.
pub const MASK_ATTEMPTS: u64 = 32;

/// Draws a mask compatible with `task`: Perlin with a target area uniform in
/// `[0.02, 0.30]` for CutPaste and intensity change, an ellipse or rectangle
/// (equiprobable) for Source.
pub fn sample_mask_for_task(task: SynthesisTask, seed: u64, size: usize) -> Result<AnomalyMask> {
    let mut rng = rng_from_seed(derive_seed(seed, "task-mask", 0));
    match task {
        SynthesisTask::Source => {
            let kind = if rng.random_bool(0.5) {
                ShapeKind::Ellipse
            } else {
                ShapeKind::Rectangle
            };
            parametric_mask(rng.random(), size, kind)
        }
        SynthesisTask::CutPaste => half_image_perlin_mask(&mut rng, size),
        SynthesisTask::GaussIntensityChange => {
            let target = rng.random_range(MIN_AREA_FRACTION..MAX_AREA_FRACTION);
            perlin_mask(rng.random(), size, target)
        }
    }
}

/// Perlin mask confined to a random half of the image (top, bottom, left or
/// right), so a disjoint source patch always exists in the other half.
fn half_image_perlin_mask(rng: &mut Rng, size: usize) -> Result<AnomalyMask> {
    let target = rng.random_range(MIN_AREA_FRACTION..MAX_AREA_FRACTION);
    let half = size / 2;
    let side = rng.random_range(0..4u8);
    perlin_mask_within(rng.random(), size, target, |r, c| match side {
        0 => r < half,
        1 => r >= size - half,
        2 => c < half,
        _ => c >= size - half,
    })
}

impl SynthesisConfig {
    /// Samples a compatible mask and applies `task`, redrawing the mask when a
    /// CutPaste placement fails (at most [`MASK_ATTEMPTS`] draws).
    pub fn synthesize_random(
        &self,
        x: &Image,
        task: SynthesisTask,
        seed: u64,
    ) -> Result<SampledAnomaly> {
        if x.height() != x.width() {
            return Err(Error::Shape("random masks need a square image".into()));
        }
        let mut last_err = None;
        for attempt in 0..MASK_ATTEMPTS {
            let mask = sample_mask_for_task(task, derive_seed(seed, "mask", attempt), x.height())?;
            match self.synthesize(x, &mask, task, derive_seed(seed, "apply", attempt)) {
                Ok((image, record)) => {
                    return Ok(SampledAnomaly {
                        image,
                        mask,
                        task,
                        record,
                    })
                }
                Err(e @ Error::Placement(_)) => last_err = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(last_err.expect("at least one attempt"))
    }
}

/// `Ψ(X, Y)` with the default parameter ranges.
pub fn synthesize(x: &Image, y: &AnomalyMask, task: SynthesisTask, seed: u64) -> Result<Image> {
    SynthesisConfig::default()
        .synthesize(x, y, task, seed)
        .map(|(image, _)| image)
}

fn check_same_shape(x: &Image, y: &AnomalyMask) -> Result<()> {
    if x.height() != y.height() || x.width() != y.width() {
        return Err(Error::Shape(format!(
            "image {}x{} vs mask {}x{}",
            x.height(),
            x.width(),
            y.height(),
            y.width()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// CutPaste with Poisson blending

/// Copies a same-image patch congruent to `Y`'s bounding box from a random
/// disjoint location and Poisson-blends it into the `Y` region.
pub fn cutpaste(x: &Image, y: &AnomalyMask, seed: u64) -> Result<Image> {
    cutpaste_detailed(x, y, seed).map(|(image, _, _)| image)
}

fn blend_region(y: &AnomalyMask) -> AnomalyMask {
    // Poisson blending needs a Dirichlet ring, so border pixels stay untouched.
    y.interior()
}

fn cutpaste_detailed(
    x: &Image,
    y: &AnomalyMask,
    seed: u64,
) -> Result<(Image, (isize, isize), usize)> {
    check_same_shape(x, y)?;
    let region = blend_region(y);
    let Some((r0, c0, r1, c1)) = region.bounding_box() else {
        return Ok((x.clone(), (0, 0), 0));
    };
    let (h, w) = (x.height(), x.width());
    let (bh, bw) = (r1 - r0 + 1, c1 - c0 + 1);
    if 2 * bh > h && 2 * bw > w {
        return Err(Error::Placement(format!(
            "mask bounding box {bh}x{bw} exceeds half of the {h}x{w} image"
        )));
    }
    let mut rng = rng_from_seed(derive_seed(seed, "cutpaste-placement", 0));
    for _ in 0..PLACEMENT_ATTEMPTS {
        let sr = rng.random_range(0..=h - bh);
        let sc = rng.random_range(0..=w - bw);
        let disjoint = sr + bh <= r0 || sr > r1 || sc + bw <= c0 || sc > c1;
        if disjoint {
            let offset = (sr as isize - r0 as isize, sc as isize - c0 as isize);
            let (image, iterations) = cutpaste_at(x, &region, offset)?;
            return Ok((image, offset, iterations));
        }
    }
    Err(Error::Placement(format!(
        "no disjoint source placement for a {bh}x{bw} patch after {PLACEMENT_ATTEMPTS} tries"
    )))
}

/// The source image seen through a fixed `(row, col)` offset: `g(p) = X(p + offset)`,
/// clamped at the border.
pub fn shifted_source(x: &Image, offset: (isize, isize)) -> Image {
    let (h, w) = (x.height() as isize, x.width() as isize);
    let grid = Grid::from_fn(x.height(), x.width(), |r, c| {
        let sr = (r as isize + offset.0).clamp(0, h - 1) as usize;
        let sc = (c as isize + offset.1).clamp(0, w - 1) as usize;
        x.get(sr, sc)
    });
    Image::from_grid(grid).expect("shifted copy of a valid image")
}

/// CutPaste with a caller-chosen source offset. An offset of `(0, 0)` pastes
/// the destination onto itself.
pub fn cutpaste_with_offset(x: &Image, y: &AnomalyMask, offset: (isize, isize)) -> Result<Image> {
    check_same_shape(x, y)?;
    cutpaste_at(x, &blend_region(y), offset).map(|(image, _)| image)
}

fn cutpaste_at(x: &Image, region: &AnomalyMask, offset: (isize, isize)) -> Result<(Image, usize)> {
    let src = shifted_source(x, offset);
    let solution = poisson_solve(x, &src, region)?;
    let iterations = solution.iterations;
    Ok((solution.into_image(x, region), iterations))
}

/// Unclamped result of the Poisson system over a region.
#[derive(Clone, Debug)]
pub struct PoissonSolution {
    /// Full-size field: solved values on the region, `dst` elsewhere.
    pub values: Grid,
    pub iterations: usize,
    pub max_residual: f64,
}

impl PoissonSolution {
    /// Clamps region values into `[0, 1]`; pixels outside keep `dst` bits.
    pub fn into_image(self, dst: &Image, region: &AnomalyMask) -> Image {
        let mut out = dst.grid().clone();
        for (r, c) in region.positions() {
            out.set(r, c, self.values.get(r, c).clamp(0.0, 1.0));
        }
        Image::from_grid(out).expect("clamped values are in range")
    }
}

/// Residual `Σ_q (f_p − f_q) − Σ_q (g_p − g_q)` of the discrete Poisson
/// equation at interior pixel `(r, c)` over its 4-neighbourhood.
pub fn poisson_residual(f: &Grid, g: &Grid, r: usize, c: usize) -> f64 {
    let lap = |m: &Grid| {
        let p = m.get(r, c);
        (p - m.get(r - 1, c))
            + (p - m.get(r + 1, c))
            + (p - m.get(r, c - 1))
            + (p - m.get(r, c + 1))
    };
    lap(f) - lap(g)
}

/// Solves the guided-interpolation system with `src` gradients as guidance and
/// `dst` as the Dirichlet boundary, using red-black Gauss-Seidel.
pub fn poisson_solve(dst: &Image, src: &Image, region: &AnomalyMask) -> Result<PoissonSolution> {
    if dst.height() != src.height() || dst.width() != src.width() {
        return Err(Error::Shape(
            "poisson source and destination differ in size".into(),
        ));
    }
    check_same_shape(dst, region)?;
    if region.touches_border() {
        return Err(Error::Precondition(
            "blend region must not contain border pixels".into(),
        ));
    }
    let w = dst.width();
    let g = src.grid();
    let mut f = dst.grid().clone();
    let pixels: Vec<(usize, usize)> = region.positions().collect();
    let guidance: Vec<f64> = pixels
        .iter()
        .map(|&(r, c)| {
            let p = g.get(r, c);
            (p - g.get(r - 1, c))
                + (p - g.get(r + 1, c))
                + (p - g.get(r, c - 1))
                + (p - g.get(r, c + 1))
        })
        .collect();
    let residual = |f: &Grid| {
        pixels
            .iter()
            .zip(&guidance)
            .map(|(&(r, c), b)| {
                let p = f.get(r, c);
                let lap = (p - f.get(r - 1, c))
                    + (p - f.get(r + 1, c))
                    + (p - f.get(r, c - 1))
                    + (p - f.get(r, c + 1));
                (lap - b).abs()
            })
            .fold(0.0, f64::max)
    };
    let max_iterations = 10 * pixels.len();
    let mut iterations = 0;
    let mut max_residual = residual(&f);
    while max_residual >= POISSON_TOLERANCE && iterations < max_iterations {
        for parity in 0..2 {
            for (&(r, c), b) in pixels.iter().zip(&guidance) {
                if (r + c) % 2 != parity {
                    continue;
                }
                let data = f.as_slice();
                let i = r * w + c;
                let sum = data[i - w] + data[i + w] + data[i - 1] + data[i + 1];
                f.as_mut_slice()[i] = (sum + b) / 4.0;
            }
        }
        iterations += 1;
        max_residual = residual(&f);
    }
    Ok(PoissonSolution {
        values: f,
        iterations,
        max_residual,
    })
}

/// Poisson image editing of `src` into `dst` over `region`, clamped to `[0, 1]`.
pub fn poisson_blend(dst: &Image, src: &Image, region: &AnomalyMask) -> Result<Image> {
    Ok(poisson_solve(dst, src, region)?.into_image(dst, region))
}

// ---------------------------------------------------------------------------
// Gaussian intensity change

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - 1 - j;
    }
    j as usize
}

/// Separable Gaussian blur truncated at 3σ, with mirrored borders.
pub fn gaussian_filter(field: &Grid, sigma: f64) -> Grid {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (h, w) = (field.height(), field.width());
    let horizontal = Grid::from_fn(h, w, |r, c| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, wgt)| wgt * field.get(r, reflect(c as isize + k as isize - radius, w)))
            .sum()
    });
    Grid::from_fn(h, w, |r, c| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, wgt)| wgt * horizontal.get(reflect(r as isize + k as isize - radius, h), c))
            .sum()
    })
}

/// `σ̂`: i.i.d. standard-normal noise binarized at 0, then Gaussian-filtered.
pub fn smoothed_binary_noise(seed: u64, height: usize, width: usize, sigma_g: f64) -> Grid {
    let mut rng = rng_from_seed(derive_seed(seed, "intensity-noise", 0));
    let binary = Grid::from_fn(height, width, |_, _| {
        let s: f64 = rng.sample(StandardNormal);
        if s > 0.0 {
            1.0
        } else {
            0.0
        }
    });
    gaussian_filter(&binary, sigma_g)
}

/// `X̂ = X ⊙ (1 − Y) + (X + γσ̂) ⊙ Y`, clamped to `[0, 1]`.
pub fn apply_intensity_change(
    x: &Image,
    y: &AnomalyMask,
    gamma: f64,
    sigma_hat: &Grid,
) -> Result<Image> {
    check_same_shape(x, y)?;
    if sigma_hat.height() != x.height() || sigma_hat.width() != x.width() {
        return Err(Error::Shape("intensity field does not match image".into()));
    }
    let grid = Grid::from_fn(x.height(), x.width(), |r, c| {
        let v = x.get(r, c);
        if y.get(r, c) {
            (v + gamma * sigma_hat.get(r, c)).clamp(0.0, 1.0)
        } else {
            v
        }
    });
    Image::from_grid(grid)
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.4..0.6).contains(&gamma.abs()) {
        return Err(Error::InvalidInput(format!(
            "|gamma| = {} outside [0.4, 0.6)",
            gamma.abs()
        )));
    }
    Ok(())
}

/// Intensity change with the default filter width (4 px at a 64-px side).
pub fn gauss_intensity_change(x: &Image, y: &AnomalyMask, gamma: f64, seed: u64) -> Result<Image> {
    let sigma_g = SynthesisConfig::default().sigma_g(x.width());
    gauss_intensity_change_with(x, y, gamma, sigma_g, seed)
}

pub fn gauss_intensity_change_with(
    x: &Image,
    y: &AnomalyMask,
    gamma: f64,
    sigma_g: f64,
    seed: u64,
) -> Result<Image> {
    check_gamma(gamma)?;
    check_same_shape(x, y)?;
    let sigma_hat = smoothed_binary_noise(seed, x.height(), x.width(), sigma_g);
    apply_intensity_change(x, y, gamma, &sigma_hat)
}

// ---------------------------------------------------------------------------
// Source (radial repulsion)

/// Target location `l̂ = c + r·(l − c)/‖l − c‖·(‖l − c‖/r)^α`; `l = c` maps to `c`.
pub fn source_target(l: Point, center: Point, radius: f64, alpha: f64) -> Point {
    let v = l.sub(center);
    let d = v.norm();
    if d == 0.0 {
        return center;
    }
    center.add(v.scale(radius / d * (d / radius).powf(alpha)))
}

fn source_lookup(shape: &ShapeParams, l: Point, alpha: f64) -> Point {
    let v = l.sub(shape.center);
    if v.norm() == 0.0 {
        return shape.center;
    }
    source_target(l, shape.center, shape.radius(v), alpha)
}

/// Pushes mask content away from the shape centre: each `l ∈ Y` takes the
/// bilinear sample of `X` at `l̂`.
pub fn source_deform(x: &Image, y: &AnomalyMask, alpha: f64) -> Result<Image> {
    check_same_shape(x, y)?;
    let Some(shape) = y.shape() else {
        return Err(Error::UnsupportedShape(
            "source deformation requires an ellipse or rectangle mask".into(),
        ));
    };
    if !(SQRT_2..4.0).contains(&alpha) {
        return Err(Error::InvalidInput(format!(
            "alpha {alpha} outside [sqrt(2), 4)"
        )));
    }
    if y.touches_border() {
        return Err(Error::Precondition(
            "source mask must lie strictly inside the image".into(),
        ));
    }
    let mut out = x.grid().clone();
    for (r, c) in y.positions() {
        let target = source_lookup(shape, Point::new(r as f64, c as f64), alpha);
        out.set(
            r,
            c,
            x.grid()
                .sample_bilinear(target.row, target.col)
                .clamp(0.0, 1.0),
        );
    }
    Image::from_grid(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(seed: u64) -> Image {
        let mut rng = rng_from_seed(seed);
        let grid = Grid::from_fn(64, 64, |r, c| {
            0.3 + 0.2 * ((r as f64) / 9.0).sin() * ((c as f64) / 7.0).cos()
                + rng.random_range(0.0..0.05)
        });
        Image::from_grid(grid).unwrap()
    }

    #[test]
    fn task_parsing_and_compatibility() {
        assert_eq!(
            "cutpaste".parse::<SynthesisTask>().unwrap(),
            SynthesisTask::CutPaste
        );
        assert_eq!(
            "gauss".parse::<SynthesisTask>().unwrap(),
            SynthesisTask::GaussIntensityChange
        );
        assert_eq!(
            "Source".parse::<SynthesisTask>().unwrap(),
            SynthesisTask::Source
        );
        assert!("warp".parse::<SynthesisTask>().is_err());
        assert!(!SynthesisTask::Source.accepts(MaskKind::Perlin));
        assert!(SynthesisTask::CutPaste.accepts(MaskKind::Ellipse));
    }

    #[test]
    fn empty_mask_intensity_change_is_identity() {
        let x = test_image(1);
        let y = AnomalyMask::empty(64, 64);
        let out = synthesize(&x, &y, SynthesisTask::GaussIntensityChange, 3).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn synthesis_is_deterministic() {
        let x = test_image(2);
        let perlin = perlin_mask(4, 64, 0.05).unwrap();
        let ellipse = parametric_mask(4, 64, ShapeKind::Ellipse).unwrap();
        for task in SynthesisTask::ALL {
            let y = if task == SynthesisTask::Source {
                &ellipse
            } else {
                &perlin
            };
            let a = synthesize(&x, y, task, 17);
            let b = synthesize(&x, y, task, 17);
            match (a, b) {
                (Ok(a), Ok(b)) => assert_eq!(a, b),
                (Err(Error::Placement(_)), Err(Error::Placement(_))) => {}
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn positive_gamma_brightens_region() {
        let x = test_image(3);
        let y = perlin_mask(8, 64, 0.15).unwrap();
        let out = gauss_intensity_change(&x, &y, 0.5, 5).unwrap();
        let mean =
            |img: &Image| y.positions().map(|(r, c)| img.get(r, c)).sum::<f64>() / y.count() as f64;
        assert!(mean(&out) > mean(&x));
        let darker = gauss_intensity_change(&x, &y, -0.5, 5).unwrap();
        assert!(mean(&darker) < mean(&x));
    }

    #[test]
    fn intensity_scalar_case() {
        let x = Image::new(16, 16, vec![0.5; 256]).unwrap();
        let y = AnomalyMask::from_binary(16, 16, vec![1; 256]).unwrap();
        let sigma_hat = Grid::filled(16, 16, 0.8);
        let out = apply_intensity_change(&x, &y, 0.5, &sigma_hat).unwrap();
        assert_eq!(out.get(3, 3), 0.5 + 0.5 * 0.8);
    }

    #[test]
    fn gamma_out_of_range_is_rejected() {
        let x = test_image(4);
        let y = perlin_mask(8, 64, 0.15).unwrap();
        assert!(gauss_intensity_change(&x, &y, 0.3, 1).is_err());
        assert!(gauss_intensity_change(&x, &y, -0.6, 1).is_err());
    }

    #[test]
    fn smoothed_noise_is_a_convex_combination() {
        let s = smoothed_binary_noise(9, 64, 64, 4.0);
        assert!(s.min() >= 0.0 && s.max() <= 1.0);
    }

    #[test]
    fn source_rejects_perlin_masks() {
        let x = test_image(5);
        let y = perlin_mask(3, 64, 0.1).unwrap();
        assert!(matches!(
            synthesize(&x, &y, SynthesisTask::Source, 1),
            Err(Error::UnsupportedShape(_))
        ));
        assert!(matches!(
            source_deform(&x, &y, 2.0),
            Err(Error::UnsupportedShape(_))
        ));
    }

    #[test]
    fn source_target_examples() {
        let c = Point::new(20.0, 20.0);
        let l = Point::new(25.0, 20.0);
        let t = source_target(l, c, 10.0, 2.0);
        assert!((t.sub(c).norm() - 2.5).abs() < 1e-12);
        assert_eq!(source_target(c, c, 10.0, 2.0), c);
        let edge = Point::new(30.0, 20.0);
        assert!(source_target(edge, c, 10.0, 3.0).sub(edge).norm() < 1e-12);
    }

    #[test]
    fn cutpaste_identity_offset_reproduces_input() {
        let x = test_image(6);
        let y = perlin_mask(12, 64, 0.05).unwrap();
        let out = cutpaste_with_offset(&x, &y, (0, 0)).unwrap();
        let diff = out
            .pixels()
            .iter()
            .zip(x.pixels())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-3);
    }

    #[test]
    fn poisson_rejects_border_regions() {
        let x = test_image(7);
        let mut data = vec![0u8; 64 * 64];
        data[0] = 1;
        let y = AnomalyMask::from_binary(64, 64, data).unwrap();
        assert!(matches!(
            poisson_blend(&x, &x, &y),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn cutpaste_rejects_oversized_masks() {
        let x = test_image(8);
        let mut data = vec![0u8; 64 * 64];
        for r in 2..60 {
            for c in 2..60 {
                data[r * 64 + c] = 1;
            }
        }
        let y = AnomalyMask::from_binary(64, 64, data).unwrap();
        assert!(matches!(cutpaste(&x, &y, 1), Err(Error::Placement(_))));
    }

    #[test]
    fn weighted_sampler_respects_zero_weights() {
        let cfg = SynthesisConfig {
            task_weights: [0.0, 1.0, 0.0],
            ..Default::default()
        };
        let mut rng = rng_from_seed(1);
        for _ in 0..200 {
            assert_eq!(
                cfg.sample_task(&mut rng),
                SynthesisTask::GaussIntensityChange
            );
        }
    }
}
