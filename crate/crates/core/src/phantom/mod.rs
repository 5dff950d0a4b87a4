//! Synthetic "phantom" images standing in for real medical scans, plus all
//! image and dataset I/O.

mod dataset;
mod io;

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Image, MIN_IMAGE_SIDE};
use crate::rng::rng_from_seed;

pub use dataset::{
    build_dataset, support_images, AnomalyEntry, DatasetSpec, Manifest, MANIFEST_FILE,
};
pub use io::{load_image, load_mask, save_image, save_mask};

/// Upper bound of the smooth structure before noise; keeps headroom so that
/// brightening lesions are not clipped away.
const STRUCTURE_CEILING: f64 = 0.85;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyId {
    Blob,
    Ring,
}

impl fmt::Display for FamilyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FamilyId::Blob => "blob",
            FamilyId::Ring => "ring",
        })
    }
}

impl FromStr for FamilyId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "blob" => Ok(FamilyId::Blob),
            "ring" => Ok(FamilyId::Ring),
            other => Err(Error::InvalidInput(format!(
                "unknown phantom family {other:?}"
            ))),
        }
    }
}

/// Generation parameters of a phantom family. Scales are fractions of the
/// image side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomFamily {
    pub id: FamilyId,
    /// Base intensity of the background gradient.
    pub base_range: (f64, f64),
    /// Total intensity change of the background across the image.
    pub gradient_range: (f64, f64),
    pub structure_count: (usize, usize),
    pub structure_scale: (f64, f64),
    pub amplitude_range: (f64, f64),
    /// Half-width of the uniform additive pixel noise.
    pub noise_amplitude: f64,
}

impl PhantomFamily {
    /// 3–8 isotropic Gaussian bumps.
    pub fn blob() -> Self {
        Self {
            id: FamilyId::Blob,
            base_range: (0.15, 0.3),
            gradient_range: (0.05, 0.2),
            structure_count: (3, 8),
            structure_scale: (0.08, 0.20),
            amplitude_range: (0.2, 0.5),
            noise_amplitude: 0.02,
        }
    }

    /// 1–3 smoothed elliptical shells.
    pub fn ring() -> Self {
        Self {
            id: FamilyId::Ring,
            base_range: (0.15, 0.3),
            gradient_range: (0.05, 0.2),
            structure_count: (1, 3),
            structure_scale: (0.15, 0.35),
            amplitude_range: (0.2, 0.5),
            noise_amplitude: 0.02,
        }
    }

    pub fn from_id(id: FamilyId) -> Self {
        match id {
            FamilyId::Blob => Self::blob(),
            FamilyId::Ring => Self::ring(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.1).contains(&self.noise_amplitude) {
            return Err(Error::InvalidInput(format!(
                "noise amplitude {} must lie in [0, 0.1)",
                self.noise_amplitude
            )));
        }
        let (n0, n1) = self.structure_count;
        let ranges = [
            self.base_range,
            self.gradient_range,
            self.structure_scale,
            self.amplitude_range,
        ];
        if n0 > n1 || ranges.iter().any(|(a, b)| !(a <= b) || *a < 0.0) {
            return Err(Error::InvalidInput(
                "phantom ranges must be ordered and nonnegative".into(),
            ));
        }
        Ok(())
    }
}

fn uniform(rng: &mut crate::rng::Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Deterministic phantom of side `size` for `(family, seed)`.
pub fn generate_phantom(family: &PhantomFamily, seed: u64, size: usize) -> Result<Image> {
    if size < MIN_IMAGE_SIDE {
        return Err(Error::InvalidInput(format!(
            "phantom size {size} is below the minimum {MIN_IMAGE_SIDE}"
        )));
    }
    family.validate()?;
    let mut rng = rng_from_seed(seed);
    let side = size as f64;

    let base = uniform(&mut rng, family.base_range);
    let slope = uniform(&mut rng, family.gradient_range);
    let theta = rng.random_range(0.0..2.0 * PI);
    let (st, ct) = theta.sin_cos();
    let mut field = Grid::from_fn(size, size, |r, c| {
        let y = r as f64 / side - 0.5;
        let x = c as f64 / side - 0.5;
        base + slope * (y * ct + x * st)
    });

    let (n0, n1) = family.structure_count;
    let count = rng.random_range(n0..=n1);
    for _ in 0..count {
        let amplitude = uniform(&mut rng, family.amplitude_range);
        match family.id {
            FamilyId::Blob => {
                let cy = rng.random_range(0.0..side);
                let cx = rng.random_range(0.0..side);
                let sigma = uniform(&mut rng, family.structure_scale) * side;
                let denom = 2.0 * sigma * sigma;
                for r in 0..size {
                    for c in 0..size {
                        let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
                        let v = field.get(r, c) + amplitude * (-d2 / denom).exp();
                        field.set(r, c, v);
                    }
                }
            }
            FamilyId::Ring => {
                let cy = rng.random_range(0.3 * side..0.7 * side);
                let cx = rng.random_range(0.3 * side..0.7 * side);
                let a = uniform(&mut rng, family.structure_scale) * side;
                let b = uniform(&mut rng, family.structure_scale) * side;
                let rot = rng.random_range(0.0..PI);
                let width = rng.random_range(0.02..0.05) * side;
                let (sr, cr) = rot.sin_cos();
                let mean_radius = 0.5 * (a + b);
                for r in 0..size {
                    for c in 0..size {
                        let (dy, dx) = (r as f64 - cy, c as f64 - cx);
                        let u = dy * cr + dx * sr;
                        let v = -dy * sr + dx * cr;
                        let rho = ((u / a).powi(2) + (v / b).powi(2)).sqrt();
                        let dist = (rho - 1.0) * mean_radius;
                        let shell = (-dist * dist / (2.0 * width * width)).exp();
                        field.set(r, c, field.get(r, c) + amplitude * shell);
                    }
                }
            }
        }
    }

    let (lo, hi) = (field.min(), field.max());
    if hi > STRUCTURE_CEILING {
        let scale = (STRUCTURE_CEILING - lo) / (hi - lo);
        field = field.map(|v| lo + (v - lo) * scale);
    }

    let amp = family.noise_amplitude;
    for v in field.as_mut_slice() {
        let n = if amp > 0.0 {
            rng.random_range(-amp..amp)
        } else {
            0.0
        };
        *v = (*v + n).clamp(0.0, 1.0);
    }
    let noisy = field;
    Image::from_grid(noisy)
}

/// Mean absolute forward difference per pixel (horizontal plus vertical).
pub fn total_variation_per_pixel(image: &Image) -> f64 {
    let (h, w) = (image.height(), image.width());
    let mut tv = 0.0;
    for r in 0..h {
        for c in 0..w {
            if c + 1 < w {
                tv += (image.get(r, c + 1) - image.get(r, c)).abs();
            }
            if r + 1 < h {
                tv += (image.get(r + 1, c) - image.get(r, c)).abs();
            }
        }
    }
    tv / (h * w) as f64
}
