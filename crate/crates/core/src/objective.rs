//! Training objective: focal loss on `[S_n, S_a]` plus dice loss on `S_a`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::mask::AnomalyMask;

pub const DEFAULT_FOCAL_GAMMA: f64 = 2.0;
pub const DEFAULT_FOCAL_ALPHA: f64 = 1.0;
pub const DEFAULT_DICE_EPS: f64 = 1.0;
/// Lower clamp on `p_t` before the logarithm.
pub const PROB_FLOOR: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub dice_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            focal_gamma: DEFAULT_FOCAL_GAMMA,
            focal_alpha: DEFAULT_FOCAL_ALPHA,
            dice_eps: DEFAULT_DICE_EPS,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub focal: f64,
    pub dice: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(focal: f64, dice: f64) -> Self {
        Self {
            focal,
            dice,
            total: focal + dice,
        }
    }
}

fn check(s_n: &Grid, s_a: &Grid, y: &AnomalyMask) -> Result<()> {
    let shape = (y.height(), y.width());
    if (s_n.height(), s_n.width()) != shape || (s_a.height(), s_a.width()) != shape {
        return Err(Error::Shape(format!(
            "maps {}x{} / {}x{} vs mask {}x{}",
            s_n.height(),
            s_n.width(),
            s_a.height(),
            s_a.width(),
            shape.0,
            shape.1
        )));
    }
    Ok(())
}

/// Mean over pixels of `-α (1-p_t)^γ ln p_t`.
pub fn focal_loss(s_n: &Grid, s_a: &Grid, y: &AnomalyMask, gamma: f64, alpha: f64) -> Result<f64> {
    check(s_n, s_a, y)?;
    let n = y.values().len();
    let sum = compensated_sum((0..n).map(|i| {
        let p = if y.values()[i] == 1 {
            s_a.as_slice()[i]
        } else {
            s_n.as_slice()[i]
        };
        let p = p.max(PROB_FLOOR);
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    }));
    Ok(sum / n as f64)
}

/// `1 − (2Σ S_a·Y + ε) / (Σ S_a + Σ Y + ε)`.
pub fn dice_loss(s_a: &Grid, y: &AnomalyMask, eps: f64) -> Result<f64> {
    if (s_a.height(), s_a.width()) != (y.height(), y.width()) {
        return Err(Error::Shape("dice map and mask differ in shape".into()));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidInput(format!(
            "dice smoothing must be positive, got {eps}"
        )));
    }
    Ok(1.0 - dice_overlap(s_a, y, eps))
}

/// The soft overlap ratio `(2Σ S_a·Y + ε) / (Σ S_a + Σ Y + ε)`; dice loss is
/// one minus this.
pub fn dice_overlap(s_a: &Grid, y: &AnomalyMask, eps: f64) -> f64 {
    let (inter, sum_s, sum_y) = dice_sums(s_a, y);
    (2.0 * inter + eps) / (sum_s + sum_y + eps)
}

fn dice_sums(s_a: &Grid, y: &AnomalyMask) -> (f64, f64, f64) {
    let pairs = || s_a.as_slice().iter().zip(y.values());
    let inter = compensated_sum(pairs().filter(|(_, &m)| m == 1).map(|(s, _)| *s));
    let sum_s = compensated_sum(s_a.as_slice().iter().copied());
    (inter, sum_s, y.count() as f64)
}

/// Neumaier summation.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

pub fn total_loss(s_n: &Grid, s_a: &Grid, y: &AnomalyMask) -> Result<LossBreakdown> {
    total_loss_with(s_n, s_a, y, &LossConfig::default())
}

pub fn total_loss_with(
    s_n: &Grid,
    s_a: &Grid,
    y: &AnomalyMask,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    Ok(LossBreakdown::new(
        focal_loss(s_n, s_a, y, cfg.focal_gamma, cfg.focal_alpha)?,
        dice_loss(s_a, y, cfg.dice_eps)?,
    ))
}

/// Loss value with gradients on both maps.
pub struct LossGrad {
    pub loss: LossBreakdown,
    pub d_normal: Grid,
    pub d_anomaly: Grid,
}

/// [`total_loss_with`] plus `∂L/∂S_n` and `∂L/∂S_a`.
pub fn total_loss_grad(
    s_n: &Grid,
    s_a: &Grid,
    y: &AnomalyMask,
    cfg: &LossConfig,
) -> Result<LossGrad> {
    let loss = total_loss_with(s_n, s_a, y, cfg)?;
    let (h, w) = (y.height(), y.width());
    let n = (h * w) as f64;
    let (gamma, alpha) = (cfg.focal_gamma, cfg.focal_alpha);
    let mut d_normal = Grid::zeros(h, w);
    let mut d_anomaly = Grid::zeros(h, w);

    for (i, &m) in y.values().iter().enumerate() {
        let raw = if m == 1 {
            s_a.as_slice()[i]
        } else {
            s_n.as_slice()[i]
        };
        // the clamp has zero derivative below the floor
        let d = if raw > PROB_FLOOR {
            let q = 1.0 - raw;
            let term = if gamma == 0.0 {
                0.0
            } else {
                gamma * q.powf(gamma - 1.0) * raw.ln()
            };
            alpha * (term - q.powf(gamma) / raw) / n
        } else {
            0.0
        };
        if m == 1 {
            d_anomaly.as_mut_slice()[i] = d;
        } else {
            d_normal.as_mut_slice()[i] = d;
        }
    }

    let (inter, sum_s, sum_y) = dice_sums(s_a, y);
    let num = 2.0 * inter + cfg.dice_eps;
    let den = sum_s + sum_y + cfg.dice_eps;
    let d_in = -2.0 / den;
    let d_any = num / (den * den);
    for (g, &m) in d_anomaly.as_mut_slice().iter_mut().zip(y.values()) {
        *g += d_any + if m == 1 { d_in } else { 0.0 };
    }
    Ok(LossGrad {
        loss,
        d_normal,
        d_anomaly,
    })
}
