//! Few-shot episode sampling, the Adam training loop over prompts and
//! adapters, and finite-difference gradient checking.

use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Image;
use crate::mask::AnomalyMask;
use crate::model::{AnomalyModel, Example, ParamGrad};
use crate::objective::{LossBreakdown, LossConfig};
use crate::prompt::{DEFAULT_PROMPT_TOKENS, DEFAULT_TEMPERATURE};
use crate::rng::{derive_seed, derived_rng};
use crate::synthesis::{SynthesisConfig, SynthesisTask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub p_empty: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub prompt_tokens: usize,
    pub temperature: f64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 8,
            learning_rate: 1e-3,
            p_empty: 0.2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            prompt_tokens: DEFAULT_PROMPT_TOKENS,
            temperature: DEFAULT_TEMPERATURE,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return err("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.p_empty) {
            return err(format!("p_empty {} outside [0, 1)", self.p_empty));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return err(format!(
                "learning rate {} must be positive",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return err("Adam decay rates must lie in [0, 1)".into());
        }
        if !(self.epsilon > 0.0) {
            return err("Adam epsilon must be positive".into());
        }
        if self.prompt_tokens == 0 {
            return err("prompt_tokens must be at least 1".into());
        }
        if !(self.temperature > 0.0) {
            return err(format!("temperature {} must be positive", self.temperature));
        }
        if !(self.loss.dice_eps > 0.0)
            || !(self.loss.focal_gamma >= 0.0)
            || !(self.loss.focal_alpha > 0.0)
        {
            return err("invalid loss hyperparameters".into());
        }
        Ok(())
    }
}

/// One synthesized (or untouched) support image at encoder resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub image: Image,
    pub mask: AnomalyMask,
    pub task: Option<SynthesisTask>,
}

fn check_support(support: &[Image]) -> Result<()> {
    let first = support
        .first()
        .ok_or_else(|| Error::InvalidInput("support set is empty".into()))?;
    if support
        .iter()
        .any(|x| x.height() != first.height() || x.width() != first.width())
    {
        return Err(Error::Shape("support images differ in size".into()));
    }
    Ok(())
}

/// Draws `batch` episodes. Element `i` depends only on `(seed, i)`.
pub fn sample_episode(
    support: &[Image],
    batch: usize,
    p_empty: f64,
    synthesis: &SynthesisConfig,
    image_size: usize,
    seed: u64,
) -> Result<Vec<Episode>> {
    check_support(support)?;
    (0..batch)
        .into_par_iter()
        .map(|i| {
            let mut rng = derived_rng(seed, "episode-element", i as u64);
            let x = &support[rng.random_range(0..support.len())];
            let (image, mask, task) = if rng.random_bool(p_empty) {
                (x.clone(), AnomalyMask::empty(x.height(), x.width()), None)
            } else {
                let task = synthesis.sample_task(&mut rng);
                let s = synthesis.synthesize_random(x, task, rng.random())?;
                (s.image, s.mask, Some(task))
            };
            Ok(Episode {
                image: image.resize_bilinear(image_size, image_size)?,
                mask: mask.resize_nearest(image_size, image_size),
                task,
            })
        })
        .collect()
}

fn encode_episodes(model: &AnomalyModel, episodes: Vec<Episode>) -> Result<Vec<Example>> {
    let images: Vec<Image> = episodes.iter().map(|e| e.image.clone()).collect();
    let features = model.encoders().encode_images(&images)?;
    Ok(features
        .into_iter()
        .zip(episodes)
        .map(|(features, e)| Example {
            features,
            mask: e.mask,
        })
        .collect())
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(grad_shape: &ParamGrad) -> Self {
        let zeros: Vec<Vec<f64>> = grad_shape
            .slices()
            .iter()
            .map(|s| vec![0.0; s.len()])
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, params: Vec<&mut [f64]>, grad: &ParamGrad, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (k, (p, g)) in params.into_iter().zip(grad.slices()).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                p[i] -= cfg.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.epsilon);
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<LossBreakdown>,
}

impl TrainReport {
    /// Mean total loss over steps `range`.
    pub fn window_mean(&self, range: std::ops::Range<usize>) -> f64 {
        let slice = &self.history[range];
        slice.iter().map(|l| l.total).sum::<f64>() / slice.len() as f64
    }

    /// Loss history as CSV with header `step,focal,dice,total`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("step,focal,dice,total\n");
        for (i, l) in self.history.iter().enumerate() {
            out.push_str(&format!("{i},{},{},{}\n", l.focal, l.dice, l.total));
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Optimizes prompts and adapters in place. The model's parameters are
/// rounded to `f32` before the first step and after every update.
pub fn train(
    model: &mut AnomalyModel,
    support: &[Image],
    cfg: &TrainConfig,
    synthesis: &SynthesisConfig,
    seed: u64,
) -> Result<TrainReport> {
    train_with_observer(model, support, cfg, synthesis, seed, |_, _| {})
}

pub fn train_with_observer(
    model: &mut AnomalyModel,
    support: &[Image],
    cfg: &TrainConfig,
    synthesis: &SynthesisConfig,
    seed: u64,
    mut observer: impl FnMut(usize, &LossBreakdown),
) -> Result<TrainReport> {
    cfg.validate()?;
    synthesis.validate()?;
    check_support(support)?;
    model.snap_to_f32();
    let mut report = TrainReport::default();
    let mut adam: Option<Adam> = None;
    for step in 0..cfg.steps {
        let episodes = sample_episode(
            support,
            cfg.batch_size,
            cfg.p_empty,
            synthesis,
            model.image_size(),
            derive_seed(seed, "episode", step as u64),
        )?;
        let batch = encode_episodes(model, episodes)?;
        let (loss, grad) = model.batch_loss_grad(&batch, &cfg.loss)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                focal: loss.focal,
                dice: loss.dice,
            });
        }
        observer(step, &loss);
        report.history.push(loss);
        adam.get_or_insert_with(|| Adam::new(&grad))
            .step(model.parameter_slices_mut(), &grad, cfg);
        model.snap_to_f32();
    }
    Ok(report)
}

/// A batch for gradient checking, drawn from the support set like training.
pub fn sample_batch(
    model: &AnomalyModel,
    support: &[Image],
    batch: usize,
    p_empty: f64,
    synthesis: &SynthesisConfig,
    seed: u64,
) -> Result<Vec<Example>> {
    let episodes = sample_episode(support, batch, p_empty, synthesis, model.image_size(), seed)?;
    encode_episodes(model, episodes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordinateCheck {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub step: f64,
    pub coordinates: Vec<CoordinateCheck>,
}

/// `|a − n| / max(|a|, |n|, 1e−8)`, or 0 when both are below 1e−10.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    if analytic.abs() < 1e-10 && numeric.abs() < 1e-10 {
        return 0.0;
    }
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Options for [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub coordinates: usize,
    pub step: f64,
    pub seed: u64,
    /// Test hook: perturbs the analytic gradient before comparison.
    pub corrupt_gradient: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            coordinates: 64,
            step: 1e-5,
            seed: 0,
            corrupt_gradient: false,
        }
    }
}

/// Central differences on sampled coordinates against the analytic gradient
/// of the mean batch loss. Coordinates are spread round-robin over tensors.
pub fn grad_check(
    model: &AnomalyModel,
    batch: &[Example],
    loss: &LossConfig,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if opts.coordinates == 0 || opts.coordinates > 64 {
        return Err(Error::InvalidInput(format!(
            "coordinate count {} outside 1..=64",
            opts.coordinates
        )));
    }
    if !(opts.step > 0.0) {
        return Err(Error::InvalidInput(
            "finite-difference step must be positive".into(),
        ));
    }
    let (_, mut grad) = model.batch_loss_grad(batch, loss)?;
    if opts.corrupt_gradient {
        for s in grad.slices_mut() {
            for v in s.iter_mut() {
                *v = *v * 1.5 + 1e-3;
            }
        }
    }
    let names: Vec<String> = model.tensors().into_iter().map(|(n, _, _)| n).collect();
    let lens: Vec<usize> = model.tensors().iter().map(|(_, _, v)| v.len()).collect();
    let mut rng = derived_rng(opts.seed, "gradcheck", 0);
    let picks: Vec<(usize, usize)> = (0..opts.coordinates)
        .map(|i| {
            let t = i % lens.len();
            (t, rng.random_range(0..lens[t]))
        })
        .collect();
    let grads = grad.slices();
    let coordinates = picks
        .into_par_iter()
        .map(|(t, idx)| {
            let eval = |delta: f64| -> Result<(f64, f64)> {
                let mut m = model.clone();
                m.parameter_slices_mut()[t][idx] += delta;
                m.batch_loss_terms(batch, loss)
            };
            let (plus, minus) = (eval(opts.step)?, eval(-opts.step)?);
            // differencing the overlap directly keeps the constant 1 of the
            // dice term out of the cancellation
            let numeric = ((plus.0 - minus.0) - (plus.1 - minus.1)) / (2.0 * opts.step);
            let analytic = grads[t][idx];
            Ok(CoordinateCheck {
                tensor: names[t].clone(),
                index: idx,
                analytic,
                numeric,
                rel_error: relative_error(analytic, numeric),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradCheckReport {
        max_rel_error: coordinates.iter().map(|c| c.rel_error).fold(0.0, f64::max),
        step: opts.step,
        coordinates,
    })
}
