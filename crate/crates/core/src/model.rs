//! The trainable detector: frozen encoders, a prompt bank and one adapter per
//! tapped layer. Runs the forward pipeline and the batch backward pass.

use std::sync::Arc;

use ndarray::{Array1, Array2};
use rayon::prelude::*;

use crate::encoders::{FeaturePyramid, FrozenEncoders};
use crate::error::{Error, Result};
use crate::grid::{Grid, Image};
use crate::mask::AnomalyMask;
use crate::objective::{
    dice_overlap, focal_loss, total_loss_grad, total_loss_with, LossBreakdown, LossConfig,
};
use crate::prompt::{
    adapt, adapter_backward, aggregate, aggregate_backward, mean_text_features,
    similarity_backward, similarity_maps, Adapter, PromptBank, SimilarityMaps, TextFeatures,
};
use crate::rng::derive_seed;

pub const PROMPT_TENSOR: &str = "prompts";

/// Name of the weight or bias tensor of adapter `j`.
pub fn adapter_tensor(j: usize, bias: bool) -> String {
    format!("adapter.{j}.{}", if bias { "bias" } else { "weight" })
}

#[derive(Clone, Debug)]
pub struct AnomalyModel {
    encoders: Arc<FrozenEncoders>,
    bank: PromptBank,
    adapters: Vec<Adapter>,
    temperature: f64,
}

/// Gradients laid out like the model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrad {
    pub prompts: Array2<f64>,
    pub adapters: Vec<Adapter>,
}

impl ParamGrad {
    fn zeros_like(model: &AnomalyModel) -> Self {
        Self {
            prompts: Array2::zeros(model.bank.learnable().raw_dim()),
            adapters: model
                .adapters
                .iter()
                .map(|a| Adapter {
                    weight: Array2::zeros(a.weight.raw_dim()),
                    bias: Array1::zeros(a.bias.raw_dim()),
                })
                .collect(),
        }
    }

    /// Flat views in parameter order: prompts, then weight and bias per adapter.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = vec![self.prompts.as_slice().expect("standard layout")];
        for a in &self.adapters {
            out.push(a.weight.as_slice().expect("standard layout"));
            out.push(a.bias.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.prompts.as_slice_mut().expect("standard layout")];
        for a in &mut self.adapters {
            out.push(a.weight.as_slice_mut().expect("standard layout"));
            out.push(a.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }
}

/// One training or validation example: tapped features and target mask.
pub struct Example {
    pub features: FeaturePyramid,
    pub mask: AnomalyMask,
}

impl AnomalyModel {
    /// Fresh prompts and adapters drawn from `seed`.
    pub fn init(
        encoders: Arc<FrozenEncoders>,
        prompt_tokens: usize,
        temperature: f64,
        seed: u64,
    ) -> Result<Self> {
        let bank = PromptBank::new(&encoders, prompt_tokens, derive_seed(seed, "prompts", 0))?;
        let cfg = encoders.config();
        let adapters = (0..cfg.tap_layers.len())
            .map(|j| {
                Adapter::init(
                    cfg.vision_dim,
                    cfg.feature_dim,
                    derive_seed(seed, "adapter", j as u64),
                )
            })
            .collect();
        Self::from_parts(encoders, bank, adapters, temperature)
    }

    pub fn from_parts(
        encoders: Arc<FrozenEncoders>,
        bank: PromptBank,
        adapters: Vec<Adapter>,
        temperature: f64,
    ) -> Result<Self> {
        let cfg = encoders.config();
        if adapters.len() != cfg.tap_layers.len() {
            return Err(Error::Shape(format!(
                "{} adapters for {} tapped layers",
                adapters.len(),
                cfg.tap_layers.len()
            )));
        }
        for a in &adapters {
            if a.input_dim() != cfg.vision_dim
                || a.output_dim() != cfg.feature_dim
                || a.bias.len() != cfg.feature_dim
            {
                return Err(Error::Shape(format!(
                    "adapter {}x{} does not map {} to {}",
                    a.output_dim(),
                    a.input_dim(),
                    cfg.vision_dim,
                    cfg.feature_dim
                )));
            }
        }
        if bank.learnable().ncols() != cfg.text_dim {
            return Err(Error::Shape("prompt width differs from text width".into()));
        }
        if !(temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(Self {
            encoders,
            bank,
            adapters,
            temperature,
        })
    }

    pub fn encoders(&self) -> &Arc<FrozenEncoders> {
        &self.encoders
    }

    pub fn bank(&self) -> &PromptBank {
        &self.bank
    }

    pub fn bank_mut(&mut self) -> &mut PromptBank {
        &mut self.bank
    }

    pub fn adapters(&self) -> &[Adapter] {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut [Adapter] {
        &mut self.adapters
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn image_size(&self) -> usize {
        self.encoders.config().image_size
    }

    /// Named tensors in parameter order with their shapes.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let p = self.bank.learnable();
        let mut out = vec![(
            PROMPT_TENSOR.to_string(),
            p.shape().to_vec(),
            p.as_slice().expect("standard layout"),
        )];
        for (j, a) in self.adapters.iter().enumerate() {
            out.push((
                adapter_tensor(j, false),
                a.weight.shape().to_vec(),
                a.weight.as_slice().expect("standard layout"),
            ));
            out.push((
                adapter_tensor(j, true),
                a.bias.shape().to_vec(),
                a.bias.as_slice().expect("standard layout"),
            ));
        }
        out
    }

    pub fn parameter_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self
            .bank
            .learnable_mut()
            .as_slice_mut()
            .expect("standard layout")];
        for a in &mut self.adapters {
            out.push(a.weight.as_slice_mut().expect("standard layout"));
            out.push(a.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, v)| v.len()).sum()
    }

    /// Rounds every trainable value to the nearest `f32`, so checkpoints
    /// stored in single precision reproduce the model exactly.
    pub fn snap_to_f32(&mut self) {
        for s in self.parameter_slices_mut() {
            for v in s.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn text_features(&self) -> Result<TextFeatures> {
        mean_text_features(&self.bank, &self.encoders)
    }

    /// Aggregated maps for precomputed features.
    pub fn maps_from_features(
        &self,
        features: &FeaturePyramid,
        text: &TextFeatures,
    ) -> Result<SimilarityMaps> {
        Ok(self.forward(features, text)?.0)
    }

    fn forward(
        &self,
        features: &FeaturePyramid,
        text: &TextFeatures,
    ) -> Result<(SimilarityMaps, Vec<LayerCache>)> {
        if features.len() != self.adapters.len() {
            return Err(Error::Shape(format!(
                "{} feature layers for {} adapters",
                features.len(),
                self.adapters.len()
            )));
        }
        let mut layers = Vec::with_capacity(features.len());
        let mut caches = Vec::with_capacity(features.len());
        for (g_raw, adapter) in features.iter().zip(&self.adapters) {
            let g = adapt(g_raw, adapter)?;
            let maps = similarity_maps(&g, &text.normal, &text.anomaly, self.temperature)?;
            layers.push(maps.clone());
            caches.push(LayerCache { adapted: g, maps });
        }
        let size = self.image_size();
        Ok((aggregate(&layers, size, size)?, caches))
    }

    /// `S_n`, `S_a` for a query image at the encoder input size.
    pub fn anomaly_maps(&self, image: &Image) -> Result<SimilarityMaps> {
        let features = self.encoders.encode_image_multiscale(image)?;
        self.maps_from_features(&features, &self.text_features()?)
    }

    /// Mean batch loss, forward only.
    pub fn batch_loss(&self, batch: &[Example], loss: &LossConfig) -> Result<LossBreakdown> {
        let text = self.text_features()?;
        let parts: Vec<LossBreakdown> = batch
            .par_iter()
            .map(|ex| {
                let maps = self.maps_from_features(&ex.features, &text)?;
                total_loss_with(&maps.normal, &maps.anomaly, &ex.mask, loss)
            })
            .collect::<Result<_>>()?;
        Ok(mean_loss(&parts))
    }

    /// Mean focal loss and mean dice overlap over the batch; the total loss
    /// is `focal + 1 − overlap`.
    pub fn batch_loss_terms(&self, batch: &[Example], loss: &LossConfig) -> Result<(f64, f64)> {
        let text = self.text_features()?;
        let parts: Vec<(f64, f64)> = batch
            .par_iter()
            .map(|ex| {
                let maps = self.maps_from_features(&ex.features, &text)?;
                Ok((
                    focal_loss(
                        &maps.normal,
                        &maps.anomaly,
                        &ex.mask,
                        loss.focal_gamma,
                        loss.focal_alpha,
                    )?,
                    dice_overlap(&maps.anomaly, &ex.mask, loss.dice_eps),
                ))
            })
            .collect::<Result<_>>()?;
        let n = parts.len() as f64;
        Ok((
            parts.iter().map(|p| p.0).sum::<f64>() / n,
            parts.iter().map(|p| p.1).sum::<f64>() / n,
        ))
    }

    /// Mean batch loss and its gradient with respect to every trainable tensor.
    pub fn batch_loss_grad(
        &self,
        batch: &[Example],
        loss: &LossConfig,
    ) -> Result<(LossBreakdown, ParamGrad)> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let text = self.text_features()?;
        let scale = 1.0 / batch.len() as f64;
        let parts: Vec<(LossBreakdown, ParamGrad, Array1<f64>, Array1<f64>)> = batch
            .par_iter()
            .map(|ex| self.example_grad(ex, &text, loss, scale))
            .collect::<Result<_>>()?;

        let mut grad = ParamGrad::zeros_like(self);
        let c = self.encoders.config().feature_dim;
        let mut d_fn = Array1::zeros(c);
        let mut d_fa = Array1::zeros(c);
        let mut losses = Vec::with_capacity(parts.len());
        for (l, g, dn, da) in parts {
            losses.push(l);
            for (acc, part) in grad.adapters.iter_mut().zip(&g.adapters) {
                acc.weight += &part.weight;
                acc.bias += &part.bias;
            }
            d_fn += &dn;
            d_fa += &da;
        }
        grad.prompts = text.backward(&self.encoders, self.bank.tokens(), &d_fn, &d_fa);
        Ok((mean_loss(&losses), grad))
    }

    fn example_grad(
        &self,
        ex: &Example,
        text: &TextFeatures,
        loss: &LossConfig,
        scale: f64,
    ) -> Result<(LossBreakdown, ParamGrad, Array1<f64>, Array1<f64>)> {
        let (maps, caches) = self.forward(&ex.features, text)?;
        let lg = total_loss_grad(&maps.normal, &maps.anomaly, &ex.mask, loss)?;
        let d_n: Grid = lg.d_normal.map(|v| v * scale);
        let d_a: Grid = lg.d_anomaly.map(|v| v * scale);
        let j = caches.len();
        let c = self.encoders.config().feature_dim;
        let mut d_fn = Array1::zeros(c);
        let mut d_fa = Array1::zeros(c);
        let mut adapters = Vec::with_capacity(j);
        for (cache, g_raw) in caches.iter().zip(&ex.features) {
            let (h, w) = (g_raw.height, g_raw.width);
            let dn_j = aggregate_backward(&d_n, h, w, j);
            let da_j = aggregate_backward(&d_a, h, w, j);
            let sg = similarity_backward(
                &cache.adapted,
                &text.normal,
                &text.anomaly,
                self.temperature,
                &cache.maps,
                &dn_j,
                &da_j,
            );
            let (weight, bias) = adapter_backward(g_raw, &sg.d_features);
            adapters.push(Adapter { weight, bias });
            d_fn += &sg.d_normal;
            d_fa += &sg.d_anomaly;
        }
        let grad = ParamGrad {
            prompts: Array2::zeros((0, 0)),
            adapters,
        };
        Ok((lg.loss, grad, d_fn, d_fa))
    }
}

struct LayerCache {
    adapted: crate::encoders::FeatureMap,
    maps: SimilarityMaps,
}

fn mean_loss(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len() as f64;
    let focal = parts.iter().map(|l| l.focal).sum::<f64>() / n;
    let dice = parts.iter().map(|l| l.dice).sum::<f64>() / n;
    LossBreakdown::new(focal, dice)
}
