//! Checkpoint files: magic bytes, a length-prefixed JSON header, then one
//! little-endian `f32` blob per named tensor.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderConfig, FrozenEncoders};
use crate::error::{Error, Result};
use crate::model::{adapter_tensor, AnomalyModel, PROMPT_TENSOR};
use crate::phantom::FamilyId;
use crate::prompt::{Adapter, PromptBank};

pub const MAGIC: &[u8; 8] = b"FSADCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Number of `f32` values in the blob.
    pub len: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub steps: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub family: Option<FamilyId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_history: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub encoder: EncoderConfig,
    pub encoder_seed: u64,
    pub encoder_digest: String,
    pub temperature: f64,
    pub normal_classes: Vec<String>,
    pub anomaly_classes: Vec<String>,
    pub tensors: Vec<TensorEntry>,
    pub meta: CheckpointMeta,
}

/// A parsed checkpoint; tensors are widened to `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Vec<f64>>,
}

pub fn save_checkpoint(
    model: &AnomalyModel,
    meta: &CheckpointMeta,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let tensors = model.tensors();
    let enc = model.encoders();
    let header = CheckpointHeader {
        version: FORMAT_VERSION,
        encoder: enc.config().clone(),
        encoder_seed: enc.seed(),
        encoder_digest: enc.digest().to_string(),
        temperature: model.temperature(),
        normal_classes: model
            .bank()
            .normal_classes()
            .iter()
            .map(|c| c.phrase.clone())
            .collect(),
        anomaly_classes: model
            .bank()
            .anomaly_classes()
            .iter()
            .map(|c| c.phrase.clone())
            .collect(),
        tensors: tensors
            .iter()
            .map(|(name, shape, v)| TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
                len: v.len(),
            })
            .collect(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 4 * model.parameter_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, values) in &tensors {
        for &v in *values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

impl Checkpoint {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&bytes).map_err(|reason| Error::format(path, reason))
    }

    fn parse(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err("not a checkpoint file".into());
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if body.len() < header_len {
            return Err("truncated header".into());
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&body[..header_len]).map_err(|e| format!("bad header: {e}"))?;
        if header.version != FORMAT_VERSION {
            return Err(format!("unsupported format version {}", header.version));
        }
        let mut blob = &body[header_len..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for t in &header.tensors {
            if t.shape.iter().product::<usize>() != t.len {
                return Err(format!(
                    "tensor {} declares shape {:?} but length {}",
                    t.name, t.shape, t.len
                ));
            }
            let n = t.len.checked_mul(4).ok_or("tensor length overflow")?;
            if blob.len() < n {
                return Err(format!("truncated tensor {}", t.name));
            }
            let values = blob[..n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            tensors.push(values);
            blob = &blob[n..];
        }
        if !blob.is_empty() {
            return Err(format!("{} trailing bytes", blob.len()));
        }
        Ok(Self { header, tensors })
    }

    fn tensor(&self, name: &str, shape: &[usize]) -> Result<&[f64]> {
        let i = self
            .header
            .tensors
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| Error::Incompatible(format!("checkpoint has no tensor {name}")))?;
        if self.header.tensors[i].shape != shape {
            return Err(Error::Incompatible(format!(
                "tensor {name} has shape {:?}, expected {shape:?}",
                self.header.tensors[i].shape
            )));
        }
        Ok(&self.tensors[i])
    }

    /// Rebuilds the model on `encoders`, which must match the recorded
    /// configuration and weight digest.
    pub fn into_model(&self, encoders: Arc<FrozenEncoders>) -> Result<AnomalyModel> {
        let h = &self.header;
        if encoders.config() != &h.encoder || encoders.digest() != h.encoder_digest {
            return Err(Error::Incompatible(format!(
                "encoder digest {} does not match checkpoint digest {}",
                encoders.digest(),
                h.encoder_digest
            )));
        }
        let cfg = encoders.config().clone();
        let prompt_shape = self
            .header
            .tensors
            .iter()
            .find(|t| t.name == PROMPT_TENSOR)
            .map(|t| t.shape.clone())
            .ok_or_else(|| Error::Incompatible("checkpoint has no prompt tensor".into()))?;
        if prompt_shape.len() != 2 || prompt_shape[1] != cfg.text_dim {
            return Err(Error::Incompatible(format!(
                "prompt tensor shape {prompt_shape:?}"
            )));
        }
        let normal: Vec<&str> = h.normal_classes.iter().map(String::as_str).collect();
        let anomaly: Vec<&str> = h.anomaly_classes.iter().map(String::as_str).collect();
        let mut bank = PromptBank::with_classes(&encoders, prompt_shape[0], 0, &normal, &anomaly)?;
        let prompts = self.tensor(PROMPT_TENSOR, &prompt_shape)?;
        bank.set_learnable(
            Array2::from_shape_vec((prompt_shape[0], prompt_shape[1]), prompts.to_vec())
                .expect("shape checked"),
        )?;
        let mut adapters = Vec::with_capacity(cfg.tap_layers.len());
        for j in 0..cfg.tap_layers.len() {
            let w = self.tensor(
                &adapter_tensor(j, false),
                &[cfg.feature_dim, cfg.vision_dim],
            )?;
            let b = self.tensor(&adapter_tensor(j, true), &[cfg.feature_dim])?;
            adapters.push(Adapter {
                weight: Array2::from_shape_vec((cfg.feature_dim, cfg.vision_dim), w.to_vec())
                    .expect("shape checked"),
                bias: Array1::from(b.to_vec()),
            });
        }
        AnomalyModel::from_parts(encoders, bank, adapters, h.temperature)
    }
}

/// Reads a checkpoint and rebuilds the frozen encoders it was trained with.
/// The recomputed weight digest must equal the recorded one.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(AnomalyModel, CheckpointMeta)> {
    let ckpt = Checkpoint::read(path)?;
    let encoders = Arc::new(FrozenEncoders::init(
        &ckpt.header.encoder,
        ckpt.header.encoder_seed,
    )?);
    let model = ckpt.into_model(encoders)?;
    Ok((model, ckpt.header.meta))
}
