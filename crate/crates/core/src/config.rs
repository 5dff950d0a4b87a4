//! Run configuration shared by every command.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::{EncoderConfig, FrozenEncoders};
use crate::error::{Error, Result};
use crate::model::AnomalyModel;
use crate::phantom::DatasetSpec;
use crate::rng::derive_seed;
use crate::synthesis::SynthesisConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub synthesis: SynthesisConfig,
    pub data: DatasetSpec,
    pub seed: u64,
    /// Seed of the frozen encoder weights, kept apart from `seed` so that
    /// runs with different seeds share one frozen backbone.
    pub encoder_seed: u64,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.train.validate()?;
        self.synthesis.validate()?;
        if self.data.size < crate::grid::MIN_IMAGE_SIDE {
            return Err(Error::Config(format!(
                "data.size {} below the minimum image side",
                self.data.size
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn build_encoders(&self) -> Result<Arc<FrozenEncoders>> {
        Ok(Arc::new(FrozenEncoders::init(
            &self.encoder,
            self.encoder_seed,
        )?))
    }

    /// Freshly initialized prompts and adapters for this run.
    pub fn init_model(&self, encoders: Arc<FrozenEncoders>) -> Result<AnomalyModel> {
        let mut model = AnomalyModel::init(
            encoders,
            self.train.prompt_tokens,
            self.train.temperature,
            derive_seed(self.seed, "model-init", 0),
        )?;
        model.snap_to_f32();
        Ok(model)
    }

    pub fn train_seed(&self) -> u64 {
        derive_seed(self.seed, "train", 0)
    }
}
