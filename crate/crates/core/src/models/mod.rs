//! Network assemblies: a pluggable per-frame feature extractor, the
//! single-image head and the LSTM causality extractor.

mod capnet;
mod extractor;
mod feature_cache;
mod fer;
mod tiny_cnn;

pub use capnet::{BatchStep, CapNet, CapnetCache, CausalityExtractor, ModelHeader};
pub(crate) use capnet::check_dims;
pub use extractor::{load_frame_tensor, Extractor, ExtractorKind, FeatureExtractor, FeatureTable, FrameInput};
pub use feature_cache::{manifest_path, FeatureCache, FEATURE_CACHE_MAGIC, FEATURE_CACHE_VERSION};
pub use fer::{FerModel, HeadStep};
pub use tiny_cnn::{CnnCache, TinyCnn, CNN_WIDTHS};

use crate::error::{Error, Result};

/// Input side length the models are configured for.
pub const IMAGE_SIZE: usize = 224;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Square input side; fixed at [`IMAGE_SIZE`] for full runs.
    pub image_size: usize,
    pub feature_dim: usize,
    pub lstm_hidden: usize,
    pub fc_hidden: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: IMAGE_SIZE,
            feature_dim: 32,
            lstm_hidden: 64,
            fc_hidden: 64,
            dropout: 0.2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size != IMAGE_SIZE {
            return Err(Error::Config(format!(
                "model.image_size must be {IMAGE_SIZE}, got {}",
                self.image_size
            )));
        }
        for (name, v) in [
            ("model.feature_dim", self.feature_dim),
            ("model.lstm_hidden", self.lstm_hidden),
            ("model.fc_hidden", self.fc_hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("model.dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}
