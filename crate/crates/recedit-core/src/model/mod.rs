//! Encoder-decoder sequence model with key/value FFN blocks.
//!
//! The encoder reads the interaction-history SID tokens; the decoder emits
//! the target item's SID digits autoregressively. All math is generic over
//! [`crate::num::Scalar`].

mod backward;
mod checkpoint;
mod forward;
mod incremental;
mod params;
mod train;

pub use backward::{next_token_loss, row_probability, BackwardOutput};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use forward::{
    ffn_apply, sites_for_all_layers, ActivationCapture, DecodeResult, EncodeResult, ForwardOpts,
    NormCache, OverrideSpec, RMS_EPS,
};
pub use incremental::{DecodeStream, DeltaWorkspace};
pub use params::{
    Activation, AttnWeights, DecoderLayer, EncoderLayer, FfnWeights, ModelConfig, ModelParams,
    Precision,
};
pub use train::{train, TrainConfig, TrainExample, TrainReport};

use crate::error::Result;
use crate::num::Scalar;

#[derive(Clone, Debug)]
pub struct Model<S> {
    pub cfg: ModelConfig,
    pub params: ModelParams<S>,
}

impl<S: Scalar> Model<S> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let params = ModelParams::init(&cfg);
        Ok(Model { cfg, params })
    }

    pub fn from_params(cfg: ModelConfig, params: ModelParams<S>) -> Result<Self> {
        cfg.validate()?;
        Ok(Model { cfg, params })
    }

    /// Cast every parameter to another scalar type.
    pub fn map_to<T: Scalar>(&self) -> Model<T> {
        Model { cfg: self.cfg.clone(), params: self.params.map_to() }
    }
}
