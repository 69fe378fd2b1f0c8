//! Vision and language encoders, projection heads, the cross-modal
//! attention encoder, and checkpoint serialization.

mod checkpoint;
mod cmae;
mod config;
mod language;
mod layers;
mod model;
mod params;
mod vision;

pub use checkpoint::{Checkpoint, MAGIC as CHECKPOINT_MAGIC, VERSION as CHECKPOINT_VERSION};
pub use cmae::{Cmae, CmaeBranch, CmaeLayer, FusedPair};
pub use config::{
    CmaeConfig, FeatureSource, LanguageEncoderConfig, ModelConfig, ProjectionConfig, VisionEncoderConfig,
};
pub use language::{frame_tokens, FramedTokens, LanguageEncoder};
pub use layers::{key_mask, sinusoidal_positions, FeedForward, Head, LayerNorm, Linear, MultiHeadAttention, TransformerBlock};
pub use model::{Architecture, BatchOutputs, Bound, EmbedSpec, GlobalDocModel, PairOutputs, ProjectionHead, UnimodalPath};
pub use params::{Binding, ParamGroup, ParamId, ParamStore};
pub use vision::{EncodedSequence, VisionEncoder};
