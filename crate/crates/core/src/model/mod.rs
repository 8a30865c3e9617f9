//! Encoder-decoder Transformer with vanilla or recurrently stacked layers.

mod config;
mod forward;
mod weights;

pub use config::{
    count_parameters, decoder_layer_params, encoder_layer_params, ModelConfig, StackingMode,
};
pub use forward::{
    decode_forward, encode, training_loss, Decoded, Encoded, ForwardCtx, LAYER_NORM_EPS,
};
pub use weights::{
    build_model, build_shapes, AttentionWeights, FeedForwardWeights, LayerWeights, ModelVars,
    ModelWeights, NormWeights,
};
