//! Learnable layers and the score network.

pub mod attention;
pub mod embedding;
pub mod network;
pub mod params;
pub mod spectral;

pub use attention::{attention_core, token_norm};
pub use embedding::{time_embedding, TimeEmbeddingConfig};
pub use network::{
    attn_no_forward, fno_layer, galerkin_attention, gated_fusion, score_net, Conditioning,
};
pub use params::{
    AttnLayerParams, Conv, Encoder, FnoLayerParams, FusionParams, NormParams, ResBlock, ScoreNet,
    ScoreNetConfig, ScoreNetParams, SpectralParams, TimeConditioning,
};
pub use spectral::{mode_weight, spectral_conv, spectral_conv_complex, spectral_upsample, SpectralFilter};
