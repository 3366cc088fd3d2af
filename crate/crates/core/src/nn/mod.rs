//! Network building blocks on top of the tape.

mod attention;
mod layers;
mod params;
mod transformer;

pub use attention::{AttnOutput, CrossBlock, FeedForward, GptBlock, MultiHeadAttention};
pub use layers::{dropout, Activation, LayerNorm, Linear, Mlp};
pub use params::{Forward, ParamId, ParamStore};
pub use transformer::{
    ensure_batched, select_last_token, select_token, Transformer, TransformerConfig,
    TransformerOutput,
};
