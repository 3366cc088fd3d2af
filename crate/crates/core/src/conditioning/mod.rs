//! Turning (observation, action, reward) histories into token sequences.

mod strategy;
mod window;

pub use strategy::{
    build_cross_attn_inputs, build_embed_concat, build_interleaved, build_obs_only, build_tokens,
    embed_concat_prefusion, Encoders, Modality, Strategy, TokenSequence,
};
pub use window::{assemble_window, HistoryWindow, Masking, SlotSource, WindowBatch};
