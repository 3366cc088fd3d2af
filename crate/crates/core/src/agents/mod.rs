//! TD3 over transformer or MLP backbones.

mod backbone;
mod config;
mod td3;

pub use backbone::{Backbone, CrossBody, MlpEncoder, SequenceBackbone, SequenceBody};
pub use config::{AgentConfig, BackboneKind, MlpBaselineConfig, SharingMode, Td3Config};
pub use td3::{
    clip_noise, global_grad_norm, param_count, perturb_action, soft_update, td3_target, Agent,
    Networks, TrainStats, UpdateStats,
};
