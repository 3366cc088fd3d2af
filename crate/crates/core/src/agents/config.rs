use serde::{Deserialize, Serialize};

use crate::conditioning::Strategy;
use crate::error::{Error, Result};
use crate::nn::TransformerConfig;

/// TD3 hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Td3Config {
    pub gamma: f64,
    pub tau: f64,
    pub policy_noise: f64,
    pub noise_clip: f64,
    pub exploration_noise: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub learning_starts: usize,
    pub policy_delay: usize,
    pub buffer_size: usize,
}

impl Default for Td3Config {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.005,
            policy_noise: 0.2,
            noise_clip: 0.5,
            exploration_noise: 0.1,
            batch_size: 256,
            lr: 3e-4,
            learning_starts: 25_000,
            policy_delay: 2,
            buffer_size: 1_500_000,
        }
    }
}

impl Td3Config {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if !(self.noise_clip >= 0.0) || !(self.policy_noise >= 0.0) || !(self.exploration_noise >= 0.0) {
            return bad("noise scales must be non-negative");
        }
        if self.policy_delay == 0 {
            return bad("policy_delay must be at least 1");
        }
        if self.batch_size == 0 || self.buffer_size == 0 {
            return bad("batch_size and buffer_size must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        Ok(())
    }
}

/// How the actor and the critic hold their backbone.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharingMode {
    #[default]
    Separate,
    /// One backbone; critic gradients stop at its output.
    SharedFrozen,
    /// One backbone trained by both losses.
    SharedUnfrozen,
}

impl SharingMode {
    pub fn is_shared(self) -> bool {
        self != SharingMode::Separate
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SharingMode::Separate => "separate",
            SharingMode::SharedFrozen => "shared_frozen",
            SharingMode::SharedUnfrozen => "shared_unfrozen",
        }
    }
}

impl std::str::FromStr for SharingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "separate" => Ok(SharingMode::Separate),
            "shared_frozen" => Ok(SharingMode::SharedFrozen),
            "shared_unfrozen" => Ok(SharingMode::SharedUnfrozen),
            other => Err(Error::Config(format!("unknown sharing mode `{other}`"))),
        }
    }
}

/// MLP agent: an `obs -> hidden` encoder layer followed by `layers - 1`
/// further hidden layers in each head. With `layers = 2, hidden = 256` the
/// actor is the usual `obs -> 256 -> 256 -> act` network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpBaselineConfig {
    pub hidden: usize,
    pub layers: usize,
}

impl Default for MlpBaselineConfig {
    fn default() -> Self {
        Self { hidden: 256, layers: 2 }
    }
}

impl MlpBaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.layers == 0 {
            return Err(Error::Config("mlp needs at least one hidden layer of nonzero width".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    #[default]
    Transformer,
    Mlp,
}

/// Everything needed to build an agent for given observation/action sizes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub backbone: BackboneKind,
    pub strategy: Strategy,
    pub sharing: SharingMode,
    pub transformer: TransformerConfig,
    pub mlp: MlpBaselineConfig,
    pub td3: Td3Config,
    /// Hidden width of the transformer critic heads; `d_model` when unset.
    pub critic_hidden: Option<usize>,
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        self.td3.validate()?;
        if self.critic_hidden == Some(0) {
            return Err(Error::Config("critic_hidden must be positive".into()));
        }
        match self.backbone {
            BackboneKind::Transformer => self.transformer.validate(),
            BackboneKind::Mlp => self.mlp.validate(),
        }
    }

    /// Width of the features the heads see.
    pub fn feature_dim(&self) -> usize {
        match self.backbone {
            BackboneKind::Transformer => self.transformer.d_model,
            BackboneKind::Mlp => self.mlp.hidden,
        }
    }
}
