use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agents::{AgentConfig, BackboneKind};
use crate::envs::{EnvName, PomdpMask};
use crate::error::{Error, Result};
use crate::replay::SliceSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub name: EnvName,
    pub mask: PomdpMask,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self { name: EnvName::Pointmass, mask: PomdpMask::Full }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub total_steps: usize,
    pub eval_interval: usize,
    pub eval_seeds: usize,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Writes elapsed milliseconds into `wall_ms`. Off by default so that
    /// metrics files are byte-reproducible.
    pub record_wall_clock: bool,
    /// Also writes the final replay contents as a CSV snapshot.
    pub save_replay: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            total_steps: 100_000,
            eval_interval: 2000,
            eval_seeds: 100,
            seeds: vec![1, 2, 3],
            out_dir: PathBuf::from("runs"),
            record_wall_clock: false,
            save_replay: false,
        }
    }
}

/// One experiment: environment, agent, slicing and run schedule.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub slice: SliceSpec,
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.agent.validate()?;
        self.slice.validate()?;
        if self.agent.backbone == BackboneKind::Transformer
            && self.agent.transformer.context_len != self.slice.context
        {
            return Err(Error::Config(format!(
                "transformer context_len {} differs from slice context {}",
                self.agent.transformer.context_len, self.slice.context
            )));
        }
        if self.run.eval_interval == 0 {
            return Err(Error::Config("eval_interval must be positive".into()));
        }
        if self.run.eval_seeds < 2 {
            return Err(Error::Config("eval_seeds must be at least 2".into()));
        }
        if self.run.seeds.is_empty() {
            return Err(Error::Config("at least one run seed is needed".into()));
        }
        Ok(())
    }

    /// Sets both the slicing context and the transformer context.
    pub fn set_context(&mut self, context: usize) {
        self.slice.context = context;
        self.agent.transformer.context_len = context;
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }
}
