//! Seeded toy control tasks with optional observation masking.
//!
//! Constants (time steps, masses, reward weights, episode lengths) live in
//! the per-env modules and are fixed; acceptance baselines depend on them.

mod pendulum;
mod pointmass;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use pendulum::Pendulum;
pub use pointmass::PointMass;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvName {
    Pointmass,
    Pendulum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PomdpMask {
    #[default]
    Full,
    HideVelocity,
    HidePosition,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub max_steps: usize,
    pub dt: f64,
    /// Every reward lies in `reward_bounds.0 ..= reward_bounds.1`.
    pub reward_bounds: (f64, f64),
}

impl EnvSpec {
    /// Half-width of the action box, per dimension.
    pub fn action_scale(&self) -> Vec<f64> {
        self.action_low.iter().zip(&self.action_high).map(|(l, h)| 0.5 * (h - l)).collect()
    }

    pub fn clamp_action(&self, a: &mut [f64]) {
        for ((v, lo), hi) in a.iter_mut().zip(&self.action_low).zip(&self.action_high) {
            *v = v.clamp(*lo, *hi);
        }
    }
}

/// Full-state dynamics shared by the wrapper below.
pub trait Dynamics {
    /// Full observation width.
    fn full_obs_dim(&self) -> usize;
    fn act_dim(&self) -> usize;
    fn action_bounds(&self) -> (Vec<f64>, Vec<f64>);
    fn max_steps(&self) -> usize;
    fn dt(&self) -> f64;
    fn reward_bounds(&self) -> (f64, f64);
    fn reset(&mut self, rng: &mut ChaCha8Rng);
    /// Advances one step with an in-bounds action and returns the reward.
    fn advance(&mut self, action: &[f64]) -> f64;
    fn full_obs(&self) -> Vec<f64>;
    /// Observation indices kept by a mask, or `None` if it does not apply.
    fn mask_indices(&self, mask: PomdpMask) -> Option<Vec<usize>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    /// True termination. These tasks only truncate, so it stays false.
    pub terminal: bool,
}

/// An environment instance with episode bookkeeping and a POMDP projection.
pub struct Env {
    dynamics: Box<dyn Dynamics + Send>,
    mask: PomdpMask,
    keep: Vec<usize>,
    spec: EnvSpec,
    steps: usize,
    done: bool,
    started: bool,
}

impl Env {
    pub fn new(name: EnvName, mask: PomdpMask) -> Result<Self> {
        let dynamics: Box<dyn Dynamics + Send> = match name {
            EnvName::Pointmass => Box::new(PointMass::default()),
            EnvName::Pendulum => Box::new(Pendulum::default()),
        };
        Self::from_dynamics(dynamics, mask)
    }

    pub fn from_dynamics(dynamics: Box<dyn Dynamics + Send>, mask: PomdpMask) -> Result<Self> {
        let keep = dynamics
            .mask_indices(mask)
            .ok_or_else(|| Error::Config(format!("mask {mask:?} does not apply to this env")))?;
        let (action_low, action_high) = dynamics.action_bounds();
        let spec = EnvSpec {
            obs_dim: keep.len(),
            act_dim: dynamics.act_dim(),
            action_low,
            action_high,
            max_steps: dynamics.max_steps(),
            dt: dynamics.dt(),
            reward_bounds: dynamics.reward_bounds(),
        };
        Ok(Self { dynamics, mask, keep, spec, steps: 0, done: false, started: false })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn mask(&self) -> PomdpMask {
        self.mask
    }

    fn observe(&self) -> Vec<f64> {
        let full = self.dynamics.full_obs();
        self.keep.iter().map(|&i| full[i]).collect()
    }

    /// Unmasked observation of the current state.
    pub fn full_observation(&self) -> Vec<f64> {
        self.dynamics.full_obs()
    }

    pub fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.dynamics.reset(&mut rng);
        self.steps = 0;
        self.done = false;
        self.started = true;
        self.observe()
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if !self.started || self.done {
            return Err(Error::EpisodeDone);
        }
        if action.len() != self.spec.act_dim {
            return Err(Error::Shape(format!(
                "action has {} entries, env expects {}",
                action.len(),
                self.spec.act_dim
            )));
        }
        if action.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("action {action:?}")));
        }
        let mut a = action.to_vec();
        self.spec.clamp_action(&mut a);
        if a != action {
            log::warn!("action {action:?} clamped to {a:?}");
        }
        let reward = self.dynamics.advance(&a);
        self.steps += 1;
        self.done = self.steps >= self.spec.max_steps;
        Ok(StepResult { obs: self.observe(), reward, done: self.done, terminal: false })
    }
}
