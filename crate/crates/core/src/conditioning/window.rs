use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{shape_err, Result};

/// How slots from another episode (or from before the first stored step)
/// are filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Masking {
    None,
    Zero,
    FirstObs,
}

/// A context window of `M` slots ending at the current step.
///
/// Slot `n` holds the observation `o_n`, the action taken just before it and
/// the reward that arrived together with `o_n`. Both are zero at an episode
/// start.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryWindow {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub observations: Vec<f64>,
    pub prev_actions: Vec<f64>,
    pub rewards: Vec<f64>,
    /// False where the slot content was replaced by a masking fill.
    pub valid: Vec<bool>,
    /// True where the slot belongs to the episode of the last slot.
    pub in_episode: Vec<bool>,
}

impl HistoryWindow {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn obs(&self, n: usize) -> &[f64] {
        &self.observations[n * self.obs_dim..(n + 1) * self.obs_dim]
    }

    pub fn prev_action(&self, n: usize) -> &[f64] {
        &self.prev_actions[n * self.act_dim..(n + 1) * self.act_dim]
    }
}

/// One slot as stored, before masking.
#[derive(Clone, Copy, Debug)]
pub struct SlotSource<'a> {
    pub obs: &'a [f64],
    pub prev_action: &'a [f64],
    pub prev_reward: f64,
    pub episode: u64,
}

/// Builds a window from raw slots, oldest first; `None` marks a slot before
/// the start of recorded history. The last slot must be present and defines
/// the current episode.
pub fn assemble_window(
    obs_dim: usize,
    act_dim: usize,
    slots: &[Option<SlotSource>],
    masking: Masking,
) -> Result<HistoryWindow> {
    let Some(Some(last)) = slots.last() else {
        return shape_err("window needs a present final slot");
    };
    let episode = last.episode;
    let first_obs = slots
        .iter()
        .flatten()
        .find(|s| s.episode == episode)
        .map(|s| s.obs)
        .unwrap_or(last.obs);
    let m = slots.len();
    let mut w = HistoryWindow {
        obs_dim,
        act_dim,
        observations: Vec::with_capacity(m * obs_dim),
        prev_actions: Vec::with_capacity(m * act_dim),
        rewards: Vec::with_capacity(m),
        valid: Vec::with_capacity(m),
        in_episode: Vec::with_capacity(m),
    };
    for slot in slots {
        if let Some(s) = slot {
            if s.obs.len() != obs_dim || s.prev_action.len() != act_dim {
                return shape_err("slot dimensions do not match the window");
            }
        }
        let own = matches!(slot, Some(s) if s.episode == episode);
        w.in_episode.push(own);
        match (slot, own, masking) {
            (Some(s), true, _) | (Some(s), false, Masking::None) => {
                w.observations.extend_from_slice(s.obs);
                w.prev_actions.extend_from_slice(s.prev_action);
                w.rewards.push(s.prev_reward);
                w.valid.push(true);
            }
            (_, _, Masking::FirstObs) => {
                w.observations.extend_from_slice(first_obs);
                w.prev_actions.extend(std::iter::repeat_n(0.0, act_dim));
                w.rewards.push(0.0);
                w.valid.push(false);
            }
            _ => {
                w.observations.extend(std::iter::repeat_n(0.0, obs_dim));
                w.prev_actions.extend(std::iter::repeat_n(0.0, act_dim));
                w.rewards.push(0.0);
                w.valid.push(false);
            }
        }
    }
    Ok(w)
}

/// Windows of equal length stacked into batch tensors.
#[derive(Clone, Debug)]
pub struct WindowBatch {
    pub batch: usize,
    pub len: usize,
    pub obs_dim: usize,
    pub act_dim: usize,
    /// `[B, M, obs_dim]`
    pub observations: Tensor,
    /// `[B, M, act_dim]`
    pub prev_actions: Tensor,
    /// `[B, M, 1]`
    pub rewards: Tensor,
}

impl WindowBatch {
    pub fn stack(windows: &[HistoryWindow]) -> Result<Self> {
        let Some(first) = windows.first() else {
            return shape_err("cannot stack zero windows");
        };
        let (m, od, ad) = (first.len(), first.obs_dim, first.act_dim);
        if m == 0 {
            return shape_err("window length must be at least 1");
        }
        if windows.iter().any(|w| w.len() != m || w.obs_dim != od || w.act_dim != ad) {
            return shape_err("windows in a batch must share length and dimensions");
        }
        let b = windows.len();
        let observations = windows.iter().flat_map(|w| w.observations.iter().copied()).collect();
        let prev_actions = windows.iter().flat_map(|w| w.prev_actions.iter().copied()).collect();
        let rewards = windows.iter().flat_map(|w| w.rewards.iter().copied()).collect();
        Ok(Self {
            batch: b,
            len: m,
            obs_dim: od,
            act_dim: ad,
            observations: Tensor::new([b, m, od], observations)?,
            prev_actions: Tensor::new([b, m, ad], prev_actions)?,
            rewards: Tensor::new([b, m, 1], rewards)?,
        })
    }
}
