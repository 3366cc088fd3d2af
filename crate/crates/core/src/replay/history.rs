use std::collections::VecDeque;

use super::store::{SliceMode, SliceSpec};
use crate::conditioning::{assemble_window, HistoryWindow, SlotSource};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
struct Slot {
    obs: Vec<f64>,
    prev_action: Vec<f64>,
    prev_reward: f64,
    episode: u64,
}

/// Recent slots of one environment stream, used to build acting windows
/// with the same rules as the replay store.
#[derive(Clone, Debug)]
pub struct RollingHistory {
    obs_dim: usize,
    act_dim: usize,
    spec: SliceSpec,
    slots: VecDeque<Slot>,
    episode: u64,
    started: bool,
}

impl RollingHistory {
    pub fn new(obs_dim: usize, act_dim: usize, spec: SliceSpec) -> Self {
        Self {
            obs_dim,
            act_dim,
            spec,
            slots: VecDeque::with_capacity(spec.context + 1),
            episode: 0,
            started: false,
        }
    }

    fn push(&mut self, slot: Slot) {
        if self.slots.len() == self.spec.context {
            self.slots.pop_front();
        }
        self.slots.push_back(slot);
    }

    /// First observation of a new episode.
    pub fn reset(&mut self, obs: &[f64]) {
        if self.started {
            self.episode += 1;
        }
        self.started = true;
        self.push(Slot {
            obs: obs.to_vec(),
            prev_action: vec![0.0; self.act_dim],
            prev_reward: 0.0,
            episode: self.episode,
        });
    }

    /// Records the outcome of acting; skip it when the episode ended.
    pub fn step(&mut self, action: &[f64], reward: f64, next_obs: &[f64]) {
        self.push(Slot {
            obs: next_obs.to_vec(),
            prev_action: action.to_vec(),
            prev_reward: reward,
            episode: self.episode,
        });
    }

    /// Within-episode windows hold only current-episode slots and may be
    /// shorter than the context; cross-episode windows always have full
    /// length, with missing history filled by the masking rule.
    pub fn window(&self) -> Result<HistoryWindow> {
        let Some(last) = self.slots.back() else {
            return Err(Error::Invalid("history has no observation yet".into()));
        };
        let own: Vec<&Slot> = match self.spec.mode {
            SliceMode::WithinEpisode => {
                self.slots.iter().filter(|s| s.episode == last.episode).collect()
            }
            SliceMode::CrossEpisode => self.slots.iter().collect(),
        };
        let mut slots: Vec<Option<SlotSource>> = Vec::with_capacity(self.spec.context);
        if self.spec.mode == SliceMode::CrossEpisode {
            slots.extend(std::iter::repeat_n(None, self.spec.context - own.len()));
        }
        slots.extend(own.iter().map(|s| {
            Some(SlotSource {
                obs: &s.obs,
                prev_action: &s.prev_action,
                prev_reward: s.prev_reward,
                episode: s.episode,
            })
        }));
        assemble_window(self.obs_dim, self.act_dim, &slots, self.spec.masking)
    }
}
