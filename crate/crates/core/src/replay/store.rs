use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::conditioning::{assemble_window, HistoryWindow, Masking, SlotSource, WindowBatch};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceMode {
    WithinEpisode,
    CrossEpisode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    LastToken,
    EveryToken,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SliceSpec {
    pub context: usize,
    pub mode: SliceMode,
    pub masking: Masking,
    pub supervision: Supervision,
}

impl Default for SliceSpec {
    fn default() -> Self {
        Self {
            context: 10,
            mode: SliceMode::CrossEpisode,
            masking: Masking::FirstObs,
            supervision: Supervision::LastToken,
        }
    }
}

impl SliceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.context == 0 {
            return Err(Error::Config("slice context must be at least 1".into()));
        }
        Ok(())
    }
}

/// One environment step as handed to the store.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    /// True termination; disables bootstrapping.
    pub terminal: bool,
    /// End of episode for any reason, including truncation.
    pub done: bool,
}

/// A stored transition with its episode bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub episode: u64,
    pub step: usize,
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub terminal: bool,
    pub done: bool,
    pub prev_action: Vec<f64>,
    pub prev_reward: f64,
}

/// Ring buffer of transitions addressed by monotone logical indices.
///
/// Index `g` lives in slot `g % capacity`; the retained range is
/// `start()..end()`.
#[derive(Clone, Debug)]
pub struct EpisodeStore {
    obs_dim: usize,
    act_dim: usize,
    capacity: usize,
    end: u64,
    obs: Vec<f64>,
    action: Vec<f64>,
    reward: Vec<f64>,
    next_obs: Vec<f64>,
    terminal: Vec<bool>,
    done: Vec<bool>,
    episode: Vec<u64>,
    step: Vec<usize>,
    prev_action: Vec<f64>,
    prev_reward: Vec<f64>,
    cur_episode: u64,
    cur_step: usize,
    cur_prev_action: Vec<f64>,
    cur_prev_reward: f64,
}

/// A sampled window with everything the losses need.
#[derive(Clone, Debug)]
pub struct SequenceSample {
    pub index: u64,
    pub window: HistoryWindow,
    /// The window advanced by one transition.
    pub next_window: HistoryWindow,
    /// Action taken at each slot, `[C * act_dim]`; zero for foreign slots.
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub terminals: Vec<bool>,
    pub supervised: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct SequenceBatch {
    pub samples: Vec<SequenceSample>,
    pub windows: WindowBatch,
    pub next_windows: WindowBatch,
    /// `[B, C, act_dim]`
    pub actions: Tensor,
    /// `[B, C, 1]`
    pub rewards: Tensor,
    /// `[B, C, 1]`, 1.0 where the transition terminated.
    pub terminals: Tensor,
    /// `[B, C, 1]`, 1.0 at supervised positions.
    pub supervised: Tensor,
}

impl EpisodeStore {
    pub fn new(obs_dim: usize, act_dim: usize, capacity: usize) -> Result<Self> {
        if obs_dim == 0 || act_dim == 0 || capacity == 0 {
            return Err(Error::Config("store dimensions and capacity must be positive".into()));
        }
        Ok(Self {
            obs_dim,
            act_dim,
            capacity,
            end: 0,
            obs: Vec::new(),
            action: Vec::new(),
            reward: Vec::new(),
            next_obs: Vec::new(),
            terminal: Vec::new(),
            done: Vec::new(),
            episode: Vec::new(),
            step: Vec::new(),
            prev_action: Vec::new(),
            prev_reward: Vec::new(),
            cur_episode: 0,
            cur_step: 0,
            cur_prev_action: vec![0.0; act_dim],
            cur_prev_reward: 0.0,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Oldest retained logical index.
    pub fn start(&self) -> u64 {
        self.end.saturating_sub(self.capacity as u64)
    }

    /// One past the newest logical index.
    pub fn end(&self) -> u64 {
        self.end
    }

    pub fn len(&self) -> usize {
        (self.end - self.start()) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.end == 0
    }

    /// Episode id the next appended transition will get.
    pub fn current_episode(&self) -> u64 {
        self.cur_episode
    }

    pub fn append(&mut self, t: &Transition) -> Result<u64> {
        if t.obs.len() != self.obs_dim
            || t.next_obs.len() != self.obs_dim
            || t.action.len() != self.act_dim
        {
            return shape_err(format!(
                "transition dims (obs {}, next {}, action {}) do not match store ({}, {})",
                t.obs.len(),
                t.next_obs.len(),
                t.action.len(),
                self.obs_dim,
                self.act_dim
            ));
        }
        let record = Record {
            episode: self.cur_episode,
            step: self.cur_step,
            obs: t.obs.clone(),
            action: t.action.clone(),
            reward: t.reward,
            next_obs: t.next_obs.clone(),
            terminal: t.terminal,
            done: t.done,
            prev_action: self.cur_prev_action.clone(),
            prev_reward: self.cur_prev_reward,
        };
        Ok(self.push_record(&record))
    }

    /// Stores a record verbatim and continues bookkeeping from it.
    pub(crate) fn push_record(&mut self, r: &Record) -> u64 {
        let g = self.end;
        let slot = (g % self.capacity as u64) as usize;
        let (od, ad) = (self.obs_dim, self.act_dim);
        if slot == self.reward.len() {
            self.obs.extend_from_slice(&r.obs);
            self.action.extend_from_slice(&r.action);
            self.reward.push(r.reward);
            self.next_obs.extend_from_slice(&r.next_obs);
            self.terminal.push(r.terminal);
            self.done.push(r.done);
            self.episode.push(r.episode);
            self.step.push(r.step);
            self.prev_action.extend_from_slice(&r.prev_action);
            self.prev_reward.push(r.prev_reward);
        } else {
            self.obs[slot * od..(slot + 1) * od].copy_from_slice(&r.obs);
            self.action[slot * ad..(slot + 1) * ad].copy_from_slice(&r.action);
            self.reward[slot] = r.reward;
            self.next_obs[slot * od..(slot + 1) * od].copy_from_slice(&r.next_obs);
            self.terminal[slot] = r.terminal;
            self.done[slot] = r.done;
            self.episode[slot] = r.episode;
            self.step[slot] = r.step;
            self.prev_action[slot * ad..(slot + 1) * ad].copy_from_slice(&r.prev_action);
            self.prev_reward[slot] = r.prev_reward;
        }
        self.end += 1;
        if r.done {
            self.cur_episode = r.episode + 1;
            self.cur_step = 0;
            self.cur_prev_action.fill(0.0);
            self.cur_prev_reward = 0.0;
        } else {
            self.cur_episode = r.episode;
            self.cur_step = r.step + 1;
            self.cur_prev_action.copy_from_slice(&r.action);
            self.cur_prev_reward = r.reward;
        }
        g
    }

    fn slot(&self, g: u64) -> Result<usize> {
        if g < self.start() || g >= self.end {
            return Err(Error::Invalid(format!(
                "index {g} outside retained range {}..{}",
                self.start(),
                self.end
            )));
        }
        Ok((g % self.capacity as u64) as usize)
    }

    pub fn record(&self, g: u64) -> Result<Record> {
        let s = self.slot(g)?;
        let (od, ad) = (self.obs_dim, self.act_dim);
        Ok(Record {
            episode: self.episode[s],
            step: self.step[s],
            obs: self.obs[s * od..(s + 1) * od].to_vec(),
            action: self.action[s * ad..(s + 1) * ad].to_vec(),
            reward: self.reward[s],
            next_obs: self.next_obs[s * od..(s + 1) * od].to_vec(),
            terminal: self.terminal[s],
            done: self.done[s],
            prev_action: self.prev_action[s * ad..(s + 1) * ad].to_vec(),
            prev_reward: self.prev_reward[s],
        })
    }

    fn source(&self, s: usize) -> SlotSource<'_> {
        let (od, ad) = (self.obs_dim, self.act_dim);
        SlotSource {
            obs: &self.obs[s * od..(s + 1) * od],
            prev_action: &self.prev_action[s * ad..(s + 1) * ad],
            prev_reward: self.prev_reward[s],
            episode: self.episode[s],
        }
    }

    /// Whether a window of `spec.context` slots may end at `t`.
    pub fn is_valid_end(&self, t: u64, spec: &SliceSpec) -> bool {
        if t < self.start() || t >= self.end || spec.context == 0 {
            return false;
        }
        let back = spec.context as u64 - 1;
        // Nothing may come from the overwritten part of the ring.
        let reaches_seam = self.start() > 0 && t < self.start() + back;
        if reaches_seam {
            return false;
        }
        match spec.mode {
            SliceMode::CrossEpisode => true,
            SliceMode::WithinEpisode => {
                let s = (t % self.capacity as u64) as usize;
                self.step[s] as u64 >= back
            }
        }
    }

    pub fn valid_indices(&self, spec: &SliceSpec) -> Vec<u64> {
        (self.start()..self.end).filter(|&t| self.is_valid_end(t, spec)).collect()
    }

    /// Raw slots of the window ending at `t`; `None` before index 0.
    fn raw_slots(&self, t: u64, context: usize) -> Result<Vec<Option<SlotSource<'_>>>> {
        let first = t as i64 - context as i64 + 1;
        (first..=t as i64)
            .map(|g| if g < 0 { Ok(None) } else { Ok(Some(self.source(self.slot(g as u64)?))) })
            .collect()
    }

    pub fn make_window(&self, t: u64, spec: &SliceSpec) -> Result<HistoryWindow> {
        if !self.is_valid_end(t, spec) {
            return Err(Error::Invalid(format!("index {t} is not a valid window end")));
        }
        let slots = self.raw_slots(t, spec.context)?;
        assemble_window(self.obs_dim, self.act_dim, &slots, spec.masking)
    }

    /// Window, shifted window and per-slot targets for index `t`.
    pub fn make_sample(&self, t: u64, spec: &SliceSpec) -> Result<SequenceSample> {
        if !self.is_valid_end(t, spec) {
            return Err(Error::Invalid(format!("index {t} is not a valid window end")));
        }
        let c = spec.context;
        let mut slots = self.raw_slots(t, c)?;
        let window = assemble_window(self.obs_dim, self.act_dim, &slots, spec.masking)?;
        let ad = self.act_dim;
        let mut actions = vec![0.0; c * ad];
        let mut rewards = vec![0.0; c];
        let mut terminals = vec![false; c];
        let first = t as i64 - c as i64 + 1;
        for p in 0..c {
            if window.in_episode[p] {
                let s = self.slot((first + p as i64) as u64)?;
                actions[p * ad..(p + 1) * ad].copy_from_slice(&self.action[s * ad..(s + 1) * ad]);
                rewards[p] = self.reward[s];
                terminals[p] = self.terminal[s];
            }
        }
        let last = self.slot(t)?;
        let od = self.obs_dim;
        let synthetic = SlotSource {
            obs: &self.next_obs[last * od..(last + 1) * od],
            prev_action: &self.action[last * ad..(last + 1) * ad],
            prev_reward: self.reward[last],
            episode: self.episode[last],
        };
        slots.remove(0);
        slots.push(Some(synthetic));
        let next_window = assemble_window(self.obs_dim, ad, &slots, spec.masking)?;
        let supervised = supervision_mask(&window, spec);
        Ok(SequenceSample { index: t, window, next_window, actions, rewards, terminals, supervised })
    }

    /// Uniform draw with replacement over the valid window ends.
    pub fn sample_indices(&self, spec: &SliceSpec, n: usize, rng: &mut impl Rng) -> Result<Vec<u64>> {
        let (lo, hi) = (self.start(), self.end);
        if lo == hi {
            return Err(Error::InsufficientData("insufficient data: store is empty".into()));
        }
        let mut out = Vec::with_capacity(n);
        let mut tries = 0usize;
        while out.len() < n && tries < 64 * n.max(1) {
            tries += 1;
            let t = rng.random_range(lo..hi);
            if self.is_valid_end(t, spec) {
                out.push(t);
            }
        }
        if out.len() < n {
            // Sparse valid set: fall back to drawing from the explicit list.
            let valid = self.valid_indices(spec);
            if valid.is_empty() {
                return Err(Error::InsufficientData(format!(
                    "insufficient data: no window of length {} fits",
                    spec.context
                )));
            }
            while out.len() < n {
                out.push(valid[rng.random_range(0..valid.len())]);
            }
        }
        Ok(out)
    }

    pub fn sample_batch(&self, spec: &SliceSpec, n: usize, rng: &mut impl Rng) -> Result<SequenceBatch> {
        let idx = self.sample_indices(spec, n, rng)?;
        let samples = idx.iter().map(|&t| self.make_sample(t, spec)).collect::<Result<Vec<_>>>()?;
        SequenceBatch::from_samples(samples)
    }
}

/// Supervised positions: `{C-1}` for last-token, current-episode slots for
/// every-token.
pub fn supervision_positions(window: &HistoryWindow, spec: &SliceSpec) -> Vec<usize> {
    supervision_mask(window, spec)
        .iter()
        .enumerate()
        .filter_map(|(p, &s)| s.then_some(p))
        .collect()
}

fn supervision_mask(window: &HistoryWindow, spec: &SliceSpec) -> Vec<bool> {
    let c = window.len();
    match spec.supervision {
        Supervision::LastToken => (0..c).map(|p| p + 1 == c).collect(),
        Supervision::EveryToken => window.in_episode.clone(),
    }
}

impl SequenceBatch {
    pub fn from_samples(samples: Vec<SequenceSample>) -> Result<Self> {
        let windows: Vec<HistoryWindow> = samples.iter().map(|s| s.window.clone()).collect();
        let next: Vec<HistoryWindow> = samples.iter().map(|s| s.next_window.clone()).collect();
        let windows = WindowBatch::stack(&windows)?;
        let next_windows = WindowBatch::stack(&next)?;
        let (b, c, ad) = (windows.batch, windows.len, windows.act_dim);
        let flag = |v: bool| if v { 1.0 } else { 0.0 };
        let actions = samples.iter().flat_map(|s| s.actions.iter().copied()).collect();
        let rewards = samples.iter().flat_map(|s| s.rewards.iter().copied()).collect();
        let terminals = samples.iter().flat_map(|s| s.terminals.iter().map(|&v| flag(v))).collect();
        let supervised = samples.iter().flat_map(|s| s.supervised.iter().map(|&v| flag(v))).collect();
        Ok(Self {
            actions: Tensor::new([b, c, ad], actions)?,
            rewards: Tensor::new([b, c, 1], rewards)?,
            terminals: Tensor::new([b, c, 1], terminals)?,
            supervised: Tensor::new([b, c, 1], supervised)?,
            samples,
            windows,
            next_windows,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
