use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::EnvConfig;
use crate::agents::Agent;
use crate::conditioning::{HistoryWindow, WindowBatch};
use crate::envs::Env;
use crate::error::{Error, Result};
use crate::replay::{RollingHistory, SliceSpec};

/// Evaluation episode `i` resets with seed `EVAL_SEED_BASE + i`.
pub const EVAL_SEED_BASE: u64 = 10_000;

pub fn eval_seeds(n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| EVAL_SEED_BASE + i).collect()
}

/// Sample mean and standard error (`n - 1` denominator). SEM is NaN below
/// two values.
pub fn mean_sem(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub mean: f64,
    pub sem: f64,
    /// One return per eval seed, in seed order.
    pub returns: Vec<f64>,
}

/// Runs one greedy episode per seed in lockstep and returns each episode's
/// rewards. Stops after `max_steps` steps if given.
pub fn rollout_rewards(
    agent: &Agent,
    env: &EnvConfig,
    slice: &SliceSpec,
    seeds: &[u64],
    max_steps: Option<usize>,
) -> Result<Vec<Vec<f64>>> {
    let mut envs = Vec::with_capacity(seeds.len());
    let mut histories = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut e = Env::new(env.name, env.mask)?;
        let obs = e.reset(seed);
        let mut h = RollingHistory::new(e.spec().obs_dim, e.spec().act_dim, *slice);
        h.reset(&obs);
        envs.push(e);
        histories.push(h);
    }
    let mut rewards = vec![Vec::new(); seeds.len()];
    let mut active: Vec<usize> = (0..seeds.len()).collect();
    // Greedy acting never draws from this.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut steps = 0;
    while !active.is_empty() && max_steps.is_none_or(|m| steps < m) {
        let windows = active.iter().map(|&i| histories[i].window()).collect::<Result<Vec<_>>>()?;
        let actions = act_grouped(agent, &windows, &mut rng)?;
        let mut still = Vec::with_capacity(active.len());
        for (&i, action) in active.iter().zip(actions) {
            let s = envs[i].step(&action)?;
            rewards[i].push(s.reward);
            if !s.done {
                histories[i].step(&action, s.reward, &s.obs);
                still.push(i);
            }
        }
        active = still;
        steps += 1;
    }
    Ok(rewards)
}

/// Batches windows of equal length together.
fn act_grouped(agent: &Agent, windows: &[HistoryWindow], rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, w) in windows.iter().enumerate() {
        groups.entry(w.len()).or_default().push(i);
    }
    let mut out = vec![Vec::new(); windows.len()];
    for members in groups.values() {
        let batch: Vec<HistoryWindow> = members.iter().map(|&i| windows[i].clone()).collect();
        let actions = agent.act_batch(&WindowBatch::stack(&batch)?, false, rng)?;
        for (&i, a) in members.iter().zip(actions) {
            out[i] = a;
        }
    }
    Ok(out)
}

/// Greedy returns over `n_seeds` fixed evaluation seeds.
pub fn evaluate(agent: &Agent, env: &EnvConfig, slice: &SliceSpec, n_seeds: usize) -> Result<EvalResult> {
    if n_seeds < 2 {
        return Err(Error::Invalid("evaluation needs at least two seeds".into()));
    }
    let rewards = rollout_rewards(agent, env, slice, &eval_seeds(n_seeds), None)?;
    let returns: Vec<f64> = rewards.iter().map(|r| r.iter().sum()).collect();
    let (mean, sem) = mean_sem(&returns);
    Ok(EvalResult { mean, sem, returns })
}

/// Mean reward at each of the first `k` steps across `n_seeds` episodes.
pub fn early_step_reward(
    agent: &Agent,
    env: &EnvConfig,
    slice: &SliceSpec,
    n_seeds: usize,
    k: usize,
) -> Result<Vec<f64>> {
    if k == 0 || n_seeds == 0 {
        return Err(Error::Invalid("early_step_reward needs k >= 1 and at least one seed".into()));
    }
    let rewards = rollout_rewards(agent, env, slice, &eval_seeds(n_seeds), Some(k))?;
    let mut out = Vec::with_capacity(k);
    for step in 0..k {
        let col: Vec<f64> = rewards.iter().filter_map(|r| r.get(step).copied()).collect();
        if col.is_empty() {
            break;
        }
        out.push(col.iter().sum::<f64>() / col.len() as f64);
    }
    Ok(out)
}

/// Writes one row per step: the actor's last hidden state then the action.
/// Returns the number of rows.
pub fn export_hidden_states(
    agent: &Agent,
    env: &EnvConfig,
    slice: &SliceSpec,
    n_episodes: usize,
    path: &Path,
) -> Result<usize> {
    if !agent.nets.actor_backbone.is_sequence() {
        return Err(Error::Invalid("hidden-state export needs a transformer agent".into()));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for seed in eval_seeds(n_episodes) {
        let mut e = Env::new(env.name, env.mask)?;
        let obs = e.reset(seed);
        let mut h = RollingHistory::new(e.spec().obs_dim, e.spec().act_dim, *slice);
        h.reset(&obs);
        loop {
            let w = h.window()?;
            let mut row = agent.last_hidden(&w)?;
            let action = agent.act(&w, false, &mut rng)?;
            row.extend_from_slice(&action);
            rows.push(row);
            let s = e.step(&action)?;
            if s.done {
                break;
            }
            h.step(&action, s.reward, &s.obs);
        }
    }
    let width = rows.first().map_or(0, Vec::len);
    let d = width.saturating_sub(agent.act_dim);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    let header: Vec<String> =
        (0..d).map(|i| format!("h_{i}")).chain((0..agent.act_dim).map(|i| format!("a_{i}"))).collect();
    w.write_record(&header)?;
    for row in &rows {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(rows.len())
}
