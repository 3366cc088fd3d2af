//! Test helpers shared by several integration test targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqctl::conditioning::{HistoryWindow, Masking};
use seqctl::replay::{EpisodeStore, SliceMode, SliceSpec, Transition};

/// A random append log made of whole and partial episodes.
pub struct Log {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub transitions: Vec<Transition>,
}

pub fn random_log(rng: &mut ChaCha8Rng, max_len: usize) -> Log {
    let obs_dim = rng.random_range(1..=3);
    let act_dim = rng.random_range(1..=2);
    let total = rng.random_range(1..=max_len);
    let mut transitions = Vec::with_capacity(total);
    let mut obs: Vec<f64> = (0..obs_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut left = rng.random_range(1..=15);
    for _ in 0..total {
        let action: Vec<f64> = (0..act_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let next_obs: Vec<f64> = (0..obs_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        left -= 1;
        let done = left == 0;
        transitions.push(Transition {
            obs: obs.clone(),
            action,
            reward: rng.random_range(-2.0..2.0),
            next_obs: next_obs.clone(),
            terminal: done && rng.random_bool(0.3),
            done,
        });
        if done {
            left = rng.random_range(1..=15);
            obs = (0..obs_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        } else {
            obs = next_obs;
        }
    }
    Log { obs_dim, act_dim, transitions }
}

pub fn build_store(log: &Log, capacity: usize) -> EpisodeStore {
    let mut store = EpisodeStore::new(log.obs_dim, log.act_dim, capacity).unwrap();
    for t in &log.transitions {
        store.append(t).unwrap();
    }
    store
}

/// Episode ids and in-episode steps recomputed from the done flags.
pub fn episodes(log: &Log) -> (Vec<u64>, Vec<usize>) {
    let (mut ep, mut step) = (0u64, 0usize);
    let mut eps = Vec::new();
    let mut steps = Vec::new();
    for t in &log.transitions {
        eps.push(ep);
        steps.push(step);
        if t.done {
            ep += 1;
            step = 0;
        } else {
            step += 1;
        }
    }
    (eps, steps)
}

/// Enumerates valid window ends by checking every slot directly.
pub fn oracle_valid(log: &Log, capacity: usize, spec: &SliceSpec) -> Vec<u64> {
    let n = log.transitions.len() as i64;
    let start = (n - capacity as i64).max(0);
    let (eps, _) = episodes(log);
    let c = spec.context as i64;
    (start..n)
        .filter(|&t| {
            let slots: Vec<i64> = (t - c + 1..=t).collect();
            if slots.iter().any(|&g| g >= 0 && g < start) {
                return false;
            }
            match spec.mode {
                SliceMode::CrossEpisode => true,
                SliceMode::WithinEpisode => {
                    slots.iter().all(|&g| g >= 0 && eps[g as usize] == eps[t as usize])
                }
            }
        })
        .map(|t| t as u64)
        .collect()
}

/// Window ending at `t` built slot by slot from the raw log.
pub fn oracle_window(log: &Log, t: usize, spec: &SliceSpec) -> HistoryWindow {
    let (od, ad) = (log.obs_dim, log.act_dim);
    let (eps, steps) = episodes(log);
    let cur = eps[t];
    let first_idx = t - steps[t];
    let first_obs = log.transitions[first_idx].obs.clone();
    let mut w = HistoryWindow {
        obs_dim: od,
        act_dim: ad,
        observations: vec![],
        prev_actions: vec![],
        rewards: vec![],
        valid: vec![],
        in_episode: vec![],
    };
    let c = spec.context as i64;
    for g in t as i64 - c + 1..=t as i64 {
        let present = g >= 0;
        let own = present && eps[g as usize] == cur;
        w.in_episode.push(own);
        let verbatim = own || (present && spec.masking == Masking::None);
        if verbatim {
            let g = g as usize;
            let tr = &log.transitions[g];
            w.observations.extend(&tr.obs);
            if steps[g] == 0 {
                w.prev_actions.extend(vec![0.0; ad]);
                w.rewards.push(0.0);
            } else {
                w.prev_actions.extend(&log.transitions[g - 1].action);
                w.rewards.push(log.transitions[g - 1].reward);
            }
            w.valid.push(true);
        } else {
            match spec.masking {
                Masking::FirstObs => w.observations.extend(&first_obs),
                _ => w.observations.extend(vec![0.0; od]),
            }
            w.prev_actions.extend(vec![0.0; ad]);
            w.rewards.push(0.0);
            w.valid.push(false);
        }
    }
    w
}

pub const SLICE_VARIANTS: [(SliceMode, Masking); 4] = [
    (SliceMode::WithinEpisode, Masking::None),
    (SliceMode::CrossEpisode, Masking::None),
    (SliceMode::CrossEpisode, Masking::Zero),
    (SliceMode::CrossEpisode, Masking::FirstObs),
];

pub const CONTEXTS: [usize; 5] = [1, 2, 3, 5, 10];

/// Checks one random store against the oracle; returns a description of the
/// first mismatch.
pub fn check_store_against_oracle(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let log = random_log(&mut rng, 200);
    let capacity = if rng.random_bool(0.5) { 256 } else { rng.random_range(1..=200) };
    let store = build_store(&log, capacity);
    let context = CONTEXTS[rng.random_range(0..CONTEXTS.len())];
    for (mode, masking) in SLICE_VARIANTS {
        let spec = SliceSpec { context, mode, masking, ..Default::default() };
        let got = store.valid_indices(&spec);
        let want = oracle_valid(&log, capacity, &spec);
        if got != want {
            return Err(format!("seed {seed} {spec:?}: valid {got:?} != {want:?}"));
        }
        for &t in &got {
            let w = store.make_window(t, &spec).map_err(|e| e.to_string())?;
            let o = oracle_window(&log, t as usize, &spec);
            if w != o {
                return Err(format!("seed {seed} {spec:?} t={t}: {w:?} != {o:?}"));
            }
        }
    }
    Ok(())
}
