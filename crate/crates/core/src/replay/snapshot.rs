//! Columnar CSV snapshot of a store, one row per retained transition.
//!
//! Columns, in order: `episode, step, o_0.., a_0.., r, next_o_0..,
//! terminal, done, prev_a_0.., prev_r`. Booleans are written as 0/1.

use std::path::Path;

use super::store::{EpisodeStore, Record};
use crate::error::{Error, Result};

fn header(od: usize, ad: usize) -> Vec<String> {
    let mut h = vec!["episode".to_string(), "step".to_string()];
    h.extend((0..od).map(|i| format!("o_{i}")));
    h.extend((0..ad).map(|i| format!("a_{i}")));
    h.push("r".into());
    h.extend((0..od).map(|i| format!("next_o_{i}")));
    h.push("terminal".into());
    h.push("done".into());
    h.extend((0..ad).map(|i| format!("prev_a_{i}")));
    h.push("prev_r".into());
    h
}

pub fn write_snapshot(store: &EpisodeStore, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header(store.obs_dim(), store.act_dim()))?;
    for g in store.start()..store.end() {
        let r = store.record(g)?;
        let mut row = vec![r.episode.to_string(), r.step.to_string()];
        row.extend(r.obs.iter().map(f64::to_string));
        row.extend(r.action.iter().map(f64::to_string));
        row.push(r.reward.to_string());
        row.extend(r.next_obs.iter().map(f64::to_string));
        row.push(u8::from(r.terminal).to_string());
        row.push(u8::from(r.done).to_string());
        row.extend(r.prev_action.iter().map(f64::to_string));
        row.push(r.prev_reward.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Rebuilds a store from a snapshot; rows become indices `0..n`.
pub fn read_snapshot(path: &Path, obs_dim: usize, act_dim: usize, capacity: usize) -> Result<EpisodeStore> {
    let mut rd = csv::Reader::from_path(path)?;
    let expected = header(obs_dim, act_dim);
    let got: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if got != expected {
        return Err(Error::Invalid(format!("snapshot header {got:?} does not match dims")));
    }
    let mut store = EpisodeStore::new(obs_dim, act_dim, capacity)?;
    for row in rd.records() {
        let row = row?;
        let num = |i: usize| -> Result<f64> {
            row[i].parse::<f64>().map_err(|e| Error::Invalid(format!("column {i}: {e}")))
        };
        let int = |i: usize| -> Result<u64> {
            row[i].parse::<u64>().map_err(|e| Error::Invalid(format!("column {i}: {e}")))
        };
        let vec = |from: usize, n: usize| -> Result<Vec<f64>> { (from..from + n).map(num).collect() };
        let mut c = 2;
        let obs = vec(c, obs_dim)?;
        c += obs_dim;
        let action = vec(c, act_dim)?;
        c += act_dim;
        let reward = num(c)?;
        c += 1;
        let next_obs = vec(c, obs_dim)?;
        c += obs_dim;
        let terminal = int(c)? != 0;
        let done = int(c + 1)? != 0;
        c += 2;
        let prev_action = vec(c, act_dim)?;
        c += act_dim;
        let prev_reward = num(c)?;
        store.push_record(&Record {
            episode: int(0)?,
            step: int(1)? as usize,
            obs,
            action,
            reward,
            next_obs,
            terminal,
            done,
            prev_action,
            prev_reward,
        });
    }
    Ok(store)
}
