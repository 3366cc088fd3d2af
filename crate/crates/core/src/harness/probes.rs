use std::fs::File;
use std::path::Path;

use serde::Serialize;

use super::config::ExperimentConfig;
use super::eval::{eval_seeds, mean_sem, rollout_rewards};
use super::train::{run_training, GradRecord};
use crate::agents::SharingMode;
use crate::conditioning::Masking;
use crate::error::Result;
use crate::replay::{SliceMode, SliceSpec};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradProbeSummary {
    pub mode: SharingMode,
    pub max_critic_grad_norm: f64,
    pub max_critic_head_grad_norm: f64,
    pub max_actor_grad_norm: f64,
    pub final_mean_return: f64,
}

fn max_norm(grads: &[GradRecord], pick: impl Fn(&GradRecord) -> Option<f64>) -> f64 {
    grads.iter().filter_map(pick).fold(0.0, f64::max)
}

/// Trains once per sharing mode and writes `grad_norms_<mode>.csv` plus a
/// summary. Each mode's full run output goes to `<out>/<mode>/`.
pub fn grad_probe(
    config: &ExperimentConfig,
    modes: &[SharingMode],
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<GradProbeSummary>> {
    std::fs::create_dir_all(out_dir)?;
    config.save(&out_dir.join("config.toml"))?;
    let mut summary = Vec::new();
    for &mode in modes {
        let mut cfg = config.clone();
        cfg.agent.sharing = mode;
        let outcome = run_training(&cfg, seed, &out_dir.join(mode.as_str()))?;
        let mut w = csv::Writer::from_writer(File::create(out_dir.join(format!("grad_norms_{}.csv", mode.as_str())))?);
        for g in &outcome.grads {
            w.serialize(g)?;
        }
        w.flush()?;
        summary.push(GradProbeSummary {
            mode,
            max_critic_grad_norm: max_norm(&outcome.grads, |g| Some(g.critic_grad_norm)),
            max_critic_head_grad_norm: max_norm(&outcome.grads, |g| Some(g.critic_head_grad_norm)),
            max_actor_grad_norm: max_norm(&outcome.grads, |g| g.actor_grad_norm),
            final_mean_return: outcome.rows.last().map_or(f64::NAN, |r| r.mean_return),
        });
    }
    let mut w = csv::Writer::from_writer(File::create(out_dir.join("grad_probe_summary.csv"))?);
    for s in &summary {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(summary)
}

/// The four slicing variants compared by the slice probe.
pub fn slice_variants(context: usize, base: &SliceSpec) -> Vec<(&'static str, SliceSpec)> {
    let with = |mode, masking| SliceSpec { context, mode, masking, ..*base };
    vec![
        ("within", with(SliceMode::WithinEpisode, Masking::Zero)),
        ("cross_none", with(SliceMode::CrossEpisode, Masking::None)),
        ("cross_zero", with(SliceMode::CrossEpisode, Masking::Zero)),
        ("cross_firstobs", with(SliceMode::CrossEpisode, Masking::FirstObs)),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize)]
struct EarlyRow {
    step: usize,
    mean_reward: f64,
    sem: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliceProbeResult {
    pub variant: &'static str,
    /// Mean reward at each of the first `context` steps.
    pub early_rewards: Vec<f64>,
    pub final_mean_return: f64,
}

/// Trains each slicing variant and writes `slice_<variant>.csv` with the
/// per-step reward over the first `context` steps of evaluation episodes.
pub fn slice_probe(config: &ExperimentConfig, seed: u64, out_dir: &Path) -> Result<Vec<SliceProbeResult>> {
    std::fs::create_dir_all(out_dir)?;
    config.save(&out_dir.join("config.toml"))?;
    let context = config.slice.context;
    let n = config.run.eval_seeds;
    let mut results = Vec::new();
    for (name, spec) in slice_variants(context, &config.slice) {
        let mut cfg = config.clone();
        cfg.slice = spec;
        let outcome = run_training(&cfg, seed, &out_dir.join(name))?;
        let rewards = rollout_rewards(&outcome.agent, &cfg.env, &spec, &eval_seeds(n), Some(context))?;
        let mut w = csv::Writer::from_writer(File::create(out_dir.join(format!("slice_{name}.csv")))?);
        let mut early_rewards = Vec::with_capacity(context);
        for step in 0..context {
            let col: Vec<f64> = rewards.iter().filter_map(|r| r.get(step).copied()).collect();
            let (mean_reward, sem) = mean_sem(&col);
            w.serialize(EarlyRow { step: step + 1, mean_reward, sem })?;
            early_rewards.push(mean_reward);
        }
        w.flush()?;
        results.push(SliceProbeResult {
            variant: name,
            early_rewards,
            final_mean_return: outcome.rows.last().map_or(f64::NAN, |r| r.mean_return),
        });
    }
    Ok(results)
}
