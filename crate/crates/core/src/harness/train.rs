use std::fs::File;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::eval::evaluate;
use crate::agents::Agent;
use crate::envs::Env;
use crate::error::{Error, Result};
use crate::replay::{write_snapshot, EpisodeStore, RollingHistory, Transition};

/// One evaluation row of the metrics CSV. Grad norms are the maxima and
/// losses the means over updates since the previous row; they are empty
/// when no update happened.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub mean_return: f64,
    pub sem: f64,
    pub actor_grad_norm: Option<f64>,
    pub critic_grad_norm: Option<f64>,
    pub critic_loss: Option<f64>,
    pub actor_loss: Option<f64>,
    pub wall_ms: u64,
}

/// One gradient update, as written to the grad-norm CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradRecord {
    pub step: usize,
    pub critic_grad_norm: f64,
    /// Critic-loss gradient norm over the two Q heads.
    pub critic_head_grad_norm: f64,
    pub critic_loss: f64,
    pub actor_grad_norm: Option<f64>,
    pub actor_loss: Option<f64>,
}

pub struct TrainOutcome {
    pub metrics_path: PathBuf,
    pub grad_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub rows: Vec<MetricsRow>,
    pub grads: Vec<GradRecord>,
    pub agent: Agent,
}

pub fn metrics_path(out_dir: &Path, seed: u64) -> PathBuf {
    out_dir.join(format!("metrics_seed{seed}.csv"))
}

pub fn grad_path(out_dir: &Path, seed: u64) -> PathBuf {
    out_dir.join(format!("grad_norms_seed{seed}.csv"))
}

pub fn checkpoint_path(out_dir: &Path, seed: u64) -> PathBuf {
    out_dir.join(format!("checkpoint_seed{seed}.json"))
}

/// Environment seed of training episode `episode` in run `seed`. Disjoint
/// from the evaluation seeds.
pub fn train_env_seed(seed: u64, episode: u64) -> u64 {
    1_000_000_000u64.wrapping_add(seed.wrapping_mul(1_000_000)).wrapping_add(episode)
}

#[derive(Default)]
struct Interval {
    critic_norm: Option<f64>,
    actor_norm: Option<f64>,
    critic_loss: (f64, usize),
    actor_loss: (f64, usize),
}

impl Interval {
    fn record(&mut self, g: &GradRecord) {
        self.critic_norm = Some(self.critic_norm.map_or(g.critic_grad_norm, |m| m.max(g.critic_grad_norm)));
        self.critic_loss.0 += g.critic_loss;
        self.critic_loss.1 += 1;
        if let (Some(n), Some(l)) = (g.actor_grad_norm, g.actor_loss) {
            self.actor_norm = Some(self.actor_norm.map_or(n, |m| m.max(n)));
            self.actor_loss.0 += l;
            self.actor_loss.1 += 1;
        }
    }

    fn mean((sum, n): (f64, usize)) -> Option<f64> {
        (n > 0).then(|| sum / n as f64)
    }
}

/// Runs one seed: collect, train, evaluate every `eval_interval` steps and
/// at the end, then checkpoint. Metrics rows are flushed as they are
/// written, so a diverged run keeps its partial metrics.
pub fn run_training(config: &ExperimentConfig, seed: u64, out_dir: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    config.save(&out_dir.join("config.toml"))?;
    let started = Instant::now();
    let run = &config.run;
    let td3 = &config.agent.td3;
    let slice = config.slice;

    let mut env = Env::new(config.env.name, config.env.mask)?;
    let spec = env.spec().clone();
    let mut agent = Agent::new(
        &config.agent,
        spec.obs_dim,
        spec.act_dim,
        spec.action_low.clone(),
        spec.action_high.clone(),
        seed,
    )?;
    let capacity = td3.buffer_size.min(run.total_steps.max(1));
    let mut store = EpisodeStore::new(spec.obs_dim, spec.act_dim, capacity)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let metrics = metrics_path(out_dir, seed);
    let grads_file = grad_path(out_dir, seed);
    let mut metrics_w = csv::Writer::from_writer(File::create(&metrics)?);
    let mut grads_w = csv::Writer::from_writer(File::create(&grads_file)?);

    let mut episode = 0u64;
    let mut obs = env.reset(train_env_seed(seed, episode));
    let mut history = RollingHistory::new(spec.obs_dim, spec.act_dim, slice);
    history.reset(&obs);

    let mut rows = Vec::new();
    let mut grads = Vec::new();
    let mut interval = Interval::default();

    for step in 1..=run.total_steps {
        let action = if step <= td3.learning_starts {
            spec.action_low.iter().zip(&spec.action_high).map(|(&l, &h)| rng.random_range(l..h)).collect()
        } else {
            agent.act(&history.window()?, true, &mut rng)?
        };
        let s = env.step(&action)?;
        store.append(&Transition {
            obs: obs.clone(),
            action: action.clone(),
            reward: s.reward,
            next_obs: s.obs.clone(),
            terminal: s.terminal,
            done: s.done,
        })?;
        if s.done {
            episode += 1;
            obs = env.reset(train_env_seed(seed, episode));
            history.reset(&obs);
        } else {
            history.step(&action, s.reward, &s.obs);
            obs = s.obs;
        }

        if step > td3.learning_starts {
            match store.sample_batch(&slice, td3.batch_size, &mut rng) {
                Ok(batch) => {
                    let stats = match agent.train_step(&batch, &mut rng) {
                        Ok(s) => s,
                        Err(e) => {
                            metrics_w.flush()?;
                            grads_w.flush()?;
                            log::error!("training halted at step {step}: {e}");
                            return Err(e);
                        }
                    };
                    let g = GradRecord {
                        step,
                        critic_grad_norm: stats.critic.grad_norm,
                        critic_head_grad_norm: stats.critic.head_grad_norm,
                        critic_loss: stats.critic.loss,
                        actor_grad_norm: stats.actor.map(|a| a.grad_norm),
                        actor_loss: stats.actor.map(|a| a.loss),
                    };
                    interval.record(&g);
                    grads_w.serialize(&g)?;
                    grads.push(g);
                }
                Err(Error::InsufficientData(msg)) => log::debug!("step {step}: {msg}"),
                Err(e) => return Err(e),
            }
        }

        if step % run.eval_interval == 0 || step == run.total_steps {
            let result = evaluate(&agent, &config.env, &slice, run.eval_seeds)?;
            let done = std::mem::take(&mut interval);
            let row = MetricsRow {
                step,
                mean_return: result.mean,
                sem: result.sem,
                actor_grad_norm: done.actor_norm,
                critic_grad_norm: done.critic_norm,
                critic_loss: Interval::mean(done.critic_loss),
                actor_loss: Interval::mean(done.actor_loss),
                wall_ms: if run.record_wall_clock { started.elapsed().as_millis() as u64 } else { 0 },
            };
            log::info!("seed {seed} step {step}: return {:.3} ± {:.3}", row.mean_return, row.sem);
            metrics_w.serialize(&row)?;
            metrics_w.flush()?;
            grads_w.flush()?;
            rows.push(row);
        }
    }
    metrics_w.flush()?;
    grads_w.flush()?;

    let checkpoint = checkpoint_path(out_dir, seed);
    agent.online.save(&checkpoint)?;
    if run.save_replay {
        write_snapshot(&store, &out_dir.join(format!("replay_seed{seed}.csv")))?;
    }
    Ok(TrainOutcome {
        metrics_path: metrics,
        grad_path: grads_file,
        checkpoint_path: checkpoint,
        rows,
        grads,
        agent,
    })
}
