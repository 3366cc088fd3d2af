//! Experiment plumbing: configs, training runs, evaluation and probes.

mod config;
mod eval;
mod probes;
mod train;

pub use config::{EnvConfig, ExperimentConfig, RunConfig};
pub use eval::{
    early_step_reward, eval_seeds, evaluate, export_hidden_states, mean_sem, rollout_rewards,
    EvalResult, EVAL_SEED_BASE,
};
pub use probes::{grad_probe, slice_probe, slice_variants, GradProbeSummary, SliceProbeResult};
pub use train::{
    checkpoint_path, grad_path, metrics_path, run_training, train_env_seed, GradRecord, MetricsRow,
    TrainOutcome,
};
