use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use seqctl::agents::{Agent, SharingMode};
use seqctl::envs::{Env, EnvName};
use seqctl::harness::{
    evaluate, export_hidden_states, grad_probe, run_training, slice_probe, ExperimentConfig,
};
use seqctl::nn::ParamStore;

#[derive(Parser)]
#[command(name = "seqctl", version, about = "Sequence-conditioned TD3 experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; SEQCTL_OUT takes precedence.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Total environment steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    eval_seeds: Option<usize>,
    #[arg(long, value_parser = parse_env)]
    env: Option<EnvName>,
    /// Context length for both slicing and the transformer.
    #[arg(long)]
    context: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run per seed.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Greedy evaluation of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Dump (hidden state, action) rows from greedy episodes.
    ExportHidden {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
    },
    /// Train under several sharing modes and log gradient norms.
    GradProbe {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "separate,shared_frozen,shared_unfrozen")]
        modes: Vec<SharingMode>,
    },
    /// Compare the four slicing variants on early-episode reward.
    SliceProbe {
        #[command(flatten)]
        common: Common,
    },
}

fn parse_env(s: &str) -> Result<EnvName, String> {
    match s {
        "pointmass" => Ok(EnvName::Pointmass),
        "pendulum" => Ok(EnvName::Pendulum),
        _ => Err(format!("unknown env `{s}` (pointmass, pendulum)")),
    }
}

/// Config after applying command-line overrides.
fn load_config(common: &Common) -> anyhow::Result<(ExperimentConfig, PathBuf)> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.run.seeds = vec![seed];
    }
    if let Some(steps) = common.steps {
        config.run.total_steps = steps;
    }
    if let Some(n) = common.eval_seeds {
        config.run.eval_seeds = n;
    }
    if let Some(env) = common.env {
        config.env.name = env;
    }
    if let Some(c) = common.context {
        config.set_context(c);
    }
    let out = match std::env::var_os("SEQCTL_OUT") {
        Some(dir) => PathBuf::from(dir),
        None => common.out.clone().unwrap_or_else(|| config.run.out_dir.clone()),
    };
    config.run.out_dir = out.clone();
    config.validate()?;
    Ok((config, out))
}

fn load_agent(config: &ExperimentConfig, checkpoint: &Path) -> anyhow::Result<Agent> {
    let env = Env::new(config.env.name, config.env.mask)?;
    let spec = env.spec();
    let seed = config.run.seeds[0];
    let mut agent = Agent::new(&config.agent, spec.obs_dim, spec.act_dim, spec.action_low.clone(), spec.action_high.clone(), seed)?;
    agent.load_params(&ParamStore::load(checkpoint)?)?;
    Ok(agent)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { common } => {
            let (config, out) = load_config(&common)?;
            for &seed in &config.run.seeds {
                let outcome = run_training(&config, seed, &out)?;
                println!("seed {seed}: metrics {}", outcome.metrics_path.display());
            }
        }
        Command::Eval { common, checkpoint } => {
            let (config, out) = load_config(&common)?;
            let agent = load_agent(&config, &checkpoint)?;
            let result = evaluate(&agent, &config.env, &config.slice, config.run.eval_seeds)?;
            std::fs::create_dir_all(&out)?;
            config.save(&out.join("config.toml"))?;
            let mut w = csv::Writer::from_path(out.join("eval.csv"))?;
            w.write_record(["eval_seed_index", "return"])?;
            for (i, r) in result.returns.iter().enumerate() {
                w.write_record([i.to_string(), r.to_string()])?;
            }
            w.flush()?;
            println!("mean return {:.4} ± {:.4} (SEM, n = {})", result.mean, result.sem, result.returns.len());
        }
        Command::ExportHidden { common, checkpoint, episodes } => {
            let (config, out) = load_config(&common)?;
            let agent = load_agent(&config, &checkpoint)?;
            config.save(&out.join("config.toml"))?;
            let path = out.join("hidden_states.csv");
            let rows = export_hidden_states(&agent, &config.env, &config.slice, episodes, &path)?;
            println!("{rows} rows written to {}", path.display());
        }
        Command::GradProbe { common, modes } => {
            let (config, out) = load_config(&common)?;
            let summary = grad_probe(&config, &modes, config.run.seeds[0], &out)?;
            for s in summary {
                println!(
                    "{:<16} max critic grad norm {:.4e}  critic heads {:.4e}  actor {:.4e}",
                    s.mode.as_str(),
                    s.max_critic_grad_norm,
                    s.max_critic_head_grad_norm,
                    s.max_actor_grad_norm
                );
            }
        }
        Command::SliceProbe { common } => {
            let (config, out) = load_config(&common)?;
            for r in slice_probe(&config, config.run.seeds[0], &out)? {
                let head = r.early_rewards.len().saturating_sub(1).max(1);
                let early = r.early_rewards[..head].iter().sum::<f64>() / head as f64;
                println!("{:<15} early reward {early:.4}  final return {:.3}", r.variant, r.final_mean_return);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
