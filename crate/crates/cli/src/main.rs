use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use rampc_core::env::{obstacle_env, obstacle_env_from, scalar_env, two_model_env, EnvironmentSpec, SceneConfig};
use rampc_core::harness::{
    comparison_to_csv, metrics_to_csv, predict_comparison, run_batch, run_episode, series_to_csv,
    suboptimality_series, trace_to_json, AgentConfig, AgentKind, DEFAULT_WARMUP_BUCKETS,
};
use rampc_core::Error;

/// Receding-horizon robust control experiments: interval prediction of an
/// uncertain linear system plus optimistic tree planning.
#[derive(Parser)]
#[command(name = "rampc", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// Environment: scalar | obstacle | twomodel
    #[arg(long, default_value = "obstacle")]
    env: String,

    /// Agent: robust | nominal | oracle
    #[arg(long, default_value = "robust")]
    agent: String,

    /// Planning budget (tree expansions per step)
    #[arg(long, default_value_t = 100)]
    budget: usize,

    /// Confidence level of the parameter set
    #[arg(long, default_value_t = 0.9)]
    delta: f64,

    /// Discount factor
    #[arg(long, default_value_t = 0.9)]
    gamma: f64,

    /// Scene configuration file (TOML, obstacle environment only)
    #[arg(long)]
    config: Option<PathBuf>,

    /// Output file (defaults to stdout)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the interval state envelope under a fixed action sequence
    Predict {
        #[command(flatten)]
        common: CommonOpts,
        /// Comma-separated action indices, e.g. 3,3,0,1
        #[arg(long, default_value = "0,0,0,0,0,0,0,0,0,0")]
        actions: String,
    },
    /// Run one closed-loop episode and emit its JSON trace
    Episode {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run many seeded episodes in parallel and emit a CSV metrics table
    Batch {
        #[command(flatten)]
        common: CommonOpts,
        /// Number of seeds, used as 0..seeds offset from --seed
        #[arg(long, default_value_t = 10)]
        seeds: usize,
        /// Base seed
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sweep estimator warmup sizes and emit mean regret per bucket
    Suboptimality {
        #[command(flatten)]
        common: CommonOpts,
        /// Seeds per warmup bucket
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        /// Base seed
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn build_env(common: &CommonOpts) -> anyhow::Result<EnvironmentSpec> {
    let env = match common.env.as_str() {
        "scalar" => scalar_env(),
        "obstacle" => match &common.config {
            None => obstacle_env(),
            Some(path) => {
                let cfg = SceneConfig::load(path)
                    .with_context(|| format!("loading scene config {}", path.display()))?;
                obstacle_env_from(&cfg)?
            }
        },
        "twomodel" => two_model_env(),
        other => bail!("unknown environment '{other}' (expected scalar|obstacle|twomodel)"),
    };
    Ok(env)
}

fn build_agent(common: &CommonOpts) -> anyhow::Result<AgentConfig> {
    let kind: AgentKind = common.agent.parse()?;
    let mut cfg = AgentConfig::new(kind);
    cfg.budget = common.budget;
    cfg.delta = common.delta;
    cfg.gamma = common.gamma;
    Ok(cfg)
}

fn emit(out: &Option<PathBuf>, content: &str) -> anyhow::Result<()> {
    match out {
        None => {
            print!("{content}");
            Ok(())
        }
        Some(path) => {
            std::fs::write(path, content)
                .with_context(|| format!("writing {}", path.display()))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Predict { common, actions } => {
            let env = build_env(&common)?;
            let cfg = build_agent(&common)?;
            let actions: Vec<usize> = actions
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<Result<_, _>>()
                .context("parsing --actions as comma-separated indices")?;
            let (simple, enhanced) = predict_comparison(&env, &cfg, &actions)?;
            emit(&common.out, &comparison_to_csv(&simple, enhanced.as_deref()))
        }
        Command::Episode { common, seed } => {
            let env = build_env(&common)?;
            let cfg = build_agent(&common)?;
            let outcome = run_episode(&env, &cfg, seed)?;
            let mut json = trace_to_json(&outcome.trace)?;
            json.push('\n');
            emit(&common.out, &json)
        }
        Command::Batch {
            common,
            seeds,
            seed,
        } => {
            if seeds == 0 {
                bail!("--seeds must be at least 1");
            }
            let env = build_env(&common)?;
            let cfg = build_agent(&common)?;
            let seed_list: Vec<u64> = (0..seeds as u64).map(|i| seed + i).collect();
            let rows = run_batch(&env, &cfg, &seed_list);
            emit(&common.out, &metrics_to_csv(&rows))
        }
        Command::Suboptimality {
            common,
            seeds,
            seed,
        } => {
            let env = build_env(&common)?;
            let cfg = build_agent(&common)?;
            let series =
                suboptimality_series(&env, &cfg, &DEFAULT_WARMUP_BUCKETS, seeds, seed)?;
            emit(&common.out, &series_to_csv(&series))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            // Exit 2 for configuration and input problems, 3 for runtime
            // failures inside the pipeline.
            let config_like = err.downcast_ref::<Error>().map_or(true, |e| {
                matches!(e, Error::Config(_) | Error::Dimension(_) | Error::Capacity(_))
            });
            if config_like {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
