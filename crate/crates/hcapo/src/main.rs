use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context as _, Result};
use clap::{Parser, Subcommand, ValueEnum};
use hcapo_core::advantage::{compute_advantages, NormScope};
use hcapo_core::env::rollout_group;
use hcapo_core::hindsight::build_hindsight_table;
use hcapo_core::oracle::exact_policy_eval;
use hcapo_core::trainer::{self, group_seed, with_oracle_hindsight, HindsightSource, TrainConfig, TrainerState};
use log::{info, warn};

use hcapo::checks::oracle_suite;
use hcapo::config::{load_run_config, RunConfig};
use hcapo::params;
use hcapo::records::{self, MetricsWriter};

#[derive(Parser)]
#[command(name = "hcapo", version, about = "Hindsight credit assignment on tabular sparse-reward tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    Global,
    PerStep,
}

#[derive(Subcommand)]
enum Command {
    /// Train one policy and stream per-iteration metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        omega: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long, value_enum)]
        smoothing: Option<Toggle>,
        #[arg(long, value_enum)]
        norm_scope: Option<Scope>,
        /// Metrics CSV; defaults to the config's `metrics_path`, else stdout.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Write the final weights here.
        #[arg(long)]
        params_out: Option<PathBuf>,
    },
    /// One training run per ω, each writing `metrics-omega-<ω>.csv`.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        omegas: Vec<f64>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Check the exact oracle against its defining properties.
    OracleCheck {
        #[arg(long)]
        config: PathBuf,
        /// Episodes for the sampled hindsight-estimate check.
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        /// Weights to evaluate instead of the initial policy.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Export exact Q, V and visitation as CSV.
        #[arg(long)]
        tables: Option<PathBuf>,
    },
    /// Roll out one group and write its per-step credit rows as CSV.
    Credit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn load(config: &Path) -> Result<RunConfig> {
    load_run_config(config).with_context(|| format!("loading {}", config.display()))
}

fn initial_state(cfg: &TrainConfig, params_path: Option<&Path>) -> Result<TrainerState> {
    Ok(match params_path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainerState::from_policy(cfg, params::from_text(&text)?)?
        }
        None => TrainerState::new(cfg)?,
    })
}

fn train(run: RunConfig, metrics: Option<PathBuf>, params_out: Option<PathBuf>) -> Result<()> {
    let cfg = run.train;
    let path = metrics.or(run.metrics_path);
    let mut writer = MetricsWriter::new(output(path.as_deref())?);
    info!("training for {} iterations, omega {}, seed {}", cfg.iterations, cfg.advantage.omega, cfg.seed);
    let state = trainer::run(&cfg, |m| {
        writer.write(m).map_err(|e| hcapo_core::Error::Domain(e.to_string()))?;
        log::debug!("iteration {} success {:.3}", m.iteration, m.success_rate);
        Ok(())
    })?;
    let exact = exact_policy_eval(&cfg.env, &state.policy, cfg.hindsight.discount)?;
    info!(
        "final policy: success probability {:.4}, expected length {:.2}",
        exact.success_probability(),
        exact.expected_length()
    );
    if let Some(p) = params_out {
        fs::write(&p, params::to_text(&state.policy)).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn sweep(run: RunConfig, omegas: &[f64], out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let result = trainer::run_sweep(&run.train, omegas)?;
    for w in &result.duplicates {
        warn!("omega {w} listed more than once; running it once");
    }
    for series in &result.series {
        let path = out_dir.join(format!("metrics-omega-{}.csv", series.omega));
        let mut writer = MetricsWriter::new(BufWriter::new(File::create(&path)?));
        for m in &series.metrics {
            writer.write(m)?;
        }
        let exact = exact_policy_eval(&run.train.env, &series.final_state.policy, run.train.hindsight.discount)?;
        println!(
            "omega {}: final success probability {:.4}, expected length {:.2} -> {}",
            series.omega,
            exact.success_probability(),
            exact.expected_length(),
            path.display()
        );
    }
    Ok(())
}

fn oracle_check(run: RunConfig, samples: usize, params_path: Option<&Path>, tables: Option<&Path>) -> Result<bool> {
    let cfg = run.train;
    let policy = initial_state(&cfg, params_path)?.policy;
    let checks = oracle_suite(&cfg.env, &policy, cfg.hindsight.discount, samples, cfg.seed)?;
    for c in &checks {
        println!("{c}");
    }
    if let Some(p) = tables {
        let values = exact_policy_eval(&cfg.env, &policy, cfg.hindsight.discount)?;
        records::write_records(File::create(p)?, &records::oracle_records(&cfg.env, &values)?)?;
    }
    Ok(checks.iter().all(|c| c.passed))
}

fn credit(run: RunConfig, params_path: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let cfg = run.train;
    let policy = initial_state(&cfg, params_path)?.policy;
    let scorer = match cfg.hindsight_source {
        HindsightSource::PolicyRows => policy.clone(),
        HindsightSource::OraclePosterior => with_oracle_hindsight(&cfg.env, &policy)?,
    };
    let batch = rollout_group(&cfg.env, &policy, cfg.group_size, group_seed(cfg.seed, 0, 0))?;
    let table = build_hindsight_table(&batch, &scorer, &cfg.hindsight)?;
    let adv = compute_advantages(&batch, &table, &cfg.advantage)?;
    records::write_records(output(out)?, &records::credit_records(&batch, &table, &adv)?)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config, omega, seed, iterations, smoothing, norm_scope, metrics, params_out } => {
            let mut run = load(&config)?;
            let cfg = &mut run.train;
            if let Some(w) = omega {
                cfg.advantage.omega = w;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = iterations {
                cfg.iterations = n;
            }
            if let Some(t) = smoothing {
                cfg.hindsight.smoothing_enabled = matches!(t, Toggle::On);
            }
            if let Some(s) = norm_scope {
                cfg.advantage.norm_scope = match s {
                    Scope::Global => NormScope::GlobalCrossState,
                    Scope::PerStep => NormScope::PerTimestep,
                };
            }
            cfg.validate()?;
            train(run, metrics, params_out)?;
            Ok(true)
        }
        Command::Sweep { config, omegas, out_dir } => {
            if omegas.is_empty() {
                bail!("--omegas needs at least one value");
            }
            sweep(load(&config)?, &omegas, &out_dir)?;
            Ok(true)
        }
        Command::OracleCheck { config, samples, params, tables } => {
            oracle_check(load(&config)?, samples, params.as_deref(), tables.as_deref())
        }
        Command::Credit { config, params, out } => {
            credit(load(&config)?, params.as_deref(), out.as_deref())?;
            Ok(true)
        }
    }
}
