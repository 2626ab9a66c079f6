//! `pegin` command line: train, evaluate, gain sweeps, termination trade-off
//! curves, and trajectory replay.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage/config error.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use pegin::checkpoint::Checkpoint;
use pegin::config::{ConfigError, RunConfig};
use pegin::env::PoseErrorMode;
use pegin::eval::{
    compute_metrics, evaluate, gain_sweep, noise_breakdown, termination_tradeoff, write_episodes_csv,
    write_gain_sweep_csv, write_metrics_csv, write_noise_rings_csv, write_tradeoff_csv, EvalOptions,
    EvalPolicy, NoiseBand, DEFAULT_P_TERM, DEPLOY_FORCE_THRESHOLD,
};
use pegin::replay::{record_episode, verify_replay, TrajectoryFile};
use pegin::rl::{train, TrainOptions};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "pegin", version, about = "Contact-rich peg insertion: simulator, trainer, and evaluation harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy with the configured PPO setup.
    Train {
        /// TOML run configuration; defaults to the built-in 8 mm peg preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Task preset used when no config file is given.
        #[arg(long, default_value = "peg8mm")]
        task: String,
        /// Master seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for the resolved config, checkpoints, and logs.
        #[arg(long)]
        out: PathBuf,
        /// Overwrite an existing run directory.
        #[arg(long)]
        force: bool,
        /// Worker threads (0 = machine parallelism).
        #[arg(long)]
        threads: Option<usize>,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Total environment steps override.
        #[arg(long)]
        total_env_steps: Option<u64>,
    },
    /// Evaluate a checkpoint and write metrics CSVs.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 45)]
        episodes: usize,
        /// Pose-error band: low | medium | high | all.
        #[arg(long, default_value = "all")]
        noise_band: String,
        #[arg(long, default_value_t = DEFAULT_P_TERM)]
        p_term: f64,
        /// Deploy with a fixed proportional gain instead of sampling.
        #[arg(long)]
        gains: Option<f64>,
        /// Deployment force threshold (N).
        #[arg(long, default_value_t = DEPLOY_FORCE_THRESHOLD)]
        f_th: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Record the first episode to a trajectory file.
        #[arg(long)]
        record: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Deployment-time gain sweep.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated proportional gains.
        #[arg(long, default_value = "400,500,600,700,800")]
        gains: String,
        #[arg(long, default_value_t = 20)]
        episodes_per_gain: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Termination trade-off curves from full-horizon episodes.
    Curve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Verify that a recorded trajectory replays bit-exactly.
    Replay {
        #[arg(long)]
        trajectory: PathBuf,
        /// Checkpoint override; defaults to the path stored in the file.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

/// Errors that indicate misuse rather than runtime failure.
fn is_usage_error(err: &anyhow::Error) -> bool {
    if err.downcast_ref::<ConfigError>().is_some() {
        return true;
    }
    err.to_string().contains("usage:")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if is_usage_error(&err) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn init_threads(threads: Option<usize>, cfg_threads: usize) {
    let n = threads.unwrap_or(cfg_threads);
    if n > 0 {
        // Ignore failure: the global pool can only be set once per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Applies the output-root environment override to relative paths.
fn resolve_out(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os("PEGIN_OUT_ROOT") {
        Some(root) => PathBuf::from(root).join(path),
        None => path.to_path_buf(),
    }
}

fn load_config(config: &Option<PathBuf>, task: &str, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match config {
        Some(path) => {
            if !path.exists() {
                bail!(ConfigError::Io {
                    path: path.display().to_string(),
                    source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
                });
            }
            RunConfig::load(path)?
        }
        None => RunConfig::preset(task),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn load_policy(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).map_err(|e| anyhow!(e)).with_context(|| {
        format!("cannot load checkpoint {}", path.display())
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            task,
            seed,
            out,
            force,
            threads,
            resume,
            total_env_steps,
        } => {
            let mut cfg = load_config(&config, &task, seed)?;
            if let Some(total) = total_env_steps {
                cfg.ppo.total_env_steps = total;
            }
            init_threads(threads, cfg.threads);
            let out = resolve_out(&out);
            let resolved = out.join("config.toml");
            if resolved.exists() && !force {
                bail!(
                    "usage: run directory {} already holds a resolved config; pass --force to overwrite",
                    out.display()
                );
            }
            std::fs::create_dir_all(&out)
                .with_context(|| format!("cannot create {}", out.display()))?;
            cfg.save(&resolved)?;

            let options = TrainOptions {
                resume: match resume {
                    Some(p) => Some(load_policy(&p)?),
                    None => None,
                },
                ..Default::default()
            };
            let result = train(&cfg, Some(&out), &options)?;
            eprintln!(
                "trained {} env steps; best checkpoint: {}",
                result.env_steps,
                result
                    .best_checkpoint
                    .as_deref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_else(|| "(none)".to_string())
            );
            Ok(())
        }
        Command::Eval {
            checkpoint,
            episodes,
            noise_band,
            p_term,
            gains,
            f_th,
            out,
            seed,
            record,
            threads,
        } => {
            let band = NoiseBand::parse(&noise_band).map_err(|e| anyhow!("usage: {e}"))?;
            let ck = load_policy(&checkpoint)?;
            init_threads(threads, ck.config.threads);
            let out = resolve_out(&out);
            std::fs::create_dir_all(&out)?;
            let (actor, _) = ck.instantiate();
            let policy = EvalPolicy {
                actor: &actor,
                obs_norm: &ck.obs_norm,
            };
            let env_cfg = ck.config.env_config(PoseErrorMode::None);
            let opts = EvalOptions {
                episodes,
                p_term,
                band,
                force_threshold: f_th,
                kp_override: gains,
                seed: seed.unwrap_or(ck.config.seed.wrapping_add(1000)),
            };
            let results = evaluate(&policy, &env_cfg, &opts);
            write_episodes_csv(&out.join("episodes.csv"), &results)?;
            let label = format!(
                "band={noise_band},p_term={p_term},f_th={f_th},gains={}",
                gains.map(|g| g.to_string()).unwrap_or_else(|| "sampled".into())
            );
            write_metrics_csv(
                &out.join("metrics.csv"),
                &[(label, compute_metrics(&results))],
            )?;
            if band == NoiseBand::All {
                write_noise_rings_csv(&out.join("noise_rings.csv"), &noise_breakdown(&results))?;
            }
            if let Some(record_path) = record {
                let mut cfg0 = env_cfg.clone();
                let (r_min, r_max) = pegin::eval::NOISE_BANDS[0];
                cfg0.pose_error_mode = PoseErrorMode::Ring { r_min, r_max };
                cfg0.force_threshold_override = Some(f_th);
                cfg0.kp_override = gains;
                let traj = record_episode(
                    &policy,
                    &cfg0,
                    opts.seed,
                    0,
                    p_term,
                    &checkpoint.display().to_string(),
                );
                traj.save(&resolve_out(&record_path)).map_err(|e| anyhow!(e))?;
            }
            let m = compute_metrics(&results);
            eprintln!(
                "evaluated {} episodes: success {:.3} ({:.3}), duration {:.2}s, F_mean {:.2}N",
                episodes, m.success_rate, m.success_se, m.mean_duration_s, m.f_mean
            );
            Ok(())
        }
        Command::Sweep {
            checkpoint,
            gains,
            episodes_per_gain,
            out,
            seed,
            threads,
        } => {
            let gain_list: Vec<f64> = gains
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|e| anyhow!("usage: invalid gain '{s}': {e}"))
                })
                .collect::<Result<_>>()?;
            if gain_list.is_empty() {
                bail!("usage: at least one gain required");
            }
            let ck = load_policy(&checkpoint)?;
            init_threads(threads, ck.config.threads);
            let out = resolve_out(&out);
            std::fs::create_dir_all(&out)?;
            let (actor, _) = ck.instantiate();
            let policy = EvalPolicy {
                actor: &actor,
                obs_norm: &ck.obs_norm,
            };
            let env_cfg = ck.config.env_config(PoseErrorMode::None);
            let rows = gain_sweep(
                &policy,
                &env_cfg,
                &gain_list,
                episodes_per_gain,
                seed.unwrap_or(ck.config.seed.wrapping_add(2000)),
            );
            write_gain_sweep_csv(&out.join("gain_sweep.csv"), &rows)?;
            for r in &rows {
                eprintln!(
                    "gain {:>5}: success {:.3}, F_mean {:.2}N",
                    r.gain, r.summary.success_rate, r.summary.f_mean
                );
            }
            Ok(())
        }
        Command::Curve {
            checkpoint,
            episodes,
            out,
            seed,
            threads,
        } => {
            let ck = load_policy(&checkpoint)?;
            init_threads(threads, ck.config.threads);
            let out = resolve_out(&out);
            std::fs::create_dir_all(&out)?;
            let (actor, _) = ck.instantiate();
            let policy = EvalPolicy {
                actor: &actor,
                obs_norm: &ck.obs_norm,
            };
            let env_cfg = ck.config.env_config(PoseErrorMode::None);
            let opts = EvalOptions {
                episodes,
                p_term: 1.0, // run to the full horizon; a_ET never exceeds 1
                band: NoiseBand::All,
                force_threshold: DEPLOY_FORCE_THRESHOLD,
                kp_override: None,
                seed: seed.unwrap_or(ck.config.seed.wrapping_add(3000)),
            };
            let results = evaluate(&policy, &env_cfg, &opts);
            let (pred, fixed) = termination_tradeoff(&results);
            write_tradeoff_csv(&out.join("tradeoff.csv"), &pred, &fixed)?;
            eprintln!(
                "tradeoff over {} episodes: {} pred points, {} fixed points",
                episodes,
                pred.len(),
                fixed.len()
            );
            Ok(())
        }
        Command::Replay {
            trajectory,
            checkpoint,
        } => {
            let traj = TrajectoryFile::load(&trajectory).map_err(|e| anyhow!(e))?;
            let ck_path = checkpoint.unwrap_or_else(|| PathBuf::from(&traj.checkpoint_path));
            let ck = load_policy(&ck_path)?;
            verify_replay(&traj, &ck).map_err(|e| anyhow!(e))?;
            eprintln!(
                "replay ok: {} steps reproduced bit-exactly",
                traj.steps.len()
            );
            Ok(())
        }
    }
}
