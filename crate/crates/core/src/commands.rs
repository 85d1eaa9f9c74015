//! Command implementations behind the CLI binary.
//!
//! Configuration is a flat `key=value` text file (one pair per line, `#`
//! comments allowed). Parsing is typed and strict: duplicate keys and keys a
//! command does not understand are errors. All randomness derives from the
//! single `seed` key, which the binary's `--seed` flag can override.

use crate::agent::{AgentConfig, AgentError, AgentState, MetricsRow, TrainOptions};
use crate::data::Dataset;
use crate::envs::{
    self, ObsNoise, PendulumParams, PerturbationSpec, Policy, SweepPoint, SwingUpController,
};
use crate::nn::{load_named_tensors, save_named_tensors};
use crate::verify::{self, VerificationReport};
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CommandError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error("verification failed: {failed} of {total} properties")]
    Verification { failed: usize, total: usize },
    #[error("numerical abort: {0}")]
    Numerical(String),
}

impl CommandError {
    /// Process exit code: 2 config, 3 verification failure, 4 numerical
    /// abort, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Config(_) => 2,
            CommandError::Verification { .. } => 3,
            CommandError::Numerical(_) => 4,
            CommandError::Io(_) => 1,
        }
    }
}

/// Flat key=value configuration with consume-tracking so unknown keys can be
/// rejected after a command has taken everything it understands.
#[derive(Debug, Clone, Default)]
pub struct KvConfig {
    map: BTreeMap<String, String>,
    taken: BTreeSet<String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self, CommandError> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CommandError::Config(format!("line {}: expected key=value", lineno + 1))
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if map.insert(key.clone(), value).is_some() {
                return Err(CommandError::Config(format!("duplicate key {key:?}")));
            }
        }
        Ok(Self {
            map,
            taken: BTreeSet::new(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, CommandError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CommandError::Config(format!("reading {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Inserts or replaces a key (CLI flag overrides).
    pub fn set(&mut self, key: &str, value: String) {
        self.map.insert(key.to_string(), value);
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.taken.insert(key.to_string());
        self.map.get(key).cloned()
    }

    fn req<T: std::str::FromStr>(&mut self, key: &str) -> Result<T, CommandError> {
        match self.take(key) {
            Some(v) => v
                .parse()
                .map_err(|_| CommandError::Config(format!("cannot parse {key}={v:?}"))),
            None => Err(CommandError::Config(format!("missing required key {key:?}"))),
        }
    }

    fn opt<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T, CommandError> {
        match self.take(key) {
            Some(v) => v
                .parse()
                .map_err(|_| CommandError::Config(format!("cannot parse {key}={v:?}"))),
            None => Ok(default),
        }
    }

    fn opt_path(&mut self, key: &str) -> Option<PathBuf> {
        self.take(key).map(PathBuf::from)
    }

    fn req_path(&mut self, key: &str) -> Result<PathBuf, CommandError> {
        self.take(key)
            .map(PathBuf::from)
            .ok_or_else(|| CommandError::Config(format!("missing required key {key:?}")))
    }

    fn list_f64(&mut self, key: &str) -> Result<Vec<f64>, CommandError> {
        match self.take(key) {
            None => Ok(Vec::new()),
            Some(v) => v
                .split(',')
                .map(|c| {
                    c.trim()
                        .parse()
                        .map_err(|_| CommandError::Config(format!("bad number in {key}: {c:?}")))
                })
                .collect(),
        }
    }

    fn list_usize(&mut self, key: &str, default: Vec<usize>) -> Result<Vec<usize>, CommandError> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v
                .split(',')
                .map(|c| {
                    c.trim()
                        .parse()
                        .map_err(|_| CommandError::Config(format!("bad integer in {key}: {c:?}")))
                })
                .collect(),
        }
    }

    /// Errors if any key was never consumed by the command.
    fn finish(self) -> Result<(), CommandError> {
        let unknown: Vec<&String> = self
            .map
            .keys()
            .filter(|k| !self.taken.contains(*k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(CommandError::Config(format!("unknown keys: {unknown:?}")))
        }
    }
}

fn agent_config_from(
    cfg: &mut KvConfig,
    r_max: f64,
    value_init_default: f64,
    seed: u64,
) -> Result<AgentConfig, CommandError> {
    let base = AgentConfig::pendulum_default();
    let config = AgentConfig {
        gamma: cfg.opt("gamma", base.gamma)?,
        tau: cfg.opt("tau", base.tau)?,
        alpha_init: cfg.opt("alpha_init", base.alpha_init)?,
        batch_size: cfg.opt("batch_size", base.batch_size)?,
        n_critics: cfg.opt("n_critics", base.n_critics)?,
        delta: cfg.opt("delta", 0.0)?,
        lr_v: cfg.opt("lr_v", base.lr_v)?,
        lr_q: cfg.opt("lr_q", base.lr_q)?,
        lr_pi: cfg.opt("lr_pi", base.lr_pi)?,
        lr_alpha: cfg.opt("lr_alpha", base.lr_alpha)?,
        lr_vae: cfg.opt("lr_vae", base.lr_vae)?,
        lr_g: cfg.opt("lr_g", base.lr_g)?,
        g_steps: cfg.opt("g_steps", base.g_steps)?,
        m: cfg.opt("m", base.m)?,
        target_entropy: cfg.opt("target_entropy", base.target_entropy)?,
        hidden: cfg.list_usize("hidden", base.hidden.clone())?,
        vae_hidden: cfg.list_usize("vae_hidden", base.vae_hidden.clone())?,
        latent_dim: cfg.opt("latent_dim", base.latent_dim)?,
        activation: cfg.opt("activation", base.activation)?,
        state_dim: 3,
        action_dim: 1,
        action_scale: envs::MAX_TORQUE,
        r_max,
        value_init: cfg.opt("value_init", value_init_default)?,
        seed,
    };
    config
        .validate()
        .map_err(|e| CommandError::Config(e.to_string()))?;
    Ok(config)
}

fn io_err(e: impl std::fmt::Display) -> CommandError {
    CommandError::Io(e.to_string())
}

/// `gen-dataset`: roll the behavior policy with epsilon-greedy exploration
/// in the nominal environment, write the dataset container.
pub fn cmd_gen_dataset(mut cfg: KvConfig) -> Result<(PathBuf, envs::GenStats), CommandError> {
    let out = cfg.req_path("out")?;
    let n: usize = cfg.opt("n", 100_000)?;
    let eps: f64 = cfg.opt("eps", 0.5)?;
    let seed: u64 = cfg.opt("seed", 0)?;
    let behavior: String = cfg.opt("behavior", "swingup".to_string())?;

    let (dataset, stats) = match behavior.as_str() {
        "swingup" => {
            cfg.finish()?;
            let controller = SwingUpController::new(PendulumParams::default());
            envs::generate_dataset(&controller, n, eps, seed).map_err(io_err)?
        }
        "snapshot" => {
            let snapshot = cfg.req_path("snapshot")?;
            let config = agent_config_from(&mut cfg, envs::reward_max(), 0.0, seed)?;
            cfg.finish()?;
            let mut agent = AgentState::new(config).map_err(io_err)?;
            let tensors = load_named_tensors(&snapshot).map_err(io_err)?;
            agent.restore(&tensors).map_err(io_err)?;
            envs::generate_dataset(&agent.as_policy(), n, eps, seed).map_err(io_err)?
        }
        other => {
            return Err(CommandError::Config(format!(
                "behavior must be swingup or snapshot, got {other:?}"
            )))
        }
    };
    dataset.save(&out).map_err(io_err)?;
    Ok((out, stats))
}

/// `train`: run the offline agent (robust when `delta > 0`) over a dataset,
/// writing an append-only metrics CSV and rolling checkpoints. Resumable
/// from the rolling checkpoint without changing the trajectory.
pub fn cmd_train(mut cfg: KvConfig) -> Result<TrainSummary, CommandError> {
    let dataset_path = cfg.req_path("dataset")?;
    let out_dir = cfg.req_path("out_dir")?;
    let steps: u64 = cfg.req("steps")?;
    let eval_every: u64 = cfg.opt("eval_every", 1000)?;
    let eval_episodes: usize = cfg.opt("eval_episodes", 10)?;
    let checkpoint_every: u64 = cfg.opt("checkpoint_every", 1000)?;
    let resume: bool = cfg.opt("resume", false)?;
    let seed: u64 = cfg.opt("seed", 0)?;

    let dataset = Dataset::load(&dataset_path).map_err(io_err)?;
    // Mean dataset reward over the discount horizon: the natural scale for
    // the value-output bias.
    let mean_reward: f64 =
        dataset.batch.rewards.iter().sum::<f64>() / dataset.batch.len().max(1) as f64;
    let gamma_probe: f64 = {
        let mut probe = cfg.clone();
        probe.opt("gamma", AgentConfig::pendulum_default().gamma)?
    };
    let config = agent_config_from(
        &mut cfg,
        dataset.meta.r_max,
        mean_reward / (1.0 - gamma_probe),
        seed,
    )?;
    cfg.finish()?;

    std::fs::create_dir_all(&out_dir).map_err(io_err)?;
    let metrics_path = out_dir.join("metrics.csv");
    let checkpoint_path = out_dir.join("checkpoint.ckpt");

    let mut agent = AgentState::new(config).map_err(io_err)?;
    if resume && checkpoint_path.exists() {
        let tensors = load_named_tensors(&checkpoint_path).map_err(io_err)?;
        agent
            .restore(&tensors)
            .map_err(|e| CommandError::Io(format!("restoring checkpoint: {e}")))?;
        rewind_metrics(&metrics_path, agent.step_count())?;
    } else {
        std::fs::write(&metrics_path, format!("{}\n", MetricsRow::csv_header()))
            .map_err(io_err)?;
    }

    let mut metrics = std::fs::OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(io_err)?;
    let opts = TrainOptions {
        steps,
        eval_every,
        eval_episodes,
        eval_spec: PerturbationSpec::nominal(),
    };
    let ckpt = checkpoint_path.clone();
    let result = agent.train(&dataset.batch, &opts, |state, row| {
        writeln!(metrics, "{}", row.to_csv())
            .map_err(|e| AgentError::Checkpoint(format!("writing metrics: {e}")))?;
        if checkpoint_every > 0 && row.step % checkpoint_every == 0 {
            save_named_tensors(&ckpt, &state.checkpoint_tensors())
                .map_err(|e| AgentError::Checkpoint(e.to_string()))?;
        }
        Ok(())
    });
    metrics.flush().map_err(io_err)?;
    match result {
        Ok(_) => {}
        Err(AgentError::NonFinite { quantity, step }) => {
            return Err(CommandError::Numerical(format!(
                "{quantity} diverged at step {step}; last good checkpoint at {}",
                checkpoint_path.display()
            )));
        }
        Err(e) => return Err(io_err(e)),
    }
    save_named_tensors(&checkpoint_path, &agent.checkpoint_tensors()).map_err(io_err)?;
    Ok(TrainSummary {
        metrics_path,
        checkpoint_path,
        steps_completed: agent.step_count(),
    })
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub steps_completed: u64,
}

/// Drops metrics rows past the checkpointed step so a resumed run appends
/// exactly the rows the uninterrupted run would have written.
fn rewind_metrics(path: &Path, step: u64) -> Result<(), CommandError> {
    let text = std::fs::read_to_string(path).map_err(io_err)?;
    let mut kept = String::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            kept.push_str(line);
            kept.push('\n');
            continue;
        }
        let row_step: u64 = line
            .split(',')
            .next()
            .and_then(|c| c.parse().ok())
            .unwrap_or(u64::MAX);
        if row_step <= step {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept).map_err(io_err)
}

/// `eval`: load a trained checkpoint and sweep it over a perturbation grid,
/// writing the canonical CSV.
pub fn cmd_eval(mut cfg: KvConfig) -> Result<PathBuf, CommandError> {
    let checkpoint = cfg.req_path("checkpoint")?;
    let out = cfg.req_path("out")?;
    let episodes: usize = cfg.opt("episodes", 50)?;
    let seed: u64 = cfg.opt("seed", 0)?;
    let policy_name: String = cfg.opt("policy_name", "agent".to_string())?;
    let include_nominal: bool = cfg.opt("include_nominal", true)?;

    let mut grid = Vec::new();
    if include_nominal {
        grid.push(SweepPoint {
            param: "nominal".into(),
            value: 1.0,
            spec: PerturbationSpec::nominal(),
        });
    }
    let nominal = PendulumParams::default();
    for (key, param, base) in [
        ("sweep_length", "length", nominal.length),
        ("sweep_mass", "mass", nominal.mass),
        ("sweep_gravity", "gravity", nominal.gravity),
    ] {
        for multiplier in cfg.list_f64(key)? {
            grid.push(SweepPoint {
                param: param.into(),
                value: multiplier,
                spec: PerturbationSpec {
                    param_overrides: vec![(param.into(), base * multiplier)],
                    ..PerturbationSpec::nominal()
                },
            });
        }
    }
    for sigma in cfg.list_f64("sweep_obs_gaussian")? {
        grid.push(SweepPoint {
            param: "obs_gaussian".into(),
            value: sigma,
            spec: PerturbationSpec {
                obs_noise: ObsNoise::Gaussian { sigma },
                ..PerturbationSpec::nominal()
            },
        });
    }
    for scale in cfg.list_f64("sweep_obs_cauchy")? {
        grid.push(SweepPoint {
            param: "obs_cauchy".into(),
            value: scale,
            spec: PerturbationSpec {
                obs_noise: ObsNoise::Cauchy { scale },
                ..PerturbationSpec::nominal()
            },
        });
    }
    for prob in cfg.list_f64("sweep_action_random")? {
        grid.push(SweepPoint {
            param: "action_random".into(),
            value: prob,
            spec: PerturbationSpec {
                action_random_prob: prob,
                ..PerturbationSpec::nominal()
            },
        });
    }

    let config = agent_config_from(&mut cfg, envs::reward_max(), 0.0, seed)?;
    cfg.finish()?;
    if !checkpoint.exists() {
        return Err(CommandError::Io(format!(
            "checkpoint {} does not exist",
            checkpoint.display()
        )));
    }
    let mut agent = AgentState::new(config).map_err(io_err)?;
    let tensors = load_named_tensors(&checkpoint).map_err(io_err)?;
    agent.restore(&tensors).map_err(io_err)?;

    let policy = agent.as_policy();
    let policies: Vec<(String, &dyn Policy)> = vec![(policy_name, &policy)];
    let rows = envs::sweep(&policies, &grid, episodes, seed).map_err(io_err)?;
    std::fs::write(&out, envs::sweep_to_csv(&rows)).map_err(io_err)?;
    Ok(out)
}

/// `verify`: run the full randomized property suite from the master seed,
/// print one line per property, and optionally write the JSON report.
pub fn cmd_verify(mut cfg: KvConfig) -> Result<VerificationReport, CommandError> {
    let seed: u64 = cfg.opt("seed", 0)?;
    let out = cfg.opt_path("out");
    cfg.finish()?;

    let report = verify::full_report(seed);
    for r in &report.results {
        println!(
            "{} {:<32} worst={:<12.3e} tol={:<9.1e} instances={:<5} {:.2}s{}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.worst_violation,
            r.tolerance,
            r.instances,
            r.wall_seconds,
            r.failure
                .as_deref()
                .map(|f| format!("  [{f}]"))
                .unwrap_or_default(),
        );
    }
    if let Some(path) = out {
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| CommandError::Io(e.to_string()))?;
        std::fs::write(&path, json).map_err(io_err)?;
    }
    if report.passed() {
        Ok(report)
    } else {
        Err(CommandError::Verification {
            failed: report.results.iter().filter(|r| !r.passed).count(),
            total: report.results.len(),
        })
    }
}
