//! Pendulum swing-up environment with evaluation-time perturbations.
//!
//! Physics: a rod pivoting at one end, `theta` measured from upright, with
//! `theta_dd = (3g/(2l)) sin(theta) + 3u/(m l^2)`, integrated by semi-implicit
//! Euler at `dt = 0.05` over 200-step episodes. The observation is
//! `(cos theta, sin theta, theta_dot)`.
//!
//! The classic step cost `angle^2 + 0.1*speed^2 + 0.001*torque^2` is negated
//! and shifted by [`reward_offset`] so emitted rewards live in `[0, r_max]`
//! as the robust framework assumes; the affine map is recorded in dataset
//! metadata and undone when reporting episode returns.

use crate::data::{Dataset, DatasetMeta, TransitionBatch};
use crate::exec;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use thiserror::Error;

pub const MAX_SPEED: f64 = 8.0;
pub const MAX_TORQUE: f64 = 2.0;
pub const DEFAULT_DT: f64 = 0.05;
pub const EPISODE_STEPS: usize = 200;

/// Shift making the worst per-step reward exactly zero:
/// `pi^2 + 0.1*max_speed^2 + 0.001*max_torque^2`.
pub fn reward_offset() -> f64 {
    PI * PI + 0.1 * MAX_SPEED * MAX_SPEED + 0.001 * MAX_TORQUE * MAX_TORQUE
}

/// Upper bound of the shifted per-step reward.
pub fn reward_max() -> f64 {
    reward_offset()
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("unknown environment parameter {0:?}")]
    UnknownParam(String),
    #[error("invalid perturbation: {0}")]
    InvalidSpec(String),
}

/// Physical parameters; nominal gravity 10, mass 1, length 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendulumParams {
    pub gravity: f64,
    pub mass: f64,
    pub length: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            gravity: 10.0,
            mass: 1.0,
            length: 1.0,
        }
    }
}

/// Observation-noise kind applied to every component of the observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ObsNoise {
    None,
    Gaussian { sigma: f64 },
    Cauchy { scale: f64 },
}

/// Declarative evaluation-time environment shift.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSpec {
    /// Overrides of `gravity`, `mass`, `length` by name.
    pub param_overrides: Vec<(String, f64)>,
    pub obs_noise: ObsNoise,
    /// Probability of replacing the agent action with a uniform torque.
    pub action_random_prob: f64,
}

impl PerturbationSpec {
    pub fn nominal() -> Self {
        Self {
            param_overrides: Vec::new(),
            obs_noise: ObsNoise::None,
            action_random_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if !(0.0..=1.0).contains(&self.action_random_prob) {
            return Err(EnvError::InvalidSpec(format!(
                "action_random_prob {} outside [0,1]",
                self.action_random_prob
            )));
        }
        match self.obs_noise {
            ObsNoise::Gaussian { sigma } if sigma < 0.0 => {
                return Err(EnvError::InvalidSpec(format!("negative sigma {sigma}")))
            }
            ObsNoise::Cauchy { scale } if scale < 0.0 => {
                return Err(EnvError::InvalidSpec(format!("negative scale {scale}")))
            }
            _ => {}
        }
        for (name, value) in &self.param_overrides {
            if !matches!(name.as_str(), "gravity" | "mass" | "length") {
                return Err(EnvError::UnknownParam(name.clone()));
            }
            if !(value.is_finite()) || *value < 0.0 {
                return Err(EnvError::InvalidSpec(format!("{name}={value}")));
            }
        }
        Ok(())
    }

    fn applied_params(&self) -> PendulumParams {
        let mut p = PendulumParams::default();
        for (name, value) in &self.param_overrides {
            match name.as_str() {
                "gravity" => p.gravity = *value,
                "mass" => p.mass = *value,
                "length" => p.length = *value,
                _ => {}
            }
        }
        p
    }
}

/// Result of one evaluation episode; `total_reward` is in the raw (unshifted)
/// reward scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeResult {
    pub total_reward: f64,
    pub steps: usize,
    pub seed: u64,
}

/// The environment itself; deterministic given `(seed, spec)`.
#[derive(Debug, Clone)]
pub struct PendulumEnv {
    params: PendulumParams,
    spec: PerturbationSpec,
    dt: f64,
    theta: f64,
    theta_dot: f64,
    steps: usize,
    rng: ChaCha8Rng,
}

impl PendulumEnv {
    pub fn new(spec: &PerturbationSpec, seed: u64) -> Result<Self, EnvError> {
        spec.validate()?;
        Ok(Self {
            params: spec.applied_params(),
            spec: spec.clone(),
            dt: DEFAULT_DT,
            theta: 0.0,
            theta_dot: 0.0,
            steps: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn params(&self) -> PendulumParams {
        self.params
    }

    #[doc(hidden)]
    pub fn set_dt(&mut self, dt: f64) {
        self.dt = dt;
    }

    /// Places the pendulum at an explicit state (tests and diagnostics).
    pub fn set_state(&mut self, theta: f64, theta_dot: f64) {
        self.theta = theta;
        self.theta_dot = theta_dot;
        self.steps = 0;
    }

    pub fn state(&self) -> (f64, f64) {
        (self.theta, self.theta_dot)
    }

    /// Mechanical energy of the rod (kinetic plus potential, zero at the
    /// pivot height).
    pub fn energy(&self) -> f64 {
        let p = &self.params;
        let inertia = p.mass * p.length * p.length / 3.0;
        0.5 * inertia * self.theta_dot * self.theta_dot
            + p.mass * p.gravity * (p.length / 2.0) * self.theta.cos()
    }

    /// Uniform random start: angle in `(-pi, pi)`, speed in `(-1, 1)`.
    pub fn reset(&mut self) -> [f64; 3] {
        self.theta = self.rng.gen_range(-PI..PI);
        self.theta_dot = self.rng.gen_range(-1.0..1.0);
        self.steps = 0;
        self.observe()
    }

    fn observe(&mut self) -> [f64; 3] {
        let mut obs = [self.theta.cos(), self.theta.sin(), self.theta_dot];
        match self.spec.obs_noise {
            ObsNoise::None => {}
            ObsNoise::Gaussian { sigma } => {
                for o in &mut obs {
                    *o += sigma * self.normal_draw();
                }
            }
            ObsNoise::Cauchy { scale } => {
                for o in &mut obs {
                    let u: f64 = self.rng.gen_range(0.0..1.0);
                    *o += scale * (PI * (u - 0.5)).tan();
                }
            }
        }
        obs
    }

    fn normal_draw(&mut self) -> f64 {
        let u1: f64 = self.rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = self.rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
    }

    /// Advances one step; the returned reward is shifted into `[0, r_max]`.
    pub fn step(&mut self, action: f64) -> ([f64; 3], f64, bool) {
        let mut u = action.clamp(-MAX_TORQUE, MAX_TORQUE);
        if self.spec.action_random_prob > 0.0 {
            let draw: f64 = self.rng.gen_range(0.0..1.0);
            if draw < self.spec.action_random_prob {
                u = self.rng.gen_range(-MAX_TORQUE..MAX_TORQUE);
            }
        }
        let cost = angle_normalize(self.theta).powi(2)
            + 0.1 * self.theta_dot * self.theta_dot
            + 0.001 * u * u;
        let reward = reward_offset() - cost;

        let p = &self.params;
        let accel = 3.0 * p.gravity / (2.0 * p.length) * self.theta.sin()
            + 3.0 / (p.mass * p.length * p.length) * u;
        self.theta_dot = (self.theta_dot + accel * self.dt).clamp(-MAX_SPEED, MAX_SPEED);
        self.theta += self.theta_dot * self.dt;
        self.steps += 1;
        (self.observe(), reward, self.steps >= EPISODE_STEPS)
    }
}

pub fn angle_normalize(theta: f64) -> f64 {
    (theta + PI).rem_euclid(2.0 * PI) - PI
}

/// Anything that maps observations to actions.
pub trait Policy: Sync {
    fn act(&self, obs: &[f64]) -> Vec<f64>;
}

/// Scripted energy-based swing-up controller with a PD balance region near
/// the top. Serves as the default behavior policy for dataset generation.
#[derive(Debug, Clone)]
pub struct SwingUpController {
    pub energy_gain: f64,
    pub balance_kp: f64,
    pub balance_kd: f64,
    params: PendulumParams,
}

impl SwingUpController {
    pub fn new(params: PendulumParams) -> Self {
        Self {
            energy_gain: 2.0,
            balance_kp: 12.0,
            balance_kd: 3.0,
            params,
        }
    }
}

impl Policy for SwingUpController {
    fn act(&self, obs: &[f64]) -> Vec<f64> {
        let theta = obs[1].atan2(obs[0]);
        let theta_dot = obs[2];
        let p = &self.params;
        let inertia = p.mass * p.length * p.length / 3.0;
        let e_top = p.mass * p.gravity * p.length / 2.0;
        let e = 0.5 * inertia * theta_dot * theta_dot
            + p.mass * p.gravity * (p.length / 2.0) * theta.cos();
        let u = if theta.cos() > 0.95 && theta_dot.abs() < 4.0 {
            -self.balance_kp * angle_normalize(theta) - self.balance_kd * theta_dot
        } else {
            let dir = if theta_dot == 0.0 { 1.0 } else { theta_dot.signum() };
            self.energy_gain * (e_top - e) * dir
        };
        vec![u.clamp(-MAX_TORQUE, MAX_TORQUE)]
    }
}

/// A policy that always plays the same action (diagnostics).
#[derive(Debug, Clone)]
pub struct ConstantPolicy(pub Vec<f64>);

impl Policy for ConstantPolicy {
    fn act(&self, _obs: &[f64]) -> Vec<f64> {
        self.0.clone()
    }
}

/// Statistics of a dataset-generation run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenStats {
    pub transitions: usize,
    pub random_actions: usize,
    pub episodes: usize,
}

/// Rolls the behavior policy in the nominal environment with epsilon-greedy
/// exploration and collects `n` transitions (shifted rewards).
pub fn generate_dataset(
    behavior: &dyn Policy,
    n: usize,
    eps: f64,
    seed: u64,
) -> Result<(Dataset, GenStats), EnvError> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(EnvError::InvalidSpec(format!("eps {eps} outside [0,1]")));
    }
    let spec = PerturbationSpec::nominal();
    let mut env = PendulumEnv::new(&spec, seed)?;
    let mut action_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut states = Vec::with_capacity(3 * n);
    let mut actions = Vec::with_capacity(n);
    let mut rewards = Vec::with_capacity(n);
    let mut next_states = Vec::with_capacity(3 * n);
    let mut stats = GenStats {
        transitions: 0,
        random_actions: 0,
        episodes: 0,
    };
    let mut obs = env.reset();
    stats.episodes = 1;
    while stats.transitions < n {
        let take_random = eps > 0.0 && action_rng.gen_range(0.0..1.0) < eps;
        let action = if take_random {
            stats.random_actions += 1;
            action_rng.gen_range(-MAX_TORQUE..MAX_TORQUE)
        } else {
            behavior.act(&obs)[0]
        };
        let (next_obs, reward, done) = env.step(action);
        states.extend_from_slice(&obs);
        actions.push(action);
        rewards.push(reward);
        next_states.extend_from_slice(&next_obs);
        stats.transitions += 1;
        obs = if done {
            stats.episodes += 1;
            env.reset()
        } else {
            next_obs
        };
    }
    let batch = TransitionBatch::new(3, 1, states, actions, rewards, next_states)
        .expect("generated arrays are aligned");
    let params = PendulumParams::default();
    let meta = DatasetMeta {
        env: "pendulum".into(),
        reward_scale: 1.0,
        reward_offset: reward_offset(),
        r_max: reward_max(),
        env_params: vec![
            ("gravity".into(), params.gravity),
            ("length".into(), params.length),
            ("mass".into(), params.mass),
        ],
        eps,
        seed,
    };
    Ok((Dataset { meta, batch }, stats))
}

/// Per-episode seeds derived from a base seed; episodes are independent.
fn episode_seed(base: u64, episode: usize) -> u64 {
    base.wrapping_add((episode as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Rolls `episodes` evaluation episodes under the perturbation spec and
/// returns per-episode raw-scale returns.
pub fn evaluate_episodes(
    policy: &dyn Policy,
    spec: &PerturbationSpec,
    episodes: usize,
    base_seed: u64,
) -> Result<Vec<EpisodeResult>, EnvError> {
    spec.validate()?;
    let results = exec::map_indexed(episodes, |ep| {
        let seed = episode_seed(base_seed, ep);
        let mut env = PendulumEnv::new(spec, seed).expect("spec validated above");
        let mut obs = env.reset();
        let mut total_shifted = 0.0;
        let mut steps = 0;
        loop {
            let action = policy.act(&obs);
            let (next_obs, reward, done) = env.step(action[0]);
            total_shifted += reward;
            steps += 1;
            obs = next_obs;
            if done {
                break;
            }
        }
        EpisodeResult {
            total_reward: total_shifted - steps as f64 * reward_offset(),
            steps,
            seed,
        }
    });
    Ok(results)
}

/// Mean and sample standard deviation of episode returns (raw scale).
pub fn evaluate(
    policy: &dyn Policy,
    spec: &PerturbationSpec,
    episodes: usize,
    base_seed: u64,
) -> Result<(f64, f64), EnvError> {
    let results = evaluate_episodes(policy, spec, episodes, base_seed)?;
    Ok(mean_std(&results))
}

fn mean_std(results: &[EpisodeResult]) -> (f64, f64) {
    let n = results.len() as f64;
    let mean = results.iter().map(|r| r.total_reward).sum::<f64>() / n;
    let std = if results.len() > 1 {
        (results
            .iter()
            .map(|r| (r.total_reward - mean).powi(2))
            .sum::<f64>()
            / (n - 1.0))
            .sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// One point of an evaluation sweep.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    /// Label of the swept quantity (`length`, `mass`, `obs_noise`, ...).
    pub param: String,
    pub value: f64,
    pub spec: PerturbationSpec,
}

/// One output row of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub policy: String,
    pub param: String,
    pub value: f64,
    pub mean: f64,
    pub std: f64,
    pub episodes: usize,
    pub seed: u64,
}

/// Cartesian evaluation of every policy at every grid point. Rows come back
/// in canonical order (policy name, then param, then value), independent of
/// the parallel schedule.
pub fn sweep(
    policies: &[(String, &dyn Policy)],
    grid: &[SweepPoint],
    episodes: usize,
    base_seed: u64,
) -> Result<Vec<SweepRow>, EnvError> {
    for point in grid {
        point.spec.validate()?;
    }
    let total = policies.len() * grid.len();
    let rows = exec::map_indexed(total, |idx| {
        let (pi, gi) = (idx / grid.len(), idx % grid.len());
        let (name, policy) = &policies[pi];
        let point = &grid[gi];
        let results = evaluate_episodes(*policy, &point.spec, episodes, base_seed)
            .expect("specs validated above");
        let (mean, std) = mean_std(&results);
        SweepRow {
            policy: name.clone(),
            param: point.param.clone(),
            value: point.value,
            mean,
            std,
            episodes,
            seed: base_seed,
        }
    });
    let mut rows = rows;
    rows.sort_by(|a, b| {
        (a.policy.as_str(), a.param.as_str())
            .cmp(&(b.policy.as_str(), b.param.as_str()))
            .then(a.value.partial_cmp(&b.value).unwrap())
    });
    Ok(rows)
}

/// Canonical CSV rendering of sweep rows.
pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("policy,param,value,mean,std,episodes,seed\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.policy, r.param, r.value, r.mean, r.std, r.episodes, r.seed
        ));
    }
    out
}
