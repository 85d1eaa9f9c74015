//! Offline soft actor-critic with a distributionally robust critic target.
//!
//! One gradient step runs, in order: a transition-VAE update, synthetic
//! next-state sampling, ascent of the shared dual function on the batch,
//! then V, Q (every critic to the shared robust target), policy and
//! temperature updates, and finally the exponential target-network updates.
//! With `delta = 0` the robust machinery is skipped entirely and the step is
//! the plain SAC-v1 baseline (explicit V-network, min over target critics).
//!
//! All randomness flows from one seeded stream consumed in a fixed order, so
//! training is bit-reproducible and checkpoints can resume mid-run without
//! changing the trajectory.

use crate::data::TransitionBatch;
use crate::envs::{self, PerturbationSpec, Policy};
use crate::functional::{FunctionalError, GBounds, LearnedG};
use crate::nn::{
    gaussian::standard_normal, Activation, GaussianPolicyHead, Mlp, NnError, ParameterStore,
    Tape, Tensor,
};
use crate::vae::{TransitionVae, VaeError};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("config: {0}")]
    Config(String),
    #[error("non-finite {quantity} at step {step}")]
    NonFinite { quantity: String, step: u64 },
    #[error("dataset has no rows")]
    EmptyDataset,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Functional(#[from] FunctionalError),
    #[error(transparent)]
    Vae(#[from] VaeError),
    #[error(transparent)]
    Env(#[from] envs::EnvError),
}

/// Hyperparameters. Defaults follow the pendulum configuration: discount
/// 0.99, soft-update 0.005, initial temperature 0.12, batch 256, two
/// critics, value/critic/policy/temperature rates 5e-4, VAE and dual-function
/// rates 5e-5, five ascent steps for the dual function, ten synthetic atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub gamma: f64,
    pub tau: f64,
    pub alpha_init: f64,
    pub batch_size: usize,
    pub n_critics: usize,
    pub delta: f64,
    pub lr_v: f64,
    pub lr_q: f64,
    pub lr_pi: f64,
    pub lr_alpha: f64,
    pub lr_vae: f64,
    pub lr_g: f64,
    pub g_steps: usize,
    pub m: usize,
    pub target_entropy: f64,
    pub hidden: Vec<usize>,
    pub vae_hidden: Vec<usize>,
    pub activation: Activation,
    pub latent_dim: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_scale: f64,
    pub r_max: f64,
    /// Initial output bias of the V and Q networks. Setting it near the
    /// dataset's mean discounted return skips the long uninformative ramp a
    /// zero-initialized value scale would otherwise crawl through under the
    /// target-network lag.
    pub value_init: f64,
    pub seed: u64,
}

impl AgentConfig {
    pub fn pendulum_default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.005,
            alpha_init: 0.12,
            batch_size: 256,
            n_critics: 2,
            delta: 0.0,
            lr_v: 5e-4,
            lr_q: 5e-4,
            lr_pi: 5e-4,
            lr_alpha: 5e-4,
            lr_vae: 5e-5,
            lr_g: 5e-5,
            g_steps: 5,
            m: 10,
            target_entropy: -1.0,
            hidden: vec![64, 64],
            vae_hidden: vec![64, 64],
            activation: Activation::Relu,
            latent_dim: 5,
            state_dim: 3,
            action_dim: 1,
            action_scale: envs::MAX_TORQUE,
            r_max: envs::reward_max(),
            value_init: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        let fail = |msg: String| Err(AgentError::Config(msg));
        if !(0.0..1.0).contains(&self.gamma) {
            return fail(format!("gamma {} outside [0,1)", self.gamma));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return fail(format!("tau {} outside (0,1]", self.tau));
        }
        if self.n_critics < 2 {
            return fail(format!("need at least 2 critics, got {}", self.n_critics));
        }
        if self.delta < 0.0 || !self.delta.is_finite() {
            return fail(format!("delta {} must be non-negative", self.delta));
        }
        if self.batch_size == 0 || self.m == 0 {
            return fail("batch_size and m must be positive".into());
        }
        for (name, lr) in [
            ("lr_v", self.lr_v),
            ("lr_q", self.lr_q),
            ("lr_pi", self.lr_pi),
            ("lr_alpha", self.lr_alpha),
            ("lr_vae", self.lr_vae),
            ("lr_g", self.lr_g),
        ] {
            if !(lr > 0.0) {
                return fail(format!("{name} must be positive, got {lr}"));
            }
        }
        if self.state_dim == 0 || self.action_dim == 0 || self.action_scale <= 0.0 {
            return fail("state/action dimensions must be positive".into());
        }
        if !(self.alpha_init > 0.0) {
            return fail(format!("alpha_init {} must be positive", self.alpha_init));
        }
        Ok(())
    }

    pub fn robust(&self) -> bool {
        self.delta > 0.0
    }

    /// Admissible range of the shared dual function. The entropy-bonus term
    /// uses the log-volume of the action box as the continuous counterpart
    /// of `log |A|`.
    pub fn g_bounds(&self) -> Result<GBounds, FunctionalError> {
        let log_actions = self.action_dim as f64 * (2.0 * self.action_scale).ln();
        GBounds::new(self.r_max, self.alpha_init, log_actions, self.gamma, self.delta)
    }
}

/// Per-step scalar diagnostics; the robust-only fields are `None` in
/// baseline mode.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub vae_loss: Option<f64>,
    pub g_objective: Option<f64>,
    pub v_loss: f64,
    pub q_loss: f64,
    pub policy_loss: f64,
    pub alpha_loss: f64,
    pub alpha: f64,
    pub eval_mean: Option<f64>,
    pub eval_std: Option<f64>,
}

const METRICS_HEADER: &str =
    "step,vae_loss,g_objective,v_loss,q_loss,policy_loss,alpha_loss,alpha,eval_mean,eval_std";

impl MetricsRow {
    pub fn csv_header() -> &'static str {
        METRICS_HEADER
    }

    pub fn to_csv(&self) -> String {
        let opt = |x: &Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            opt(&self.vae_loss),
            opt(&self.g_objective),
            self.v_loss,
            self.q_loss,
            self.policy_loss,
            self.alpha_loss,
            self.alpha,
            opt(&self.eval_mean),
            opt(&self.eval_std),
        )
    }
}

/// Training options for the fixed-loop driver.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub steps: u64,
    /// Evaluate every this many steps (0 disables evaluation).
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub eval_spec: PerturbationSpec,
}

/// The agent: networks, target copies, temperature, and the RNG stream.
pub struct AgentState {
    config: AgentConfig,
    v_net: Mlp,
    v_store: ParameterStore,
    v_target: ParameterStore,
    critics: Vec<Mlp>,
    critic_stores: Vec<ParameterStore>,
    critic_targets: Vec<ParameterStore>,
    policy_net: Mlp,
    policy_store: ParameterStore,
    head: GaussianPolicyHead,
    g_fn: Option<LearnedG>,
    g_store: ParameterStore,
    vae: Option<TransitionVae>,
    vae_store: ParameterStore,
    alpha_store: ParameterStore,
    rng: ChaCha8Rng,
    step: u64,
}

fn dims(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut d = vec![input];
    d.extend_from_slice(hidden);
    d.push(output);
    d
}

impl AgentState {
    pub fn new(config: AgentConfig) -> Result<Self, AgentError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let sd = config.state_dim;
        let ad = config.action_dim;

        let v_net = Mlp::new("v", &dims(sd, &config.hidden, 1), config.activation);
        let mut v_store = ParameterStore::new();
        v_net.init(&mut v_store, &mut rng)?;
        let out_layer = config.hidden.len();
        v_store.value_mut(&format!("v.b{out_layer}"))?.data[0] = config.value_init;
        let mut v_target = ParameterStore::new();
        v_net.init(&mut v_target, &mut ChaCha8Rng::seed_from_u64(0))?;
        v_target.copy_values_from(&v_store)?;

        let mut critics = Vec::new();
        let mut critic_stores = Vec::new();
        let mut critic_targets = Vec::new();
        for i in 0..config.n_critics {
            let net = Mlp::new(&format!("q{i}"), &dims(sd + ad, &config.hidden, 1), config.activation);
            let mut store = ParameterStore::new();
            net.init(&mut store, &mut rng)?;
            store.value_mut(&format!("q{i}.b{out_layer}"))?.data[0] = config.value_init;
            let mut target = ParameterStore::new();
            net.init(&mut target, &mut ChaCha8Rng::seed_from_u64(0))?;
            target.copy_values_from(&store)?;
            critics.push(net);
            critic_stores.push(store);
            critic_targets.push(target);
        }

        let policy_net = Mlp::new("pi", &dims(sd, &config.hidden, 2 * ad), config.activation);
        let mut policy_store = ParameterStore::new();
        policy_net.init(&mut policy_store, &mut rng)?;
        let head = GaussianPolicyHead::new(ad, config.action_scale);

        let (g_fn, mut g_store) = if config.robust() {
            let net = Mlp::new("g", &dims(sd + ad, &config.hidden, 1), config.activation);
            let mut store = ParameterStore::new();
            net.init(&mut store, &mut rng)?;
            (Some(LearnedG::new(net, config.g_bounds()?)), store)
        } else {
            (None, ParameterStore::new())
        };
        let _ = &mut g_store;

        let (vae, mut vae_store) = if config.robust() {
            let vae = TransitionVae::new(
                "vae",
                sd,
                ad,
                config.latent_dim,
                &config.vae_hidden,
                config.activation,
            );
            let mut store = ParameterStore::new();
            vae.init(&mut store, &mut rng)?;
            (Some(vae), store)
        } else {
            (None, ParameterStore::new())
        };
        let _ = &mut vae_store;

        let mut alpha_store = ParameterStore::new();
        alpha_store.insert("alpha", Tensor::scalar(config.alpha_init))?;

        Ok(Self {
            config,
            v_net,
            v_store,
            v_target,
            critics,
            critic_stores,
            critic_targets,
            policy_net,
            policy_store,
            head,
            g_fn,
            g_store,
            vae,
            vae_store,
            alpha_store,
            rng,
            step: 0,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn alpha(&self) -> f64 {
        self.alpha_store.value("alpha").unwrap().data[0]
    }

    /// Largest |target - online| V-network parameter gap (target-lag probe).
    pub fn v_target_lag(&self) -> f64 {
        self.v_target.max_abs_diff(&self.v_store).unwrap()
    }

    fn draw_batch(&mut self, dataset: &TransitionBatch) -> TransitionBatch {
        let indices: Vec<usize> = (0..self.config.batch_size)
            .map(|_| self.rng.gen_range(0..dataset.len()))
            .collect();
        dataset.select(&indices)
    }

    fn sa_inputs(&self, batch: &TransitionBatch) -> Tensor {
        let n = batch.len();
        let cols = self.config.state_dim + self.config.action_dim;
        let mut t = Tensor::zeros(n, cols);
        for i in 0..n {
            let row = &mut t.data[i * cols..(i + 1) * cols];
            row[..self.config.state_dim].copy_from_slice(batch.state_row(i));
            row[self.config.state_dim..].copy_from_slice(batch.action_row(i));
        }
        t
    }

    /// Target-V values of the synthetic atoms, `[B, m]`.
    fn atom_values(&self, batch: &TransitionBatch) -> Result<Tensor, AgentError> {
        let synth = batch
            .synthetic
            .as_ref()
            .ok_or_else(|| AgentError::Config("batch has no synthetic atoms".into()))?;
        let n = batch.len();
        let atoms = Tensor::from_vec(n * synth.m, self.config.state_dim, synth.atoms.clone());
        let v = self.v_net.forward_plain(&self.v_target, &atoms)?;
        Ok(Tensor::from_vec(n, synth.m, v.data))
    }

    /// Robust per-row critic targets `r + gamma * f((s,a), g(s,a))` computed
    /// from the batch's synthetic measures, the target V-network, and the
    /// current shared dual function. In `delta = 0` mode this degenerates to
    /// `r + gamma * mean_atoms V_target`.
    pub fn robust_targets(&self, batch: &TransitionBatch) -> Result<Vec<f64>, AgentError> {
        let v_atoms = self.atom_values(batch)?;
        let n = batch.len();
        let m = v_atoms.cols;
        if !self.config.robust() {
            return Ok((0..n)
                .map(|i| {
                    let mean: f64 =
                        v_atoms.data[i * m..(i + 1) * m].iter().sum::<f64>() / m as f64;
                    batch.rewards[i] + self.config.gamma * mean
                })
                .collect());
        }
        let g_fn = self.g_fn.as_ref().expect("robust mode has a dual function");
        let g_values = g_fn.values_plain(&self.g_store, &self.sa_inputs(batch))?;
        let targets: Vec<f64> = (0..n)
            .map(|i| {
                let values = &v_atoms.data[i * m..(i + 1) * m];
                let f = robust_row_value(values, g_values[i], self.config.delta);
                batch.rewards[i] + self.config.gamma * f
            })
            .collect();
        for (i, t) in targets.iter().enumerate() {
            if !t.is_finite() {
                return Err(AgentError::NonFinite {
                    quantity: format!("robust target row {i}"),
                    step: self.step,
                });
            }
        }
        Ok(targets)
    }

    /// Plain SAC critic targets `r + gamma * V_target(s')` at the observed
    /// next states.
    pub fn sac_targets(&self, batch: &TransitionBatch) -> Result<Vec<f64>, AgentError> {
        let v = self
            .v_net
            .forward_plain(&self.v_target, &batch.next_states_tensor())?;
        Ok(batch
            .rewards
            .iter()
            .zip(&v.data)
            .map(|(r, vs)| r + self.config.gamma * vs)
            .collect())
    }

    /// V-network regression target: `min_i Q_target_i(s, a~) - alpha log pi(a~|s)`
    /// at freshly sampled actions.
    fn v_targets(&mut self, batch: &TransitionBatch) -> Result<Tensor, AgentError> {
        let states = batch.states_tensor();
        let (actions, log_probs) =
            self.head
                .sample_plain(&self.policy_store, &self.policy_net, &states, &mut self.rng)?;
        let q_min = self.min_target_q(&states, &actions)?;
        let alpha = self.alpha();
        let mut t = Tensor::zeros(batch.len(), 1);
        for i in 0..batch.len() {
            t.data[i] = q_min.data[i] - alpha * log_probs.data[i];
        }
        Ok(t)
    }

    fn min_target_q(&self, states: &Tensor, actions: &Tensor) -> Result<Tensor, AgentError> {
        let n = states.rows;
        let cols = self.config.state_dim + self.config.action_dim;
        let mut sa = Tensor::zeros(n, cols);
        for i in 0..n {
            let row = &mut sa.data[i * cols..(i + 1) * cols];
            row[..self.config.state_dim]
                .copy_from_slice(&states.data[i * states.cols..(i + 1) * states.cols]);
            row[self.config.state_dim..]
                .copy_from_slice(&actions.data[i * actions.cols..(i + 1) * actions.cols]);
        }
        let mut min_q: Option<Tensor> = None;
        for (net, target) in self.critics.iter().zip(&self.critic_targets) {
            let q = net.forward_plain(target, &sa)?;
            min_q = Some(match min_q {
                None => q,
                Some(mut acc) => {
                    for (a, b) in acc.data.iter_mut().zip(&q.data) {
                        *a = a.min(*b);
                    }
                    acc
                }
            });
        }
        Ok(min_q.expect("at least two critics"))
    }

    /// Squared-error loss of the V-network against its target; applies one
    /// optimizer step and returns the loss value.
    fn update_v(&mut self, batch: &TransitionBatch) -> Result<f64, AgentError> {
        let target = self.v_targets(batch)?;
        self.update_v_with_target(batch, &target)
    }

    fn update_v_with_target(
        &mut self,
        batch: &TransitionBatch,
        target: &Tensor,
    ) -> Result<f64, AgentError> {
        let mut tape = Tape::new();
        let loss = regression_loss_graph(
            &mut tape,
            &self.v_net,
            &self.v_store,
            &batch.states_tensor(),
            target,
        )?;
        let value = tape.scalar_value(loss);
        self.v_store.zero_grads();
        tape.backward(loss, &mut self.v_store)?;
        self.v_store.adam_step(self.config.lr_v);
        Ok(value)
    }

    /// Regresses every critic to the shared targets; returns the mean loss.
    fn update_critics(&mut self, batch: &TransitionBatch, targets: &[f64]) -> Result<f64, AgentError> {
        let sa = self.sa_inputs(batch);
        let target_t = Tensor::from_vec(batch.len(), 1, targets.to_vec());
        let mut total = 0.0;
        for i in 0..self.critics.len() {
            let mut tape = Tape::new();
            let loss = regression_loss_graph(
                &mut tape,
                &self.critics[i],
                &self.critic_stores[i],
                &sa,
                &target_t,
            )?;
            total += tape.scalar_value(loss);
            self.critic_stores[i].zero_grads();
            tape.backward(loss, &mut self.critic_stores[i])?;
            self.critic_stores[i].adam_step(self.config.lr_q);
        }
        Ok(total / self.critics.len() as f64)
    }

    /// Reparameterized policy loss `alpha log pi(f(eps;s)|s) - min_i Q_target_i(s, f(eps;s))`.
    fn update_policy(&mut self, batch: &TransitionBatch) -> Result<f64, AgentError> {
        let eps = standard_normal(batch.len(), self.config.action_dim, &mut self.rng);
        let mut tape = Tape::new();
        let loss = policy_loss_graph(
            &mut tape,
            &self.policy_net,
            &self.policy_store,
            &self.head,
            &self.critics,
            &self.critic_targets,
            self.alpha(),
            &batch.states_tensor(),
            &eps,
        )?;
        let value = tape.scalar_value(loss);
        self.policy_store.zero_grads();
        tape.backward(loss, &mut self.policy_store)?;
        self.policy_store.adam_step(self.config.lr_pi);
        Ok(value)
    }

    /// Temperature loss `E[-alpha (log pi + target_entropy)]` at freshly
    /// sampled actions, descended with respect to alpha only. Alpha is
    /// clamped at 1e-6 from below.
    fn update_temperature(&mut self, batch: &TransitionBatch) -> Result<f64, AgentError> {
        let states = batch.states_tensor();
        let (_, log_probs) =
            self.head
                .sample_plain(&self.policy_store, &self.policy_net, &states, &mut self.rng)?;
        let mut tape = Tape::new();
        let loss = alpha_loss_graph(
            &mut tape,
            &self.alpha_store,
            &log_probs,
            self.config.target_entropy,
        )?;
        let value = tape.scalar_value(loss);
        self.alpha_store.zero_grads();
        tape.backward(loss, &mut self.alpha_store)?;
        self.alpha_store.adam_step(self.config.lr_alpha);
        let a = self.alpha_store.value_mut("alpha")?;
        if a.data[0] < 1e-6 {
            a.data[0] = 1e-6;
        }
        Ok(value)
    }

    fn soft_updates(&mut self) -> Result<(), AgentError> {
        self.v_target
            .soft_update_from(&self.v_store, self.config.tau)?;
        for (target, online) in self.critic_targets.iter_mut().zip(&self.critic_stores) {
            target.soft_update_from(online, self.config.tau)?;
        }
        Ok(())
    }

    /// One full robust gradient step (Algorithm-1 order). Requires robust
    /// mode; `step` dispatches automatically.
    pub fn gradient_step(&mut self, dataset: &TransitionBatch) -> Result<MetricsRow, AgentError> {
        if !self.config.robust() {
            return Err(AgentError::Config(
                "gradient_step requires delta > 0; use sac_baseline_step".into(),
            ));
        }
        if dataset.is_empty() {
            return Err(AgentError::EmptyDataset);
        }
        self.step += 1;
        let mut batch = self.draw_batch(dataset);

        // 1. Transition-model update.
        let vae = self.vae.clone().expect("robust mode has a VAE");
        let vae_loss = vae.train_step(&mut self.vae_store, &batch, self.config.lr_vae, &mut self.rng)?;

        // 2. Synthetic next-state measures for the batch.
        let atoms = vae.sample_batch_atoms(&self.vae_store, &batch, self.config.m, &mut self.rng)?;
        batch
            .set_synthetic(self.config.m, atoms)
            .map_err(|e| AgentError::Config(e.to_string()))?;

        // 3. Shared dual-function ascent on this batch (warm-started from the
        //    previous step's parameters).
        let v_atoms = self.atom_values(&batch)?;
        let sa = self.sa_inputs(&batch);
        let g_fn = self.g_fn.clone().expect("robust mode has a dual function");
        let trace = g_fn.ascend(
            &mut self.g_store,
            &sa,
            &v_atoms,
            self.config.delta,
            self.config.g_steps,
            self.config.lr_g,
        )?;
        let g_objective = *trace.last().expect("trace is never empty");

        // 4-7. Value, critics, policy, temperature.
        let v_loss = self.update_v(&batch)?;
        let targets = self.robust_targets(&batch)?;
        let q_loss = self.update_critics(&batch, &targets)?;
        let policy_loss = self.update_policy(&batch)?;
        let alpha_loss = self.update_temperature(&batch)?;

        // 8. Target updates.
        self.soft_updates()?;

        let row = MetricsRow {
            step: self.step,
            vae_loss: Some(vae_loss),
            g_objective: Some(g_objective),
            v_loss,
            q_loss,
            policy_loss,
            alpha_loss,
            alpha: self.alpha(),
            eval_mean: None,
            eval_std: None,
        };
        self.check_finite(&row)?;
        Ok(row)
    }

    /// One plain SAC step: no transition model, no dual function, critic
    /// targets at the observed next states.
    pub fn sac_baseline_step(&mut self, dataset: &TransitionBatch) -> Result<MetricsRow, AgentError> {
        if dataset.is_empty() {
            return Err(AgentError::EmptyDataset);
        }
        self.step += 1;
        let batch = self.draw_batch(dataset);
        let v_loss = self.update_v(&batch)?;
        let targets = self.sac_targets(&batch)?;
        let q_loss = self.update_critics(&batch, &targets)?;
        let policy_loss = self.update_policy(&batch)?;
        let alpha_loss = self.update_temperature(&batch)?;
        self.soft_updates()?;
        let row = MetricsRow {
            step: self.step,
            vae_loss: None,
            g_objective: None,
            v_loss,
            q_loss,
            policy_loss,
            alpha_loss,
            alpha: self.alpha(),
            eval_mean: None,
            eval_std: None,
        };
        self.check_finite(&row)?;
        Ok(row)
    }

    /// Robust step when `delta > 0`, baseline step otherwise.
    pub fn train_step(&mut self, dataset: &TransitionBatch) -> Result<MetricsRow, AgentError> {
        if self.config.robust() {
            self.gradient_step(dataset)
        } else {
            self.sac_baseline_step(dataset)
        }
    }

    fn check_finite(&self, row: &MetricsRow) -> Result<(), AgentError> {
        for (name, value) in [
            ("v_loss", Some(row.v_loss)),
            ("q_loss", Some(row.q_loss)),
            ("policy_loss", Some(row.policy_loss)),
            ("alpha_loss", Some(row.alpha_loss)),
            ("vae_loss", row.vae_loss),
            ("g_objective", row.g_objective),
        ] {
            if let Some(v) = value {
                if !v.is_finite() {
                    return Err(AgentError::NonFinite {
                        quantity: name.into(),
                        step: self.step,
                    });
                }
            }
        }
        Ok(())
    }

    /// Fixed training loop: steps, periodic deterministic evaluation, and a
    /// per-row sink (the CLI writes CSV lines and checkpoints from it).
    pub fn train<F>(
        &mut self,
        dataset: &TransitionBatch,
        opts: &TrainOptions,
        mut sink: F,
    ) -> Result<Vec<MetricsRow>, AgentError>
    where
        F: FnMut(&AgentState, &MetricsRow) -> Result<(), AgentError>,
    {
        let mut rows = Vec::new();
        while self.step < opts.steps {
            let mut row = self.train_step(dataset)?;
            if opts.eval_every > 0 && row.step % opts.eval_every == 0 {
                let seed = self
                    .config
                    .seed
                    .wrapping_add(row.step.wrapping_mul(0x2545_f491_4f6c_dd1d));
                let (mean, std) = envs::evaluate(
                    &self.as_policy(),
                    &opts.eval_spec,
                    opts.eval_episodes,
                    seed,
                )?;
                row.eval_mean = Some(mean);
                row.eval_std = Some(std);
            }
            sink(self, &row)?;
            rows.push(row);
        }
        Ok(rows)
    }

    /// Deterministic evaluation-time policy view (squashed mean action).
    pub fn as_policy(&self) -> AgentPolicy<'_> {
        AgentPolicy { agent: self }
    }

    // -- checkpointing --------------------------------------------------

    /// Flattens every store plus the step counter and RNG state.
    pub fn checkpoint_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        out.extend(self.v_store.to_named_tensors("v"));
        out.extend(self.v_target.to_named_tensors("v_targ"));
        for (i, (store, target)) in self
            .critic_stores
            .iter()
            .zip(&self.critic_targets)
            .enumerate()
        {
            out.extend(store.to_named_tensors(&format!("q{i}")));
            out.extend(target.to_named_tensors(&format!("q{i}_targ")));
        }
        out.extend(self.policy_store.to_named_tensors("pi"));
        if self.config.robust() {
            out.extend(self.g_store.to_named_tensors("g"));
            out.extend(self.vae_store.to_named_tensors("vae"));
        }
        out.extend(self.alpha_store.to_named_tensors("alpha"));
        out.push(("meta::step".into(), Tensor::scalar(f64::from_bits(self.step))));
        let seed = self.rng.get_seed();
        let mut seed_bits = Vec::with_capacity(4);
        for chunk in seed.chunks_exact(8) {
            seed_bits.push(f64::from_bits(u64::from_le_bytes(chunk.try_into().unwrap())));
        }
        out.push(("meta::rng_seed".into(), Tensor::from_vec(1, 4, seed_bits)));
        let pos = self.rng.get_word_pos();
        out.push((
            "meta::rng_pos".into(),
            Tensor::from_vec(
                1,
                2,
                vec![
                    f64::from_bits(pos as u64),
                    f64::from_bits((pos >> 64) as u64),
                ],
            ),
        ));
        out
    }

    /// Restores a checkpoint produced by [`Self::checkpoint_tensors`] for an
    /// agent built from the same config.
    pub fn restore(&mut self, tensors: &[(String, Tensor)]) -> Result<(), AgentError> {
        self.v_store.load_named_tensors("v", tensors)?;
        self.v_target.load_named_tensors("v_targ", tensors)?;
        for i in 0..self.critic_stores.len() {
            self.critic_stores[i].load_named_tensors(&format!("q{i}"), tensors)?;
            self.critic_targets[i].load_named_tensors(&format!("q{i}_targ"), tensors)?;
        }
        self.policy_store.load_named_tensors("pi", tensors)?;
        if self.config.robust() {
            self.g_store.load_named_tensors("g", tensors)?;
            self.vae_store.load_named_tensors("vae", tensors)?;
        }
        self.alpha_store.load_named_tensors("alpha", tensors)?;
        let lookup: std::collections::HashMap<&str, &Tensor> =
            tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let fetch = |key: &str| -> Result<&Tensor, AgentError> {
            lookup
                .get(key)
                .copied()
                .ok_or_else(|| AgentError::Checkpoint(format!("missing {key:?}")))
        };
        self.step = fetch("meta::step")?.data[0].to_bits();
        let seed_t = fetch("meta::rng_seed")?;
        let mut seed = [0u8; 32];
        for (i, x) in seed_t.data.iter().enumerate() {
            seed[i * 8..(i + 1) * 8].copy_from_slice(&x.to_bits().to_le_bytes());
        }
        let pos_t = fetch("meta::rng_pos")?;
        let pos = (pos_t.data[0].to_bits() as u128) | ((pos_t.data[1].to_bits() as u128) << 64);
        self.rng = ChaCha8Rng::from_seed(seed);
        self.rng.set_word_pos(pos);
        Ok(())
    }
}

/// Per-row robust value `-g log((1/m) sum exp(-v/g)) - g delta`.
fn robust_row_value(values: &[f64], g: f64, delta: f64) -> f64 {
    let lme = crate::nn::log_mean_exp(
        &values.iter().map(|v| -v / g).collect::<Vec<f64>>(),
    );
    -g * lme - g * delta
}

/// Mean of `0.5 * (net(x) - target)^2` — the V and critic losses.
fn regression_loss_graph(
    tape: &mut Tape,
    net: &Mlp,
    store: &ParameterStore,
    inputs: &Tensor,
    target: &Tensor,
) -> Result<crate::nn::Var, NnError> {
    let x = tape.constant(inputs.clone());
    let y = net.forward(tape, store, x, true)?;
    let t = tape.constant(target.clone());
    let diff = tape.sub(y, t);
    let sq = tape.square(diff);
    let half = tape.scale(sq, 0.5);
    Ok(tape.mean_all(half))
}

/// Mean of `alpha log pi(f(eps;s)|s) - min_i Q_target_i(s, f(eps;s))`,
/// differentiable through the reparameterized action only.
#[allow(clippy::too_many_arguments)]
fn policy_loss_graph(
    tape: &mut Tape,
    policy_net: &Mlp,
    policy_store: &ParameterStore,
    head: &GaussianPolicyHead,
    critics: &[Mlp],
    critic_targets: &[ParameterStore],
    alpha: f64,
    states: &Tensor,
    eps: &Tensor,
) -> Result<crate::nn::Var, NnError> {
    let s = tape.constant(states.clone());
    let out = policy_net.forward(tape, policy_store, s, true)?;
    let (action, log_prob) = head.sample_on_tape(tape, out, eps)?;
    let sa = tape.concat_cols(s, action);
    let mut q_min = None;
    for (net, target) in critics.iter().zip(critic_targets) {
        let q = net.forward(tape, target, sa, false)?;
        q_min = Some(match q_min {
            None => q,
            Some(acc) => tape.min_pair(acc, q),
        });
    }
    let q_min = q_min.expect("at least one critic");
    let ent_term = tape.scale(log_prob, alpha);
    let core = tape.sub(ent_term, q_min);
    Ok(tape.mean_all(core))
}

/// Mean of `-alpha (log pi + target_entropy)`, a function of alpha alone.
fn alpha_loss_graph(
    tape: &mut Tape,
    alpha_store: &ParameterStore,
    log_probs: &Tensor,
    target_entropy: f64,
) -> Result<crate::nn::Var, NnError> {
    let inner = Tensor {
        rows: log_probs.rows,
        cols: 1,
        data: log_probs
            .data
            .iter()
            .map(|lp| -(lp + target_entropy))
            .collect(),
    };
    let alpha = tape.param(alpha_store, "alpha")?;
    let inner_c = tape.constant(inner);
    let prod = tape.mul_scalar_broadcast(alpha, inner_c);
    Ok(tape.mean_all(prod))
}

/// Central-difference checks of every loss gradient on a small frozen agent:
/// V, critic, policy, temperature, transition-model ELBO, and the dual
/// function objective. Returns `(loss name, worst relative error)` pairs.
pub fn loss_gradient_checks(seed: u64) -> Result<Vec<(String, f64)>, AgentError> {
    use crate::nn::gradient_check;

    // Smooth activations keep the finite-difference stencil away from
    // piecewise kinks.
    let config = AgentConfig {
        delta: 0.4,
        batch_size: 6,
        hidden: vec![6, 6],
        vae_hidden: vec![6],
        latent_dim: 2,
        m: 3,
        activation: Activation::Tanh,
        seed,
        ..AgentConfig::pendulum_default()
    };
    let mut agent = AgentState::new(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let n = config.batch_size;
    let mut states = Vec::new();
    let mut actions = Vec::new();
    let mut rewards = Vec::new();
    let mut next_states = Vec::new();
    for _ in 0..n {
        let theta: f64 = rng.gen_range(-3.0..3.0);
        states.extend_from_slice(&[theta.cos(), theta.sin(), rng.gen_range(-4.0..4.0)]);
        actions.push(rng.gen_range(-2.0..2.0));
        rewards.push(rng.gen_range(0.0..envs::reward_max()));
        next_states.extend_from_slice(&[
            (theta + 0.1).cos(),
            (theta + 0.1).sin(),
            rng.gen_range(-4.0..4.0),
        ]);
    }
    let mut batch = TransitionBatch::new(3, 1, states, actions, rewards, next_states)
        .map_err(|e| AgentError::Config(e.to_string()))?;
    let vae = agent.vae.clone().expect("robust config");
    let atoms = vae.sample_batch_atoms(&agent.vae_store, &batch, config.m, &mut rng)?;
    batch
        .set_synthetic(config.m, atoms)
        .map_err(|e| AgentError::Config(e.to_string()))?;

    let h = 1e-5;
    let mut out = Vec::new();

    // J_V.
    let v_target = agent.v_targets(&batch)?;
    let states_t = batch.states_tensor();
    {
        let mut tape = Tape::new();
        let loss =
            regression_loss_graph(&mut tape, &agent.v_net, &agent.v_store, &states_t, &v_target)?;
        agent.v_store.zero_grads();
        tape.backward(loss, &mut agent.v_store)?;
        let names: Vec<String> = agent.v_store.names().map(String::from).collect();
        let net = agent.v_net.clone();
        let worst = gradient_check(
            &mut agent.v_store,
            &names,
            |s| {
                let mut t = Tape::new();
                let l = regression_loss_graph(&mut t, &net, s, &states_t, &v_target).unwrap();
                t.scalar_value(l)
            },
            h,
        )?;
        out.push(("v_loss".to_string(), worst));
    }

    // Robust J_Q (first critic, shared robust target).
    {
        let targets = agent.robust_targets(&batch)?;
        let target_t = Tensor::from_vec(batch.len(), 1, targets);
        let sa = agent.sa_inputs(&batch);
        let mut tape = Tape::new();
        let loss = regression_loss_graph(
            &mut tape,
            &agent.critics[0],
            &agent.critic_stores[0],
            &sa,
            &target_t,
        )?;
        agent.critic_stores[0].zero_grads();
        tape.backward(loss, &mut agent.critic_stores[0])?;
        let names: Vec<String> = agent.critic_stores[0].names().map(String::from).collect();
        let net = agent.critics[0].clone();
        let worst = gradient_check(
            &mut agent.critic_stores[0],
            &names,
            |s| {
                let mut t = Tape::new();
                let l = regression_loss_graph(&mut t, &net, s, &sa, &target_t).unwrap();
                t.scalar_value(l)
            },
            h,
        )?;
        out.push(("robust_q_loss".to_string(), worst));
    }

    // J_pi.
    {
        let eps = standard_normal(batch.len(), config.action_dim, &mut rng);
        let alpha = agent.alpha();
        let mut tape = Tape::new();
        let loss = policy_loss_graph(
            &mut tape,
            &agent.policy_net,
            &agent.policy_store,
            &agent.head,
            &agent.critics,
            &agent.critic_targets,
            alpha,
            &states_t,
            &eps,
        )?;
        agent.policy_store.zero_grads();
        tape.backward(loss, &mut agent.policy_store)?;
        let names: Vec<String> = agent.policy_store.names().map(String::from).collect();
        let (net, head) = (agent.policy_net.clone(), agent.head.clone());
        let critics = agent.critics.clone();
        let critic_targets = &agent.critic_targets;
        let worst = gradient_check(
            &mut agent.policy_store,
            &names,
            |s| {
                let mut t = Tape::new();
                let l = policy_loss_graph(
                    &mut t,
                    &net,
                    s,
                    &head,
                    &critics,
                    critic_targets,
                    alpha,
                    &states_t,
                    &eps,
                )
                .unwrap();
                t.scalar_value(l)
            },
            h,
        )?;
        out.push(("policy_loss".to_string(), worst));
    }

    // J(alpha).
    {
        let (_, log_probs) = agent.head.sample_plain(
            &agent.policy_store,
            &agent.policy_net,
            &states_t,
            &mut rng,
        )?;
        let mut tape = Tape::new();
        let loss = alpha_loss_graph(
            &mut tape,
            &agent.alpha_store,
            &log_probs,
            config.target_entropy,
        )?;
        agent.alpha_store.zero_grads();
        tape.backward(loss, &mut agent.alpha_store)?;
        let worst = gradient_check(
            &mut agent.alpha_store,
            &["alpha".to_string()],
            |s| {
                let mut t = Tape::new();
                let l =
                    alpha_loss_graph(&mut t, s, &log_probs, config.target_entropy).unwrap();
                t.scalar_value(l)
            },
            h,
        )?;
        out.push(("alpha_loss".to_string(), worst));
    }

    // J_VAE.
    {
        let eps = standard_normal(batch.len(), config.latent_dim, &mut rng);
        let mut tape = Tape::new();
        let loss = vae.elbo_on_tape(&mut tape, &agent.vae_store, &batch, &eps)?;
        agent.vae_store.zero_grads();
        tape.backward(loss, &mut agent.vae_store)?;
        let names: Vec<String> = agent.vae_store.names().map(String::from).collect();
        let worst = gradient_check(
            &mut agent.vae_store,
            &names,
            |s| {
                let mut t = Tape::new();
                let l = vae.elbo_on_tape(&mut t, s, &batch, &eps).unwrap();
                t.scalar_value(l)
            },
            h,
        )?;
        out.push(("vae_loss".to_string(), worst));
    }

    // Dual-function objective.
    {
        let g_fn = agent.g_fn.clone().expect("robust config");
        let v_atoms = agent.atom_values(&batch)?;
        let sa = agent.sa_inputs(&batch);
        let mut tape = Tape::new();
        let obj = g_fn.objective_on_tape(&mut tape, &agent.g_store, &sa, &v_atoms, config.delta)?;
        let loss = tape.neg(obj);
        agent.g_store.zero_grads();
        tape.backward(loss, &mut agent.g_store)?;
        let names: Vec<String> = agent.g_store.names().map(String::from).collect();
        let worst = gradient_check(
            &mut agent.g_store,
            &names,
            |s| {
                let mut t = Tape::new();
                let o = g_fn
                    .objective_on_tape(&mut t, s, &sa, &v_atoms, config.delta)
                    .unwrap();
                let l = t.neg(o);
                t.scalar_value(l)
            },
            h,
        )?;
        out.push(("g_objective".to_string(), worst));
    }

    Ok(out)
}

/// Evaluation-time deterministic policy backed by a frozen agent reference.
pub struct AgentPolicy<'a> {
    agent: &'a AgentState,
}

impl Policy for AgentPolicy<'_> {
    fn act(&self, obs: &[f64]) -> Vec<f64> {
        let input = Tensor::from_vec(1, obs.len(), obs.to_vec());
        let action = self
            .agent
            .head
            .mean_action(&self.agent.policy_store, &self.agent.policy_net, &input)
            .expect("policy forward cannot fail on valid shapes");
        action.data
    }
}

#[cfg(test)]
mod tests;
