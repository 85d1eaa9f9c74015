//! Exact robust soft dynamic programming on finite MDPs.
//!
//! The model is a finite MDP whose transition kernel ranges over per
//! state-action KL balls of radius `delta` around the nominal kernel. The
//! robust soft Bellman backup replaces the next-state expectation with its
//! worst case over the ball ([`crate::kl_dual::solve_dual`]); iterating it is
//! a `gamma`-contraction, so policy evaluation, improvement and full policy
//! iteration all behave as in the non-robust soft setting.

mod regret;
mod text;

pub use regret::{regret_bound_check, RegretReport};

use crate::exec;
use crate::kl_dual::{self, DualSolution, KlDualError};
use thiserror::Error;

/// Default iteration cap for fixed-point loops.
pub const EVALUATION_MAX_ITERS: usize = 100_000;

/// Default cap on policy-iteration rounds.
pub const POLICY_ITERATION_MAX_ROUNDS: usize = 10_000;

#[derive(Debug, Error)]
pub enum TabularError {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("policy improvement requires alpha > 0 (got {0})")]
    ZeroTemperature(f64),
    #[error("no fixed point within {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("transition supports differ at state {state}, action {action}")]
    SupportMismatch { state: usize, action: usize },
    #[error(
        "transition divergence {kl:.3e} at ({state},{action}) exceeds the budget {budget:.3e}"
    )]
    KlBudgetExceeded {
        state: usize,
        action: usize,
        kl: f64,
        budget: f64,
    },
    #[error("model text format: {0}")]
    Format(String),
    #[error(transparent)]
    Dual(#[from] KlDualError),
}

/// Finite robust MDP: rewards, nominal transitions, and the robustness and
/// entropy parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularRmdp {
    n_states: usize,
    n_actions: usize,
    reward: Vec<Vec<f64>>,
    /// Nominal transition rows, `transitions[s][a][s']`.
    transitions: Vec<Vec<Vec<f64>>>,
    gamma: f64,
    delta: f64,
    alpha: f64,
    r_max: f64,
}

impl TabularRmdp {
    pub fn new(
        reward: Vec<Vec<f64>>,
        transitions: Vec<Vec<Vec<f64>>>,
        gamma: f64,
        delta: f64,
        alpha: f64,
        r_max: f64,
    ) -> Result<Self, TabularError> {
        let n_states = reward.len();
        if n_states == 0 {
            return Err(TabularError::InvalidModel("no states".into()));
        }
        let n_actions = reward[0].len();
        if n_actions == 0 {
            return Err(TabularError::InvalidModel("no actions".into()));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(TabularError::InvalidModel(format!(
                "gamma must lie in [0, 1), got {gamma}"
            )));
        }
        if delta < 0.0 || !delta.is_finite() {
            return Err(TabularError::InvalidModel(format!(
                "delta must be non-negative, got {delta}"
            )));
        }
        if alpha < 0.0 || !alpha.is_finite() {
            return Err(TabularError::InvalidModel(format!(
                "alpha must be non-negative, got {alpha}"
            )));
        }
        if transitions.len() != n_states {
            return Err(TabularError::ShapeMismatch(format!(
                "{} transition rows for {} states",
                transitions.len(),
                n_states
            )));
        }
        for (s, (r_row, t_row)) in reward.iter().zip(&transitions).enumerate() {
            if r_row.len() != n_actions || t_row.len() != n_actions {
                return Err(TabularError::ShapeMismatch(format!(
                    "state {s} does not have {n_actions} actions"
                )));
            }
            for (a, (&r, probs)) in r_row.iter().zip(t_row).enumerate() {
                if !(0.0..=r_max).contains(&r) {
                    return Err(TabularError::InvalidModel(format!(
                        "reward[{s}][{a}] = {r} outside [0, {r_max}]"
                    )));
                }
                if probs.len() != n_states {
                    return Err(TabularError::ShapeMismatch(format!(
                        "transitions[{s}][{a}] has {} atoms, expected {n_states}",
                        probs.len()
                    )));
                }
                validate_prob_row(probs)
                    .map_err(|e| TabularError::InvalidModel(format!("transitions[{s}][{a}]: {e}")))?;
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            reward,
            transitions,
            gamma,
            delta,
            alpha,
            r_max,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn reward(&self) -> &Vec<Vec<f64>> {
        &self.reward
    }

    pub fn transitions(&self) -> &Vec<Vec<Vec<f64>>> {
        &self.transitions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    /// Returns a copy with the transition kernel replaced (used to build
    /// estimated models for the regret check).
    pub fn with_transitions(&self, transitions: Vec<Vec<Vec<f64>>>) -> Result<Self, TabularError> {
        Self::new(
            self.reward.clone(),
            transitions,
            self.gamma,
            self.delta,
            self.alpha,
            self.r_max,
        )
    }

    /// Returns a copy with a different ball radius.
    pub fn with_delta(&self, delta: f64) -> Result<Self, TabularError> {
        Self::new(
            self.reward.clone(),
            self.transitions.clone(),
            self.gamma,
            delta,
            self.alpha,
            self.r_max,
        )
    }

    /// Upper bound on any soft value: `(r_max + alpha*log|A|)/(1-gamma)`.
    pub fn value_bound(&self) -> f64 {
        (self.r_max + self.alpha * (self.n_actions as f64).ln()) / (1.0 - self.gamma)
    }
}

fn validate_prob_row(probs: &[f64]) -> Result<(), String> {
    let mut sum = 0.0;
    for &p in probs {
        if !p.is_finite() || p < 0.0 {
            return Err(format!("probability {p} is not finite and non-negative"));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > kl_dual::PROB_SUM_TOL {
        return Err(format!("row sums to {sum}, not 1"));
    }
    Ok(())
}

/// Soft state-action value table, `q[s][a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftQTable {
    pub q: Vec<Vec<f64>>,
}

impl SoftQTable {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self {
            q: vec![vec![0.0; n_actions]; n_states],
        }
    }

    pub fn sup_norm_diff(&self, other: &Self) -> f64 {
        let mut d: f64 = 0.0;
        for (row_a, row_b) in self.q.iter().zip(&other.q) {
            for (a, b) in row_a.iter().zip(row_b) {
                d = d.max((a - b).abs());
            }
        }
        d
    }

    pub fn max_abs(&self) -> f64 {
        self.q
            .iter()
            .flatten()
            .fold(0.0_f64, |m, &x| m.max(x.abs()))
    }
}

/// Row-stochastic policy, `pi[s][a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticPolicy {
    pub pi: Vec<Vec<f64>>,
}

impl StochasticPolicy {
    pub fn new(pi: Vec<Vec<f64>>) -> Result<Self, TabularError> {
        for (s, row) in pi.iter().enumerate() {
            validate_prob_row(row)
                .map_err(|e| TabularError::InvalidModel(format!("policy row {s}: {e}")))?;
        }
        Ok(Self { pi })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            pi: vec![vec![1.0 / n_actions as f64; n_actions]; n_states],
        }
    }
}

/// Soft state value table, `v[s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftVTable {
    pub v: Vec<f64>,
}

/// Shannon entropy of the policy row at state `s`, with `0*log 0 := 0`.
pub fn policy_entropy(policy: &StochasticPolicy, s: usize) -> f64 {
    policy.pi[s]
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

/// Soft state values from a Q-table: `v[s] = sum_a pi(a|s) (q[s][a] - alpha*log pi(a|s))`.
pub fn soft_value_from_q(q: &SoftQTable, policy: &StochasticPolicy, alpha: f64) -> SoftVTable {
    let v = q
        .q
        .iter()
        .zip(&policy.pi)
        .map(|(q_row, pi_row)| {
            q_row
                .iter()
                .zip(pi_row)
                .filter(|(_, &p)| p > 0.0)
                .map(|(&qa, &p)| p * (qa - alpha * p.ln()))
                .sum()
        })
        .collect();
    SoftVTable { v }
}

/// One application of the robust soft Bellman operator: for each `(s, a)`,
/// `reward + gamma * worst-case E[V(s')]` over the KL ball around the nominal
/// row. Entries are independent and solved in parallel.
pub fn dr_soft_bellman(q: &SoftQTable, policy: &StochasticPolicy, rmdp: &TabularRmdp) -> SoftQTable {
    dr_soft_bellman_with_duals(q, policy, rmdp).0
}

/// As [`dr_soft_bellman`], also returning the per-entry dual solutions in
/// `(s, a)` row-major order (the regret check needs the multipliers).
pub fn dr_soft_bellman_with_duals(
    q: &SoftQTable,
    policy: &StochasticPolicy,
    rmdp: &TabularRmdp,
) -> (SoftQTable, Vec<DualSolution>) {
    let v = soft_value_from_q(q, policy, rmdp.alpha);
    let n_actions = rmdp.n_actions;
    let entries = exec::map_indexed(rmdp.n_states * n_actions, |idx| {
        let s = idx / n_actions;
        let a = idx % n_actions;
        let sol = kl_dual::solve_dual_slices(&v.v, &rmdp.transitions[s][a], rmdp.delta);
        (rmdp.reward[s][a] + rmdp.gamma * sol.value, sol)
    });
    let mut table = SoftQTable::zeros(rmdp.n_states, n_actions);
    let mut duals = Vec::with_capacity(entries.len());
    for (idx, (value, sol)) in entries.into_iter().enumerate() {
        table.q[idx / n_actions][idx % n_actions] = value;
        duals.push(sol);
    }
    (table, duals)
}

/// The non-robust soft Bellman operator (the `delta = 0` special case,
/// computed without any ball machinery).
pub fn nonrobust_soft_bellman(
    q: &SoftQTable,
    policy: &StochasticPolicy,
    rmdp: &TabularRmdp,
) -> SoftQTable {
    let v = soft_value_from_q(q, policy, rmdp.alpha);
    let n_actions = rmdp.n_actions;
    let entries = exec::map_indexed(rmdp.n_states * n_actions, |idx| {
        let s = idx / n_actions;
        let a = idx % n_actions;
        let expect: f64 = rmdp.transitions[s][a]
            .iter()
            .zip(&v.v)
            .map(|(p, vs)| p * vs)
            .sum();
        rmdp.reward[s][a] + rmdp.gamma * expect
    });
    let mut table = SoftQTable::zeros(rmdp.n_states, n_actions);
    for (idx, value) in entries.into_iter().enumerate() {
        table.q[idx / n_actions][idx % n_actions] = value;
    }
    table
}

/// Iterates the robust soft Bellman operator from the zero table until the
/// successive sup-norm change drops below `tol * (1-gamma)/gamma`, which
/// guarantees the returned table has fixed-point residual below `tol`.
pub fn dr_soft_policy_evaluation(
    policy: &StochasticPolicy,
    rmdp: &TabularRmdp,
    tol: f64,
) -> Result<SoftQTable, TabularError> {
    if !(tol > 0.0) {
        return Err(TabularError::InvalidModel(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    let stop = if rmdp.gamma == 0.0 {
        f64::INFINITY
    } else {
        tol * (1.0 - rmdp.gamma) / rmdp.gamma
    };
    let mut q = SoftQTable::zeros(rmdp.n_states, rmdp.n_actions);
    let mut residual = f64::INFINITY;
    for _ in 0..EVALUATION_MAX_ITERS {
        let next = dr_soft_bellman(&q, policy, rmdp);
        residual = next.sup_norm_diff(&q);
        q = next;
        if residual < stop {
            return Ok(q);
        }
    }
    Err(TabularError::NonConvergence {
        iterations: EVALUATION_MAX_ITERS,
        residual,
    })
}

/// Soft policy improvement: the KL projection of `exp(Q/alpha)` onto the
/// stochastic policy class, which in the tabular case is the row softmax
/// `pi(a|s) ∝ exp(q[s][a]/alpha)` (computed with max subtraction; the
/// normalizer of the projection target cancels and is never materialized).
pub fn dr_soft_policy_improvement(
    q: &SoftQTable,
    rmdp: &TabularRmdp,
) -> Result<StochasticPolicy, TabularError> {
    if !(rmdp.alpha > 0.0) {
        return Err(TabularError::ZeroTemperature(rmdp.alpha));
    }
    let pi = q
        .q
        .iter()
        .map(|row| softmax(row, rmdp.alpha))
        .collect();
    Ok(StochasticPolicy { pi })
}

fn softmax(q_row: &[f64], alpha: f64) -> Vec<f64> {
    let max = q_row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let mut out: Vec<f64> = q_row.iter().map(|&x| ((x - max) / alpha).exp()).collect();
    let z: f64 = out.iter().sum();
    for w in &mut out {
        *w /= z;
    }
    out
}

/// Result of robust soft policy iteration.
#[derive(Debug, Clone)]
pub struct PolicyIterationResult {
    pub policy: StochasticPolicy,
    pub q: SoftQTable,
    pub iterations: usize,
}

/// Alternates evaluation and improvement from the uniform policy until the
/// evaluated Q-table stops changing in sup norm (softmax policies never
/// repeat exactly, so the stop rule is on values).
pub fn dr_soft_policy_iteration(
    rmdp: &TabularRmdp,
    tol: f64,
) -> Result<PolicyIterationResult, TabularError> {
    if !(rmdp.alpha > 0.0) {
        return Err(TabularError::ZeroTemperature(rmdp.alpha));
    }
    if !(tol > 0.0) {
        return Err(TabularError::InvalidModel(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    let eval_tol = (tol * 0.1).min(1e-10);
    let mut policy = StochasticPolicy::uniform(rmdp.n_states, rmdp.n_actions);
    let mut q_prev: Option<SoftQTable> = None;
    for round in 1..=POLICY_ITERATION_MAX_ROUNDS {
        let q = dr_soft_policy_evaluation(&policy, rmdp, eval_tol)?;
        let done = q_prev
            .as_ref()
            .map(|prev| q.sup_norm_diff(prev) < tol)
            .unwrap_or(false);
        policy = dr_soft_policy_improvement(&q, rmdp)?;
        if done {
            return Ok(PolicyIterationResult {
                policy,
                q,
                iterations: round,
            });
        }
        q_prev = Some(q);
    }
    Err(TabularError::NonConvergence {
        iterations: POLICY_ITERATION_MAX_ROUNDS,
        residual: f64::NAN,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify::random_rmdp;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn single_state_rmdp(reward: f64, gamma: f64, delta: f64, alpha: f64) -> TabularRmdp {
        TabularRmdp::new(
            vec![vec![reward]],
            vec![vec![vec![1.0]]],
            gamma,
            delta,
            alpha,
            reward.max(1.0),
        )
        .unwrap()
    }

    #[test]
    fn entropy_of_uniform_and_deterministic_rows() {
        let policy = StochasticPolicy::new(vec![
            vec![0.25, 0.25, 0.25, 0.25],
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.25, 0.75, 0.0, 0.0],
        ])
        .unwrap();
        assert!((policy_entropy(&policy, 0) - 4.0_f64.ln()).abs() < 1e-12);
        assert_eq!(policy_entropy(&policy, 1), 0.0);
        assert!((policy_entropy(&policy, 2) - 0.562_335_144_618_808_35).abs() < 1e-12);
    }

    #[test]
    fn soft_value_reductions() {
        let q = SoftQTable {
            q: vec![vec![1.0, 3.0], vec![2.0, 2.0]],
        };
        // alpha = 0: plain expectation of Q under the policy.
        let policy = StochasticPolicy::new(vec![vec![0.5, 0.5], vec![0.3, 0.7]]).unwrap();
        let v = soft_value_from_q(&q, &policy, 0.0);
        assert!((v.v[0] - 2.0).abs() < 1e-12);
        assert!((v.v[1] - 2.0).abs() < 1e-12);
        // Deterministic policy: value is the chosen Q entry regardless of alpha.
        let det = StochasticPolicy::new(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let v = soft_value_from_q(&q, &det, 0.7);
        assert_eq!(v.v, vec![3.0, 2.0]);
        // Uniform policy over constant Q: c + alpha*log 2.
        let uni = StochasticPolicy::uniform(2, 2);
        let v = soft_value_from_q(&q, &uni, 0.7);
        assert!((v.v[1] - (2.0 + 0.7 * 2.0_f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn bellman_at_zero_delta_matches_nonrobust() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rmdp = random_rmdp(&mut rng, 4, 3, 0.0);
        let policy = StochasticPolicy::uniform(4, 3);
        let q = SoftQTable {
            q: (0..4)
                .map(|_| (0..3).map(|_| rng.gen_range(0.0..5.0)).collect())
                .collect(),
        };
        let robust = dr_soft_bellman(&q, &policy, &rmdp);
        let plain = nonrobust_soft_bellman(&q, &policy, &rmdp);
        assert!(robust.sup_norm_diff(&plain) < 1e-12);
    }

    #[test]
    fn bellman_at_zero_gamma_returns_rewards() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut rmdp = random_rmdp(&mut rng, 3, 2, 0.4);
        rmdp = TabularRmdp::new(
            rmdp.reward().clone(),
            rmdp.transitions().clone(),
            0.0,
            rmdp.delta(),
            rmdp.alpha(),
            rmdp.r_max(),
        )
        .unwrap();
        let policy = StochasticPolicy::uniform(3, 2);
        let q = SoftQTable {
            q: vec![vec![1.0, 2.0], vec![0.5, 0.0], vec![3.0, 1.0]],
        };
        let out = dr_soft_bellman(&q, &policy, &rmdp);
        for s in 0..3 {
            for a in 0..2 {
                assert!((out.q[s][a] - rmdp.reward()[s][a]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn robust_backup_dominated_by_nominal_backup() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let rmdp = random_rmdp(&mut rng, 2, 2, 0.2);
            let policy = StochasticPolicy::uniform(2, 2);
            let q = SoftQTable {
                q: (0..2)
                    .map(|_| (0..2).map(|_| rng.gen_range(0.0..4.0)).collect())
                    .collect(),
            };
            let robust = dr_soft_bellman(&q, &policy, &rmdp);
            let plain = nonrobust_soft_bellman(&q, &policy, &rmdp);
            for s in 0..2 {
                for a in 0..2 {
                    assert!(robust.q[s][a] <= plain.q[s][a] + 1e-10);
                }
            }
        }
    }

    #[test]
    fn self_loop_fixed_point() {
        // Single state and action, deterministic policy, alpha = 0: the
        // robust backup degenerates and Q = r/(1-gamma).
        let rmdp = single_state_rmdp(1.5, 0.9, 0.7, 0.0);
        let policy = StochasticPolicy::new(vec![vec![1.0]]).unwrap();
        let q = dr_soft_policy_evaluation(&policy, &rmdp, 1e-10).unwrap();
        assert!((q.q[0][0] - 15.0).abs() < 1e-8, "got {}", q.q[0][0]);
    }

    #[test]
    fn evaluation_fixed_point_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rmdp = random_rmdp(&mut rng, 4, 3, 0.3);
        let policy = StochasticPolicy::uniform(4, 3);
        let tol = 1e-9;
        let q = dr_soft_policy_evaluation(&policy, &rmdp, tol).unwrap();
        let reapplied = dr_soft_bellman(&q, &policy, &rmdp);
        assert!(reapplied.sup_norm_diff(&q) < tol);
    }

    #[test]
    fn evaluation_with_zero_gamma_is_reward_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let base = random_rmdp(&mut rng, 3, 2, 0.3);
        let rmdp = TabularRmdp::new(
            base.reward().clone(),
            base.transitions().clone(),
            0.0,
            base.delta(),
            base.alpha(),
            base.r_max(),
        )
        .unwrap();
        let policy = StochasticPolicy::uniform(3, 2);
        let q = dr_soft_policy_evaluation(&policy, &rmdp, 1e-9).unwrap();
        for s in 0..3 {
            for a in 0..2 {
                assert_eq!(q.q[s][a], rmdp.reward()[s][a]);
            }
        }
    }

    #[test]
    fn improvement_softmax_rows() {
        let rmdp = {
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            random_rmdp(&mut rng, 2, 3, 0.1)
        };
        // Constant row -> uniform.
        let q = SoftQTable {
            q: vec![vec![2.0, 2.0, 2.0], vec![0.0, 0.0, 0.0]],
        };
        let pi = dr_soft_policy_improvement(&q, &rmdp).unwrap();
        for &p in &pi.pi[0] {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        // Row [0, alpha*ln 2] -> [1/3, 2/3].
        let alpha = rmdp.alpha();
        let rmdp2 = TabularRmdp::new(
            vec![vec![0.0, 0.0]],
            vec![vec![vec![1.0], vec![1.0]]],
            0.5,
            0.0,
            alpha,
            1.0,
        )
        .unwrap();
        let q = SoftQTable {
            q: vec![vec![0.0, alpha * 2.0_f64.ln()]],
        };
        let pi = dr_soft_policy_improvement(&q, &rmdp2).unwrap();
        assert!((pi.pi[0][0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((pi.pi[0][1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn improvement_rejects_zero_temperature() {
        let rmdp = single_state_rmdp(1.0, 0.5, 0.1, 0.0);
        let q = SoftQTable::zeros(1, 1);
        assert!(matches!(
            dr_soft_policy_improvement(&q, &rmdp),
            Err(TabularError::ZeroTemperature(_))
        ));
    }

    #[test]
    fn monotone_improvement_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let rmdp = random_rmdp(&mut rng, 3, 2, 0.25);
            let mut policy = StochasticPolicy::uniform(3, 2);
            let mut q_old = dr_soft_policy_evaluation(&policy, &rmdp, 1e-10).unwrap();
            for _ in 0..3 {
                policy = dr_soft_policy_improvement(&q_old, &rmdp).unwrap();
                let q_new = dr_soft_policy_evaluation(&policy, &rmdp, 1e-10).unwrap();
                for s in 0..3 {
                    for a in 0..2 {
                        assert!(
                            q_new.q[s][a] >= q_old.q[s][a] - 1e-8,
                            "improvement regressed at ({s},{a})"
                        );
                    }
                }
                q_old = q_new;
            }
        }
    }

    #[test]
    fn policy_iteration_single_state_two_rounds() {
        // gamma = 0: the Q-table is the reward row after any evaluation, so
        // iteration stabilizes by the second round at the softmax policy.
        let rmdp = TabularRmdp::new(
            vec![vec![1.0, 2.0]],
            vec![vec![vec![1.0], vec![1.0]]],
            0.0,
            0.3,
            0.5,
            2.0,
        )
        .unwrap();
        let result = dr_soft_policy_iteration(&rmdp, 1e-10).unwrap();
        assert!(result.iterations <= 2, "took {}", result.iterations);
        let expected = softmax(&[1.0, 2.0], 0.5);
        for (got, want) in result.policy.pi[0].iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn policy_iteration_delta_zero_matches_nonrobust_reduction() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let robust0 = random_rmdp(&mut rng, 3, 2, 0.0);
        let result = dr_soft_policy_iteration(&robust0, 1e-9).unwrap();
        // At delta = 0 the robust operator equals the plain soft operator, so
        // the fixed point satisfies the non-robust soft Bellman equation.
        let reapplied = nonrobust_soft_bellman(&result.q, &result.policy, &robust0);
        assert!(reapplied.sup_norm_diff(&result.q) < 1e-7);
    }

    #[test]
    fn policy_iteration_q_sequence_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let rmdp = random_rmdp(&mut rng, 3, 3, 0.4);
        let mut policy = StochasticPolicy::uniform(3, 3);
        let mut prev: Option<SoftQTable> = None;
        let bound = rmdp.value_bound();
        for _ in 0..12 {
            let q = dr_soft_policy_evaluation(&policy, &rmdp, 1e-10).unwrap();
            if let Some(p) = &prev {
                for s in 0..3 {
                    for a in 0..3 {
                        assert!(q.q[s][a] >= p.q[s][a] - 1e-8);
                        assert!(q.q[s][a] <= bound + 1e-9);
                    }
                }
            }
            policy = dr_soft_policy_improvement(&q, &rmdp).unwrap();
            prev = Some(q);
        }
    }

    #[test]
    fn softmax_projection_beats_random_rows() {
        // KL objective of Eq-14 form: J(pi) = sum_a pi_a (log pi_a - q_a/alpha),
        // up to the constant normalizer. The softmax row must minimize it.
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let alpha = 0.37;
        let q_row: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..3.0)).collect();
        let star = softmax(&q_row, alpha);
        let objective = |row: &[f64]| -> f64 {
            row.iter()
                .zip(&q_row)
                .filter(|(&p, _)| p > 0.0)
                .map(|(&p, &q)| p * (p.ln() - q / alpha))
                .sum()
        };
        let j_star = objective(&star);
        for _ in 0..1_000_000 {
            let raw: [f64; 4] = [
                -rng.gen_range(0.0_f64..1.0).ln(),
                -rng.gen_range(0.0_f64..1.0).ln(),
                -rng.gen_range(0.0_f64..1.0).ln(),
                -rng.gen_range(0.0_f64..1.0).ln(),
            ];
            let z: f64 = raw.iter().sum();
            let row: Vec<f64> = raw.iter().map(|w| w / z).collect();
            assert!(objective(&row) >= j_star - 1e-12);
        }
    }

    #[test]
    fn gamma_contraction_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..25 {
            let rmdp = random_rmdp(&mut rng, 4, 3, 0.3);
            let policy = StochasticPolicy::uniform(4, 3);
            let bound = rmdp.value_bound();
            let rand_q = |rng: &mut ChaCha8Rng| SoftQTable {
                q: (0..4)
                    .map(|_| (0..3).map(|_| rng.gen_range(0.0..bound)).collect())
                    .collect(),
            };
            let q1 = rand_q(&mut rng);
            let q2 = rand_q(&mut rng);
            let t1 = dr_soft_bellman(&q1, &policy, &rmdp);
            let t2 = dr_soft_bellman(&q2, &policy, &rmdp);
            assert!(
                t1.sup_norm_diff(&t2) <= rmdp.gamma() * q1.sup_norm_diff(&q2) + 1e-9,
                "contraction violated"
            );
        }
    }
}
