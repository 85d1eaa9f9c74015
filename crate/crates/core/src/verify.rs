//! Randomized property suite and its shared instance generators.
//!
//! Each property runs a batch of randomized instances from a master seed and
//! measures the worst violation against a pinned tolerance. The CLI `verify`
//! command aggregates them into a [`VerificationReport`]; the acceptance
//! test suite drives the same runners.

use crate::kl_dual::{self, DiscreteDistribution};
use crate::tabular::{self, StochasticPolicy, TabularError, TabularRmdp};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Outcome of one property over a batch of randomized instances.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PropertyResult {
    pub name: String,
    pub passed: bool,
    /// Worst measured violation (0 when every instance satisfied the bound).
    pub worst_violation: f64,
    /// Tolerance the violation is compared against.
    pub tolerance: f64,
    pub instances: usize,
    pub wall_seconds: f64,
    /// Human-readable description of the first failure, if any.
    pub failure: Option<String>,
}

/// Aggregate of all property results; overall pass iff every property passed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationReport {
    pub seed: u64,
    pub results: Vec<PropertyResult>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }
}

// ---------------------------------------------------------------------------
// Instance generators
// ---------------------------------------------------------------------------

/// Random dense distribution with `n` atoms, values in `[0, 8]`, and every
/// probability bounded away from zero.
pub fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> DiscreteDistribution {
    let values: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..8.0)).collect();
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let probs = raw.iter().map(|w| w / total).collect();
    DiscreteDistribution::new(values, probs).unwrap()
}

/// Random dense robust MDP with rewards in `[0, 1]`, full-support transition
/// rows, `gamma` in `[0.6, 0.9]` and `alpha` in `[0.05, 0.5]`.
pub fn random_rmdp(
    rng: &mut ChaCha8Rng,
    n_states: usize,
    n_actions: usize,
    delta: f64,
) -> TabularRmdp {
    random_rmdp_with_gamma(rng, n_states, n_actions, delta, 0.6..0.9)
}

/// As [`random_rmdp`] with an explicit discount range.
pub fn random_rmdp_with_gamma(
    rng: &mut ChaCha8Rng,
    n_states: usize,
    n_actions: usize,
    delta: f64,
    gamma_range: std::ops::Range<f64>,
) -> TabularRmdp {
    let r_max = 1.0;
    let reward: Vec<Vec<f64>> = (0..n_states)
        .map(|_| (0..n_actions).map(|_| rng.gen_range(0.0..r_max)).collect())
        .collect();
    let transitions: Vec<Vec<Vec<f64>>> = (0..n_states)
        .map(|_| {
            (0..n_actions)
                .map(|_| {
                    let raw: Vec<f64> = (0..n_states).map(|_| rng.gen_range(0.05..1.0)).collect();
                    let total: f64 = raw.iter().sum();
                    raw.iter().map(|w| w / total).collect()
                })
                .collect()
        })
        .collect();
    let gamma = rng.gen_range(gamma_range);
    let alpha = rng.gen_range(0.05..0.5);
    TabularRmdp::new(reward, transitions, gamma, delta, alpha, r_max).unwrap()
}

/// Random stochastic policy with full support.
pub fn random_policy(rng: &mut ChaCha8Rng, n_states: usize, n_actions: usize) -> StochasticPolicy {
    let pi = (0..n_states)
        .map(|_| {
            let raw: Vec<f64> = (0..n_actions).map(|_| rng.gen_range(0.1..1.0)).collect();
            let total: f64 = raw.iter().sum();
            raw.iter().map(|w| w / total).collect()
        })
        .collect();
    StochasticPolicy::new(pi).unwrap()
}

/// Perturbs every transition row of `rmdp` so that each perturbed row `p_hat`
/// keeps the support of `p` and satisfies `KL(p || p_hat) <= eps1^2`, landing
/// near the budget without crossing it.
pub fn perturb_transitions(
    rmdp: &TabularRmdp,
    eps1: f64,
    rng: &mut ChaCha8Rng,
) -> Result<TabularRmdp, TabularError> {
    let budget = eps1 * eps1;
    let transitions = rmdp
        .transitions()
        .iter()
        .map(|per_action| {
            per_action
                .iter()
                .map(|row| perturb_row(row, budget, rng))
                .collect()
        })
        .collect();
    rmdp.with_transitions(transitions)
}

fn perturb_row(row: &[f64], kl_budget: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if kl_budget == 0.0 {
        return row.to_vec();
    }
    let direction: Vec<f64> = row.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
    let tilt = |t: f64| -> Vec<f64> {
        let raw: Vec<f64> = row
            .iter()
            .zip(&direction)
            .map(|(&p, &u)| if p > 0.0 { p * (t * u).exp() } else { 0.0 })
            .collect();
        let z: f64 = raw.iter().sum();
        raw.iter().map(|w| w / z).collect()
    };
    // KL(p || tilt(t)) grows monotonically in |t| near 0; bisect to land at
    // about 80% of the budget.
    let target = 0.8 * kl_budget;
    let mut lo = 0.0;
    let mut hi = 1.0;
    while kl_dual::kl_divergence(row, &tilt(hi)) < target && hi < 1e6 {
        hi *= 2.0;
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if kl_dual::kl_divergence(row, &tilt(mid)) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let out = tilt(lo);
    debug_assert!(kl_dual::kl_divergence(row, &out) <= kl_budget);
    out
}

// ---------------------------------------------------------------------------
// Property runners
// ---------------------------------------------------------------------------

fn timed<F: FnOnce() -> (bool, f64, usize, Option<String>)>(
    name: &str,
    tolerance: f64,
    body: F,
) -> PropertyResult {
    let start = std::time::Instant::now();
    let (passed, worst_violation, instances, failure) = body();
    PropertyResult {
        name: name.to_string(),
        passed,
        worst_violation,
        tolerance,
        instances,
        wall_seconds: start.elapsed().as_secs_f64(),
        failure,
    }
}

/// Dual-primal equivalence on random distributions, parameterized by the
/// dual solver under test (the mutation-sanity test passes a broken one).
pub fn dual_primal_property<F>(
    seed: u64,
    cases: usize,
    max_support: usize,
    deltas: &[f64],
    dual_value: F,
) -> PropertyResult
where
    F: Fn(&DiscreteDistribution, f64) -> f64,
{
    let tol = 1e-5;
    timed("dual_primal_equivalence", tol, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        let mut failure = None;
        let mut count = 0;
        for case in 0..cases {
            let n = rng.gen_range(2..=max_support);
            let dist = random_distribution(&mut rng, n);
            for &delta in deltas {
                count += 1;
                let dual = dual_value(&dist, delta);
                let primal = kl_dual::solve_primal_bruteforce(&dist, delta).unwrap();
                let gap = (dual - primal).abs();
                if gap > worst {
                    worst = gap;
                    if gap > tol && failure.is_none() {
                        failure = Some(format!(
                            "case {case} delta {delta}: dual {dual} vs primal {primal}"
                        ));
                    }
                }
            }
        }
        (worst <= tol, worst, count, failure)
    })
}

/// Boundary characterization: `beta* = 0` exactly when `log(kappa) + delta >= 0`.
pub fn boundary_property(seed: u64, cases_per_side: usize) -> PropertyResult {
    let tol = 1e-9;
    timed("beta_zero_boundary", tol, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        let mut failure = None;
        for case in 0..cases_per_side {
            // Construct an instance with a known minimum-tie mass kappa.
            let n = rng.gen_range(3..=8);
            let kappa: f64 = rng.gen_range(0.15..0.85);
            let vmin = rng.gen_range(0.0..2.0);
            let n_low = rng.gen_range(1..n.max(2) - 1);
            let mut values = vec![vmin; n_low];
            let mut raw_low: Vec<f64> = (0..n_low).map(|_| rng.gen_range(0.2..1.0)).collect();
            let z_low: f64 = raw_low.iter().sum();
            raw_low.iter_mut().for_each(|w| *w *= kappa / z_low);
            let n_high = n - n_low;
            values.extend((0..n_high).map(|_| vmin + rng.gen_range(0.5..5.0)));
            let mut raw_high: Vec<f64> = (0..n_high).map(|_| rng.gen_range(0.2..1.0)).collect();
            let z_high: f64 = raw_high.iter().sum();
            raw_high.iter_mut().for_each(|w| *w *= (1.0 - kappa) / z_high);
            let mut probs = raw_low;
            probs.extend(raw_high);
            let total: f64 = probs.iter().sum();
            probs.iter_mut().for_each(|p| *p /= total);
            let dist = DiscreteDistribution::new(values, probs).unwrap();

            // On the boundary side: delta >= -log(kappa), with margin.
            let margin = rng.gen_range(0.01..0.5);
            let delta_on = -kappa.ln() + margin;
            let sol = kl_dual::solve_dual(&dist, delta_on).unwrap();
            let err = (sol.value - dist.essential_min()).abs();
            worst = worst.max(err);
            if (!sol.at_boundary || sol.beta_star != 0.0 || err > tol) && failure.is_none() {
                failure = Some(format!(
                    "case {case}: expected boundary at delta {delta_on}, got {sol:?}"
                ));
            }

            // Strictly inside: delta < -log(kappa) forces beta* > 0.
            let delta_off = (-kappa.ln() - margin).max(1e-3);
            if delta_off < -kappa.ln() {
                let sol = kl_dual::solve_dual(&dist, delta_off).unwrap();
                if (sol.at_boundary || sol.beta_star <= 0.0) && failure.is_none() {
                    failure = Some(format!(
                        "case {case}: expected interior at delta {delta_off}, got {sol:?}"
                    ));
                }
            }
        }
        (failure.is_none(), worst, 2 * cases_per_side, failure)
    })
}

/// The robust soft Bellman operator contracts with modulus `gamma`.
pub fn contraction_property(seed: u64, cases: usize) -> PropertyResult {
    let tol = 1e-9;
    timed("gamma_contraction", tol, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        let mut failure = None;
        for case in 0..cases {
            let n_states = rng.gen_range(2..=5);
            let n_actions = rng.gen_range(2..=4);
            let delta = rng.gen_range(0.01..1.0);
            let rmdp = random_rmdp(&mut rng, n_states, n_actions, delta);
            let policy = random_policy(&mut rng, n_states, n_actions);
            let bound = rmdp.value_bound();
            let mut rand_q = || tabular::SoftQTable {
                q: (0..n_states)
                    .map(|_| (0..n_actions).map(|_| rng.gen_range(0.0..bound)).collect())
                    .collect(),
            };
            let q1 = rand_q();
            let q2 = rand_q();
            let lhs = tabular::dr_soft_bellman(&q1, &policy, &rmdp)
                .sup_norm_diff(&tabular::dr_soft_bellman(&q2, &policy, &rmdp));
            let rhs = rmdp.gamma() * q1.sup_norm_diff(&q2);
            let violation = (lhs - rhs).max(0.0);
            worst = worst.max(violation);
            if violation > tol && failure.is_none() {
                failure = Some(format!("case {case}: lhs {lhs} vs gamma*diff {rhs}"));
            }
        }
        (worst <= tol, worst, cases, failure)
    })
}

/// Policy evaluation lands on a fixed point with residual below 1e-8.
pub fn fixed_point_property(seed: u64, cases: usize) -> PropertyResult {
    let tol = 1e-8;
    timed("policy_evaluation_fixed_point", tol, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        let mut failure = None;
        for case in 0..cases {
            let n_states = rng.gen_range(2..=6);
            let n_actions = rng.gen_range(2..=4);
            let delta = rng.gen_range(0.01..0.8);
            let rmdp = random_rmdp(&mut rng, n_states, n_actions, delta);
            let policy = random_policy(&mut rng, n_states, n_actions);
            let q = match tabular::dr_soft_policy_evaluation(&policy, &rmdp, tol) {
                Ok(q) => q,
                Err(e) => {
                    failure = Some(format!("case {case}: {e}"));
                    return (false, f64::INFINITY, case + 1, failure);
                }
            };
            let residual = tabular::dr_soft_bellman(&q, &policy, &rmdp).sup_norm_diff(&q);
            worst = worst.max(residual);
            if residual >= tol && failure.is_none() {
                failure = Some(format!("case {case}: residual {residual}"));
            }
        }
        (worst < tol, worst, cases, failure)
    })
}

/// Improvement followed by re-evaluation never lowers the Q-table.
pub fn monotone_improvement_property(seed: u64, cases: usize, rounds: usize) -> PropertyResult {
    let tol = 1e-8;
    timed("monotone_improvement", tol, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        let mut failure = None;
        for case in 0..cases {
            let n_states = rng.gen_range(2..=4);
            let n_actions = rng.gen_range(2..=3);
            let delta = rng.gen_range(0.01..0.8);
            let rmdp = random_rmdp(&mut rng, n_states, n_actions, delta);
            let mut policy = random_policy(&mut rng, n_states, n_actions);
            let mut q_old = tabular::dr_soft_policy_evaluation(&policy, &rmdp, 1e-10).unwrap();
            for round in 0..rounds {
                policy = tabular::dr_soft_policy_improvement(&q_old, &rmdp).unwrap();
                let q_new = tabular::dr_soft_policy_evaluation(&policy, &rmdp, 1e-10).unwrap();
                for s in 0..n_states {
                    for a in 0..n_actions {
                        let drop = q_old.q[s][a] - q_new.q[s][a];
                        worst = worst.max(drop);
                        if drop > tol && failure.is_none() {
                            failure = Some(format!(
                                "case {case} round {round}: Q dropped by {drop} at ({s},{a})"
                            ));
                        }
                    }
                }
                q_old = q_new;
            }
        }
        (worst <= tol, worst, cases, failure)
    })
}

/// Policy iteration reaches the best value over a grid of stationary
/// policies on 2-state 2-action instances.
pub fn policy_iteration_optimality_property(
    seed: u64,
    cases: usize,
    grid_step: f64,
) -> PropertyResult {
    let tol = 1e-3;
    timed("policy_iteration_optimality", tol, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        let mut failure = None;
        for case in 0..cases {
            let delta = rng.gen_range(0.05..0.6);
            let rmdp = random_rmdp_with_gamma(&mut rng, 2, 2, delta, 0.6..0.85);
            let converged = tabular::dr_soft_policy_iteration(&rmdp, 1e-9).unwrap();
            let v_star =
                tabular::soft_value_from_q(&converged.q, &converged.policy, rmdp.alpha());

            // Grid policies only feed a 1e-3 comparison; evaluating them at
            // 1e-6 leaves three orders of slack.
            let steps = (1.0 / grid_step).round() as usize;
            let grid_best = crate::exec::map_indexed((steps + 1) * (steps + 1), |idx| {
                let i = idx / (steps + 1);
                let j = idx % (steps + 1);
                let p0 = i as f64 * grid_step;
                let p1 = j as f64 * grid_step;
                let policy = StochasticPolicy::new(vec![
                    vec![p0, 1.0 - p0],
                    vec![p1, 1.0 - p1],
                ])
                .unwrap();
                let q = tabular::dr_soft_policy_evaluation(&policy, &rmdp, 1e-6).unwrap();
                tabular::soft_value_from_q(&q, &policy, rmdp.alpha()).v
            });
            for s in 0..2 {
                let best = grid_best
                    .iter()
                    .map(|v| v[s])
                    .fold(f64::NEG_INFINITY, f64::max);
                let gap = best - v_star.v[s];
                worst = worst.max(gap);
                if gap > tol && failure.is_none() {
                    failure = Some(format!(
                        "case {case}: grid best {best} vs converged {} at state {s}",
                        v_star.v[s]
                    ));
                }
            }
        }
        (worst <= tol, worst, cases, failure)
    })
}

/// Robust operator at a vanishing radius reduces to the plain soft operator.
pub fn delta_zero_reduction_property(seed: u64, cases: usize) -> PropertyResult {
    let tol = 1e-4;
    timed("delta_zero_reduction", tol, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        let mut failure = None;
        for case in 0..cases {
            let n_states = rng.gen_range(2..=5);
            let n_actions = rng.gen_range(2..=4);
            let rmdp = random_rmdp(&mut rng, n_states, n_actions, 1e-8);
            let policy = random_policy(&mut rng, n_states, n_actions);
            // The vanishing-radius gap scales like sqrt(2*delta*Var(V));
            // keep the Q spread at 1 so that intrinsic correction
            // (~1.4e-4*sqrt(Var)) sits below the 1e-4 tolerance.
            let q = tabular::SoftQTable {
                q: (0..n_states)
                    .map(|_| (0..n_actions).map(|_| rng.gen_range(0.0..1.0)).collect())
                    .collect(),
            };
            let robust = tabular::dr_soft_bellman(&q, &policy, &rmdp);
            let plain = tabular::nonrobust_soft_bellman(&q, &policy, &rmdp);
            let gap = robust.sup_norm_diff(&plain);
            worst = worst.max(gap);
            if gap > tol && failure.is_none() {
                failure = Some(format!("case {case}: reduction gap {gap}"));
            }
        }
        (worst <= tol, worst, cases, failure)
    })
}

/// Regret bound holds on randomly perturbed estimated models.
pub fn regret_bound_property(seed: u64, cases: usize, eps1_values: &[f64]) -> PropertyResult {
    timed("regret_bound", 0.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut failure = None;
        let mut count = 0;
        let mut worst: f64 = 0.0;
        for case in 0..cases {
            let n_states = rng.gen_range(2..=4);
            let n_actions = rng.gen_range(2..=3);
            let delta = rng.gen_range(0.05..0.3);
            let rmdp = random_rmdp(&mut rng, n_states, n_actions, delta);
            for &eps1 in eps1_values {
                count += 1;
                let est = perturb_transitions(&rmdp, eps1, &mut rng).unwrap();
                match tabular::regret_bound_check(&rmdp, &est, eps1) {
                    Ok(report) => {
                        worst = worst
                            .max(report.q_gap - report.q_bound)
                            .max(report.regret - report.regret_bound);
                        if !report.holds() && failure.is_none() {
                            failure = Some(format!("case {case} eps1 {eps1}: {report:?}"));
                        }
                    }
                    Err(e) => {
                        if failure.is_none() {
                            failure = Some(format!("case {case} eps1 {eps1}: {e}"));
                        }
                    }
                }
            }
        }
        (failure.is_none(), worst.max(0.0), count, failure)
    })
}

/// Interchange equality: the exact-mode shared-function optimum equals the
/// mean per-sample supremum on batches with exact next-state distributions.
pub fn interchange_property(seed: u64, batches: usize) -> PropertyResult {
    let tol = 1e-6;
    timed("interchange_equality", tol, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        let mut failure = None;
        for case in 0..batches {
            let delta = rng.gen_range(0.1..0.5);
            let n_rows = rng.gen_range(16..=64);
            let atoms = rng.gen_range(3..=8);
            // Values bounded like soft values for r_max 1, alpha 0.3.
            let gamma: f64 = rng.gen_range(0.6..0.9);
            let v_cap = (1.0 + 0.3 * 4.0_f64.ln()) / (1.0 - gamma);
            let bounds =
                crate::functional::GBounds::new(1.0, 0.3, 4.0_f64.ln(), gamma, delta).unwrap();
            let rows: Vec<DiscreteDistribution> = (0..n_rows)
                .map(|_| {
                    let values: Vec<f64> =
                        (0..atoms).map(|_| rng.gen_range(0.0..v_cap)).collect();
                    let raw: Vec<f64> = (0..atoms).map(|_| rng.gen_range(0.05..1.0)).collect();
                    let z: f64 = raw.iter().sum();
                    DiscreteDistribution::new(values, raw.iter().map(|w| w / z).collect())
                        .unwrap()
                })
                .collect();
            let sups = crate::functional::per_sample_sup(&rows, delta).unwrap();
            let mean_sup: f64 = sups.iter().sum::<f64>() / sups.len() as f64;
            let (_, objective) =
                crate::functional::optimize_g_exact(&rows, delta, &bounds).unwrap();
            let gap = (objective - mean_sup).abs();
            worst = worst.max(gap);
            if gap > tol && failure.is_none() {
                failure = Some(format!(
                    "case {case}: exact-mode {objective} vs mean sup {mean_sup}"
                ));
            }
        }
        (worst <= tol, worst, batches, failure)
    })
}

/// In `delta = 0` mode with the observed next state as the only atom, the
/// robust critic target must match the plain SAC target row by row.
pub fn sac_reduction_property(seed: u64, cases: usize) -> PropertyResult {
    let tol = 1e-6;
    timed("sac_target_reduction", tol, || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        let mut failure = None;
        for case in 0..cases {
            let config = crate::agent::AgentConfig {
                delta: 0.0,
                batch_size: 16,
                hidden: vec![8, 8],
                vae_hidden: vec![8],
                latent_dim: 2,
                m: 1,
                seed: seed.wrapping_add(case as u64),
                ..crate::agent::AgentConfig::pendulum_default()
            };
            let agent = crate::agent::AgentState::new(config).unwrap();
            let n = 24;
            let mut states = Vec::new();
            let mut actions = Vec::new();
            let mut rewards = Vec::new();
            let mut next_states = Vec::new();
            for _ in 0..n {
                let theta: f64 = rng.gen_range(-3.0..3.0);
                states.extend_from_slice(&[theta.cos(), theta.sin(), rng.gen_range(-8.0..8.0)]);
                actions.push(rng.gen_range(-2.0..2.0));
                rewards.push(rng.gen_range(0.0..crate::envs::reward_max()));
                let t2 = theta + 0.05;
                next_states.extend_from_slice(&[t2.cos(), t2.sin(), rng.gen_range(-8.0..8.0)]);
            }
            let mut batch =
                crate::data::TransitionBatch::new(3, 1, states, actions, rewards, next_states)
                    .unwrap();
            let atoms = batch.next_states.clone();
            batch.set_synthetic(1, atoms).unwrap();
            let robust = agent.robust_targets(&batch).unwrap();
            let sac = agent.sac_targets(&batch).unwrap();
            for (i, (a, b)) in robust.iter().zip(&sac).enumerate() {
                let gap = (a - b).abs();
                worst = worst.max(gap);
                if gap > tol && failure.is_none() {
                    failure = Some(format!("case {case} row {i}: robust {a} vs sac {b}"));
                }
            }
        }
        (worst <= tol, worst, cases, failure)
    })
}

/// Every loss gradient passes central differences at 1e-4 relative, across
/// independently seeded small frozen agents.
pub fn gradient_integrity_property(seed: u64, seeds: usize) -> PropertyResult {
    let tol = 1e-4;
    timed("gradient_integrity", tol, || {
        let mut worst: f64 = 0.0;
        let mut failure = None;
        for k in 0..seeds {
            match crate::agent::loss_gradient_checks(seed.wrapping_add(k as u64)) {
                Ok(results) => {
                    for (name, rel) in results {
                        worst = worst.max(rel);
                        if rel > tol && failure.is_none() {
                            failure = Some(format!("seed {k}: {name} relative error {rel}"));
                        }
                    }
                }
                Err(e) => {
                    if failure.is_none() {
                        failure = Some(format!("seed {k}: {e}"));
                    }
                }
            }
        }
        (failure.is_none() && worst <= tol, worst, seeds, failure)
    })
}

/// The full property suite at the acceptance instance counts, from one
/// master seed.
pub fn full_report(seed: u64) -> VerificationReport {
    let results = vec![
        dual_primal_property(seed, 200, 8, &[0.01, 0.1, 0.5, 1.0, 5.0], |d, delta| {
            kl_dual::solve_dual(d, delta).unwrap().value
        }),
        boundary_property(seed.wrapping_add(1), 100),
        contraction_property(seed.wrapping_add(2), 100),
        fixed_point_property(seed.wrapping_add(3), 50),
        monotone_improvement_property(seed.wrapping_add(4), 50, 5),
        policy_iteration_optimality_property(seed.wrapping_add(5), 20, 0.01),
        interchange_property(seed.wrapping_add(6), 50),
        delta_zero_reduction_property(seed.wrapping_add(7), 30),
        sac_reduction_property(seed.wrapping_add(8), 20),
        regret_bound_property(seed.wrapping_add(9), 30, &[1e-3, 1e-2]),
        gradient_integrity_property(seed.wrapping_add(10), 20),
    ];
    VerificationReport { seed, results }
}
