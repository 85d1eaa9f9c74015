//! Robust regret bound verification.
//!
//! When the nominal transitions are only estimated, the induced error on the
//! robust soft Bellman operator is at most
//! `eps2 = gamma * eps1 * (V_max/delta) * exp(V_max/beta_low)` with
//! `V_max = (r_max + alpha*log|A|)/(1-gamma)` and `beta_low` half the smallest
//! dual multiplier met at the fixed points (floored at 1/2). The fixed-point
//! gap is then bounded by `eps2/(1-gamma)` and the regret of the policy that
//! is optimal for the estimated model by `2*eps2/(1-gamma)`. This check
//! computes both sides exactly on a pair of models.

use super::{
    dr_soft_bellman_with_duals, dr_soft_policy_evaluation, dr_soft_policy_iteration,
    soft_value_from_q, TabularError, TabularRmdp,
};
use crate::kl_dual::{kl_divergence, DualSolution};

const FIXED_POINT_TOL: f64 = 1e-10;

/// Measured quantities and bound comparisons from [`regret_bound_check`].
#[derive(Debug, Clone)]
pub struct RegretReport {
    /// Transition estimation budget (the KL budget is `eps1^2`).
    pub eps1: f64,
    /// Largest per-row KL divergence actually observed.
    pub max_kl: f64,
    /// Induced operator error bound.
    pub eps2: f64,
    /// Multiplier floor used inside the exponential.
    pub beta_low: f64,
    /// Measured `||Q_hat^pi - Q^pi||_inf` for the estimated-optimal policy.
    pub q_gap: f64,
    /// Bound `eps2 / (1-gamma)`.
    pub q_bound: f64,
    /// Measured regret of the estimated-optimal policy on the true model.
    pub regret: f64,
    /// Bound `2*eps2 / (1-gamma)`.
    pub regret_bound: f64,
    pub q_ok: bool,
    pub regret_ok: bool,
}

impl RegretReport {
    pub fn holds(&self) -> bool {
        self.q_ok && self.regret_ok
    }

    pub fn q_slack(&self) -> f64 {
        self.q_bound - self.q_gap
    }

    pub fn regret_slack(&self) -> f64 {
        self.regret_bound - self.regret
    }
}

/// Verifies the regret bound for a true model and an estimated model that
/// differ only in their transition kernels, with per-row divergence at most
/// `eps1^2` and identical supports.
pub fn regret_bound_check(
    rmdp: &TabularRmdp,
    estimated: &TabularRmdp,
    eps1: f64,
) -> Result<RegretReport, TabularError> {
    validate_pair(rmdp, estimated, eps1)?;
    if !(rmdp.delta() > 0.0) {
        return Err(TabularError::InvalidModel(
            "the regret bound requires delta > 0".into(),
        ));
    }

    let mut max_kl: f64 = 0.0;
    for s in 0..rmdp.n_states() {
        for a in 0..rmdp.n_actions() {
            max_kl = max_kl.max(kl_divergence(
                &rmdp.transitions()[s][a],
                &estimated.transitions()[s][a],
            ));
        }
    }

    // Policy that is optimal for the estimated model.
    let est_opt = dr_soft_policy_iteration(estimated, 1e-9)?;
    let pi_hat = est_opt.policy;

    // Fixed points of both operators under that policy, plus the dual
    // multipliers encountered at the fixed points.
    let q_true = dr_soft_policy_evaluation(&pi_hat, rmdp, FIXED_POINT_TOL)?;
    let q_est = dr_soft_policy_evaluation(&pi_hat, estimated, FIXED_POINT_TOL)?;
    let (_, duals_true) = dr_soft_bellman_with_duals(&q_true, &pi_hat, rmdp);
    let (_, duals_est) = dr_soft_bellman_with_duals(&q_est, &pi_hat, estimated);
    let beta_low = beta_floor(duals_true.iter().chain(duals_est.iter()));

    let v_max = rmdp.value_bound();
    let gamma = rmdp.gamma();
    let eps2 = if beta_low > 0.0 {
        gamma * eps1 * (v_max / rmdp.delta()) * (v_max / beta_low).exp()
    } else {
        f64::INFINITY
    };

    let q_gap = q_true.sup_norm_diff(&q_est);
    let q_bound = eps2 / (1.0 - gamma);

    // Regret of pi_hat on the true model against the true robust optimum.
    let true_opt = dr_soft_policy_iteration(rmdp, 1e-9)?;
    let v_star = soft_value_from_q(&true_opt.q, &true_opt.policy, rmdp.alpha());
    let v_hat = soft_value_from_q(&q_true, &pi_hat, rmdp.alpha());
    let regret = v_star
        .v
        .iter()
        .zip(&v_hat.v)
        .map(|(star, hat)| star - hat)
        .fold(0.0_f64, f64::max);
    let regret_bound = 2.0 * eps2 / (1.0 - gamma);

    // Fixed points are accurate to FIXED_POINT_TOL; allow that much noise on
    // the measured sides before comparing against the analytic bounds.
    let noise = 10.0 * FIXED_POINT_TOL;
    Ok(RegretReport {
        eps1,
        max_kl,
        eps2,
        beta_low,
        q_gap,
        q_bound,
        regret,
        regret_bound,
        q_ok: q_gap <= q_bound + noise,
        regret_ok: regret <= regret_bound + noise,
    })
}

fn beta_floor<'a>(duals: impl Iterator<Item = &'a DualSolution>) -> f64 {
    let mut floor = 0.5_f64;
    for sol in duals {
        if sol.beta_star.is_finite() {
            floor = floor.min(0.5 * sol.beta_star);
        }
    }
    floor
}

fn validate_pair(
    rmdp: &TabularRmdp,
    estimated: &TabularRmdp,
    eps1: f64,
) -> Result<(), TabularError> {
    if eps1 < 0.0 || !eps1.is_finite() {
        return Err(TabularError::InvalidModel(format!(
            "eps1 must be non-negative, got {eps1}"
        )));
    }
    if rmdp.n_states() != estimated.n_states() || rmdp.n_actions() != estimated.n_actions() {
        return Err(TabularError::ShapeMismatch(
            "models have different dimensions".into(),
        ));
    }
    if rmdp.reward() != estimated.reward()
        || rmdp.gamma() != estimated.gamma()
        || rmdp.delta() != estimated.delta()
        || rmdp.alpha() != estimated.alpha()
    {
        return Err(TabularError::InvalidModel(
            "models must differ only in transitions".into(),
        ));
    }
    let budget = eps1 * eps1;
    for s in 0..rmdp.n_states() {
        for a in 0..rmdp.n_actions() {
            let p = &rmdp.transitions()[s][a];
            let p_hat = &estimated.transitions()[s][a];
            for (pi, qi) in p.iter().zip(p_hat) {
                if (*pi > 0.0) != (*qi > 0.0) {
                    return Err(TabularError::SupportMismatch {
                        state: s,
                        action: a,
                    });
                }
            }
            let kl = kl_divergence(p, p_hat);
            if kl > budget + 1e-15 {
                return Err(TabularError::KlBudgetExceeded {
                    state: s,
                    action: a,
                    kl,
                    budget,
                });
            }
        }
    }
    Ok(())
}
