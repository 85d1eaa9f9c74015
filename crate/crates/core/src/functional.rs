//! Shared-function reformulation of the inner dual optimization.
//!
//! Instead of solving a scalar maximization per `(s, a)` pair, a bounded
//! function `g(s, a)` replaces the multiplier everywhere and one objective —
//! the batch mean of `f((s,a), g(s,a))` — is ascended. The interchange of
//! minimization and expectation makes the two routes equal: the supremum of
//! the batch-mean objective over the admissible set equals the mean of the
//! per-sample suprema. Both routes are implemented here (an exact per-sample
//! table and a squashed network) so the equality is checkable numerically.

use crate::data::TransitionBatch;
use crate::exec;
use crate::kl_dual::{self, DiscreteDistribution, KlDualError};
use crate::nn::{Mlp, NnError, ParameterStore, Tape, Tensor};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FunctionalError {
    #[error("batch has no synthetic next-state atoms")]
    MissingSynthetic,
    #[error("g bounds require r_max >= 0, gamma in [0,1), delta > 0 (got {0})")]
    BadBounds(String),
    #[error("{0} rows but {1} g values")]
    Misaligned(usize, usize),
    #[error("non-finite objective at row {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Dual(#[from] KlDualError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Admissible range for the shared dual function: `[floor, high]` with
/// `high = (r_max + alpha*log_actions)/((1-gamma)*delta)`. The floor keeps
/// the learned (squashed) function strictly positive; the zero boundary of
/// the admissible set is handled analytically via the essential-infimum
/// branch, never numerically.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GBounds {
    pub floor: f64,
    pub high: f64,
}

/// Learned-mode floor as a fraction of the upper bound.
pub const G_FLOOR_REL: f64 = 1e-4;

/// Pure division-by-zero guard for the exact-mode interior search; the
/// boundary itself is covered by the essential-infimum branch.
const G_EPS_REL: f64 = 1e-9;

impl GBounds {
    pub fn new(r_max: f64, alpha: f64, log_actions: f64, gamma: f64, delta: f64) -> Result<Self, FunctionalError> {
        if !(r_max >= 0.0) || !(0.0..1.0).contains(&gamma) || !(delta > 0.0) || !(alpha >= 0.0) {
            return Err(FunctionalError::BadBounds(format!(
                "r_max={r_max} alpha={alpha} gamma={gamma} delta={delta}"
            )));
        }
        let high = (r_max + alpha * log_actions) / ((1.0 - gamma) * delta);
        Ok(Self {
            floor: G_FLOOR_REL * high,
            high,
        })
    }

    pub fn clamp(&self, g: f64) -> f64 {
        g.clamp(self.floor, self.high)
    }

    /// Squash a raw network output into the admissible range.
    pub fn squash(&self, raw: f64) -> f64 {
        self.floor + (self.high - self.floor) * crate::nn::sigmoid(raw)
    }
}

/// Exact-mode shared function: one value per batch row, plus a flag marking
/// rows whose optimum sits on the zero boundary (value = essential infimum).
#[derive(Debug, Clone, PartialEq)]
pub struct GTable {
    pub g: Vec<f64>,
    pub at_boundary: Vec<bool>,
}

/// The per-row objective `f(row, g) = -g*log E[exp(-V/g)] - g*delta`.
pub fn row_objective(row: &DiscreteDistribution, g: f64, delta: f64) -> f64 {
    kl_dual::dual_objective_unchecked(row.support_values(), row.probs(), g, delta)
}

/// Batch-mean objective at fixed per-row g values.
pub fn batch_objective(
    rows: &[DiscreteDistribution],
    g_values: &[f64],
    delta: f64,
) -> Result<f64, FunctionalError> {
    if rows.len() != g_values.len() {
        return Err(FunctionalError::Misaligned(rows.len(), g_values.len()));
    }
    let mut acc = 0.0;
    for (i, (row, &g)) in rows.iter().zip(g_values).enumerate() {
        let f = row_objective(row, g, delta);
        if !f.is_finite() {
            return Err(FunctionalError::NonFinite(i));
        }
        acc += f;
    }
    Ok(acc / rows.len() as f64)
}

/// Left side of the interchange: the per-row suprema, solved independently
/// (and in parallel) by the production dual solver.
pub fn per_sample_sup(
    rows: &[DiscreteDistribution],
    delta: f64,
) -> Result<Vec<f64>, FunctionalError> {
    let sols = exec::map_indexed(rows.len(), |i| kl_dual::solve_dual(&rows[i], delta));
    let mut out = Vec::with_capacity(rows.len());
    for sol in sols {
        out.push(sol?.value);
    }
    Ok(out)
}

/// Builds per-row value distributions from a batch's synthetic atoms: each
/// row is the uniform empirical measure over `v_of(atom)`.
pub fn synthetic_value_rows<F>(
    batch: &TransitionBatch,
    v_of: F,
) -> Result<Vec<DiscreteDistribution>, FunctionalError>
where
    F: Fn(&[f64]) -> f64,
{
    let synth = batch
        .synthetic
        .as_ref()
        .ok_or(FunctionalError::MissingSynthetic)?;
    let mut rows = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let atoms = batch.synthetic_row(i).unwrap();
        let values: Vec<f64> = atoms
            .chunks_exact(batch.state_dim)
            .map(&v_of)
            .collect();
        let probs = vec![1.0 / synth.m as f64; synth.m];
        rows.push(DiscreteDistribution::new(values, probs)?);
    }
    Ok(rows)
}

/// Exact-mode optimization: ascends the batch-mean objective over a
/// per-sample table. The objective decomposes per row, so each entry is a
/// one-dimensional concave ascent (adaptive-step projected gradient) over
/// the interior, compared against the analytic zero-boundary value (the
/// essential infimum). Returns the table and the achieved mean objective.
pub fn optimize_g_exact(
    rows: &[DiscreteDistribution],
    delta: f64,
    bounds: &GBounds,
) -> Result<(GTable, f64), FunctionalError> {
    if !(delta > 0.0) {
        return Err(FunctionalError::BadBounds(format!("delta={delta}")));
    }
    let solved = exec::map_indexed(rows.len(), |i| maximize_row(&rows[i], delta, bounds));
    let mut g = Vec::with_capacity(rows.len());
    let mut at_boundary = Vec::with_capacity(rows.len());
    let mut acc = 0.0;
    for (i, (gi, fi, boundary)) in solved.into_iter().enumerate() {
        if !fi.is_finite() {
            return Err(FunctionalError::NonFinite(i));
        }
        g.push(gi);
        at_boundary.push(boundary);
        acc += fi;
    }
    Ok((GTable { g, at_boundary }, acc / rows.len() as f64))
}

/// One-row concave ascent; returns `(g, value, at_boundary)`.
fn maximize_row(row: &DiscreteDistribution, delta: f64, bounds: &GBounds) -> (f64, f64, bool) {
    let essinf = row.essential_min();
    let spread = row.essential_max() - essinf;
    if spread <= 1e-12 * (1.0 + essinf.abs()) {
        return (0.0, essinf, true);
    }
    let lo = G_EPS_REL * bounds.high;
    let hi = bounds.high;
    let f = |g: f64| row_objective(row, g, delta);
    // df/dg = -log E[exp(-V/g)] - E_tilt[V]/g - delta.
    let df = |g: f64| {
        let (lme, tilt_mean) = log_expect_and_tilt_mean(row, g);
        -lme - tilt_mean / g - delta
    };
    let mut g = (lo * hi).sqrt();
    let mut fg = f(g);
    let mut step = 0.25 * (hi - lo);
    for _ in 0..300 {
        let cand = (g + step * df(g).signum()).clamp(lo, hi);
        let fc = f(cand);
        if fc > fg {
            g = cand;
            fg = fc;
            step *= 1.5;
        } else {
            step *= 0.5;
        }
        step = step.min(hi - lo);
        if step < 1e-14 * hi {
            break;
        }
    }
    if essinf >= fg {
        (0.0, essinf, true)
    } else {
        (g, fg, false)
    }
}

/// `(log E[exp(-V/g)], E_tilt[V])`, max-subtracted.
fn log_expect_and_tilt_mean(row: &DiscreteDistribution, g: f64) -> (f64, f64) {
    let values = row.support_values();
    let probs = row.probs();
    let mut max_t = f64::NEG_INFINITY;
    for (&v, &p) in values.iter().zip(probs) {
        if p > 0.0 {
            max_t = max_t.max(-v / g);
        }
    }
    let mut z = 0.0;
    let mut num = 0.0;
    for (&v, &p) in values.iter().zip(probs) {
        if p > 0.0 {
            let w = p * (-v / g - max_t).exp();
            z += w;
            num += w * v;
        }
    }
    (max_t + z.ln(), num / z)
}

/// Per-row functional Bellman targets `r + gamma * f(row, g)`.
pub fn functional_bellman_target(
    rewards: &[f64],
    rows: &[DiscreteDistribution],
    g_values: &[f64],
    delta: f64,
    gamma: f64,
) -> Result<Vec<f64>, FunctionalError> {
    if rows.len() != g_values.len() || rows.len() != rewards.len() {
        return Err(FunctionalError::Misaligned(rows.len(), g_values.len()));
    }
    let out = exec::map_indexed(rows.len(), |i| {
        rewards[i] + gamma * row_objective(&rows[i], g_values[i], delta)
    });
    for (i, t) in out.iter().enumerate() {
        if !t.is_finite() {
            return Err(FunctionalError::NonFinite(i));
        }
    }
    Ok(out)
}

/// Learned-mode shared function: a network whose raw output is squashed into
/// the admissible range.
#[derive(Debug, Clone)]
pub struct LearnedG {
    pub net: Mlp,
    pub bounds: GBounds,
}

impl LearnedG {
    pub fn new(net: Mlp, bounds: GBounds) -> Self {
        Self { net, bounds }
    }

    /// Squashed g values for a batch of `(s, a)` inputs, without a tape.
    pub fn values_plain(
        &self,
        store: &ParameterStore,
        inputs: &Tensor,
    ) -> Result<Vec<f64>, FunctionalError> {
        let raw = self.net.forward_plain(store, inputs)?;
        Ok(raw.data.iter().map(|&x| self.bounds.squash(x)).collect())
    }

    /// Builds the batch-mean objective graph: squash the network output into
    /// the admissible range, then `mean(-g*log_mean_exp(-V/g) - g*delta)`.
    pub fn objective_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        inputs: &Tensor,
        v_atoms: &Tensor,
        delta: f64,
    ) -> Result<crate::nn::Var, NnError> {
        let x = tape.constant(inputs.clone());
        let raw = self.net.forward(tape, store, x, true)?;
        let sig = tape.sigmoid(raw);
        let scaled = tape.scale(sig, self.bounds.high - self.bounds.floor);
        let g = tape.add_scalar(scaled, self.bounds.floor);
        let v = tape.constant(v_atoms.clone());
        let neg_v = tape.neg(v);
        let exponents = tape.div_col_broadcast(neg_v, g);
        let lme = tape.log_mean_exp_rows(exponents);
        let neg_g = tape.neg(g);
        let first = tape.mul(neg_g, lme);
        let penalty = tape.scale(g, -delta);
        let per_row = tape.add(first, penalty);
        Ok(tape.mean_all(per_row))
    }

    /// Runs `steps` gradient-ascent updates of the batch-mean objective.
    /// `v_atoms` holds the per-row next-state values, `[B, m]`. Returns the
    /// objective after squashing at each step, initial value first.
    pub fn ascend(
        &self,
        store: &mut ParameterStore,
        inputs: &Tensor,
        v_atoms: &Tensor,
        delta: f64,
        steps: usize,
        lr: f64,
    ) -> Result<Vec<f64>, FunctionalError> {
        let mut trace = Vec::with_capacity(steps + 1);
        for step in 0..=steps {
            let mut tape = Tape::new();
            let objective = self.objective_on_tape(&mut tape, store, inputs, v_atoms, delta)?;
            let value = tape.scalar_value(objective);
            if !value.is_finite() {
                return Err(FunctionalError::NonFinite(step));
            }
            trace.push(value);
            if step == steps {
                break;
            }
            let loss = tape.neg(objective);
            store.zero_grads();
            tape.backward(loss, store)?;
            store.adam_step(lr);
        }
        Ok(trace)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn bounds_for(delta: f64) -> GBounds {
        // r_max 1, alpha 0.2, two actions, gamma 0.8.
        GBounds::new(1.0, 0.2, 2.0_f64.ln(), 0.8, delta).unwrap()
    }

    fn random_rows(rng: &mut ChaCha8Rng, n: usize, atoms: usize, v_cap: f64) -> Vec<DiscreteDistribution> {
        (0..n)
            .map(|_| {
                let values: Vec<f64> = (0..atoms).map(|_| rng.gen_range(0.0..v_cap)).collect();
                let raw: Vec<f64> = (0..atoms).map(|_| rng.gen_range(0.1..1.0)).collect();
                let z: f64 = raw.iter().sum();
                DiscreteDistribution::new(values, raw.iter().map(|w| w / z).collect()).unwrap()
            })
            .collect()
    }

    #[test]
    fn bounds_reject_bad_parameters() {
        assert!(GBounds::new(1.0, 0.1, 1.0, 1.0, 0.5).is_err());
        assert!(GBounds::new(1.0, 0.1, 1.0, 0.9, 0.0).is_err());
        assert!(GBounds::new(-1.0, 0.1, 1.0, 0.9, 0.5).is_err());
    }

    #[test]
    fn single_row_sup_matches_dual_solver() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows = random_rows(&mut rng, 1, 5, 5.0);
        let sup = per_sample_sup(&rows, 0.3).unwrap();
        let direct = kl_dual::solve_dual(&rows[0], 0.3).unwrap().value;
        assert_eq!(sup, vec![direct]);
    }

    #[test]
    fn zero_delta_is_rejected_for_bounds_but_sup_reduces_to_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows = random_rows(&mut rng, 4, 5, 5.0);
        let sups = per_sample_sup(&rows, 0.0).unwrap();
        for (row, sup) in rows.iter().zip(sups) {
            assert!((sup - row.mean()).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_mode_reaches_per_sample_sup() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &delta in &[0.1, 0.3, 0.8] {
            let bounds = bounds_for(delta);
            let rows = random_rows(&mut rng, 48, 6, 6.0);
            let sups = per_sample_sup(&rows, delta).unwrap();
            let mean_sup: f64 = sups.iter().sum::<f64>() / sups.len() as f64;
            let (table, objective) = optimize_g_exact(&rows, delta, &bounds).unwrap();
            assert!(
                (objective - mean_sup).abs() < 1e-6,
                "delta {delta}: exact-mode {objective} vs mean sup {mean_sup}"
            );
            assert_eq!(table.g.len(), rows.len());
        }
    }

    #[test]
    fn exact_mode_identical_rows_recover_single_beta() {
        let row = DiscreteDistribution::new(vec![0.0, 1.0], vec![0.5, 0.5]).unwrap();
        let rows = vec![row.clone(); 16];
        let delta = 0.1;
        let bounds = bounds_for(delta);
        let (table, _) = optimize_g_exact(&rows, delta, &bounds).unwrap();
        let reference = kl_dual::solve_dual(&row, delta).unwrap().beta_star;
        for &g in &table.g {
            assert!((g - reference).abs() < 1e-4, "g {g} vs beta* {reference}");
        }
    }

    #[test]
    fn single_atom_objective_collapses_algebraically() {
        // One atom: log-mean-exp of a singleton is exactly -v/g, so
        // f(row, g) = v - g*delta for any g.
        let v = 2.5;
        let delta = 0.4;
        let bounds = bounds_for(delta);
        let row = DiscreteDistribution::new(vec![v], vec![1.0]).unwrap();
        let at_floor = row_objective(&row, bounds.floor, delta);
        assert!((at_floor - (v - bounds.floor * delta)).abs() < 1e-12);
        // The exact-mode optimum takes the boundary branch and returns v.
        let (table, obj) = optimize_g_exact(&[row], delta, &bounds).unwrap();
        assert!(table.at_boundary[0]);
        assert!((obj - v).abs() < 1e-12);
    }

    #[test]
    fn dominance_any_fixed_g_below_mean_sup() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let delta = 0.25;
        let bounds = bounds_for(delta);
        let rows = random_rows(&mut rng, 32, 5, 6.0);
        let sups = per_sample_sup(&rows, delta).unwrap();
        let mean_sup: f64 = sups.iter().sum::<f64>() / sups.len() as f64;
        for _ in 0..20 {
            let g: Vec<f64> = (0..rows.len())
                .map(|_| rng.gen_range(bounds.floor..bounds.high))
                .collect();
            let obj = batch_objective(&rows, &g, delta).unwrap();
            assert!(obj <= mean_sup + 1e-10);
        }
    }

    #[test]
    fn suboptimal_g_target_dominated_per_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let delta = 0.3;
        let bounds = bounds_for(delta);
        let rows = random_rows(&mut rng, 16, 5, 6.0);
        let rewards: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..1.0)).collect();
        let gamma = 0.9;
        let (table, _) = optimize_g_exact(&rows, delta, &bounds).unwrap();
        let g_opt: Vec<f64> = table
            .g
            .iter()
            .zip(&table.at_boundary)
            .map(|(&g, &b)| if b { bounds.floor } else { g })
            .collect();
        let sups = per_sample_sup(&rows, delta).unwrap();
        let optimal: Vec<f64> = rewards
            .iter()
            .zip(&sups)
            .map(|(r, s)| r + gamma * s)
            .collect();
        let _ = g_opt;
        let g_sub: Vec<f64> = (0..rows.len())
            .map(|_| rng.gen_range(bounds.floor..bounds.high))
            .collect();
        let sub = functional_bellman_target(&rewards, &rows, &g_sub, delta, gamma).unwrap();
        for (s, o) in sub.iter().zip(&optimal) {
            assert!(*s <= *o + 1e-9, "suboptimal target {s} above optimum {o}");
        }
    }

    #[test]
    fn zero_gamma_targets_equal_rewards() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let delta = 0.2;
        let bounds = bounds_for(delta);
        let rows = random_rows(&mut rng, 8, 4, 5.0);
        let rewards: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..1.0)).collect();
        let g = vec![bounds.clamp(1.0); 8];
        let targets = functional_bellman_target(&rewards, &rows, &g, delta, 0.0).unwrap();
        assert_eq!(targets, rewards);
    }

    #[test]
    fn synthetic_rows_use_uniform_weights() {
        let mut batch = TransitionBatch::new(
            1,
            1,
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            vec![0.1, 0.2],
            vec![0.0, 0.0],
        )
        .unwrap();
        batch
            .set_synthetic(3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
            .unwrap();
        let rows = synthetic_value_rows(&batch, |s| 2.0 * s[0]).unwrap();
        assert_eq!(rows[0].support_values(), &[2.0, 4.0, 6.0]);
        assert_eq!(rows[1].support_values(), &[8.0, 10.0, 12.0]);
        assert_eq!(rows[0].probs(), &[1.0 / 3.0; 3]);
    }

    #[test]
    fn learned_mode_objective_non_decreasing_over_five_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let delta = 0.3;
        let bounds = bounds_for(delta);
        let net = Mlp::new("g", &[3, 16, 1], Activation::Relu);
        let mut store = ParameterStore::new();
        net.init(&mut store, &mut rng).unwrap();
        // Zero the output layer so the initial g sits mid-range.
        store.value_mut("g.w1").unwrap().data.fill(0.0);
        store.value_mut("g.b1").unwrap().data.fill(0.0);
        let learned = LearnedG::new(net, bounds);

        let n = 256;
        let inputs = Tensor::from_vec(
            n,
            3,
            (0..3 * n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let v_atoms = Tensor::from_vec(
            n,
            10,
            (0..10 * n).map(|_| rng.gen_range(0.0..6.0)).collect(),
        );
        let trace = learned
            .ascend(&mut store, &inputs, &v_atoms, delta, 5, 1e-3)
            .unwrap();
        assert_eq!(trace.len(), 6);
        for w in trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "objective decreased: {trace:?}");
        }
        // And the squashed outputs respect the admissible range.
        let g = learned.values_plain(&store, &inputs).unwrap();
        for &gi in &g {
            assert!(gi >= bounds.floor && gi <= bounds.high);
        }
    }
}
