//! Worst-case expectations over KL-divergence balls.
//!
//! For a finite nominal distribution `p` with support values `v`, this module
//! computes
//!
//! ```text
//! inf { E_q[v] : KL(q ‖ p) <= delta }
//! ```
//!
//! by two independent routes: the dual one-dimensional concave maximization
//!
//! ```text
//! sup_{beta >= 0} { -beta * log E_p[exp(-v/beta)] - beta * delta }
//! ```
//!
//! used in production, and a primal exponential-tilting line search used as a
//! verification oracle. The dual multiplier hits the `beta = 0` boundary
//! exactly when the nominal mass `kappa` on the minimizing atoms satisfies
//! `log(kappa) + delta >= 0`, in which case the worst case collapses onto
//! those atoms and the value is the essential infimum of `v`.

use thiserror::Error;

/// Probability mass must sum to 1 within this tolerance.
pub const PROB_SUM_TOL: f64 = 1e-12;

/// Largest support the primal brute-force oracle accepts.
pub const PRIMAL_ORACLE_MAX_SUPPORT: usize = 16;

/// Lower end of the interior dual search, relative to the value spread.
const BETA_FLOOR_REL: f64 = 1e-8;

/// Golden-section stops when the bracket is this fraction of its initial width.
const SEARCH_WIDTH_REL: f64 = 1e-12;

/// Golden-section iteration cap.
const SEARCH_MAX_ITERS: usize = 200;

#[derive(Debug, Error)]
pub enum KlDualError {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("delta must be non-negative, got {0}")]
    NegativeDelta(f64),
    #[error("primal oracle supports at most {max} atoms, got {got}")]
    SupportTooLarge { max: usize, got: usize },
}

/// A probability vector over a finite set of scalar support values.
///
/// The support values are the function being averaged (for Bellman backups,
/// the soft state values at successor states); the probabilities are the
/// nominal transition mass at each atom.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDistribution {
    support_values: Vec<f64>,
    probs: Vec<f64>,
}

impl DiscreteDistribution {
    /// Validates and builds a distribution. Probabilities must be
    /// non-negative, finite, and sum to 1 within [`PROB_SUM_TOL`]; lengths
    /// must agree and be at least 1.
    pub fn new(support_values: Vec<f64>, probs: Vec<f64>) -> Result<Self, KlDualError> {
        if support_values.is_empty() {
            return Err(KlDualError::InvalidDistribution(
                "support must be non-empty".into(),
            ));
        }
        if support_values.len() != probs.len() {
            return Err(KlDualError::InvalidDistribution(format!(
                "support has {} values but {} probabilities",
                support_values.len(),
                probs.len()
            )));
        }
        if support_values.iter().any(|v| !v.is_finite()) {
            return Err(KlDualError::InvalidDistribution(
                "support values must be finite".into(),
            ));
        }
        let mut sum = 0.0;
        for &p in &probs {
            if !p.is_finite() || p < 0.0 {
                return Err(KlDualError::InvalidDistribution(format!(
                    "probability {p} is not a finite non-negative number"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(KlDualError::InvalidDistribution(format!(
                "probabilities sum to {sum}, not 1"
            )));
        }
        Ok(Self {
            support_values,
            probs,
        })
    }

    pub fn support_values(&self) -> &[f64] {
        &self.support_values
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.support_values.len()
    }

    pub fn is_empty(&self) -> bool {
        false // constructor rejects empty supports
    }

    /// Nominal expectation of the support values.
    pub fn mean(&self) -> f64 {
        self.support_values
            .iter()
            .zip(&self.probs)
            .map(|(v, p)| v * p)
            .sum()
    }

    /// Minimum support value among atoms with positive probability.
    pub fn essential_min(&self) -> f64 {
        ess_min(&self.support_values, &self.probs)
    }

    /// Maximum support value among atoms with positive probability.
    pub fn essential_max(&self) -> f64 {
        ess_max(&self.support_values, &self.probs)
    }

    /// Nominal mass on the atoms attaining the essential minimum (within a
    /// tie tolerance that only merges values equal up to rounding).
    pub fn essential_min_mass(&self) -> f64 {
        ess_min_mass(&self.support_values, &self.probs)
    }
}

fn ess_min(values: &[f64], probs: &[f64]) -> f64 {
    values
        .iter()
        .zip(probs)
        .filter(|(_, &p)| p > 0.0)
        .map(|(&v, _)| v)
        .fold(f64::INFINITY, f64::min)
}

fn ess_max(values: &[f64], probs: &[f64]) -> f64 {
    values
        .iter()
        .zip(probs)
        .filter(|(_, &p)| p > 0.0)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max)
}

fn ess_min_mass(values: &[f64], probs: &[f64]) -> f64 {
    let vmin = ess_min(values, probs);
    let tol = tie_tolerance(vmin, ess_max(values, probs));
    values
        .iter()
        .zip(probs)
        .filter(|(&v, &p)| p > 0.0 && v - vmin <= tol)
        .map(|(_, &p)| p)
        .sum()
}

fn tie_tolerance(vmin: f64, vmax: f64) -> f64 {
    1e-12 * (1.0 + vmin.abs().max(vmax.abs()))
}

/// Outcome of the dual maximization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualSolution {
    /// Optimal multiplier. `+inf` encodes the `delta = 0` case, where the
    /// supremum is approached only in the large-beta limit.
    pub beta_star: f64,
    /// Worst-case expectation attained.
    pub value: f64,
    /// True when the optimum sits at the `beta = 0` boundary and the value is
    /// the essential infimum.
    pub at_boundary: bool,
}

/// The distribution attaining the worst-case expectation.
#[derive(Debug, Clone, PartialEq)]
pub struct WorstCaseDistribution {
    /// Tilted (or boundary vertex) probabilities, aligned with the nominal
    /// distribution's atoms.
    pub probs: Vec<f64>,
    /// Set when the multiplier was 0 and the mass collapsed onto the
    /// essential-infimum atoms instead of an interior tilting.
    pub at_boundary: bool,
}

/// Dual objective `-beta * log E_p[exp(-v/beta)] - beta * delta`, evaluated
/// with max-subtraction so large `v/beta` ratios cannot overflow.
pub fn dual_objective(
    dist: &DiscreteDistribution,
    beta: f64,
    delta: f64,
) -> Result<f64, KlDualError> {
    if !(beta > 0.0) {
        return Err(KlDualError::NonPositive {
            name: "beta",
            value: beta,
        });
    }
    if !(delta > 0.0) {
        return Err(KlDualError::NonPositive {
            name: "delta",
            value: delta,
        });
    }
    Ok(dual_objective_unchecked(
        dist.support_values(),
        dist.probs(),
        beta,
        delta,
    ))
}

/// Same as [`dual_objective`] without precondition checks; used by the inner
/// search loops on already-validated inputs.
pub(crate) fn dual_objective_unchecked(values: &[f64], probs: &[f64], beta: f64, delta: f64) -> f64 {
    -beta * log_mean_exp_neg(values, probs, beta) - beta * delta
}

/// Computes `log E_p[exp(-v/beta)]` stably: subtract the maximum exponent
/// before exponentiating.
fn log_mean_exp_neg(values: &[f64], probs: &[f64], beta: f64) -> f64 {
    let mut max_t = f64::NEG_INFINITY;
    for (&v, &p) in values.iter().zip(probs) {
        if p > 0.0 {
            max_t = max_t.max(-v / beta);
        }
    }
    let mut acc = 0.0;
    for (&v, &p) in values.iter().zip(probs) {
        if p > 0.0 {
            acc += p * (-v / beta - max_t).exp();
        }
    }
    max_t + acc.ln()
}

/// Solves the dual problem: the worst-case expectation of the support values
/// over the KL ball of radius `delta`, together with the optimal multiplier.
///
/// `delta = 0` returns the nominal expectation with `beta_star = +inf`. The
/// boundary case `beta_star = 0` is detected analytically from the mass on
/// the minimizing atoms (`log(kappa) + delta >= 0`) and returns the essential
/// infimum exactly; otherwise a golden-section search maximizes the concave
/// objective on the interval `(0, spread/delta]` after shifting values so the
/// minimum sits at zero (the objective is shift-equivariant, and the shifted
/// interval is contained in the `[0, v_max/delta]` bound for non-negative
/// supports).
pub fn solve_dual(dist: &DiscreteDistribution, delta: f64) -> Result<DualSolution, KlDualError> {
    if delta < 0.0 || !delta.is_finite() {
        return Err(KlDualError::NegativeDelta(delta));
    }
    Ok(solve_dual_slices(
        dist.support_values(),
        dist.probs(),
        delta,
    ))
}

/// Slice-based solver core for callers that have already validated the
/// probability vector (the tabular Bellman loops solve one of these per
/// state-action entry).
pub(crate) fn solve_dual_slices(values: &[f64], probs: &[f64], delta: f64) -> DualSolution {
    if delta == 0.0 {
        let mean = values.iter().zip(probs).map(|(v, p)| v * p).sum();
        return DualSolution {
            beta_star: f64::INFINITY,
            value: mean,
            at_boundary: false,
        };
    }

    let vmin = ess_min(values, probs);
    let vmax = ess_max(values, probs);
    let spread = vmax - vmin;
    if spread <= tie_tolerance(vmin, vmax) {
        // All support values coincide: the ball cannot move the expectation.
        return DualSolution {
            beta_star: 0.0,
            value: vmin,
            at_boundary: true,
        };
    }

    let kappa = ess_min_mass(values, probs);
    if kappa.ln() + delta >= 0.0 {
        return DualSolution {
            beta_star: 0.0,
            value: vmin,
            at_boundary: true,
        };
    }

    // Interior search on shifted values w = v - vmin >= 0.
    let shifted: Vec<f64> = values.iter().map(|v| v - vmin).collect();
    let lo = BETA_FLOOR_REL * spread;
    let hi = spread / delta;
    let f = |beta: f64| dual_objective_unchecked(&shifted, probs, beta, delta);
    let (beta_coarse, f_coarse, bracket) = golden_section_max(&f, lo, hi);

    // Stationarity refinement: f'(beta) = KL(q_beta ‖ p) - delta, and the KL
    // of the tilting is strictly decreasing in beta, so the maximizer is the
    // unique root. Bisection on geometric midpoints recovers it to machine
    // precision, which the golden-section bracket alone cannot when beta* is
    // small (KL varies like Var/beta^2 there). The root usually sits inside
    // the golden bracket already; fall back to the full interval otherwise.
    let kl_excess = |beta: f64| tilted_mean_and_kl(&shifted, probs, beta).1 - delta;
    let (mut beta_star, mut f_star) = (beta_coarse, f_coarse);
    let (mut a, mut b) = bracket;
    if !(kl_excess(a) > 0.0 && kl_excess(b) <= 0.0) {
        (a, b) = (lo, hi);
    }
    if kl_excess(a) > 0.0 && kl_excess(b) <= 0.0 {
        for _ in 0..SEARCH_MAX_ITERS {
            if b - a <= 1e-15 * b {
                break;
            }
            let mid = (a * b).sqrt();
            if kl_excess(mid) > 0.0 {
                a = mid;
            } else {
                b = mid;
            }
        }
        // b sits on the feasible (KL <= delta) side of the crossing; the
        // value gap to the coarse point is below rounding noise, and the
        // recovered tilting at b respects the KL budget.
        beta_star = b;
        f_star = f(b).max(f_coarse);
    }

    // The interior optimum dominates the essential-infimum limit (value 0
    // after the shift) whenever log(kappa) + delta < 0; keep the comparison
    // in case of extreme rounding.
    if f_star <= 0.0 {
        return DualSolution {
            beta_star: 0.0,
            value: vmin,
            at_boundary: true,
        };
    }
    DualSolution {
        beta_star,
        value: vmin + f_star,
        at_boundary: false,
    }
}

/// Golden-section maximization of a concave function on `[lo, hi]`.
/// Returns `(argmax, max, final bracket)`.
fn golden_section_max(f: &dyn Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> (f64, f64, (f64, f64)) {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let width_tol = SEARCH_WIDTH_REL * (hi - lo);
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..SEARCH_MAX_ITERS {
        if hi - lo <= width_tol {
            break;
        }
        if f1 >= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2);
        }
    }
    if f1 >= f2 {
        (x1, f1, (lo, hi))
    } else {
        (x2, f2, (lo, hi))
    }
}

/// Primal verification oracle: minimizes `E_q[v]` over the KL ball directly,
/// by sweeping the exponential-tilting path `q_lambda ∝ p * exp(-v/lambda)`
/// on a log grid, adding simplex-vertex candidates for the boundary regime,
/// and refining the binding-constraint crossing `KL(q_lambda ‖ p) = delta`
/// by bisection. Rejects supports larger than [`PRIMAL_ORACLE_MAX_SUPPORT`].
pub fn solve_primal_bruteforce(
    dist: &DiscreteDistribution,
    delta: f64,
) -> Result<f64, KlDualError> {
    if dist.len() > PRIMAL_ORACLE_MAX_SUPPORT {
        return Err(KlDualError::SupportTooLarge {
            max: PRIMAL_ORACLE_MAX_SUPPORT,
            got: dist.len(),
        });
    }
    if delta < 0.0 || !delta.is_finite() {
        return Err(KlDualError::NegativeDelta(delta));
    }
    if delta == 0.0 {
        return Ok(dist.mean());
    }

    let vmin = dist.essential_min();
    let vmax = dist.essential_max();
    let spread = vmax - vmin;
    if spread <= tie_tolerance(vmin, vmax) {
        return Ok(vmin);
    }

    // Mass on the minimizing atoms: if concentrating there is feasible, it is
    // optimal (no distribution in the ball averages below the essential min).
    let kappa = dist.essential_min_mass();
    if -kappa.ln() <= delta {
        return Ok(vmin);
    }

    let values = dist.support_values();
    let probs = dist.probs();
    let mut best = dist.mean();

    // Simplex vertices: all mass on one atom, feasible iff -log(p_i) <= delta.
    for (&v, &p) in values.iter().zip(probs) {
        if p > 0.0 && -p.ln() <= delta {
            best = best.min(v);
        }
    }

    // Log-grid sweep of the tilting path, tracking feasible candidates and a
    // bracket around the KL(q_lambda) = delta crossing. KL decreases in
    // lambda, from -log(kappa) (> delta here) down to 0.
    let mut lam_feasible = f64::NAN; // KL <= delta
    let mut lam_infeasible = f64::NAN; // KL > delta
    let n_grid = 600;
    for k in 0..=n_grid {
        // lambda from spread*1e-6 up to spread*1e+6
        let exponent = -6.0 + 12.0 * (k as f64) / (n_grid as f64);
        let lam = spread * 10f64.powf(exponent);
        let (mean, kl) = tilted_mean_and_kl(values, probs, lam);
        if kl <= delta {
            best = best.min(mean);
            if lam_feasible.is_nan() || lam < lam_feasible {
                lam_feasible = lam;
            }
        } else if lam_infeasible.is_nan() || lam > lam_infeasible {
            lam_infeasible = lam;
        }
    }

    // Bisect the binding crossing; the tilted mean decreases as lambda drops,
    // so the feasible point with the smallest lambda is the path optimum.
    if !lam_feasible.is_nan() && !lam_infeasible.is_nan() && lam_infeasible < lam_feasible {
        let mut lo = lam_infeasible;
        let mut hi = lam_feasible;
        for _ in 0..200 {
            let mid = (lo * hi).sqrt();
            let (mean, kl) = tilted_mean_and_kl(values, probs, mid);
            if kl <= delta {
                hi = mid;
                best = best.min(mean);
            } else {
                lo = mid;
            }
        }
    }

    Ok(best)
}

/// Tilted distribution `q ∝ p * exp(-v/lambda)`: returns `(E_q[v], KL(q‖p))`,
/// both computed with max-subtraction.
fn tilted_mean_and_kl(values: &[f64], probs: &[f64], lambda: f64) -> (f64, f64) {
    let mut max_t = f64::NEG_INFINITY;
    for (&v, &p) in values.iter().zip(probs) {
        if p > 0.0 {
            max_t = max_t.max(-v / lambda);
        }
    }
    let mut z = 0.0;
    let mut mean_num = 0.0;
    for (&v, &p) in values.iter().zip(probs) {
        if p > 0.0 {
            let w = p * (-v / lambda - max_t).exp();
            z += w;
            mean_num += w * v;
        }
    }
    let mean = mean_num / z;
    // KL(q‖p) = sum q_i * (t_i - max_t - log z) with t_i = -v_i/lambda,
    // i.e. -E_q[v]/lambda - max_t - log z.
    let kl = -mean / lambda - max_t - z.ln();
    (mean, kl.max(0.0))
}

/// Recovers the distribution attaining the dual value: the exponential
/// tilting at `beta_star` when the solution is interior, the normalized
/// restriction of the nominal mass to the essential-infimum atoms when
/// `beta_star = 0` (flagged via `at_boundary`), and the nominal distribution
/// itself when `delta = 0` (`beta_star = +inf`).
pub fn worst_case_distribution(
    dist: &DiscreteDistribution,
    solution: &DualSolution,
) -> Result<WorstCaseDistribution, KlDualError> {
    if solution.beta_star.is_infinite() {
        return Ok(WorstCaseDistribution {
            probs: dist.probs().to_vec(),
            at_boundary: false,
        });
    }
    if solution.at_boundary || solution.beta_star == 0.0 {
        let vmin = dist.essential_min();
        let tol = tie_tolerance(vmin, dist.essential_max());
        let mass = dist.essential_min_mass();
        let probs = dist
            .support_values()
            .iter()
            .zip(dist.probs())
            .map(|(&v, &p)| {
                if p > 0.0 && v - vmin <= tol {
                    p / mass
                } else {
                    0.0
                }
            })
            .collect();
        return Ok(WorstCaseDistribution {
            probs,
            at_boundary: true,
        });
    }
    if !(solution.beta_star > 0.0) || !solution.beta_star.is_finite() {
        return Err(KlDualError::NonPositive {
            name: "beta_star",
            value: solution.beta_star,
        });
    }
    let beta = solution.beta_star;
    let vmin = dist.essential_min();
    let mut z = 0.0;
    let mut weights = vec![0.0; dist.len()];
    for (i, (&v, &p)) in dist
        .support_values()
        .iter()
        .zip(dist.probs())
        .enumerate()
    {
        if p > 0.0 {
            let w = p * (-(v - vmin) / beta).exp();
            weights[i] = w;
            z += w;
        }
    }
    for w in &mut weights {
        *w /= z;
    }
    Ok(WorstCaseDistribution {
        probs: weights,
        at_boundary: false,
    })
}

/// KL divergence between two aligned probability vectors, `KL(q ‖ p)`.
/// Returns `+inf` when `q` puts mass where `p` has none.
pub fn kl_divergence(q: &[f64], p: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&qi, &pi) in q.iter().zip(p) {
        if qi > 0.0 {
            if pi <= 0.0 {
                return f64::INFINITY;
            }
            acc += qi * (qi / pi).ln();
        }
    }
    acc.max(0.0)
}
