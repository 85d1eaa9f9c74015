//! Reparameterized Gaussian policy head with optional tanh squashing.
//!
//! The policy network emits `[mean, log_std]` side by side; an action is
//! `squash(mean + sigma * eps)` with `eps ~ N(0, I)`. Log-probabilities
//! include the tanh change-of-variables term, computed in the stable form
//! `log(1 - tanh(u)^2) = 2*(log 2 - u - softplus(-2u))`.

use super::tape::{softplus, Tape, Tensor, Var};
use super::{Mlp, NnError, ParameterStore};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const LOG_2PI: f64 = 1.837_877_066_409_345_5;
const LN_2: f64 = std::f64::consts::LN_2;

/// Head configuration; the backing network lives elsewhere.
#[derive(Debug, Clone)]
pub struct GaussianPolicyHead {
    pub action_dim: usize,
    pub log_std_min: f64,
    pub log_std_max: f64,
    /// Squash actions through tanh into the action box.
    pub squash: bool,
    /// Half-width of the action box (tanh output is scaled by this).
    pub action_scale: f64,
}

impl GaussianPolicyHead {
    pub fn new(action_dim: usize, action_scale: f64) -> Self {
        Self {
            action_dim,
            log_std_min: -20.0,
            log_std_max: 2.0,
            squash: true,
            action_scale,
        }
    }

    pub fn without_squash(action_dim: usize) -> Self {
        Self {
            action_dim,
            log_std_min: -20.0,
            log_std_max: 2.0,
            squash: false,
            action_scale: 1.0,
        }
    }

    /// Differentiable sampling on the tape. `net_out` is `[B, 2*action_dim]`
    /// and `eps` a pre-drawn `[B, action_dim]` standard normal constant.
    /// Returns the action and per-row log-probability nodes.
    pub fn sample_on_tape(
        &self,
        tape: &mut Tape,
        net_out: Var,
        eps: &Tensor,
    ) -> Result<(Var, Var), NnError> {
        let d = self.action_dim;
        if tape.value(net_out).cols != 2 * d {
            return Err(NnError::Shape(format!(
                "policy head expects {} columns, got {}",
                2 * d,
                tape.value(net_out).cols
            )));
        }
        if eps.cols != d || eps.rows != tape.value(net_out).rows {
            return Err(NnError::Shape("noise shape mismatch".into()));
        }
        let mean = tape.slice_cols(net_out, 0, d);
        let raw_log_std = tape.slice_cols(net_out, d, d);
        let log_std = tape.clamp(raw_log_std, self.log_std_min, self.log_std_max);
        let sigma = tape.exp(log_std);
        let eps_c = tape.constant(eps.clone());
        let noise = tape.mul(sigma, eps_c);
        let u = tape.add(mean, noise);

        // log N(u; mean, sigma) per dim = -eps^2/2 - log_std - log(2*pi)/2,
        // where the eps part is constant under reparameterization.
        let const_part = Tensor {
            rows: eps.rows,
            cols: eps.cols,
            data: eps
                .data
                .iter()
                .map(|&e| -0.5 * e * e - 0.5 * LOG_2PI)
                .collect(),
        };
        let const_c = tape.constant(const_part);
        let neg_log_std = tape.neg(log_std);
        let mut per_dim = tape.add(neg_log_std, const_c);

        let action = if self.squash {
            // Jacobian per dim: log(scale) + log(1 - tanh(u)^2).
            let two_u = tape.scale(u, -2.0);
            let sp = tape.softplus(two_u);
            let u_plus_sp = tape.add(u, sp);
            let scaled = tape.scale(u_plus_sp, -2.0);
            let log1m = tape.add_scalar(scaled, 2.0 * LN_2);
            let corr = tape.add_scalar(log1m, self.action_scale.ln());
            per_dim = tape.sub(per_dim, corr);
            let squashed = tape.tanh(u);
            tape.scale(squashed, self.action_scale)
        } else {
            u
        };
        let log_prob = tape.sum_rows(per_dim);
        Ok((action, log_prob))
    }

    /// Plain sampling with explicit noise; returns `(actions, log_probs)`.
    pub fn sample_plain_with_eps(
        &self,
        store: &ParameterStore,
        net: &Mlp,
        obs: &Tensor,
        eps: &Tensor,
    ) -> Result<(Tensor, Tensor), NnError> {
        let out = net.forward_plain(store, obs)?;
        let d = self.action_dim;
        let rows = out.rows;
        let mut actions = Tensor::zeros(rows, d);
        let mut log_probs = Tensor::zeros(rows, 1);
        for r in 0..rows {
            let mut lp = 0.0;
            for c in 0..d {
                let mean = out.at(r, c);
                let log_std = out.at(r, d + c).clamp(self.log_std_min, self.log_std_max);
                let e = eps.at(r, c);
                let u = mean + log_std.exp() * e;
                lp += -0.5 * e * e - 0.5 * LOG_2PI - log_std;
                if self.squash {
                    lp -= self.action_scale.ln() + 2.0 * (LN_2 - u - softplus(-2.0 * u));
                    actions.data[r * d + c] = self.action_scale * u.tanh();
                } else {
                    actions.data[r * d + c] = u;
                }
            }
            log_probs.data[r] = lp;
        }
        Ok((actions, log_probs))
    }

    /// Plain sampling with a fresh standard-normal draw per entry.
    pub fn sample_plain(
        &self,
        store: &ParameterStore,
        net: &Mlp,
        obs: &Tensor,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor, Tensor), NnError> {
        let eps = standard_normal(obs.rows, self.action_dim, rng);
        self.sample_plain_with_eps(store, net, obs, &eps)
    }

    /// Deterministic action: the squashed mean (evaluation-time policy).
    pub fn mean_action(
        &self,
        store: &ParameterStore,
        net: &Mlp,
        obs: &Tensor,
    ) -> Result<Tensor, NnError> {
        let out = net.forward_plain(store, obs)?;
        let d = self.action_dim;
        let mut actions = Tensor::zeros(out.rows, d);
        for r in 0..out.rows {
            for c in 0..d {
                let mean = out.at(r, c);
                actions.data[r * d + c] = if self.squash {
                    self.action_scale * mean.tanh()
                } else {
                    mean
                };
            }
        }
        Ok(actions)
    }

    /// Log-density of a concrete action under `(mean, log_std)`, inverting
    /// the squash. Used by quadrature checks and diagnostics.
    pub fn log_prob_of_action(&self, mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
        let mut lp = 0.0;
        for c in 0..self.action_dim {
            let ls = log_std[c].clamp(self.log_std_min, self.log_std_max);
            let sigma = ls.exp();
            let u = if self.squash {
                atanh(action[c] / self.action_scale)
            } else {
                action[c]
            };
            let z = (u - mean[c]) / sigma;
            lp += -0.5 * z * z - 0.5 * LOG_2PI - ls;
            if self.squash {
                lp -= self.action_scale.ln() + 2.0 * (LN_2 - u - softplus(-2.0 * u));
            }
        }
        lp
    }
}

/// `[rows, cols]` of standard normal draws (Box-Muller on the seeded stream).
pub fn standard_normal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    while data.len() < rows * cols {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        data.push(r * theta.cos());
        if data.len() < rows * cols {
            data.push(r * theta.sin());
        }
    }
    Tensor::from_vec(rows, cols, data)
}

fn atanh(x: f64) -> f64 {
    0.5 * ((1.0 + x) / (1.0 - x)).ln()
}
