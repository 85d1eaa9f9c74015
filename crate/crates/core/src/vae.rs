//! Conditional VAE over environment transitions.
//!
//! The encoder maps `(s, a, s')` to a diagonal Gaussian posterior over the
//! latent; the decoder reconstructs `s'` from `(s, a, z)` deterministically.
//! Training minimizes reconstruction MSE plus the closed-form KL to the
//! standard-normal prior. A trained model generates per-row next-state atoms
//! that downstream code treats as uniform empirical measures.

use crate::data::TransitionBatch;
use crate::nn::{
    gaussian::standard_normal, Activation, Mlp, NnError, ParameterStore, Tape, Tensor, Var,
};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VaeError {
    #[error("training diverged at step {step}: loss {loss:.3e} (initial {initial:.3e})")]
    Diverged { step: usize, loss: f64, initial: f64 },
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Nn(#[from] NnError),
}

const LOG_STD_CLAMP: f64 = 10.0;

/// Uniform empirical measure over generated next states.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    pub state_dim: usize,
    /// `m x state_dim`, row-major.
    pub atoms: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn m(&self) -> usize {
        self.atoms.len() / self.state_dim
    }

    pub fn atom(&self, i: usize) -> &[f64] {
        &self.atoms[i * self.state_dim..(i + 1) * self.state_dim]
    }

    /// Arithmetic mean of the atoms.
    pub fn mean_atom(&self) -> Vec<f64> {
        let m = self.m() as f64;
        let mut out = vec![0.0; self.state_dim];
        for i in 0..self.m() {
            for (o, x) in out.iter_mut().zip(self.atom(i)) {
                *o += x / m;
            }
        }
        out
    }
}

/// Encoder/decoder pair over a shared parameter store.
#[derive(Debug, Clone)]
pub struct TransitionVae {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub state_dim: usize,
    pub action_dim: usize,
    pub latent_dim: usize,
}

impl TransitionVae {
    pub fn new(
        prefix: &str,
        state_dim: usize,
        action_dim: usize,
        latent_dim: usize,
        hidden: &[usize],
        activation: Activation,
    ) -> Self {
        let mut enc_dims = vec![2 * state_dim + action_dim];
        enc_dims.extend_from_slice(hidden);
        enc_dims.push(2 * latent_dim);
        let mut dec_dims = vec![state_dim + action_dim + latent_dim];
        dec_dims.extend_from_slice(hidden);
        dec_dims.push(state_dim);
        Self {
            encoder: Mlp::new(&format!("{prefix}.enc"), &enc_dims, activation),
            decoder: Mlp::new(&format!("{prefix}.dec"), &dec_dims, activation),
            state_dim,
            action_dim,
            latent_dim,
        }
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Result<(), NnError> {
        self.encoder.init(store, rng)?;
        self.decoder.init(store, rng)
    }

    /// Builds the ELBO loss graph for a batch with fixed reparameterization
    /// noise: mean over rows of `||s' - s_hat||^2 + KL(q(z|s,a,s') || N(0,I))`,
    /// with the KL in closed form for diagonal Gaussians.
    pub fn elbo_on_tape(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        batch: &TransitionBatch,
        eps: &Tensor,
    ) -> Result<Var, NnError> {
        let n = batch.len();
        let d = self.latent_dim;
        let states = batch.states_tensor();
        let actions = batch.actions_tensor();
        let next_states = batch.next_states_tensor();

        let s = tape.constant(states);
        let a = tape.constant(actions);
        let sp = tape.constant(next_states);
        let sa = tape.concat_cols(s, a);
        let enc_in = tape.concat_cols(sa, sp);
        let enc_out = self.encoder.forward(tape, store, enc_in, true)?;
        let mu = tape.slice_cols(enc_out, 0, d);
        let raw_log_std = tape.slice_cols(enc_out, d, d);
        let log_std = tape.clamp(raw_log_std, -LOG_STD_CLAMP, LOG_STD_CLAMP);
        let sigma = tape.exp(log_std);
        let eps_c = tape.constant(eps.clone());
        let noise = tape.mul(sigma, eps_c);
        let z = tape.add(mu, noise);

        let dec_in = tape.concat_cols(sa, z);
        let s_hat = self.decoder.forward(tape, store, dec_in, true)?;
        let diff = tape.sub(s_hat, sp);
        let sq = tape.square(diff);
        let recon_row = tape.sum_rows(sq);

        // KL per row: 0.5 * sum(mu^2 + sigma^2 - 1 - 2*log_std).
        let mu_sq = tape.square(mu);
        let two_ls = tape.scale(log_std, 2.0);
        let var = tape.exp(two_ls);
        let neg_two_ls = tape.scale(log_std, -2.0);
        let shifted = tape.add_scalar(neg_two_ls, -1.0);
        let partial = tape.add(mu_sq, var);
        let inner = tape.add(partial, shifted);
        let kl_sum = tape.sum_rows(inner);
        let kl_row = tape.scale(kl_sum, 0.5);

        let per_row = tape.add(recon_row, kl_row);
        let _ = n;
        Ok(tape.mean_all(per_row))
    }

    /// ELBO value with freshly drawn noise.
    pub fn elbo_loss(
        &self,
        store: &ParameterStore,
        batch: &TransitionBatch,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64, NnError> {
        let eps = standard_normal(batch.len(), self.latent_dim, rng);
        let mut tape = Tape::new();
        let loss = self.elbo_on_tape(&mut tape, store, batch, &eps)?;
        Ok(tape.scalar_value(loss))
    }

    /// One minibatch gradient step; returns the loss before the update.
    pub fn train_step(
        &self,
        store: &mut ParameterStore,
        batch: &TransitionBatch,
        lr: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64, NnError> {
        let eps = standard_normal(batch.len(), self.latent_dim, rng);
        let mut tape = Tape::new();
        let loss = self.elbo_on_tape(&mut tape, store, batch, &eps)?;
        let value = tape.scalar_value(loss);
        store.zero_grads();
        tape.backward(loss, store)?;
        store.adam_step(lr);
        Ok(value)
    }

    /// Minibatch training loop with a divergence watchdog (aborts when the
    /// loss exceeds ten times its initial value). Returns the loss trace.
    pub fn train(
        &self,
        store: &mut ParameterStore,
        dataset: &TransitionBatch,
        steps: usize,
        batch_size: usize,
        lr: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>, VaeError> {
        if dataset.is_empty() {
            return Err(VaeError::EmptyDataset);
        }
        let mut trace = Vec::with_capacity(steps);
        let mut initial = f64::NAN;
        for step in 0..steps {
            let indices: Vec<usize> = (0..batch_size.min(dataset.len()))
                .map(|_| rng.gen_range(0..dataset.len()))
                .collect();
            let batch = dataset.select(&indices);
            let loss = self.train_step(store, &batch, lr, rng)?;
            if step == 0 {
                initial = loss;
            }
            if !loss.is_finite() || loss > 10.0 * initial.abs().max(1.0) {
                return Err(VaeError::Diverged {
                    step,
                    loss,
                    initial,
                });
            }
            trace.push(loss);
        }
        Ok(trace)
    }

    /// Generates `m` next-state atoms for one `(s, a)` pair by decoding
    /// standard-normal latents. Deterministic given the RNG state.
    pub fn sample_next_states(
        &self,
        store: &ParameterStore,
        state: &[f64],
        action: &[f64],
        m: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<EmpiricalMeasure, NnError> {
        let mut dec_in = Tensor::zeros(m, self.state_dim + self.action_dim + self.latent_dim);
        let z = standard_normal(m, self.latent_dim, rng);
        for r in 0..m {
            let row = &mut dec_in.data
                [r * dec_in.cols..(r + 1) * dec_in.cols];
            row[..self.state_dim].copy_from_slice(state);
            row[self.state_dim..self.state_dim + self.action_dim].copy_from_slice(action);
            row[self.state_dim + self.action_dim..]
                .copy_from_slice(&z.data[r * self.latent_dim..(r + 1) * self.latent_dim]);
        }
        let out = self.decoder.forward_plain(store, &dec_in)?;
        Ok(EmpiricalMeasure {
            state_dim: self.state_dim,
            atoms: out.data,
        })
    }

    /// Generates `m` atoms for every row of a batch in one decoder pass;
    /// returns `n * m * state_dim` scalars suitable for
    /// [`TransitionBatch::set_synthetic`].
    pub fn sample_batch_atoms(
        &self,
        store: &ParameterStore,
        batch: &TransitionBatch,
        m: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>, NnError> {
        let n = batch.len();
        let cols = self.state_dim + self.action_dim + self.latent_dim;
        let z = standard_normal(n * m, self.latent_dim, rng);
        let mut dec_in = Tensor::zeros(n * m, cols);
        for i in 0..n {
            let s = batch.state_row(i);
            let a = batch.action_row(i);
            for j in 0..m {
                let r = i * m + j;
                let row = &mut dec_in.data[r * cols..(r + 1) * cols];
                row[..self.state_dim].copy_from_slice(s);
                row[self.state_dim..self.state_dim + self.action_dim].copy_from_slice(a);
                row[self.state_dim + self.action_dim..]
                    .copy_from_slice(&z.data[r * self.latent_dim..(r + 1) * self.latent_dim]);
            }
        }
        let out = self.decoder.forward_plain(store, &dec_in)?;
        Ok(out.data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradient_check;

    fn zeroed_vae(latent: usize) -> (TransitionVae, ParameterStore) {
        let vae = TransitionVae::new("vae", 2, 1, latent, &[4], Activation::Relu);
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        vae.init(&mut store, &mut rng).unwrap();
        for name in store.names().map(String::from).collect::<Vec<_>>() {
            store.value_mut(&name).unwrap().data.fill(0.0);
        }
        (vae, store)
    }

    fn zero_batch(n: usize) -> TransitionBatch {
        TransitionBatch::new(2, 1, vec![0.0; 2 * n], vec![0.0; n], vec![0.0; n], vec![0.0; 2 * n])
            .unwrap()
    }

    #[test]
    fn perfect_reconstruction_and_prior_posterior_give_zero_loss() {
        let (vae, store) = zeroed_vae(3);
        let batch = zero_batch(4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let loss = vae.elbo_loss(&store, &batch, &mut rng).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn unit_mean_posterior_has_half_nat_kl() {
        // Encoder forced to (mu, log_std) = (1, 0), decoder zero, targets
        // zero: loss = KL = 0.5*(1 + 1 - 1 - 0) = 0.5.
        let (vae, mut store) = zeroed_vae(1);
        store.value_mut("vae.enc.b1").unwrap().data[0] = 1.0;
        let batch = zero_batch(8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let loss = vae.elbo_loss(&store, &batch, &mut rng).unwrap();
        // Decoder sees z = 1 + eps but all its weights are zero.
        assert!((loss - 0.5).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn elbo_gradient_matches_finite_differences() {
        let vae = TransitionVae::new("vae", 2, 1, 2, &[5], Activation::Tanh);
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        vae.init(&mut store, &mut rng).unwrap();
        let batch = TransitionBatch::new(
            2,
            1,
            (0..8).map(|i| (i as f64 * 0.7).sin()).collect(),
            (0..4).map(|i| (i as f64 * 0.3).cos()).collect(),
            vec![0.0; 4],
            (0..8).map(|i| (i as f64 * 0.9).sin()).collect(),
        )
        .unwrap();
        let eps = standard_normal(4, 2, &mut rng);

        let mut tape = Tape::new();
        let loss = vae.elbo_on_tape(&mut tape, &store, &batch, &eps).unwrap();
        store.zero_grads();
        tape.backward(loss, &mut store).unwrap();
        let names: Vec<String> = store.names().map(String::from).collect();
        let worst = gradient_check(
            &mut store,
            &names,
            |s| {
                let mut t = Tape::new();
                let l = vae.elbo_on_tape(&mut t, s, &batch, &eps).unwrap();
                t.scalar_value(l)
            },
            1e-5,
        )
        .unwrap();
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn memorizes_a_single_repeated_transition() {
        let vae = TransitionVae::new("vae", 2, 1, 2, &[16], Activation::Relu);
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        vae.init(&mut store, &mut rng).unwrap();
        let n = 64;
        let batch = TransitionBatch::new(
            2,
            1,
            [0.3, -0.2].repeat(n),
            vec![0.5; n],
            vec![0.0; n],
            [0.7, 0.1].repeat(n),
        )
        .unwrap();
        vae.train(&mut store, &batch, 3000, 32, 1e-3, &mut rng)
            .unwrap();
        let measure = vae
            .sample_next_states(&store, &[0.3, -0.2], &[0.5], 64, &mut rng)
            .unwrap();
        let mean = measure.mean_atom();
        assert!((mean[0] - 0.7).abs() < 0.05, "mean {mean:?}");
        assert!((mean[1] - 0.1).abs() < 0.05, "mean {mean:?}");
    }

    #[test]
    fn sampling_is_deterministic_under_seed() {
        let vae = TransitionVae::new("vae", 2, 1, 3, &[8], Activation::Relu);
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        vae.init(&mut store, &mut rng).unwrap();
        let a = vae
            .sample_next_states(&store, &[0.1, 0.2], &[0.3], 5, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        let b = vae
            .sample_next_states(&store, &[0.1, 0.2], &[0.3], 5, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        assert_eq!(a, b);
        let c = vae
            .sample_next_states(&store, &[0.1, 0.2], &[0.3], 5, &mut ChaCha8Rng::seed_from_u64(10))
            .unwrap();
        assert_ne!(a, c, "different seeds must give different atoms");
    }

    #[test]
    fn divergence_watchdog_fires_on_huge_learning_rate() {
        let vae = TransitionVae::new("vae", 2, 1, 2, &[8], Activation::Relu);
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        vae.init(&mut store, &mut rng).unwrap();
        let n = 32;
        let data: Vec<f64> = (0..2 * n).map(|i| (i as f64 * 0.13).sin() * 3.0).collect();
        let batch =
            TransitionBatch::new(2, 1, data.clone(), vec![0.1; n], vec![0.0; n], data).unwrap();
        // An absurd learning rate blows the loss up quickly.
        let result = vae.train(&mut store, &batch, 500, 32, 1e3, &mut rng);
        assert!(matches!(result, Err(VaeError::Diverged { .. })));
    }
}
