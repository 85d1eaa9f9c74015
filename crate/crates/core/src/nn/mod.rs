//! Minimal neural toolkit: dense networks over a reverse-mode tape, a named
//! parameter store with an adaptive-moment optimizer, a reparameterized
//! Gaussian policy head, and a lossless checkpoint container.

mod checkpoint;
pub mod gaussian;
pub mod tape;

pub use checkpoint::{load_named_tensors, save_named_tensors};
pub use gaussian::GaussianPolicyHead;
pub use tape::{log_mean_exp, sigmoid, softplus, Tape, Tensor, Var};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("duplicate parameter {0:?}")]
    DuplicateParam(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(String),
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct ParamEntry {
    name: String,
    value: Tensor,
    grad: Tensor,
    moment1: Tensor,
    moment2: Tensor,
}

/// Named flat parameter tensors with paired gradient buffers and optimizer
/// moment state. Iteration order is insertion order, never hashed.
#[derive(Default)]
pub struct ParameterStore {
    entries: Vec<ParamEntry>,
    index: std::collections::HashMap<String, usize>,
    adam_t: u64,
}

/// What an optimizer step did; `skipped` lists tensors whose gradients were
/// not finite and were left untouched.
#[derive(Debug, Clone, Default)]
pub struct StepReport {
    pub skipped: Vec<String>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<(), NnError> {
        if self.index.contains_key(name) {
            return Err(NnError::DuplicateParam(name.into()));
        }
        let (rows, cols) = (value.rows, value.cols);
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            grad: Tensor::zeros(rows, cols),
            moment1: Tensor::zeros(rows, cols),
            moment2: Tensor::zeros(rows, cols),
        });
        Ok(())
    }

    fn entry(&self, name: &str) -> Result<&ParamEntry, NnError> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| NnError::UnknownParam(name.into()))
    }

    fn entry_mut(&mut self, name: &str) -> Result<&mut ParamEntry, NnError> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i]),
            None => Err(NnError::UnknownParam(name.into())),
        }
    }

    pub fn value(&self, name: &str) -> Result<&Tensor, NnError> {
        Ok(&self.entry(name)?.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor, NnError> {
        Ok(&mut self.entry_mut(name)?.value)
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor, NnError> {
        Ok(&self.entry(name)?.grad)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data.fill(0.0);
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, delta: &Tensor) -> Result<(), NnError> {
        let e = self.entry_mut(name)?;
        if e.grad.rows != delta.rows || e.grad.cols != delta.cols {
            return Err(NnError::Shape(format!(
                "gradient for {name} has shape {}x{}, parameter is {}x{}",
                delta.rows, delta.cols, e.grad.rows, e.grad.cols
            )));
        }
        for (g, d) in e.grad.data.iter_mut().zip(&delta.data) {
            *g += d;
        }
        Ok(())
    }

    /// Bias-corrected adaptive-moment update from the accumulated gradients.
    /// Tensors with non-finite gradients are skipped and reported; their
    /// moments are left untouched.
    pub fn adam_step(&mut self, lr: f64) -> StepReport {
        self.adam_t += 1;
        let t = self.adam_t as f64;
        let c1 = 1.0 - ADAM_BETA1.powf(t);
        let c2 = 1.0 - ADAM_BETA2.powf(t);
        let mut report = StepReport::default();
        for e in &mut self.entries {
            if !e.grad.is_finite() {
                report.skipped.push(e.name.clone());
                continue;
            }
            for i in 0..e.value.data.len() {
                let g = e.grad.data[i];
                e.moment1.data[i] = ADAM_BETA1 * e.moment1.data[i] + (1.0 - ADAM_BETA1) * g;
                e.moment2.data[i] = ADAM_BETA2 * e.moment2.data[i] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = e.moment1.data[i] / c1;
                let v_hat = e.moment2.data[i] / c2;
                e.value.data[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        report
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.is_finite())
    }

    /// Copies parameter values from a same-shaped store (target network init).
    pub fn copy_values_from(&mut self, other: &ParameterStore) -> Result<(), NnError> {
        for e in &mut self.entries {
            let src = other.value(&e.name)?;
            if src.rows != e.value.rows || src.cols != e.value.cols {
                return Err(NnError::Shape(format!("shape mismatch for {}", e.name)));
            }
            e.value.data.copy_from_slice(&src.data);
        }
        Ok(())
    }

    /// Exponential moving average toward the online store:
    /// `target <- tau * online + (1 - tau) * target`, per parameter.
    pub fn soft_update_from(&mut self, online: &ParameterStore, tau: f64) -> Result<(), NnError> {
        for e in &mut self.entries {
            let src = online.value(&e.name)?;
            for (t, o) in e.value.data.iter_mut().zip(&src.data) {
                *t = tau * o + (1.0 - tau) * *t;
            }
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &ParameterStore) -> Result<f64, NnError> {
        let mut d: f64 = 0.0;
        for e in &self.entries {
            let o = other.value(&e.name)?;
            for (a, b) in e.value.data.iter().zip(&o.data) {
                d = d.max((a - b).abs());
            }
        }
        Ok(d)
    }

    /// Flattens the store into named tensors (values, moments, and the step
    /// counter) for checkpointing. `prefix` namespaces the entries.
    pub fn to_named_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(3 * self.entries.len() + 1);
        for e in &self.entries {
            out.push((format!("{prefix}/{}", e.name), e.value.clone()));
            out.push((format!("{prefix}/{}::m1", e.name), e.moment1.clone()));
            out.push((format!("{prefix}/{}::m2", e.name), e.moment2.clone()));
        }
        out.push((
            format!("{prefix}::adam_t"),
            Tensor::scalar(f64::from_bits(self.adam_t)),
        ));
        out
    }

    /// Restores values, moments and step counter from checkpoint tensors.
    /// Every parameter of the store must be present under `prefix`.
    pub fn load_named_tensors(
        &mut self,
        prefix: &str,
        tensors: &[(String, Tensor)],
    ) -> Result<(), NnError> {
        let lookup: std::collections::HashMap<&str, &Tensor> = tensors
            .iter()
            .map(|(name, t)| (name.as_str(), t))
            .collect();
        let fetch = |key: &str| -> Result<&Tensor, NnError> {
            lookup
                .get(key)
                .copied()
                .ok_or_else(|| NnError::Format(format!("checkpoint is missing {key:?}")))
        };
        for e in &mut self.entries {
            let v = fetch(&format!("{prefix}/{}", e.name))?;
            let m1 = fetch(&format!("{prefix}/{}::m1", e.name))?;
            let m2 = fetch(&format!("{prefix}/{}::m2", e.name))?;
            if v.rows != e.value.rows || v.cols != e.value.cols {
                return Err(NnError::Shape(format!("checkpoint shape for {}", e.name)));
            }
            e.value.data.copy_from_slice(&v.data);
            e.moment1.data.copy_from_slice(&m1.data);
            e.moment2.data.copy_from_slice(&m2.data);
        }
        let t = fetch(&format!("{prefix}::adam_t"))?;
        self.adam_t = t.data[0].to_bits();
        Ok(())
    }
}

/// Hidden-layer activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(format!("unknown activation {other:?}")),
        }
    }
}

/// Dense multilayer perceptron. The struct holds only the architecture and a
/// parameter-name prefix; weights live in a [`ParameterStore`].
#[derive(Debug, Clone)]
pub struct Mlp {
    prefix: String,
    dims: Vec<usize>,
    activation: Activation,
}

impl Mlp {
    /// `dims` is `[input, hidden..., output]`.
    pub fn new(prefix: &str, dims: &[usize], activation: Activation) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        Self {
            prefix: prefix.to_string(),
            dims: dims.to_vec(),
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    fn weight_name(&self, layer: usize) -> String {
        format!("{}.w{layer}", self.prefix)
    }

    fn bias_name(&self, layer: usize) -> String {
        format!("{}.b{layer}", self.prefix)
    }

    /// Registers fan-in uniform initialized weights and zero biases.
    pub fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Result<(), NnError> {
        for l in 0..self.dims.len() - 1 {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            store.insert(&self.weight_name(l), Tensor::from_vec(fan_in, fan_out, data))?;
            store.insert(&self.bias_name(l), Tensor::zeros(1, fan_out))?;
        }
        Ok(())
    }

    /// Tape forward pass. `trainable` decides whether the weights enter the
    /// graph as differentiable leaves or as constants that gradients merely
    /// flow through.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        input: Var,
        trainable: bool,
    ) -> Result<Var, NnError> {
        if tape.value(input).cols != self.dims[0] {
            return Err(NnError::Shape(format!(
                "{} expects {} input columns, got {}",
                self.prefix,
                self.dims[0],
                tape.value(input).cols
            )));
        }
        let mut x = input;
        for l in 0..self.dims.len() - 1 {
            let w = if trainable {
                tape.param(store, &self.weight_name(l))?
            } else {
                tape.frozen_param(store, &self.weight_name(l))?
            };
            let b = if trainable {
                tape.param(store, &self.bias_name(l))?
            } else {
                tape.frozen_param(store, &self.bias_name(l))?
            };
            let z = tape.matmul(x, w);
            x = tape.add_row_broadcast(z, b);
            if l + 1 < self.dims.len() - 1 {
                x = match self.activation {
                    Activation::Relu => tape.relu(x),
                    Activation::Tanh => tape.tanh(x),
                };
            }
        }
        Ok(x)
    }

    /// Plain forward pass without a tape (target computation, rollouts).
    pub fn forward_plain(&self, store: &ParameterStore, input: &Tensor) -> Result<Tensor, NnError> {
        if input.cols != self.dims[0] {
            return Err(NnError::Shape(format!(
                "{} expects {} input columns, got {}",
                self.prefix, self.dims[0], input.cols
            )));
        }
        let mut x = input.clone();
        for l in 0..self.dims.len() - 1 {
            let w = store.value(&self.weight_name(l))?;
            let b = store.value(&self.bias_name(l))?;
            let mut z = tape::matmul(&x, w);
            for r in 0..z.rows {
                for c in 0..z.cols {
                    z.data[r * z.cols + c] += b.data[c];
                }
            }
            if l + 1 < self.dims.len() - 1 {
                for v in &mut z.data {
                    *v = match self.activation {
                        Activation::Relu => v.max(0.0),
                        Activation::Tanh => v.tanh(),
                    };
                }
            }
            x = z;
        }
        Ok(x)
    }
}

/// Central-difference gradient check: rebuilds the loss via `eval` at
/// perturbed parameter values and compares against the analytic gradients
/// already accumulated in the store. Returns the worst relative error.
///
/// The comparison is `|fd - g| <= tol * max(|fd|, |g|) + abs_floor`, so a
/// pair of near-zero gradients does not fail on rounding noise. A coordinate
/// that disagrees is re-measured at h/4 and h/16: a piecewise kink inside
/// the original stencil (min of two critics, a clamp edge) drops out as the
/// stencil shrinks, while a genuine gradient bug persists at every h.
pub fn gradient_check<F>(
    store: &mut ParameterStore,
    names: &[String],
    mut eval: F,
    h: f64,
) -> Result<f64, NnError>
where
    F: FnMut(&ParameterStore) -> f64,
{
    let mut worst_rel = 0.0_f64;
    for name in names {
        let n = store.value(name)?.len();
        for i in 0..n {
            let g = store.grad(name)?.data[i];
            let mut rel = f64::INFINITY;
            for shrink in [1.0, 0.25, 0.0625] {
                let hh = h * shrink;
                let orig = store.value(name)?.data[i];
                store.value_mut(name)?.data[i] = orig + hh;
                let up = eval(store);
                store.value_mut(name)?.data[i] = orig - hh;
                let down = eval(store);
                store.value_mut(name)?.data[i] = orig;
                let fd = (up - down) / (2.0 * hh);
                let denom = fd.abs().max(g.abs()).max(1e-10);
                rel = rel.min(((fd - g).abs() - 1e-9).max(0.0) / denom);
                if rel < 1e-4 {
                    break;
                }
            }
            worst_rel = worst_rel.max(rel);
        }
    }
    Ok(worst_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn seeded(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mlp = Mlp::new("net", &[3, 4, 2], Activation::Relu);
        let mut store = ParameterStore::new();
        let mut rng = seeded(0);
        mlp.init(&mut store, &mut rng).unwrap();
        for name in mlp_param_names(&mlp) {
            store.value_mut(&name).unwrap().data.fill(0.0);
        }
        let out = mlp
            .forward_plain(&store, &Tensor::from_vec(2, 3, vec![1.0; 6]))
            .unwrap();
        assert!(out.data.iter().all(|&x| x == 0.0));
    }

    fn mlp_param_names(mlp: &Mlp) -> Vec<String> {
        let mut names = Vec::new();
        for l in 0..mlp.dims.len() - 1 {
            names.push(mlp.weight_name(l));
            names.push(mlp.bias_name(l));
        }
        names
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mlp = Mlp::new("id", &[3, 3], Activation::Relu);
        let mut store = ParameterStore::new();
        let mut rng = seeded(1);
        mlp.init(&mut store, &mut rng).unwrap();
        let w = store.value_mut("id.w0").unwrap();
        w.data.fill(0.0);
        for i in 0..3 {
            w.data[i * 3 + i] = 1.0;
        }
        let input = Tensor::from_vec(2, 3, vec![0.5, -1.5, 2.0, 0.0, 3.0, -0.25]);
        let out = mlp.forward_plain(&store, &input).unwrap();
        assert_eq!(out.data, input.data);
    }

    #[test]
    fn tape_and_plain_forward_agree() {
        let mlp = Mlp::new("net", &[4, 8, 8, 2], Activation::Tanh);
        let mut store = ParameterStore::new();
        let mut rng = seeded(2);
        mlp.init(&mut store, &mut rng).unwrap();
        let input = Tensor::from_vec(3, 4, (0..12).map(|i| (i as f64).sin()).collect());
        let plain = mlp.forward_plain(&store, &input).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(input);
        let y = mlp.forward(&mut tape, &store, x, true).unwrap();
        assert_eq!(tape.value(y).data, plain.data);
    }

    #[test]
    fn sum_of_squares_gradient() {
        // loss = sum(w^2) -> grad = 2w.
        let mut store = ParameterStore::new();
        store
            .insert("w", Tensor::from_vec(2, 2, vec![1.0, -2.0, 3.0, 0.5]))
            .unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let sq = tape.square(w);
        let loss = tape.sum_all(sq);
        store.zero_grads();
        tape.backward(loss, &mut store).unwrap();
        let g = store.grad("w").unwrap();
        assert_eq!(g.data, vec![2.0, -4.0, 6.0, 1.0]);
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mlp = Mlp::new("net", &[3, 6, 1], Activation::Tanh);
        let mut store = ParameterStore::new();
        let mut rng = seeded(3);
        mlp.init(&mut store, &mut rng).unwrap();
        let input = Tensor::from_vec(5, 3, (0..15).map(|i| (i as f64 * 0.37).cos()).collect());
        let target = Tensor::from_vec(5, 1, (0..5).map(|i| (i as f64 * 0.61).sin()).collect());

        let build = |tape: &mut Tape, store: &ParameterStore| {
            let x = tape.constant(input.clone());
            let t = tape.constant(target.clone());
            let y = mlp.forward(tape, store, x, true).unwrap();
            let diff = tape.sub(y, t);
            let sq = tape.square(diff);
            tape.mean_all(sq)
        };

        let mut tape = Tape::new();
        let loss = build(&mut tape, &store);
        store.zero_grads();
        tape.backward(loss, &mut store).unwrap();

        let names = mlp_param_names(&mlp);
        let worst = gradient_check(
            &mut store,
            &names,
            |s| {
                let mut t = Tape::new();
                let l = build(&mut t, s);
                t.scalar_value(l)
            },
            1e-5,
        )
        .unwrap();
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn log_mean_exp_node_gradient_matches_finite_differences() {
        let mut store = ParameterStore::new();
        store
            .insert(
                "x",
                Tensor::from_vec(3, 4, (0..12).map(|i| (i as f64 * 0.83).sin() * 2.0).collect()),
            )
            .unwrap();
        store.insert("g", Tensor::from_vec(3, 1, vec![0.7, 1.3, 2.1])).unwrap();

        // Mimics the robust objective: mean over rows of -g * lme(-x/g).
        let build = |tape: &mut Tape, store: &ParameterStore| {
            let x = tape.param(store, "x").unwrap();
            let g = tape.param(store, "g").unwrap();
            let neg = tape.neg(x);
            let scaled = tape.div_col_broadcast(neg, g);
            let lme = tape.log_mean_exp_rows(scaled);
            let ng = tape.neg(g);
            let prod = tape.mul(ng, lme);
            tape.mean_all(prod)
        };

        let mut tape = Tape::new();
        let loss = build(&mut tape, &store);
        store.zero_grads();
        tape.backward(loss, &mut store).unwrap();
        let worst = gradient_check(
            &mut store,
            &["x".to_string(), "g".to_string()],
            |s| {
                let mut t = Tape::new();
                let l = build(&mut t, s);
                t.scalar_value(l)
            },
            1e-5,
        )
        .unwrap();
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn primitive_gradients_over_many_seeds() {
        // Composite expression touching every pointwise primitive.
        for seed in 0..100 {
            let mut rng = seeded(seed);
            let mut store = ParameterStore::new();
            let data: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.5..1.5)).collect();
            store.insert("p", Tensor::from_vec(2, 3, data)).unwrap();
            let build = |tape: &mut Tape, store: &ParameterStore| {
                let p = tape.param(store, "p").unwrap();
                let a = tape.tanh(p);
                let b = tape.sigmoid(a);
                let c = tape.softplus(b);
                let d = tape.exp(c);
                let e = tape.square(d);
                let f = tape.scale(e, 0.25);
                let g = tape.add_scalar(f, -0.1);
                let h = tape.sum_rows(g);
                tape.mean_all(h)
            };
            let mut tape = Tape::new();
            let loss = build(&mut tape, &store);
            store.zero_grads();
            tape.backward(loss, &mut store).unwrap();
            let worst = gradient_check(
                &mut store,
                &["p".to_string()],
                |s| {
                    let mut t = Tape::new();
                    let l = build(&mut t, s);
                    t.scalar_value(l)
                },
                1e-5,
            )
            .unwrap();
            assert!(worst < 1e-4, "seed {seed}: worst {worst}");
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut store = ParameterStore::new();
        store
            .insert("w", Tensor::from_vec(1, 3, vec![1.0, 2.0, 3.0]))
            .unwrap();
        store.zero_grads();
        let report = store.adam_step(0.1);
        assert!(report.skipped.is_empty());
        assert_eq!(store.value("w").unwrap().data, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn adam_first_step_magnitude_is_learning_rate() {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::scalar(5.0)).unwrap();
        store.zero_grads();
        store
            .accumulate_grad("w", &Tensor::scalar(3.0))
            .unwrap();
        store.adam_step(0.01);
        let moved = 5.0 - store.value("w").unwrap().data[0];
        assert!((moved - 0.01).abs() < 1e-6, "moved {moved}");
    }

    #[test]
    fn adam_skips_non_finite_gradients() {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::scalar(1.0)).unwrap();
        store.zero_grads();
        store
            .accumulate_grad("w", &Tensor::scalar(f64::NAN))
            .unwrap();
        let report = store.adam_step(0.1);
        assert_eq!(report.skipped, vec!["w".to_string()]);
        assert_eq!(store.value("w").unwrap().data[0], 1.0);
    }

    #[test]
    fn adam_converges_on_quadratic_bowl() {
        // Minimize sum((w - c)^2).
        let mut store = ParameterStore::new();
        store
            .insert("w", Tensor::from_vec(1, 3, vec![4.0, -2.0, 7.0]))
            .unwrap();
        let target = [1.0, 0.5, -3.0];
        for _ in 0..5000 {
            store.zero_grads();
            let w = store.value("w").unwrap().clone();
            let grad: Vec<f64> = w.data.iter().zip(&target).map(|(x, c)| 2.0 * (x - c)).collect();
            store
                .accumulate_grad("w", &Tensor::from_vec(1, 3, grad))
                .unwrap();
            store.adam_step(0.01);
        }
        let w = store.value("w").unwrap();
        for (x, c) in w.data.iter().zip(&target) {
            assert!((x - c).abs() < 1e-6, "w {x} target {c}");
        }
    }

    #[test]
    fn training_is_deterministic_for_fixed_seed() {
        let run = || {
            let mlp = Mlp::new("net", &[2, 8, 1], Activation::Relu);
            let mut store = ParameterStore::new();
            let mut rng = seeded(77);
            mlp.init(&mut store, &mut rng).unwrap();
            for step in 0..50 {
                let input = Tensor::from_vec(
                    4,
                    2,
                    (0..8).map(|i| ((i + step) as f64 * 0.3).sin()).collect(),
                );
                let mut tape = Tape::new();
                let x = tape.constant(input);
                let y = mlp.forward(&mut tape, &store, x, true).unwrap();
                let sq = tape.square(y);
                let loss = tape.mean_all(sq);
                store.zero_grads();
                tape.backward(loss, &mut store).unwrap();
                store.adam_step(1e-3);
            }
            let mut flat = Vec::new();
            for name in ["net.w0", "net.b0", "net.w1", "net.b1"] {
                flat.extend(store.value(name).unwrap().data.iter().map(|x| x.to_bits()));
            }
            flat
        };
        assert_eq!(run(), run(), "two identical runs diverged");
    }
}
