use super::*;
use crate::nn::gradient_check;


fn small_config(delta: f64, seed: u64) -> AgentConfig {
    AgentConfig {
        delta,
        batch_size: 16,
        hidden: vec![8, 8],
        vae_hidden: vec![8],
        latent_dim: 2,
        m: 4,
        seed,
        ..AgentConfig::pendulum_default()
    }
}

fn random_dataset(n: usize, seed: u64) -> TransitionBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states = Vec::with_capacity(3 * n);
    let mut actions = Vec::with_capacity(n);
    let mut rewards = Vec::with_capacity(n);
    let mut next_states = Vec::with_capacity(3 * n);
    for _ in 0..n {
        let theta: f64 = rng.gen_range(-3.14..3.14);
        let speed: f64 = rng.gen_range(-8.0..8.0);
        states.extend_from_slice(&[theta.cos(), theta.sin(), speed]);
        actions.push(rng.gen_range(-2.0..2.0));
        rewards.push(rng.gen_range(0.0..envs::reward_max()));
        let theta2: f64 = theta + 0.05 * speed;
        next_states.extend_from_slice(&[theta2.cos(), theta2.sin(), speed * 0.95]);
    }
    TransitionBatch::new(3, 1, states, actions, rewards, next_states).unwrap()
}

#[test]
fn config_invariants_are_enforced() {
    let base = small_config(0.5, 0);
    assert!(base.validate().is_ok());
    assert!(AgentConfig { gamma: 1.0, ..base.clone() }.validate().is_err());
    assert!(AgentConfig { tau: 0.0, ..base.clone() }.validate().is_err());
    assert!(AgentConfig { n_critics: 1, ..base.clone() }.validate().is_err());
    assert!(AgentConfig { delta: -0.1, ..base.clone() }.validate().is_err());
    assert!(AgentConfig { m: 0, ..base }.validate().is_err());
}

#[test]
fn one_robust_step_is_live_and_finite() {
    let mut agent = AgentState::new(small_config(0.5, 1)).unwrap();
    let dataset = random_dataset(256, 2);
    let before = agent.checkpoint_tensors();
    let row = agent.gradient_step(&dataset).unwrap();
    assert!(row.vae_loss.is_some() && row.g_objective.is_some());
    let after = agent.checkpoint_tensors();
    // Every parameter store must stay finite and see at least one change.
    for prefix in ["v/", "q0/", "q1/", "pi/", "g/", "vae/", "alpha/"] {
        let mut changed = false;
        for ((n1, t1), (_, t2)) in before.iter().zip(&after) {
            if n1.starts_with(prefix) && !n1.contains("::m") {
                assert!(t2.is_finite(), "{n1} went non-finite");
                if t1.data != t2.data {
                    changed = true;
                }
            }
        }
        assert!(changed, "no parameter in {prefix} changed");
    }
}

#[test]
fn one_baseline_step_is_live() {
    let mut agent = AgentState::new(small_config(0.0, 3)).unwrap();
    let dataset = random_dataset(128, 4);
    let row = agent.sac_baseline_step(&dataset).unwrap();
    assert!(row.vae_loss.is_none() && row.g_objective.is_none());
    assert!(row.v_loss.is_finite() && row.q_loss.is_finite());
}

#[test]
fn delta_zero_with_true_atoms_reduces_to_sac_targets() {
    let agent = AgentState::new(small_config(0.0, 5)).unwrap();
    let mut batch = random_dataset(32, 6);
    // Synthetic measure = the observed next state (m = 1 true atom).
    let atoms = batch.next_states.clone();
    batch.set_synthetic(1, atoms).unwrap();
    let robust = agent.robust_targets(&batch).unwrap();
    let sac = agent.sac_targets(&batch).unwrap();
    for (a, b) in robust.iter().zip(&sac) {
        assert!((a - b).abs() < 1e-6, "robust {a} vs sac {b}");
    }
}

#[test]
fn robust_target_never_exceeds_nominal_target_per_row() {
    let config = small_config(0.4, 7);
    let mut agent = AgentState::new(config).unwrap();
    let dataset = random_dataset(64, 8);
    // A few steps so g and the VAE are non-trivial.
    for _ in 0..3 {
        agent.gradient_step(&dataset).unwrap();
    }
    let mut batch = agent.draw_batch(&dataset);
    let vae = agent.vae.clone().unwrap();
    let atoms = vae
        .sample_batch_atoms(&agent.vae_store, &batch, agent.config.m, &mut agent.rng)
        .unwrap();
    batch.set_synthetic(agent.config.m, atoms).unwrap();
    let robust = agent.robust_targets(&batch).unwrap();
    // Nominal counterpart: mean over the same atoms under the same value net.
    let v_atoms = agent.atom_values(&batch).unwrap();
    let m = v_atoms.cols;
    for (i, r) in robust.iter().enumerate() {
        let mean: f64 = v_atoms.data[i * m..(i + 1) * m].iter().sum::<f64>() / m as f64;
        let nominal = batch.rewards[i] + agent.config.gamma * mean;
        assert!(*r <= nominal + 1e-10, "row {i}: robust {r} above nominal {nominal}");
    }
}

#[test]
fn m_equals_one_target_is_algebraic() {
    let config = small_config(0.3, 9);
    let mut agent = AgentState::new(config.clone()).unwrap();
    let dataset = random_dataset(16, 10);
    agent.gradient_step(&dataset).unwrap();
    let mut batch = agent.draw_batch(&dataset);
    let atoms = batch.next_states.clone();
    batch.set_synthetic(1, atoms).unwrap();
    let robust = agent.robust_targets(&batch).unwrap();
    // With one atom, f = V(atom) - g*delta exactly.
    let v = agent
        .v_net
        .forward_plain(&agent.v_target, &batch.next_states_tensor())
        .unwrap();
    let g_fn = agent.g_fn.as_ref().unwrap();
    let g = g_fn
        .values_plain(&agent.g_store, &agent.sa_inputs(&batch))
        .unwrap();
    for i in 0..batch.len() {
        let expected =
            batch.rewards[i] + config.gamma * (v.data[i] - g[i] * config.delta);
        assert!((robust[i] - expected).abs() < 1e-10);
    }
}

#[test]
fn v_loss_is_zero_when_network_matches_target() {
    let mut agent = AgentState::new(small_config(0.0, 11)).unwrap();
    let batch = random_dataset(8, 12);
    // Zero out the V-net except a constant output bias; regress onto that
    // exact constant.
    for name in ["v.w0", "v.w1", "v.w2", "v.b0", "v.b1"] {
        agent.v_store.value_mut(name).unwrap().data.fill(0.0);
    }
    agent.v_store.value_mut("v.b2").unwrap().data[0] = 1.7;
    let target = Tensor::from_vec(8, 1, vec![1.7; 8]);
    let loss = agent.update_v_with_target(&batch, &target).unwrap();
    assert_eq!(loss, 0.0);
}

#[test]
fn deterministic_policy_limit_v_target_uses_mode_action() {
    // With log_std forced to the clamp floor the sampled action is the
    // squashed mean, so the V target equals min-critic at the mode (up to
    // the vanishing alpha*log_prob term scaled by sigma ~ e^-20... the
    // entropy term stays finite, so compare the Q part only).
    let mut agent = AgentState::new(small_config(0.0, 13)).unwrap();
    let batch = random_dataset(8, 14);
    // Force log_std head output to a large negative value.
    let b = agent.policy_store.value_mut("pi.b2").unwrap();
    b.data[1] = -100.0;
    let states = batch.states_tensor();
    let (actions, _) = agent
        .head
        .sample_plain(&agent.policy_store, &agent.policy_net, &states, &mut agent.rng.clone())
        .unwrap();
    let mode = agent
        .head
        .mean_action(&agent.policy_store, &agent.policy_net, &states)
        .unwrap();
    for (a, m) in actions.data.iter().zip(&mode.data) {
        assert!((a - m).abs() < 1e-7, "sampled {a} vs mode {m}");
    }
}

#[test]
fn v_loss_gradient_matches_finite_differences() {
    let mut agent = AgentState::new(small_config(0.0, 15)).unwrap();
    let batch = random_dataset(8, 16);
    let target = agent.v_targets(&batch).unwrap();
    let states = batch.states_tensor();
    let mut tape = Tape::new();
    let loss = regression_loss_graph(&mut tape, &agent.v_net, &agent.v_store, &states, &target)
        .unwrap();
    agent.v_store.zero_grads();
    tape.backward(loss, &mut agent.v_store).unwrap();
    let names: Vec<String> = agent.v_store.names().map(String::from).collect();
    let v_net = agent.v_net.clone();
    let worst = gradient_check(
        &mut agent.v_store,
        &names,
        |s| {
            let mut t = Tape::new();
            let l = regression_loss_graph(&mut t, &v_net, s, &states, &target).unwrap();
            t.scalar_value(l)
        },
        1e-5,
    )
    .unwrap();
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn policy_loss_gradient_matches_finite_differences() {
    let mut agent = AgentState::new(small_config(0.0, 17)).unwrap();
    let batch = random_dataset(8, 18);
    let states = batch.states_tensor();
    let eps = standard_normal(8, 1, &mut agent.rng);
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
        &states,
        &eps,
    )
    .unwrap();
    agent.policy_store.zero_grads();
    tape.backward(loss, &mut agent.policy_store).unwrap();
    let names: Vec<String> = agent.policy_store.names().map(String::from).collect();
    let (policy_net, head) = (agent.policy_net.clone(), agent.head.clone());
    let critics = agent.critics.clone();
    let critic_targets = &agent.critic_targets;
    let worst = gradient_check(
        &mut agent.policy_store,
        &names,
        |s| {
            let mut t = Tape::new();
            let l = policy_loss_graph(
                &mut t,
                &policy_net,
                s,
                &head,
                &critics,
                critic_targets,
                alpha,
                &states,
                &eps,
            )
            .unwrap();
            t.scalar_value(l)
        },
        1e-5,
    )
    .unwrap();
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn alpha_loss_gradient_matches_finite_differences_and_signs() {
    let mut agent = AgentState::new(small_config(0.0, 19)).unwrap();
    let log_probs = Tensor::from_vec(6, 1, vec![-0.5, -1.5, 0.2, -0.8, -2.0, 0.1]);
    let mut tape = Tape::new();
    let loss = alpha_loss_graph(&mut tape, &agent.alpha_store, &log_probs, 1.0).unwrap();
    agent.alpha_store.zero_grads();
    tape.backward(loss, &mut agent.alpha_store).unwrap();
    let analytic = agent.alpha_store.grad("alpha").unwrap().data[0];
    // d/d alpha of mean(-alpha(lp + H)) = mean(-(lp + H)) = entropy - H.
    let entropy = -log_probs.data.iter().sum::<f64>() / 6.0;
    assert!((analytic - (entropy - 1.0)).abs() < 1e-12);
    let worst = gradient_check(
        &mut agent.alpha_store,
        &["alpha".to_string()],
        |s| {
            let mut t = Tape::new();
            let l = alpha_loss_graph(&mut t, s, &log_probs, 1.0).unwrap();
            t.scalar_value(l)
        },
        1e-5,
    )
    .unwrap();
    assert!(worst < 1e-4);

    // Here the sampled entropy (0.75) sits below the target (1.0), so the
    // gradient is negative and descent raises alpha.
    assert!(entropy < 1.0);
    assert!(analytic < 0.0);

    // Entropy above the target gives a positive gradient: descent lowers
    // alpha, shrinking the entropy bonus.
    let high_entropy = Tensor::from_vec(2, 1, vec![-3.0, -2.5]);
    let mut tape = Tape::new();
    let loss = alpha_loss_graph(&mut tape, &agent.alpha_store, &high_entropy, 1.0).unwrap();
    agent.alpha_store.zero_grads();
    tape.backward(loss, &mut agent.alpha_store).unwrap();
    assert!(agent.alpha_store.grad("alpha").unwrap().data[0] > 0.0);

    // When the sampled entropy equals the target the gradient vanishes.
    let matched = Tensor::from_vec(2, 1, vec![-1.0, -1.0]);
    let mut tape = Tape::new();
    let loss = alpha_loss_graph(&mut tape, &agent.alpha_store, &matched, 1.0).unwrap();
    agent.alpha_store.zero_grads();
    tape.backward(loss, &mut agent.alpha_store).unwrap();
    assert!(agent.alpha_store.grad("alpha").unwrap().data[0].abs() < 1e-12);
}

#[test]
fn zero_gradient_on_mean_head_when_alpha_zero_and_critic_constant() {
    let mut agent = AgentState::new(small_config(0.0, 20)).unwrap();
    // Constant critics: zero all weights, set output bias.
    for i in 0..2 {
        for l in 0..3 {
            agent.critic_targets[i]
                .value_mut(&format!("q{i}.w{l}"))
                .unwrap()
                .data
                .fill(0.0);
            agent.critic_targets[i]
                .value_mut(&format!("q{i}.b{l}"))
                .unwrap()
                .data
                .fill(0.0);
        }
        agent.critic_targets[i]
            .value_mut(&format!("q{i}.b2"))
            .unwrap()
            .data[0] = 3.0;
    }
    let batch = random_dataset(8, 21);
    let eps = standard_normal(8, 1, &mut agent.rng);
    let mut tape = Tape::new();
    let loss = policy_loss_graph(
        &mut tape,
        &agent.policy_net,
        &agent.policy_store,
        &agent.head,
        &agent.critics,
        &agent.critic_targets,
        0.0,
        &batch.states_tensor(),
        &eps,
    )
    .unwrap();
    agent.policy_store.zero_grads();
    tape.backward(loss, &mut agent.policy_store).unwrap();
    for name in agent.policy_store.names().map(String::from).collect::<Vec<_>>() {
        for &g in &agent.policy_store.grad(&name).unwrap().data {
            assert!(g.abs() < 1e-12, "{name} has gradient {g}");
        }
    }
}

#[test]
fn policy_mean_moves_toward_quadratic_critic_optimum() {
    // Fit both target critics to q(s,a) = -a^2, then check that policy
    // updates shrink the mean action magnitude.
    let mut agent = AgentState::new(small_config(0.0, 22)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for i in 0..2 {
        let net = agent.critics[i].clone();
        let store = &mut agent.critic_stores[i];
        for _ in 0..4000 {
            let n = 64;
            let mut sa = Tensor::zeros(n, 4);
            let mut target = Tensor::zeros(n, 1);
            for r in 0..n {
                let a: f64 = rng.gen_range(-2.0..2.0);
                sa.data[r * 4] = rng.gen_range(-1.0..1.0);
                sa.data[r * 4 + 1] = rng.gen_range(-1.0..1.0);
                sa.data[r * 4 + 2] = rng.gen_range(-8.0..8.0);
                sa.data[r * 4 + 3] = a;
                target.data[r] = -a * a;
            }
            let mut tape = Tape::new();
            let loss = regression_loss_graph(&mut tape, &net, store, &sa, &target).unwrap();
            store.zero_grads();
            tape.backward(loss, store).unwrap();
            store.adam_step(1e-3);
        }
        agent.critic_targets[i].copy_values_from(&agent.critic_stores[i]).unwrap();
    }
    let batch = random_dataset(64, 24);
    let states = batch.states_tensor();
    let mean_abs = |agent: &AgentState| -> f64 {
        let m = agent
            .head
            .mean_action(&agent.policy_store, &agent.policy_net, &states)
            .unwrap();
        m.data.iter().map(|a| a.abs()).sum::<f64>() / m.data.len() as f64
    };
    // Near-zero temperature so the critic dominates the loss, and a mean
    // head biased far from the critic's optimum.
    agent.alpha_store.value_mut("alpha").unwrap().data[0] = 1e-6;
    agent.policy_store.value_mut("pi.b2").unwrap().data[0] = 1.0;
    let before = mean_abs(&agent);
    assert!(before > 1.0, "offset start expected, got {before}");
    for _ in 0..600 {
        agent.update_policy(&batch).unwrap();
    }
    let after = mean_abs(&agent);
    assert!(
        after < 0.3,
        "mean |action| did not move to the optimum: {before} -> {after}"
    );
}

#[test]
fn soft_update_blends_and_converges_geometrically() {
    let mut agent = AgentState::new(small_config(0.0, 25)).unwrap();
    // tau = 1 makes targets equal online nets immediately.
    agent.config.tau = 1.0;
    agent.v_store.value_mut("v.b2").unwrap().data[0] = 2.5;
    agent.soft_updates().unwrap();
    assert_eq!(agent.v_target.value("v.b2").unwrap().data[0], 2.5);

    // Scalar check: target 0, online 1, tau = 0.005 -> 0.005.
    agent.config.tau = 0.005;
    agent.v_store.value_mut("v.b2").unwrap().data[0] = 1.0;
    agent.v_target.value_mut("v.b2").unwrap().data[0] = 0.0;
    agent.soft_updates().unwrap();
    assert!((agent.v_target.value("v.b2").unwrap().data[0] - 0.005).abs() < 1e-15);

    // Frozen online net: the gap decays like (1 - tau)^k.
    let initial_gap = agent.v_target_lag();
    for _ in 0..100 {
        agent.soft_updates().unwrap();
    }
    let expected = initial_gap * (1.0 - 0.005_f64).powi(100);
    let actual = agent.v_target_lag();
    assert!(
        (actual - expected).abs() < 1e-9 * initial_gap.max(1.0),
        "gap {actual} vs geometric prediction {expected}"
    );
}

#[test]
fn fixed_seed_training_is_bit_reproducible() {
    let run = |steps: u64| -> Vec<String> {
        let mut agent = AgentState::new(small_config(0.5, 26)).unwrap();
        let dataset = random_dataset(128, 27);
        let opts = TrainOptions {
            steps,
            eval_every: 5,
            eval_episodes: 2,
            eval_spec: PerturbationSpec::nominal(),
        };
        agent
            .train(&dataset, &opts, |_, _| Ok(()))
            .unwrap()
            .iter()
            .map(|r| r.to_csv())
            .collect()
    };
    assert_eq!(run(10), run(10));
}

#[test]
fn checkpoint_restore_resumes_bitwise() {
    let dataset = random_dataset(128, 28);
    let opts = TrainOptions {
        steps: 12,
        eval_every: 4,
        eval_episodes: 2,
        eval_spec: PerturbationSpec::nominal(),
    };
    // Uninterrupted run.
    let mut full = AgentState::new(small_config(0.5, 29)).unwrap();
    let full_rows = full.train(&dataset, &opts, |_, _| Ok(())).unwrap();

    // Run 6 steps, checkpoint, restore into a fresh agent, finish.
    let mut first = AgentState::new(small_config(0.5, 29)).unwrap();
    let half_opts = TrainOptions { steps: 6, ..opts.clone() };
    let mut half_rows = first.train(&dataset, &half_opts, |_, _| Ok(())).unwrap();
    let snapshot = first.checkpoint_tensors();
    let mut resumed = AgentState::new(small_config(0.5, 29)).unwrap();
    resumed.restore(&snapshot).unwrap();
    assert_eq!(resumed.step_count(), 6);
    let rest = resumed.train(&dataset, &opts, |_, _| Ok(())).unwrap();
    half_rows.extend(rest);

    let csv_full: Vec<String> = full_rows.iter().map(|r| r.to_csv()).collect();
    let csv_resumed: Vec<String> = half_rows.iter().map(|r| r.to_csv()).collect();
    assert_eq!(csv_full, csv_resumed);
}

#[test]
fn higher_alpha_yields_higher_entropy_policies() {
    // Fixed-alpha short runs (temperature update disabled by setting the
    // target entropy unreachable in both directions is messy; instead train
    // with different fixed alphas by pinning lr_alpha tiny).
    let entropy_after = |alpha: f64| -> f64 {
        let mut config = small_config(0.0, 30);
        config.alpha_init = alpha;
        config.lr_alpha = 1e-12;
        let mut agent = AgentState::new(config).unwrap();
        let dataset = random_dataset(256, 31);
        for _ in 0..150 {
            agent.sac_baseline_step(&dataset).unwrap();
        }
        // Estimate policy entropy by sampled -log pi.
        let states = dataset.states_tensor();
        let (_, log_probs) = agent
            .head
            .sample_plain(&agent.policy_store, &agent.policy_net, &states, &mut agent.rng)
            .unwrap();
        -log_probs.data.iter().sum::<f64>() / log_probs.data.len() as f64
    };
    // Stay below the squashed policy's entropy ceiling (log 4 for the
    // pendulum torque box) so the trend is visible.
    let low = entropy_after(0.003);
    let mid = entropy_after(0.03);
    let high = entropy_after(0.3);
    assert!(low < mid && mid < high, "entropies not monotone: {low} {mid} {high}");
}

#[test]
fn nan_watchdog_reports_diverged_losses() {
    let mut agent = AgentState::new(small_config(0.0, 32)).unwrap();
    agent.v_store.value_mut("v.b2").unwrap().data[0] = f64::NAN;
    let dataset = random_dataset(64, 33);
    let result = agent.sac_baseline_step(&dataset);
    assert!(matches!(result, Err(AgentError::NonFinite { .. })));
}
