// Temporary calibration probe (not part of the deliverable).
use drsac_core::agent::{AgentConfig, AgentState};
use drsac_core::envs::*;
use drsac_core::nn::load_named_tensors;
use std::f64::consts::PI;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    // 1. Scripted controller baseline through the eval path.
    let ctrl = SwingUpController::new(PendulumParams::default());
    let (mean, std) = evaluate(&ctrl, &PerturbationSpec::nominal(), 50, 999).unwrap();
    println!("scripted controller nominal: mean {mean:.1} std {std:.1}");

    if args.len() < 2 { return; }
    let ckpt = std::path::Path::new(&args[1]);
    let config = AgentConfig { delta: if args.len() > 2 { args[2].parse().unwrap() } else { 0.0 }, seed: 1, ..AgentConfig::pendulum_default() };
    let mut agent = AgentState::new(config).unwrap();
    agent.restore(&load_named_tensors(ckpt).unwrap()).unwrap();
    let policy = agent.as_policy();
    let (mean, std) = evaluate(&policy, &PerturbationSpec::nominal(), 50, 999).unwrap();
    println!("agent nominal: mean {mean:.1} std {std:.1}");

    // Roll from specific starts and report.
    for (th0, thd0) in [(PI, 0.0), (PI, 0.5), (-PI/2.0, 0.0), (2.5, -0.3), (0.3, 0.0)] {
        let mut env = PendulumEnv::new(&PerturbationSpec::nominal(), 5).unwrap();
        env.set_state(th0, thd0);
        let mut obs = [th0.cos(), th0.sin(), thd0];
        let mut total = 0.0;
        let mut max_cos: f64 = -2.0;
        let mut us = Vec::new();
        for i in 0..200 {
            let a = policy.act(&obs);
            if i < 6 { us.push(a[0]); }
            let (o, r, _) = env.step(a[0]);
            total += r - reward_offset();
            obs = o;
            max_cos = max_cos.max(env.state().0.cos());
        }
        println!("start ({th0:+.2},{thd0:+.2}): return {total:7.1} max_cos {max_cos:+.2} first_us {us:?}");
    }
}
