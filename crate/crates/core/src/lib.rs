//! Distributionally robust maximum-entropy reinforcement learning.
//!
//! The crate has two halves. The exact half ([`kl_dual`], [`tabular`],
//! [`functional`]) implements the KL-ball worst-case machinery and the robust
//! soft Bellman operators on finite MDPs, each paired with an independent
//! verification oracle. The approximate half ([`nn`], [`vae`], [`agent`],
//! [`envs`]) is a desk-scale offline actor-critic (DR-SAC) with a VAE
//! transition model and a perturbation-evaluation harness.
//!
//! Inner loops that are data-parallel (per state-action dual solves, batch
//! rows, evaluation sweeps) run on rayon by default; building with
//! `--no-default-features` selects a sequential fallback with bit-identical
//! results.

pub mod agent;
pub mod commands;
pub mod data;
pub mod exec;
pub mod envs;
pub mod functional;
pub mod kl_dual;
pub mod nn;
pub mod tabular;
pub mod vae;
pub mod verify;
