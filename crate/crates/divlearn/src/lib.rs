//! Two-stage transfer learning with a shared representation, at desk scale.
//!
//! The library builds synthetic multitask environments in which every task is a
//! composition `f_j ∘ h` of a task head and a shared representation, runs the
//! two-stage ERM pipeline (joint training over heads and representation, then a
//! head-only fit on a fresh task), and measures the quantities that govern how
//! well the learned representation transfers: task-averaged and worst-case
//! representation differences, the (ν, ε)-diversity certificate, empirical
//! Gaussian/Rademacher complexities with closed-form companions, and a
//! Burer–Monteiro factorized recovery pipeline with subspace-angle diagnostics.
//!
//! The `harness` module wires everything into a config-driven CLI that emits
//! deterministic CSV sweeps.

pub mod complexity;
pub mod diversity;
pub mod envs;
pub mod erm;
pub mod harness;
pub mod landscape;
pub mod models;
pub mod numlin;
pub mod rng;
