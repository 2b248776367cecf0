//! Learned allocation of a finite observing budget over simulated galaxy
//! fields, trained jointly with an inference network for a global
//! clustering parameter.

pub mod autodiff;
pub mod graph;
pub mod rng;
pub mod simulator;
pub mod models;
pub mod trainer;
pub mod baselines;
pub mod evaluate;
pub mod cli;
pub mod config;
pub mod verification;
