//! Simulation and Bayesian inference for dose-regimen toxicity studies.

pub mod drtox;
pub mod error;
pub mod escalation;
pub mod harness;
pub mod integrate;
pub mod mcmc;
pub mod nlme;
pub mod ode;
pub mod optim;
pub mod pkpd;
pub mod regimen;
pub mod rng;
pub mod stats;
pub mod toxgen;

pub use error::{Error, Result};
