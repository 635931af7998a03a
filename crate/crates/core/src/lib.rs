//! Markov-modulated networks of infinite-server queues.
//!
//! The crate covers the whole pipeline from a network description to a
//! statistical check of its scaling limits:
//!
//! * [`ctmc`]: background-chain algebra (stationary law, deviation matrix,
//!   modulation covariance) and exact path sampling.
//! * [`network`]: network definitions, time-averaged rates, the drift
//!   matrix, and the reductions of modulated service requirements to a plain
//!   modulated network.
//! * [`simulate`]: the scaled system and an exact event-driven simulator that
//!   records everything needed for the martingale decomposition.
//! * [`limits`]: fluid limit, the integral map, Ornstein-Uhlenbeck drift,
//!   diffusion matrix and moment equations, and an Euler-Maruyama sampler.
//! * [`verify`]: Monte Carlo checks of the convergence statements.
//! * [`config`] and [`cli`]: JSON configuration, command dispatch and file
//!   output for the `mmq` binary.

pub mod cli;
pub mod config;
pub mod ctmc;
pub mod error;
pub mod limits;
pub mod network;
pub mod output;
pub mod replicate;
pub mod simulate;
pub mod stats;
pub mod verify;

pub use error::{Error, Result};
