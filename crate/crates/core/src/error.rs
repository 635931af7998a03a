use thiserror::Error;

use crate::config::ConfigError;
use crate::ctmc::ChainError;
use crate::limits::LimitsError;
use crate::network::NetworkError;
use crate::simulate::SimulationError;

/// Any error raised by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error(transparent)]
    Limits(#[from] LimitsError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
