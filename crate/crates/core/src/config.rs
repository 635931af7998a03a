//! JSON run configuration.
//!
//! Queue and state numbers that users write or read (sink lists, a fixed
//! starting state, CSV columns) are 1-based; everything inside the library
//! is 0-based.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctmc::{validate_generator_with, ChainStart, ChainTolerances};
use crate::network::{reduce_model3, validate_network, Model3Spec, NetworkRates, NetworkSpec};
use crate::simulate::{beta_exponent, InitRule};
use crate::verify::{RunSettings, Tolerances};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("unknown field `{0}`")]
    UnknownField(String),
    #[error("missing required field `{0}`")]
    MissingRequired(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("unsupported schema version {0}")]
    SchemaVersion(u32),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

fn backticked(msg: &str) -> Option<String> {
    let start = msg.find('`')? + 1;
    let len = msg[start..].find('`')?;
    Some(msg[start..start + len].to_string())
}

impl From<serde_json::Error> for ConfigError {
    fn from(e: serde_json::Error) -> Self {
        let msg = e.to_string();
        if msg.starts_with("unknown field") {
            if let Some(name) = backticked(&msg) {
                return ConfigError::UnknownField(name);
            }
        }
        if msg.starts_with("missing field") {
            if let Some(name) = backticked(&msg) {
                return ConfigError::MissingRequired(name);
            }
        }
        ConfigError::Parse {
            line: e.line(),
            column: e.column(),
            message: msg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkBlock {
    /// Generator rows, d×d.
    pub generator: Vec<Vec<f64>>,
    /// Number of queues L.
    pub queues: usize,
    /// `lambda[k][i]`, L×d.
    pub lambda: Vec<Vec<f64>>,
    /// `mu[k][l][i]`, L×L×d.
    pub mu: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_hat: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu_hat: Option<Vec<Vec<Vec<f64>>>>,
    /// Queues (1-based) that must have no outgoing transfers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sinks: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Model3Block {
    pub generator: Vec<Vec<f64>>,
    pub lambda_star: Vec<f64>,
    pub kappa_star: Vec<f64>,
    pub mu_star: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingBlock {
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_list: Option<Vec<u64>>,
    #[serde(default)]
    pub init_rule: InitRule,
    /// Fluid initial condition; zero when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunBlock {
    pub horizon: f64,
    pub grid_step: f64,
    #[serde(default = "one")]
    pub reps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    /// Fixed starting state (1-based); stationary start when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain_start: Option<usize>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ToleranceBlock {
    pub chain: ChainTolerances,
    pub checks: Tolerances,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChecksBlock {
    /// Time at which the occupation deviation is examined; the horizon when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub occupation_time: Option<f64>,
    /// Factor applied to covariance references (1 for a genuine check).
    pub reference_scale: f64,
    /// Shift applied to the fluid path in the fluid check (0 for a genuine check).
    pub fluid_offset: f64,
    /// Epochs compared in the diffusion check; the horizon when empty.
    pub epochs: Vec<f64>,
}

impl Default for ChecksBlock {
    fn default() -> Self {
        Self {
            occupation_time: None,
            reference_scale: 1.0,
            fluid_offset: 0.0,
            epochs: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
    Txt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputBlock {
    pub directory: String,
    pub formats: Vec<Format>,
}

impl Default for OutputBlock {
    fn default() -> Self {
        Self {
            directory: "out".into(),
            formats: vec![Format::Csv, Format::Json, Format::Txt],
        }
    }
}

impl OutputBlock {
    pub fn wants(&self, f: Format) -> bool {
        self.formats.contains(&f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<NetworkBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model3: Option<Model3Block>,
    pub scaling: ScalingBlock,
    pub run: RunBlock,
    #[serde(default)]
    pub tolerances: ToleranceBlock,
    #[serde(default)]
    pub checks: ChecksBlock,
    #[serde(default)]
    pub output: OutputBlock,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configs serialize")
    }

    /// Validates every block and builds the network.
    pub fn resolve(self) -> crate::Result<ResolvedConfig> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::SchemaVersion(self.schema_version).into());
        }
        let beta = beta_exponent(self.scaling.alpha)?;
        let (spec, model3) = match (&self.network, &self.model3) {
            (Some(_), Some(_)) => {
                return Err(ConfigError::Invalid("give either a network or a model3 block, not both".into()).into())
            }
            (None, None) => return Err(ConfigError::MissingRequired("network".into()).into()),
            (Some(net), None) => (self.build_network(net)?, None),
            (None, Some(m3)) => {
                let gen = validate_generator_with(&matrix(&m3.generator, "model3.generator")?, &self.tolerances.chain)?;
                let m3 = Model3Spec::new(
                    gen,
                    m3.lambda_star.clone(),
                    m3.kappa_star.clone(),
                    m3.mu_star.clone(),
                )?;
                (reduce_model3(&m3), Some(m3))
            }
        };
        let l_count = spec.queues();
        let rho0 = match &self.scaling.rho0 {
            Some(r) if r.len() != l_count => {
                return Err(ConfigError::DimensionMismatch(format!(
                    "rho0 has {} entries, network has {l_count} queues",
                    r.len()
                ))
                .into())
            }
            Some(r) => DVector::from_column_slice(r),
            None => DVector::zeros(l_count),
        };
        if rho0.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(ConfigError::Invalid("rho0 must be nonnegative and finite".into()).into());
        }
        let run = &self.run;
        crate::limits::uniform_grid(run.horizon, run.grid_step)?;
        if run.reps == 0 {
            return Err(ConfigError::Invalid("reps must be at least 1".into()).into());
        }
        if let Some(s) = run.chain_start {
            if s == 0 || s > spec.states() {
                return Err(ConfigError::Invalid(format!("chain_start must be a state in 1..={}", spec.states())).into());
            }
        }
        if let Some(list) = &self.scaling.n_list {
            if list.is_empty() || list.windows(2).any(|w| w[1] <= w[0]) || list[0] == 0 {
                return Err(ConfigError::Invalid("n_list must be positive and strictly increasing".into()).into());
            }
        }
        if self.scaling.n == Some(0) {
            return Err(ConfigError::Invalid("n must be at least 1".into()).into());
        }
        if !(self.checks.reference_scale.is_finite() && self.checks.fluid_offset.is_finite()) {
            return Err(ConfigError::Invalid("check overrides must be finite".into()).into());
        }
        Ok(ResolvedConfig {
            config: self,
            spec,
            model3,
            rho0,
            beta,
        })
    }

    fn build_network(&self, net: &NetworkBlock) -> crate::Result<NetworkSpec> {
        let gen = validate_generator_with(&matrix(&net.generator, "network.generator")?, &self.tolerances.chain)?;
        let d = gen.states();
        let l_count = net.queues;
        let rows = |name: &str, got: usize| -> Result<(), ConfigError> {
            if got != l_count {
                return Err(ConfigError::DimensionMismatch(format!("{name} has {got} rows, expected {l_count} queues")));
            }
            Ok(())
        };
        rows("lambda", net.lambda.len())?;
        rows("mu", net.mu.len())?;
        if let Some(h) = &net.lambda_hat {
            rows("lambda_hat", h.len())?;
        }
        if let Some(h) = &net.mu_hat {
            rows("mu_hat", h.len())?;
        }
        for (k, row) in net.lambda.iter().enumerate() {
            if row.len() != d {
                return Err(ConfigError::DimensionMismatch(format!(
                    "lambda[{}] has {} entries, expected {d} states",
                    k + 1,
                    row.len()
                ))
                .into());
            }
        }
        let spec = validate_network(
            gen,
            &NetworkRates {
                lambda: net.lambda.clone(),
                mu: net.mu.clone(),
                lambda_hat: net.lambda_hat.clone(),
                mu_hat: net.mu_hat.clone(),
            },
        )?;
        if let Some(sinks) = &net.sinks {
            if sinks.iter().any(|&s| s == 0 || s > l_count) {
                return Err(ConfigError::Invalid(format!("sinks must be queues in 1..={l_count}")).into());
            }
            let zero_based: Vec<usize> = sinks.iter().map(|s| s - 1).collect();
            spec.check_sinks(&zero_based)?;
        }
        Ok(spec)
    }
}

fn matrix(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>, ConfigError> {
    let d = rows.len();
    if d == 0 {
        return Err(ConfigError::DimensionMismatch(format!("{name} is empty")));
    }
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != d) {
        return Err(ConfigError::DimensionMismatch(format!(
            "{name} row {} has {} entries, expected {d}",
            i + 1,
            r.len()
        )));
    }
    Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
}

/// A validated configuration with the network built.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConfig {
    pub config: RunConfig,
    pub spec: NetworkSpec,
    pub model3: Option<Model3Spec>,
    pub rho0: DVector<f64>,
    pub beta: f64,
}

impl ResolvedConfig {
    pub fn alpha(&self) -> f64 {
        self.config.scaling.alpha
    }

    /// Single scale index: `n`, else the last entry of `n_list`.
    pub fn n(&self) -> Result<u64, ConfigError> {
        self.config
            .scaling
            .n
            .or_else(|| self.config.scaling.n_list.as_ref().and_then(|l| l.last().copied()))
            .ok_or_else(|| ConfigError::MissingRequired("scaling.n".into()))
    }

    /// Increasing list of scale indices: `n_list`, else `[n]`.
    pub fn n_list(&self) -> Result<Vec<u64>, ConfigError> {
        match (&self.config.scaling.n_list, self.config.scaling.n) {
            (Some(l), _) => Ok(l.clone()),
            (None, Some(n)) => Ok(vec![n]),
            (None, None) => Err(ConfigError::MissingRequired("scaling.n_list".into())),
        }
    }

    pub fn chain_start(&self) -> ChainStart {
        self.config
            .run
            .chain_start
            .map_or(ChainStart::Stationary, |s| ChainStart::Fixed(s - 1))
    }

    pub fn run_settings(&self) -> RunSettings {
        let r = &self.config.run;
        RunSettings {
            reps: r.reps,
            seed: r.seed,
            workers: r.workers,
            horizon: r.horizon,
            grid_step: r.grid_step,
            chain_start: self.chain_start(),
        }
    }
}

pub fn parse_config(text: &str) -> crate::Result<ResolvedConfig> {
    RunConfig::from_json(text)?.resolve()
}

pub fn load_config(path: &Path) -> crate::Result<ResolvedConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

/// Network block describing `spec`, e.g. for a reduced network.
pub fn network_block(spec: &NetworkSpec) -> NetworkBlock {
    let rates = spec.to_rates();
    NetworkBlock {
        generator: spec.generator().to_rows(),
        queues: spec.queues(),
        lambda: rates.lambda,
        mu: rates.mu,
        lambda_hat: rates.lambda_hat,
        mu_hat: rates.mu_hat,
        sinks: {
            let s: Vec<usize> = (0..spec.queues()).filter(|&k| spec.is_sink(k)).map(|k| k + 1).collect();
            (!s.is_empty()).then_some(s)
        },
    }
}
