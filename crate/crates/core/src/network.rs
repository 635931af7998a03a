//! Network definitions with state-dependent arrival and transfer rates,
//! time-averaged parameters, the drift matrix, and the constructions that
//! turn arrival-dependent routing and modulated service requirements into a
//! plain modulated network.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctmc::{ChainError, GeneratorSpec};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetworkError {
    #[error("a network needs at least two queues, got {0}")]
    TooFewQueues(usize),
    #[error("negative {field} rate {value} at {index:?}")]
    NegativeRate {
        field: &'static str,
        index: Vec<usize>,
        value: f64,
    },
    #[error("non-finite {field} rate at {index:?}")]
    NonFinite {
        field: &'static str,
        index: Vec<usize>,
    },
    #[error("{field}: queue {queue} routes to itself in state {state}")]
    NonzeroSelfService {
        field: &'static str,
        queue: usize,
        state: usize,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("routing probability {value} at ({class}, {state}) is outside [0, 1]")]
    ProbabilityOutOfRange { class: usize, state: usize, value: f64 },
    #[error("queue {0} is marked as a sink but has arrivals or outgoing service")]
    NotASink(usize),
    #[error(transparent)]
    Chain(#[from] ChainError),
}

/// Raw rate arrays as they appear in configuration files.
///
/// `lambda[k][i]` is the arrival rate to queue `k` in background state `i`;
/// `mu[k][l][i]` is the per-job rate of moving from queue `k` to queue `l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkRates {
    pub lambda: Vec<Vec<f64>>,
    pub mu: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_hat: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu_hat: Option<Vec<Vec<Vec<f64>>>>,
}

/// A validated modulated network of `L ≥ 2` infinite-server queues.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    gen: GeneratorSpec,
    /// L×d
    lambda: DMatrix<f64>,
    /// One L×L transfer-rate matrix per background state.
    mu: Vec<DMatrix<f64>>,
    lambda_hat: DMatrix<f64>,
    mu_hat: Vec<DMatrix<f64>>,
}

pub fn validate_network(gen: GeneratorSpec, rates: &NetworkRates) -> Result<NetworkSpec, NetworkError> {
    let d = gen.states();
    let queues = rates.lambda.len();
    if queues < 2 {
        return Err(NetworkError::TooFewQueues(queues));
    }
    let lambda = read_matrix("lambda", &rates.lambda, queues, d, false)?;
    let mu = read_tensor("mu", &rates.mu, queues, d, false)?;
    let lambda_hat = match &rates.lambda_hat {
        Some(h) => read_matrix("lambda_hat", h, queues, d, true)?,
        None => DMatrix::zeros(queues, d),
    };
    let mu_hat = match &rates.mu_hat {
        Some(h) => read_tensor("mu_hat", h, queues, d, true)?,
        None => vec![DMatrix::zeros(queues, queues); d],
    };
    Ok(NetworkSpec {
        gen,
        lambda,
        mu,
        lambda_hat,
        mu_hat,
    })
}

fn check_value(field: &'static str, index: Vec<usize>, v: f64, signed: bool) -> Result<(), NetworkError> {
    if !v.is_finite() {
        return Err(NetworkError::NonFinite { field, index });
    }
    if !signed && v < 0.0 {
        return Err(NetworkError::NegativeRate {
            field,
            index,
            value: v,
        });
    }
    Ok(())
}

fn read_matrix(
    field: &'static str,
    rows: &[Vec<f64>],
    queues: usize,
    d: usize,
    signed: bool,
) -> Result<DMatrix<f64>, NetworkError> {
    if rows.len() != queues {
        return Err(NetworkError::DimensionMismatch(format!(
            "{field} has {} rows, expected {queues}",
            rows.len()
        )));
    }
    let mut out = DMatrix::zeros(queues, d);
    for (k, row) in rows.iter().enumerate() {
        if row.len() != d {
            return Err(NetworkError::DimensionMismatch(format!(
                "{field}[{k}] has {} entries, expected {d} states",
                row.len()
            )));
        }
        for (i, &v) in row.iter().enumerate() {
            check_value(field, vec![k, i], v, signed)?;
            out[(k, i)] = v;
        }
    }
    Ok(out)
}

fn read_tensor(
    field: &'static str,
    data: &[Vec<Vec<f64>>],
    queues: usize,
    d: usize,
    signed: bool,
) -> Result<Vec<DMatrix<f64>>, NetworkError> {
    if data.len() != queues {
        return Err(NetworkError::DimensionMismatch(format!(
            "{field} has {} source queues, expected {queues}",
            data.len()
        )));
    }
    let mut out = vec![DMatrix::zeros(queues, queues); d];
    for (k, targets) in data.iter().enumerate() {
        if targets.len() != queues {
            return Err(NetworkError::DimensionMismatch(format!(
                "{field}[{k}] has {} target queues, expected {queues}",
                targets.len()
            )));
        }
        for (l, per_state) in targets.iter().enumerate() {
            if per_state.len() != d {
                return Err(NetworkError::DimensionMismatch(format!(
                    "{field}[{k}][{l}] has {} entries, expected {d} states",
                    per_state.len()
                )));
            }
            for (i, &v) in per_state.iter().enumerate() {
                check_value(field, vec![k, l, i], v, signed)?;
                if k == l && v != 0.0 {
                    return Err(NetworkError::NonzeroSelfService {
                        field,
                        queue: k,
                        state: i,
                    });
                }
                out[i][(k, l)] = v;
            }
        }
    }
    Ok(out)
}

impl NetworkSpec {
    pub fn generator(&self) -> &GeneratorSpec {
        &self.gen
    }

    pub fn queues(&self) -> usize {
        self.lambda.nrows()
    }

    pub fn states(&self) -> usize {
        self.gen.states()
    }

    pub fn lambda(&self, k: usize, i: usize) -> f64 {
        self.lambda[(k, i)]
    }

    pub fn mu(&self, k: usize, l: usize, i: usize) -> f64 {
        self.mu[i][(k, l)]
    }

    pub fn lambda_hat(&self, k: usize, i: usize) -> f64 {
        self.lambda_hat[(k, i)]
    }

    pub fn mu_hat(&self, k: usize, l: usize, i: usize) -> f64 {
        self.mu_hat[i][(k, l)]
    }

    /// Arrival rates as an L×d matrix.
    pub fn lambda_matrix(&self) -> &DMatrix<f64> {
        &self.lambda
    }

    pub fn lambda_hat_matrix(&self) -> &DMatrix<f64> {
        &self.lambda_hat
    }

    /// L×L transfer rates in background state `i`.
    pub fn mu_in_state(&self, i: usize) -> &DMatrix<f64> {
        &self.mu[i]
    }

    pub fn mu_hat_in_state(&self, i: usize) -> &DMatrix<f64> {
        &self.mu_hat[i]
    }

    pub fn has_perturbations(&self) -> bool {
        self.lambda_hat.iter().any(|&v| v != 0.0)
            || self.mu_hat.iter().any(|m| m.iter().any(|&v| v != 0.0))
    }

    /// Queues that never receive exogenous arrivals and never release jobs.
    pub fn is_sink(&self, k: usize) -> bool {
        let l_count = self.queues();
        (0..self.states()).all(|i| {
            self.lambda[(k, i)] == 0.0
                && self.lambda_hat[(k, i)] == 0.0
                && (0..l_count).all(|l| self.mu[i][(k, l)] == 0.0 && self.mu_hat[i][(k, l)] == 0.0)
        })
    }

    pub fn check_sinks(&self, sinks: &[usize]) -> Result<(), NetworkError> {
        for &k in sinks {
            if k >= self.queues() || !self.is_sink(k) {
                return Err(NetworkError::NotASink(k));
            }
        }
        Ok(())
    }

    pub fn to_rates(&self) -> NetworkRates {
        let (l_count, d) = (self.queues(), self.states());
        let matrix = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..l_count).map(|k| (0..d).map(|i| m[(k, i)]).collect()).collect()
        };
        let tensor = |t: &[DMatrix<f64>]| -> Vec<Vec<Vec<f64>>> {
            (0..l_count)
                .map(|k| {
                    (0..l_count)
                        .map(|l| (0..d).map(|i| t[i][(k, l)]).collect())
                        .collect()
                })
                .collect()
        };
        let perturbed = self.has_perturbations();
        NetworkRates {
            lambda: matrix(&self.lambda),
            mu: tensor(&self.mu),
            lambda_hat: perturbed.then(|| matrix(&self.lambda_hat)),
            mu_hat: perturbed.then(|| tensor(&self.mu_hat)),
        }
    }
}

/// Stationary averages of the rates and the drift matrix of the integral map.
#[derive(Debug, Clone, PartialEq)]
pub struct AveragedRates {
    pub lambda_pi: DVector<f64>,
    pub mu_pi: DMatrix<f64>,
    pub lambda_hat_pi: DVector<f64>,
    pub mu_hat_pi: DMatrix<f64>,
    pub drift: DMatrix<f64>,
}

impl AveragedRates {
    pub fn queues(&self) -> usize {
        self.lambda_pi.len()
    }
}

pub fn averaged_rates(spec: &NetworkSpec, pi: &DVector<f64>) -> Result<AveragedRates, NetworkError> {
    let d = spec.states();
    if pi.len() != d {
        return Err(NetworkError::DimensionMismatch(format!(
            "stationary distribution has {} entries, network has {d} states",
            pi.len()
        )));
    }
    let lambda_pi = &spec.lambda * pi;
    let lambda_hat_pi = &spec.lambda_hat * pi;
    let average = |t: &[DMatrix<f64>]| {
        t.iter()
            .zip(pi.iter())
            .fold(DMatrix::zeros(spec.queues(), spec.queues()), |acc, (m, &p)| acc + m * p)
    };
    let mu_pi = average(&spec.mu);
    let mu_hat_pi = average(&spec.mu_hat);
    let drift = drift_matrix(&mu_pi);
    Ok(AveragedRates {
        lambda_pi,
        mu_pi,
        lambda_hat_pi,
        mu_hat_pi,
        drift,
    })
}

/// `M_kl = μ_lk` off the diagonal and `M_kk = −Σ_{l≠k} μ_kl`, so that the
/// integral map reads `y' = M y` and `1ᵀM = 0`.
pub fn drift_matrix(mu: &DMatrix<f64>) -> DMatrix<f64> {
    let l_count = mu.nrows();
    let mut m = mu.transpose();
    for k in 0..l_count {
        let out: f64 = (0..l_count).filter(|&l| l != k).map(|l| mu[(k, l)]).sum();
        m[(k, k)] = -out;
    }
    m
}

/// Per-queue exit rates and routing probabilities in one background state.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingView {
    pub exit_rates: Vec<f64>,
    /// `None` marks a queue with zero exit rate (absorbing in this state).
    pub probabilities: Vec<Option<Vec<f64>>>,
}

pub fn routing_view(spec: &NetworkSpec, state: usize) -> Result<RoutingView, NetworkError> {
    if state >= spec.states() {
        return Err(NetworkError::Chain(ChainError::InvalidState {
            state,
            d: spec.states(),
        }));
    }
    let mu = &spec.mu[state];
    let l_count = spec.queues();
    let exit_rates: Vec<f64> = (0..l_count).map(|k| mu.row(k).sum()).collect();
    let probabilities = exit_rates
        .iter()
        .enumerate()
        .map(|(k, &rate)| (rate > 0.0).then(|| (0..l_count).map(|l| mu[(k, l)] / rate).collect()))
        .collect();
    Ok(RoutingView {
        exit_rates,
        probabilities,
    })
}

/// A single queue whose arrival rate, service requirement (by job type, the
/// background state at arrival) and server speed are all modulated.
#[derive(Debug, Clone, PartialEq)]
pub struct Model3Spec {
    pub gen: GeneratorSpec,
    pub lambda_star: Vec<f64>,
    pub kappa_star: Vec<f64>,
    pub mu_star: Vec<f64>,
}

impl Model3Spec {
    pub fn new(
        gen: GeneratorSpec,
        lambda_star: Vec<f64>,
        kappa_star: Vec<f64>,
        mu_star: Vec<f64>,
    ) -> Result<Self, NetworkError> {
        let d = gen.states();
        for (field, v) in [
            ("lambda_star", &lambda_star),
            ("kappa_star", &kappa_star),
            ("mu_star", &mu_star),
        ] {
            if v.len() != d {
                return Err(NetworkError::DimensionMismatch(format!(
                    "{field} has {} entries, expected {d} states",
                    v.len()
                )));
            }
            for (i, &x) in v.iter().enumerate() {
                check_value(field, vec![i], x, false)?;
            }
        }
        Ok(Self {
            gen,
            lambda_star,
            kappa_star,
            mu_star,
        })
    }

    pub fn states(&self) -> usize {
        self.gen.states()
    }
}

/// One queue per job type plus a collecting queue `d` (zero-based) for
/// completed jobs: `λ_k(i) = 1{i=k} λ*(i)`, `μ_{k,d}(i) = κ*(k) μ*(i)`.
pub fn reduce_model3(m3: &Model3Spec) -> NetworkSpec {
    let d = m3.states();
    let l_count = d + 1;
    let lambda = DMatrix::from_fn(l_count, d, |k, i| if k == i { m3.lambda_star[i] } else { 0.0 });
    let mu = (0..d)
        .map(|i| {
            let mut m = DMatrix::zeros(l_count, l_count);
            for k in 0..d {
                m[(k, d)] = m3.kappa_star[k] * m3.mu_star[i];
            }
            m
        })
        .collect();
    NetworkSpec {
        gen: m3.gen.clone(),
        lambda,
        mu,
        lambda_hat: DMatrix::zeros(l_count, d),
        mu_hat: vec![DMatrix::zeros(l_count, l_count); d],
    }
}

/// Class queues for routing that depends on the background state at arrival.
///
/// Class `k` holds jobs that arrived in state `k`. Rows are classes, columns
/// are the background state at service completion.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSplit {
    pub lambda: DMatrix<f64>,
    /// Rate towards the first target queue (B).
    pub to_first: DMatrix<f64>,
    /// Rate towards the second target queue (C).
    pub to_second: DMatrix<f64>,
}

pub fn split_arrival_classes(
    lambda_a: &[f64],
    mu_a: &[f64],
    p: &DMatrix<f64>,
) -> Result<ClassSplit, NetworkError> {
    let d = lambda_a.len();
    if mu_a.len() != d || p.shape() != (d, d) {
        return Err(NetworkError::DimensionMismatch(format!(
            "expected {d} service speeds and a {d}x{d} routing kernel"
        )));
    }
    for (k, row) in p.row_iter().enumerate() {
        for (i, &v) in row.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(NetworkError::ProbabilityOutOfRange {
                    class: k,
                    state: i,
                    value: v,
                });
            }
        }
    }
    for (i, (&l, &m)) in lambda_a.iter().zip(mu_a).enumerate() {
        check_value("lambda_a", vec![i], l, false)?;
        check_value("mu_a", vec![i], m, false)?;
    }
    Ok(ClassSplit {
        lambda: DMatrix::from_fn(d, d, |k, i| if k == i { lambda_a[i] } else { 0.0 }),
        to_first: DMatrix::from_fn(d, d, |k, i| p[(k, i)] * mu_a[i]),
        to_second: DMatrix::from_fn(d, d, |k, i| (1.0 - p[(k, i)]) * mu_a[i]),
    })
}

impl ClassSplit {
    /// Full network with the class queues `0..d` feeding two sink queues `d` and `d+1`.
    pub fn into_network(self, gen: GeneratorSpec) -> Result<NetworkSpec, NetworkError> {
        let d = self.lambda.nrows();
        if gen.states() != d {
            return Err(NetworkError::DimensionMismatch(format!(
                "class split built for {d} states, generator has {}",
                gen.states()
            )));
        }
        let l_count = d + 2;
        let lambda = DMatrix::from_fn(l_count, d, |k, i| if k < d { self.lambda[(k, i)] } else { 0.0 });
        let mu = (0..d)
            .map(|i| {
                let mut m = DMatrix::zeros(l_count, l_count);
                for k in 0..d {
                    m[(k, d)] = self.to_first[(k, i)];
                    m[(k, d + 1)] = self.to_second[(k, i)];
                }
                m
            })
            .collect();
        Ok(NetworkSpec {
            gen,
            lambda,
            mu,
            lambda_hat: DMatrix::zeros(l_count, d),
            mu_hat: vec![DMatrix::zeros(l_count, l_count); d],
        })
    }
}
