//! Scaled systems and exact event-driven simulation.
//!
//! The simulator runs one merged race between background-chain jumps and
//! queue events (arrivals and transfers). Queue events are driven by a unit
//! exponential integrated-hazard clock that is carried across chain jumps, so
//! each chain jump costs one exponential draw and each queue event one more.
//! Besides the queue contents it records, at every output epoch, the event
//! counts and the occupation integrals from which all time-change clocks and
//! the six-term fluctuation decomposition are rebuilt exactly.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctmc::{ChainError, ChainPath, ChainStart, JumpKernel};
use crate::limits::FluidSolution;
use crate::network::{NetworkError, NetworkSpec};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimulationError {
    #[error("alpha must be positive and finite, got {0}")]
    NonpositiveAlpha(f64),
    #[error("scale index n must be at least 1")]
    InvalidScale,
    #[error("effective rate for queue {queue} (target {target:?}) in state {state} is negative at n = {n}")]
    NegativeEffectiveRate {
        queue: usize,
        target: Option<usize>,
        state: usize,
        n: u64,
    },
    #[error("population {population} exceeded the cap at t = {t}")]
    ExplodedPopulation { t: f64, population: u64 },
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("horizon must be positive and finite, got {0}")]
    InvalidHorizon(f64),
    #[error("initial condition: {0}")]
    InvalidInitial(String),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// `β = max{1/2, 1 − α/2}`.
pub fn beta_exponent(alpha: f64) -> Result<f64, SimulationError> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(SimulationError::NonpositiveAlpha(alpha));
    }
    Ok(f64::max(0.5, 1.0 - alpha / 2.0))
}

/// Rule for the initial population of the n-th system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitRule {
    /// `Q_k(0) = ⌊n ρ_k(0)⌋`.
    #[default]
    Floor,
    /// `Q_k(0) ~ Poisson(n ρ_k(0))`, independent across queues.
    Poisson,
}

pub const DEFAULT_POPULATION_CAP: u64 = 100_000_000;

/// The n-th system: rates `λⁿ = nλ + n^β λ̂`, `μⁿ = μ + n^{β−1} μ̂` and a
/// background chain sped up by `n^α`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledSystem {
    pub spec: NetworkSpec,
    pub alpha: f64,
    pub n: u64,
    pub beta: f64,
    /// L×d
    pub lambda_n: DMatrix<f64>,
    /// One L×L matrix per background state.
    pub mu_n: Vec<DMatrix<f64>>,
    pub chain_timescale: f64,
    pub init_rule: InitRule,
    pub population_cap: u64,
}

impl ScaledSystem {
    pub fn queues(&self) -> usize {
        self.spec.queues()
    }

    pub fn states(&self) -> usize {
        self.spec.states()
    }

    pub fn scale(&self) -> f64 {
        self.n as f64
    }

    /// `n^{1−β}`, the fluctuation scaling.
    pub fn fluctuation_scale(&self) -> f64 {
        self.scale().powf(1.0 - self.beta)
    }

    /// `n^{β−1}`, the size of the rate perturbations relative to the base rates.
    pub fn perturbation_scale(&self) -> f64 {
        self.scale().powf(self.beta - 1.0)
    }
}

pub fn build_scaled_system(
    spec: &NetworkSpec,
    alpha: f64,
    n: u64,
    init_rule: InitRule,
) -> Result<ScaledSystem, SimulationError> {
    let beta = beta_exponent(alpha)?;
    if n == 0 {
        return Err(SimulationError::InvalidScale);
    }
    let nf = n as f64;
    let (l_count, d) = (spec.queues(), spec.states());
    let n_beta = nf.powf(beta);
    let n_beta_m1 = nf.powf(beta - 1.0);
    let lambda_n = DMatrix::from_fn(l_count, d, |k, i| nf * spec.lambda(k, i) + n_beta * spec.lambda_hat(k, i));
    for k in 0..l_count {
        for i in 0..d {
            if lambda_n[(k, i)] < 0.0 {
                return Err(SimulationError::NegativeEffectiveRate {
                    queue: k,
                    target: None,
                    state: i,
                    n,
                });
            }
        }
    }
    let mu_n: Vec<DMatrix<f64>> = (0..d)
        .map(|i| spec.mu_in_state(i) + spec.mu_hat_in_state(i) * n_beta_m1)
        .collect();
    for (i, m) in mu_n.iter().enumerate() {
        for k in 0..l_count {
            for l in 0..l_count {
                if m[(k, l)] < 0.0 {
                    return Err(SimulationError::NegativeEffectiveRate {
                        queue: k,
                        target: Some(l),
                        state: i,
                        n,
                    });
                }
            }
        }
    }
    Ok(ScaledSystem {
        spec: spec.clone(),
        alpha,
        n,
        beta,
        lambda_n,
        mu_n,
        chain_timescale: nf.powf(alpha),
        init_rule,
        population_cap: DEFAULT_POPULATION_CAP,
    })
}

/// Initial population for fluid start `rho0` under the system's rule.
pub fn initial_condition<R: Rng + ?Sized>(
    sys: &ScaledSystem,
    rho0: &DVector<f64>,
    rng: &mut R,
) -> Result<Vec<u64>, SimulationError> {
    if rho0.len() != sys.queues() {
        return Err(SimulationError::InvalidInitial(format!(
            "rho0 has {} entries, network has {} queues",
            rho0.len(),
            sys.queues()
        )));
    }
    if rho0.iter().any(|&r| !(r >= 0.0 && r.is_finite())) {
        return Err(SimulationError::InvalidInitial("rho0 must be nonnegative".into()));
    }
    let nf = sys.scale();
    let q0 = rho0
        .iter()
        .map(|&r| match sys.init_rule {
            InitRule::Floor => (nf * r).floor() as u64,
            InitRule::Poisson if r == 0.0 => 0,
            InitRule::Poisson => Poisson::new(nf * r).map(|p| p.sample(rng) as u64).unwrap_or(0),
        })
        .collect();
    Ok(q0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Arrival { queue: usize },
    Transfer { from: usize, to: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueueEvent {
    pub t: f64,
    pub kind: EventKind,
    pub queues_after: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SimOptions {
    pub chain_start: ChainStart,
    /// Keep every queue event with the post-event state.
    pub record_events: bool,
    /// Keep the full background path (can be very long for fast chains).
    pub record_chain: bool,
}

/// State of one replication at an output epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSnapshot {
    pub t: f64,
    pub state: usize,
    pub queues: Vec<u64>,
    /// Arrival counts per queue.
    pub arrivals: Vec<u64>,
    /// Transfer counts, L×L row-major (`from * L + to`).
    pub transfers: Vec<u64>,
    /// `∫₀ᵗ 1{J=i} ds` per state.
    pub occupation: Vec<f64>,
    /// Within-cell ramp occupation: the sum over completed grid cells `[a, b]`
    /// of `∫ 1{J=i} (s−a)/(b−a) ds`. Together with `occupation` it integrates
    /// piecewise-linear functions of time against the chain exactly.
    pub ramp_occupation: Vec<f64>,
    /// `∫₀ᵗ 1{J=i} Q_k ds`, d×L row-major (`i * L + k`).
    pub queue_occupation: Vec<f64>,
}

/// Time-change clocks `τ₁,k = ∫ (1/n) λⁿ_k(J) ds` and `τ₄,kl = ∫ μⁿ_kl(J) (1/n) Q_k ds`.
#[derive(Debug, Clone, PartialEq)]
pub struct Clocks {
    pub arrival: Vec<f64>,
    /// L×L row-major.
    pub transfer: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBundle {
    pub initial: Vec<u64>,
    pub horizon: f64,
    pub snapshots: Vec<GridSnapshot>,
    pub clocks: Vec<Clocks>,
    pub events: Option<Vec<QueueEvent>>,
    pub chain: Option<ChainPath>,
    pub chain_jumps: u64,
    pub queue_events: u64,
}

impl TrajectoryBundle {
    pub fn grid(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.t).collect()
    }

    pub fn total_arrivals(&self, g: usize) -> u64 {
        self.snapshots[g].arrivals.iter().sum()
    }

    /// `Σ_k Q_k(t) − Σ_k Q_k(0) − arrivals(t)` at every epoch (zero for a valid run).
    pub fn mass_balance_defect(&self) -> i128 {
        let initial: u64 = self.initial.iter().sum();
        self.snapshots
            .iter()
            .map(|s| {
                let total: u64 = s.queues.iter().sum();
                (total as i128 - initial as i128 - s.arrivals.iter().sum::<u64>() as i128).abs()
            })
            .max()
            .unwrap_or(0)
    }
}

pub(crate) fn check_grid(grid: &[f64], horizon: f64) -> Result<(), SimulationError> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(SimulationError::InvalidHorizon(horizon));
    }
    match grid.first() {
        Some(&t0) if t0 == 0.0 => {}
        _ => return Err(SimulationError::GridMismatch("grid must start at 0".into())),
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(SimulationError::GridMismatch("grid must be strictly increasing".into()));
    }
    if *grid.last().unwrap() > horizon * (1.0 + 1e-12) {
        return Err(SimulationError::GridMismatch("grid extends past the horizon".into()));
    }
    Ok(())
}

/// Exact sample path of the n-th system on `[0, horizon]`, observed on `grid`.
#[allow(unused_assignments)]
pub fn simulate<R: Rng + ?Sized>(
    sys: &ScaledSystem,
    q0: &[u64],
    horizon: f64,
    grid: &[f64],
    pi: &DVector<f64>,
    options: SimOptions,
    rng: &mut R,
) -> Result<TrajectoryBundle, SimulationError> {
    check_grid(grid, horizon)?;
    let (l_count, d) = (sys.queues(), sys.states());
    if q0.len() != l_count {
        return Err(SimulationError::InvalidInitial(format!(
            "initial state has {} entries, network has {l_count} queues",
            q0.len()
        )));
    }
    if pi.len() != d {
        return Err(ChainError::DimensionMismatch { got: pi.len(), d }.into());
    }
    let gen = sys.spec.generator();
    let kernel = JumpKernel::new(gen);
    let chain_rate: Vec<f64> = (0..d).map(|i| sys.chain_timescale * gen.exit_rate(i)).collect();
    // Per-state rate tables, flattened.
    let lam: Vec<f64> = (0..d)
        .flat_map(|i| (0..l_count).map(move |k| (i, k)))
        .map(|(i, k)| sys.lambda_n[(k, i)])
        .collect();
    let lam_total: Vec<f64> = (0..d).map(|i| lam[i * l_count..(i + 1) * l_count].iter().sum()).collect();
    let mu: Vec<f64> = sys.mu_n.iter().flat_map(|m| m.transpose().iter().copied().collect::<Vec<_>>()).collect();
    let exit: Vec<f64> = (0..d)
        .flat_map(|i| {
            let mu = &mu;
            (0..l_count).map(move |k| mu[(i * l_count + k) * l_count..(i * l_count + k + 1) * l_count].iter().sum())
        })
        .collect();
    let queue_rate = |j: usize, q: &[u64]| -> f64 {
        let ex = &exit[j * l_count..(j + 1) * l_count];
        lam_total[j] + q.iter().zip(ex).map(|(&qk, &e)| qk as f64 * e).sum::<f64>()
    };

    let mut state = options.chain_start.draw(pi, rng)?;
    let mut q = q0.to_vec();
    let mut t = 0.0;
    let exp = |rng: &mut R| -> f64 { Exp1.sample(rng) };
    let mut next_chain = if d > 1 && chain_rate[state] > 0.0 {
        exp(rng) / chain_rate[state]
    } else {
        f64::INFINITY
    };
    let mut hazard = exp(rng);
    let mut qrate = queue_rate(state, &q);

    let mut occupation = vec![0.0; d];
    let mut ramp = vec![0.0; d];
    let mut pending = vec![0.0; d];
    let mut queue_occupation = vec![0.0; d * l_count];
    let mut arrivals = vec![0u64; l_count];
    let mut transfers = vec![0u64; l_count * l_count];
    let mut chain = options.record_chain.then(|| ChainPath {
        times: vec![0.0],
        states: vec![state],
        horizon,
    });
    let mut events = options.record_events.then(Vec::new);
    let mut chain_jumps = 0u64;
    let mut queue_events = 0u64;
    let mut population: u64 = q.iter().sum();

    let mut snapshots = Vec::with_capacity(grid.len());
    snapshots.push(GridSnapshot {
        t: 0.0,
        state,
        queues: q.clone(),
        arrivals: arrivals.clone(),
        transfers: transfers.clone(),
        occupation: occupation.clone(),
        ramp_occupation: ramp.clone(),
        queue_occupation: queue_occupation.clone(),
    });
    let mut next_grid = 1usize;
    let (mut cell_start, mut cell_inv) = cell(grid, next_grid);

    macro_rules! advance {
        ($to:expr) => {{
            let to: f64 = $to;
            let dt = to - t;
            occupation[state] += dt;
            pending[state] += dt;
            ramp[state] += dt * (0.5 * (t + to) - cell_start) * cell_inv;
            hazard -= qrate * dt;
            t = to;
        }};
    }
    macro_rules! fold_pending {
        () => {{
            for i in 0..d {
                if pending[i] != 0.0 {
                    let row = &mut queue_occupation[i * l_count..(i + 1) * l_count];
                    for (acc, &qk) in row.iter_mut().zip(&q) {
                        *acc += pending[i] * qk as f64;
                    }
                    pending[i] = 0.0;
                }
            }
        }};
    }

    loop {
        let t_queue = if qrate > 0.0 { t + hazard / qrate } else { f64::INFINITY };
        let t_event = next_chain.min(t_queue);
        let t_grid = grid.get(next_grid).copied().unwrap_or(f64::INFINITY);
        if t_grid <= t_event {
            advance!(t_grid);
            fold_pending!();
            snapshots.push(GridSnapshot {
                t: t_grid,
                state,
                queues: q.clone(),
                arrivals: arrivals.clone(),
                transfers: transfers.clone(),
                occupation: occupation.clone(),
                ramp_occupation: ramp.clone(),
                queue_occupation: queue_occupation.clone(),
            });
            next_grid += 1;
            (cell_start, cell_inv) = cell(grid, next_grid);
            continue;
        }
        if t_event > horizon {
            advance!(horizon);
            break;
        }
        if next_chain < t_queue {
            advance!(next_chain);
            state = kernel.next(state, rng);
            chain_jumps += 1;
            next_chain = t + exp(rng) / chain_rate[state];
            qrate = queue_rate(state, &q);
            if let Some(path) = chain.as_mut() {
                path.times.push(t);
                path.states.push(state);
            }
        } else {
            advance!(t_queue);
            fold_pending!();
            let kind = pick_event(
                &lam[state * l_count..(state + 1) * l_count],
                &mu[state * l_count * l_count..(state + 1) * l_count * l_count],
                &q,
                qrate,
                rng,
            );
            match kind {
                EventKind::Arrival { queue } => {
                    q[queue] += 1;
                    arrivals[queue] += 1;
                    population += 1;
                    if population > sys.population_cap {
                        return Err(SimulationError::ExplodedPopulation { t, population });
                    }
                }
                EventKind::Transfer { from, to } => {
                    q[from] -= 1;
                    q[to] += 1;
                    transfers[from * l_count + to] += 1;
                }
            }
            queue_events += 1;
            if let Some(ev) = events.as_mut() {
                ev.push(QueueEvent {
                    t,
                    kind,
                    queues_after: q.clone(),
                });
            }
            hazard = exp(rng);
            qrate = queue_rate(state, &q);
        }
    }

    let nf = sys.scale();
    let clocks = snapshots
        .iter()
        .map(|s| Clocks {
            arrival: (0..l_count)
                .map(|k| (0..d).map(|i| sys.lambda_n[(k, i)] * s.occupation[i]).sum::<f64>() / nf)
                .collect(),
            transfer: (0..l_count * l_count)
                .map(|kl| {
                    let (k, l) = (kl / l_count, kl % l_count);
                    (0..d)
                        .map(|i| sys.mu_n[i][(k, l)] * s.queue_occupation[i * l_count + k])
                        .sum::<f64>()
                        / nf
                })
                .collect(),
        })
        .collect();

    Ok(TrajectoryBundle {
        initial: q0.to_vec(),
        horizon,
        snapshots,
        clocks,
        events,
        chain,
        chain_jumps,
        queue_events,
    })
}

/// Start and inverse width of the grid cell ending at `grid[idx]`.
fn cell(grid: &[f64], idx: usize) -> (f64, f64) {
    match grid.get(idx) {
        Some(&b) => (grid[idx - 1], 1.0 / (b - grid[idx - 1])),
        None => (0.0, 0.0),
    }
}

#[inline]
fn pick_event<R: Rng + ?Sized>(lam: &[f64], mu: &[f64], q: &[u64], total: f64, rng: &mut R) -> EventKind {
    let l_count = q.len();
    let mut u = rng.random::<f64>() * total;
    let mut fallback = None;
    for (k, &r) in lam.iter().enumerate() {
        if r > 0.0 {
            fallback = Some(EventKind::Arrival { queue: k });
            if u < r {
                return EventKind::Arrival { queue: k };
            }
            u -= r;
        }
    }
    for (k, &qk) in q.iter().enumerate() {
        if qk == 0 {
            continue;
        }
        for l in 0..l_count {
            let r = mu[k * l_count + l] * qk as f64;
            if r > 0.0 {
                fallback = Some(EventKind::Transfer { from: k, to: l });
                if u < r {
                    return EventKind::Transfer { from: k, to: l };
                }
                u -= r;
            }
        }
    }
    // Only reachable through round-off in the running subtraction.
    fallback.expect("queue event drawn with zero total rate")
}

fn check_fluid_grid(snapshots: &[GridSnapshot], fluid: &FluidSolution) -> Result<(), SimulationError> {
    if snapshots.len() != fluid.grid.len() {
        return Err(SimulationError::GridMismatch(format!(
            "trajectory has {} epochs, fluid path has {}",
            snapshots.len(),
            fluid.grid.len()
        )));
    }
    for (s, &t) in snapshots.iter().zip(&fluid.grid) {
        if (s.t - t).abs() > 1e-9 * (1.0 + t.abs()) {
            return Err(SimulationError::GridMismatch(format!(
                "epoch {} of the trajectory differs from fluid epoch {t}",
                s.t
            )));
        }
    }
    Ok(())
}

/// `Q̂_k(t) = n^{1−β} (Q_k(t)/n − ρ_k(t))` at the output epochs.
pub fn centered_scaled_path(
    bundle: &TrajectoryBundle,
    fluid: &FluidSolution,
    sys: &ScaledSystem,
) -> Result<Vec<DVector<f64>>, SimulationError> {
    check_fluid_grid(&bundle.snapshots, fluid)?;
    let (nf, scale) = (sys.scale(), sys.fluctuation_scale());
    Ok(bundle
        .snapshots
        .iter()
        .zip(&fluid.rho)
        .map(|(s, rho)| DVector::from_iterator(rho.len(), s.queues.iter().zip(rho.iter()).map(|(&q, &r)| scale * (q as f64 / nf - r))))
        .collect())
}

/// The six fluctuation families and the assembled input process, per epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionPaths {
    pub grid: Vec<f64>,
    /// Poisson martingale of the arrivals, `Aₖ/n − τ₁,k`.
    pub xbar1: Vec<DVector<f64>>,
    /// Arrival-rate perturbation.
    pub xbar2: Vec<DVector<f64>>,
    /// Arrival-rate modulation around the stationary average.
    pub xbar3: Vec<DVector<f64>>,
    /// Transfer martingales, L×L.
    pub xbar4: Vec<DMatrix<f64>>,
    /// Transfer-rate perturbation, L×L.
    pub xbar5: Vec<DMatrix<f64>>,
    /// Transfer-rate modulation against the fluid path, L×L.
    pub xbar6: Vec<DMatrix<f64>>,
    /// Assembled signed sum per queue.
    pub xbar: Vec<DVector<f64>>,
    /// `n^{1−β} · xbar`.
    pub xhat: Vec<DVector<f64>>,
    /// `Q/n − ρ` per epoch.
    pub qbar: Vec<DVector<f64>>,
    /// `∫ μ_kl(J) (Q_k/n − ρ_k) ds`, L×L.
    pub modulated_outflow: Vec<DMatrix<f64>>,
}

impl DecompositionPaths {
    /// Defect in `Q̄(t) = Q̄(0) + X̄(t) + Σ_l ∫μ_lk(J)Q̄_l − Σ_l ∫μ_kl(J)Q̄_k`; zero up to
    /// the accuracy with which the fluid path satisfies its own integral equation.
    pub fn reconstruction_residual(&self) -> Vec<DVector<f64>> {
        let q0 = &self.qbar[0];
        self.qbar
            .iter()
            .zip(&self.xbar)
            .zip(&self.modulated_outflow)
            .map(|((qbar, xbar), flow)| {
                let l_count = qbar.len();
                // flow[(k, l)] is the modulated mass moved from k to l.
                let net_in = DVector::from_fn(l_count, |k, _| {
                    (0..l_count).map(|l| flow[(l, k)] - flow[(k, l)]).sum::<f64>()
                });
                qbar - q0 - xbar - net_in
            })
            .collect()
    }
}

/// Rebuild the six-term decomposition of `Q/n − ρ` from a trajectory.
///
/// The fluid path must be sampled on the trajectory's output grid; between
/// epochs it is interpolated linearly, which is the only approximation made.
pub fn decompose(
    bundle: &TrajectoryBundle,
    sys: &ScaledSystem,
    fluid: &FluidSolution,
    pi: &DVector<f64>,
) -> Result<DecompositionPaths, SimulationError> {
    check_fluid_grid(&bundle.snapshots, fluid)?;
    let spec = &sys.spec;
    let (l_count, d) = (spec.queues(), spec.states());
    if pi.len() != d {
        return Err(ChainError::DimensionMismatch { got: pi.len(), d }.into());
    }
    let nf = sys.scale();
    let pert = sys.perturbation_scale();

    // ∫ (1{J=i} − π_i) ρ_k ds, cumulative, d×L.
    let mut rho_dev = DMatrix::<f64>::zeros(d, l_count);
    // ∫ 1{J=i} ρ_k ds, cumulative, d×L.
    let mut rho_occ = DMatrix::<f64>::zeros(d, l_count);
    let n_epochs = bundle.snapshots.len();
    let mut out = DecompositionPaths {
        grid: bundle.grid(),
        xbar1: Vec::with_capacity(n_epochs),
        xbar2: Vec::with_capacity(n_epochs),
        xbar3: Vec::with_capacity(n_epochs),
        xbar4: Vec::with_capacity(n_epochs),
        xbar5: Vec::with_capacity(n_epochs),
        xbar6: Vec::with_capacity(n_epochs),
        xbar: Vec::with_capacity(n_epochs),
        xhat: Vec::with_capacity(n_epochs),
        qbar: Vec::with_capacity(n_epochs),
        modulated_outflow: Vec::with_capacity(n_epochs),
    };

    for (g, snap) in bundle.snapshots.iter().enumerate() {
        if g > 0 {
            let prev = &bundle.snapshots[g - 1];
            let (ra, rb) = (&fluid.rho[g - 1], &fluid.rho[g]);
            let d_occ: Vec<f64> = (0..d).map(|i| snap.occupation[i] - prev.occupation[i]).collect();
            let d_ramp: Vec<f64> = (0..d).map(|i| snap.ramp_occupation[i] - prev.ramp_occupation[i]).collect();
            let occ_total: f64 = d_occ.iter().sum();
            let ramp_total: f64 = d_ramp.iter().sum();
            for i in 0..d {
                let dev_occ = d_occ[i] - pi[i] * occ_total;
                let dev_ramp = d_ramp[i] - pi[i] * ramp_total;
                for k in 0..l_count {
                    rho_dev[(i, k)] += ra[k] * (dev_occ - dev_ramp) + rb[k] * dev_ramp;
                    rho_occ[(i, k)] += ra[k] * (d_occ[i] - d_ramp[i]) + rb[k] * d_ramp[i];
                }
            }
        }
        let clocks = &bundle.clocks[g];
        let occ_total: f64 = snap.occupation.iter().sum();

        let xbar1 = DVector::from_fn(l_count, |k, _| snap.arrivals[k] as f64 / nf - clocks.arrival[k]);
        let xbar2 = DVector::from_fn(l_count, |k, _| {
            (0..d).map(|i| spec.lambda_hat(k, i) * snap.occupation[i]).sum::<f64>() * pert
        });
        let xbar3 = DVector::from_fn(l_count, |k, _| {
            (0..d)
                .map(|i| spec.lambda(k, i) * (snap.occupation[i] - pi[i] * occ_total))
                .sum::<f64>()
        });
        let xbar4 = DMatrix::from_fn(l_count, l_count, |k, l| {
            snap.transfers[k * l_count + l] as f64 / nf - clocks.transfer[k * l_count + l]
        });
        let xbar5 = DMatrix::from_fn(l_count, l_count, |k, l| {
            (0..d)
                .map(|i| spec.mu_hat(k, l, i) * snap.queue_occupation[i * l_count + k])
                .sum::<f64>()
                * pert
                / nf
        });
        let xbar6 = DMatrix::from_fn(l_count, l_count, |k, l| {
            (0..d).map(|i| spec.mu(k, l, i) * rho_dev[(i, k)]).sum::<f64>()
        });
        let mut xbar = &xbar1 + &xbar2 + &xbar3;
        for k in 0..l_count {
            for l in (0..l_count).filter(|&l| l != k) {
                xbar[k] += xbar4[(l, k)] + xbar5[(l, k)] + xbar6[(l, k)];
                xbar[k] -= xbar4[(k, l)] + xbar5[(k, l)] + xbar6[(k, l)];
            }
        }
        let rho = &fluid.rho[g];
        let qbar = DVector::from_fn(l_count, |k, _| snap.queues[k] as f64 / nf - rho[k]);
        let flow = DMatrix::from_fn(l_count, l_count, |k, l| {
            (0..d)
                .map(|i| spec.mu(k, l, i) * (snap.queue_occupation[i * l_count + k] / nf - rho_occ[(i, k)]))
                .sum::<f64>()
        });
        out.xhat.push(&xbar * sys.fluctuation_scale());
        out.xbar1.push(xbar1);
        out.xbar2.push(xbar2);
        out.xbar3.push(xbar3);
        out.xbar4.push(xbar4);
        out.xbar5.push(xbar5);
        out.xbar6.push(xbar6);
        out.xbar.push(xbar);
        out.qbar.push(qbar);
        out.modulated_outflow.push(flow);
    }
    Ok(out)
}
