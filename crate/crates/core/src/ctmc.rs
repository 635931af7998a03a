//! Background Markov chain: validation, stationary law, deviation matrix,
//! modulation covariance, exact path sampling and occupation deviations.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChainError {
    #[error("generator must be a non-empty square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("negative off-diagonal rate {value} at ({row}, {col})")]
    NegativeOffDiagonal { row: usize, col: usize, value: f64 },
    #[error("row {row} sums to {sum}, expected 0")]
    RowSumNonzero { row: usize, sum: f64 },
    #[error("generator is reducible: states {unreachable:?} are not mutually reachable with state 0")]
    Reducible { unreachable: Vec<usize> },
    #[error("non-finite rate at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("linear system is numerically singular")]
    SingularSolve,
    #[error("time {t} outside the path horizon [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },
    #[error("timescale must be positive and finite, got {0}")]
    InvalidTimescale(f64),
    #[error("horizon must be positive and finite, got {0}")]
    InvalidHorizon(f64),
    #[error("state {state} out of range for a {d}-state chain")]
    InvalidState { state: usize, d: usize },
    #[error("vector of length {got} does not match {d} states")]
    DimensionMismatch { got: usize, d: usize },
}

/// Numeric thresholds used when validating and decomposing generators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainTolerances {
    /// Allowed absolute row-sum error, scaled by `1 + max |rate|` of the row.
    pub row_sum: f64,
    /// Off-diagonal rates above this count as edges for irreducibility.
    pub edge: f64,
    /// Relative singular-value floor for the stationary least-squares solve.
    pub rank: f64,
}

impl Default for ChainTolerances {
    fn default() -> Self {
        Self {
            row_sum: 1e-12,
            edge: 1e-14,
            rank: 1e-12,
        }
    }
}

/// A validated irreducible transition-rate matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    rates: DMatrix<f64>,
}

impl GeneratorSpec {
    pub fn rates(&self) -> &DMatrix<f64> {
        &self.rates
    }

    pub fn states(&self) -> usize {
        self.rates.nrows()
    }

    /// Total rate of leaving state `i`.
    pub fn exit_rate(&self, i: usize) -> f64 {
        -self.rates[(i, i)]
    }

    /// Rows of the generator as nested vectors (row-major, as in the JSON config).
    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.states())
            .map(|i| self.rates.row(i).iter().copied().collect())
            .collect()
    }

    /// Symmetric two-state chain with switching rate `q` in both directions.
    pub fn two_state(q: f64) -> Result<Self, ChainError> {
        validate_generator(&DMatrix::from_row_slice(2, 2, &[-q, q, q, -q]))
    }

    /// The trivial one-state chain (no modulation).
    pub fn single_state() -> Self {
        Self {
            rates: DMatrix::zeros(1, 1),
        }
    }
}

pub fn validate_generator(rates: &DMatrix<f64>) -> Result<GeneratorSpec, ChainError> {
    validate_generator_with(rates, &ChainTolerances::default())
}

pub fn validate_generator_with(
    rates: &DMatrix<f64>,
    tol: &ChainTolerances,
) -> Result<GeneratorSpec, ChainError> {
    let (rows, cols) = rates.shape();
    if rows != cols || rows == 0 {
        return Err(ChainError::NotSquare { rows, cols });
    }
    let d = rows;
    for i in 0..d {
        for j in 0..d {
            let v = rates[(i, j)];
            if !v.is_finite() {
                return Err(ChainError::NonFinite { row: i, col: j });
            }
            if i != j && v < 0.0 {
                return Err(ChainError::NegativeOffDiagonal {
                    row: i,
                    col: j,
                    value: v,
                });
            }
        }
    }
    for i in 0..d {
        let row = rates.row(i);
        let sum: f64 = row.iter().sum();
        let scale = 1.0 + row.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if sum.abs() > tol.row_sum * scale {
            return Err(ChainError::RowSumNonzero { row: i, sum });
        }
    }
    let forward = reachable(d, |i, j| rates[(i, j)] > tol.edge);
    let backward = reachable(d, |i, j| rates[(j, i)] > tol.edge);
    let unreachable: Vec<usize> = (0..d).filter(|&i| !(forward[i] && backward[i])).collect();
    if !unreachable.is_empty() {
        return Err(ChainError::Reducible { unreachable });
    }
    Ok(GeneratorSpec {
        rates: rates.clone(),
    })
}

fn reachable(d: usize, edge: impl Fn(usize, usize) -> bool) -> Vec<bool> {
    let mut seen = vec![false; d];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    while let Some(i) = queue.pop_front() {
        for j in 0..d {
            if j != i && !seen[j] && edge(i, j) {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    seen
}

/// Stationary distribution from the stacked system `[Qᵀ; 1ᵀ] π = [0; 1]`,
/// solved in least squares.
pub fn stationary_distribution(gen: &GeneratorSpec) -> Result<DVector<f64>, ChainError> {
    stationary_distribution_with(gen, &ChainTolerances::default())
}

pub fn stationary_distribution_with(
    gen: &GeneratorSpec,
    tol: &ChainTolerances,
) -> Result<DVector<f64>, ChainError> {
    let d = gen.states();
    let mut stacked = DMatrix::zeros(d + 1, d);
    stacked
        .view_mut((0, 0), (d, d))
        .copy_from(&gen.rates.transpose());
    stacked.row_mut(d).fill(1.0);
    let mut rhs = DVector::zeros(d + 1);
    rhs[d] = 1.0;

    let svd = stacked.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin < tol.rank * smax {
        return Err(ChainError::SingularSolve);
    }
    let mut pi = svd
        .solve(&rhs, tol.rank * smax)
        .map_err(|_| ChainError::SingularSolve)?;
    // Round-off can leave entries at -1e-17; the exact solution is strictly positive.
    pi.iter_mut().for_each(|p| *p = p.max(0.0));
    let total = pi.sum();
    if !(total > 0.0) {
        return Err(ChainError::SingularSolve);
    }
    Ok(pi / total)
}

/// Deviation matrix `D = (Π − Q)⁻¹ − Π` with `Π = 1πᵀ`.
pub fn deviation_matrix(gen: &GeneratorSpec, pi: &DVector<f64>) -> Result<DMatrix<f64>, ChainError> {
    let d = gen.states();
    if pi.len() != d {
        return Err(ChainError::DimensionMismatch { got: pi.len(), d });
    }
    let ergodic = ergodic_projector(pi);
    let inverse = (&ergodic - &gen.rates)
        .try_inverse()
        .ok_or(ChainError::SingularSolve)?;
    Ok(inverse - ergodic)
}

/// `Π = 1πᵀ`: every row equals π.
pub fn ergodic_projector(pi: &DVector<f64>) -> DMatrix<f64> {
    let d = pi.len();
    DMatrix::from_fn(d, d, |_, j| pi[j])
}

/// `Σ = diag(π) D + Dᵀ diag(π)`.
pub fn modulation_covariance(pi: &DVector<f64>, deviation: &DMatrix<f64>) -> DMatrix<f64> {
    let weighted = DMatrix::from_diagonal(pi) * deviation;
    let sigma = &weighted + weighted.transpose();
    // Exact symmetry by construction up to the addition order.
    (&sigma + sigma.transpose()) * 0.5
}

/// π, D and Σ of a generator.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainSummary {
    pub pi: DVector<f64>,
    pub deviation: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
}

impl ChainSummary {
    pub fn compute(gen: &GeneratorSpec) -> Result<Self, ChainError> {
        Self::compute_with(gen, &ChainTolerances::default())
    }

    pub fn compute_with(gen: &GeneratorSpec, tol: &ChainTolerances) -> Result<Self, ChainError> {
        let pi = stationary_distribution_with(gen, tol)?;
        let deviation = deviation_matrix(gen, &pi)?;
        let sigma = modulation_covariance(&pi, &deviation);
        Ok(Self {
            pi,
            deviation,
            sigma,
        })
    }

    pub fn states(&self) -> usize {
        self.pi.len()
    }
}

/// How the background chain starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainStart {
    /// Draw J(0) from the stationary distribution.
    #[default]
    Stationary,
    /// Start in the given (zero-based) state.
    Fixed(usize),
}

impl ChainStart {
    pub fn draw<R: Rng + ?Sized>(
        &self,
        pi: &DVector<f64>,
        rng: &mut R,
    ) -> Result<usize, ChainError> {
        let d = pi.len();
        match *self {
            ChainStart::Fixed(state) if state < d => Ok(state),
            ChainStart::Fixed(state) => Err(ChainError::InvalidState { state, d }),
            ChainStart::Stationary => Ok(sample_categorical(pi.as_slice(), rng)),
        }
    }
}

/// Index drawn proportionally to nonnegative `weights` (which need not sum to 1).
pub(crate) fn sample_categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last = i;
            if u < w {
                return i;
            }
            u -= w;
        }
    }
    last
}

/// Right-continuous piecewise-constant path of the background chain on `[0, horizon]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainPath {
    /// Epoch at which each entry of `states` is entered; `times[0] == 0`.
    pub times: Vec<f64>,
    pub states: Vec<usize>,
    pub horizon: f64,
}

impl ChainPath {
    pub fn jumps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn state_at(&self, t: f64) -> Result<usize, ChainError> {
        self.check_time(t)?;
        let idx = self.times.partition_point(|&s| s <= t);
        Ok(self.states[idx - 1])
    }

    /// Time spent in each state during `[0, t]`.
    pub fn occupation(&self, d: usize, t: f64) -> Result<DVector<f64>, ChainError> {
        self.check_time(t)?;
        let mut occ = DVector::zeros(d);
        for (idx, &start) in self.times.iter().enumerate() {
            if start >= t {
                break;
            }
            let end = self.times.get(idx + 1).copied().unwrap_or(f64::INFINITY).min(t);
            occ[self.states[idx]] += end - start;
        }
        Ok(occ)
    }

    /// `G(t) = ∫₀ᵗ (K(s) − π) ds` where `K` is the state indicator.
    pub fn occupation_deviation(&self, pi: &DVector<f64>, t: f64) -> Result<DVector<f64>, ChainError> {
        Ok(self.occupation(pi.len(), t)? - pi * t)
    }

    fn check_time(&self, t: f64) -> Result<(), ChainError> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(ChainError::TimeOutOfRange {
                t,
                horizon: self.horizon,
            });
        }
        Ok(())
    }
}

/// Exact path of the chain with generator `timescale · Q` on `[0, horizon]`.
pub fn sample_chain_path<R: Rng + ?Sized>(
    gen: &GeneratorSpec,
    pi: &DVector<f64>,
    timescale: f64,
    horizon: f64,
    start: ChainStart,
    rng: &mut R,
) -> Result<ChainPath, ChainError> {
    if !(timescale > 0.0 && timescale.is_finite()) {
        return Err(ChainError::InvalidTimescale(timescale));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(ChainError::InvalidHorizon(horizon));
    }
    let d = gen.states();
    let jump = JumpKernel::new(gen);
    let mut state = start.draw(pi, rng)?;
    let mut times = vec![0.0];
    let mut states = vec![state];
    let mut t = 0.0;
    loop {
        let rate = timescale * gen.exit_rate(state);
        if d == 1 || rate <= 0.0 {
            break;
        }
        let hold: f64 = Exp1.sample(rng);
        t += hold / rate;
        if t > horizon {
            break;
        }
        state = jump.next(state, rng);
        times.push(t);
        states.push(state);
    }
    Ok(ChainPath {
        times,
        states,
        horizon,
    })
}

/// Cumulative jump probabilities of the embedded chain, one row per state.
#[derive(Debug, Clone)]
pub(crate) struct JumpKernel {
    cumulative: Vec<Vec<(usize, f64)>>,
}

impl JumpKernel {
    pub(crate) fn new(gen: &GeneratorSpec) -> Self {
        let d = gen.states();
        let cumulative = (0..d)
            .map(|i| {
                let exit = gen.exit_rate(i);
                let mut acc = 0.0;
                let mut row = Vec::new();
                for j in (0..d).filter(|&j| j != i) {
                    let r = gen.rates[(i, j)];
                    if r > 0.0 {
                        acc += r / exit;
                        row.push((j, acc));
                    }
                }
                if let Some(last) = row.last_mut() {
                    last.1 = 1.0;
                }
                row
            })
            .collect();
        Self { cumulative }
    }

    #[inline]
    pub(crate) fn next<R: Rng + ?Sized>(&self, state: usize, rng: &mut R) -> usize {
        let row = &self.cumulative[state];
        if row.len() == 1 {
            return row[0].0;
        }
        let u: f64 = rng.random();
        row.iter()
            .find(|&&(_, c)| u < c)
            .map(|&(j, _)| j)
            .unwrap_or(row[row.len() - 1].0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> DMatrix<f64> {
        let d = rows.len();
        DMatrix::from_row_iterator(d, rows[0].len(), rows.iter().flat_map(|r| r.iter().copied()))
    }

    #[test]
    fn validates_two_state() {
        let gen = validate_generator(&m(&[&[-1.0, 1.0], &[1.0, -1.0]])).unwrap();
        assert_eq!(gen.states(), 2);
    }

    #[test]
    fn rejects_bad_row_sum() {
        let err = validate_generator(&m(&[&[-1.0, 0.5], &[1.0, -1.0]])).unwrap_err();
        assert!(matches!(err, ChainError::RowSumNonzero { row: 0, .. }));
    }

    #[test]
    fn rejects_negative_off_diagonal() {
        let err = validate_generator(&m(&[&[1.0, -1.0], &[1.0, -1.0]])).unwrap_err();
        assert!(matches!(
            err,
            ChainError::NegativeOffDiagonal { row: 0, col: 1, .. }
        ));
    }

    #[test]
    fn rejects_isolated_state() {
        let err = validate_generator(&m(&[
            &[-1.0, 1.0, 0.0],
            &[1.0, -1.0, 0.0],
            &[0.0, 0.0, 0.0],
        ]))
        .unwrap_err();
        assert_eq!(err, ChainError::Reducible { unreachable: vec![2] });
    }

    #[test]
    fn rejects_one_way_chain() {
        // 0 -> 1 but never back.
        let err = validate_generator(&m(&[&[-1.0, 1.0], &[0.0, 0.0]])).unwrap_err();
        assert_eq!(err, ChainError::Reducible { unreachable: vec![1] });
    }

    #[test]
    fn rejects_non_square() {
        assert!(matches!(
            validate_generator(&DMatrix::zeros(2, 3)),
            Err(ChainError::NotSquare { .. })
        ));
    }

    #[test]
    fn stationary_two_state_examples() {
        for q in [0.1, 1.0, 7.5] {
            let pi = stationary_distribution(&GeneratorSpec::two_state(q).unwrap()).unwrap();
            assert_abs_diff_eq!(pi[0], 0.5, epsilon = 1e-12);
            assert_abs_diff_eq!(pi[1], 0.5, epsilon = 1e-12);
        }
        let gen = validate_generator(&m(&[&[-1.0, 1.0], &[2.0, -2.0]])).unwrap();
        let pi = stationary_distribution(&gen).unwrap();
        assert_abs_diff_eq!(pi[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pi[1], 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn single_state_summary() {
        let s = ChainSummary::compute(&GeneratorSpec::single_state()).unwrap();
        assert_eq!(s.pi[0], 1.0);
        assert_eq!(s.deviation[(0, 0)], 0.0);
        assert_eq!(s.sigma[(0, 0)], 0.0);
    }

    #[test]
    fn two_state_deviation_closed_form() {
        // P11(s) = 1/2 + e^{-2qs}/2, so D11 = ∫ e^{-2qs}/2 ds = 1/(4q).
        for q in [0.5, 1.0, 3.0] {
            let s = ChainSummary::compute(&GeneratorSpec::two_state(q).unwrap()).unwrap();
            let c = 1.0 / (4.0 * q);
            let expected = m(&[&[c, -c], &[-c, c]]);
            assert!((&s.deviation - &expected).abs().max() < 1e-12);
        }
        let s = ChainSummary::compute(&GeneratorSpec::two_state(1.0).unwrap()).unwrap();
        let expected = m(&[&[0.25, -0.25], &[-0.25, 0.25]]);
        assert!((&s.sigma - expected).abs().max() < 1e-12);
    }

    #[test]
    fn deviation_rejects_wrong_length_pi() {
        let gen = GeneratorSpec::two_state(1.0).unwrap();
        assert!(matches!(
            deviation_matrix(&gen, &DVector::from_element(3, 1.0 / 3.0)),
            Err(ChainError::DimensionMismatch { got: 3, d: 2 })
        ));
    }

    #[test]
    fn single_state_path_never_jumps() {
        let gen = GeneratorSpec::single_state();
        let pi = DVector::from_element(1, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let path = sample_chain_path(&gen, &pi, 10.0, 5.0, ChainStart::Stationary, &mut rng).unwrap();
        assert_eq!(path.jumps(), 0);
        assert_eq!(path.states, vec![0]);
        assert_eq!(path.occupation_deviation(&pi, 5.0).unwrap()[0], 0.0);
    }

    #[test]
    fn constant_path_deviation() {
        let path = ChainPath {
            times: vec![0.0],
            states: vec![0],
            horizon: 2.0,
        };
        let pi = DVector::from_vec(vec![0.25, 0.75]);
        let g = path.occupation_deviation(&pi, 2.0).unwrap();
        assert_abs_diff_eq!(g[0], 2.0 * 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(g[1], -2.0 * 0.75, epsilon = 1e-15);
    }

    #[test]
    fn occupation_rejects_out_of_range() {
        let path = ChainPath {
            times: vec![0.0, 0.5],
            states: vec![0, 1],
            horizon: 1.0,
        };
        assert!(matches!(
            path.occupation(2, 1.5),
            Err(ChainError::TimeOutOfRange { .. })
        ));
        assert_eq!(path.state_at(0.5).unwrap(), 1);
        assert_eq!(path.state_at(0.49).unwrap(), 0);
        let occ = path.occupation(2, 0.8).unwrap();
        assert_abs_diff_eq!(occ[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(occ[1], 0.3, epsilon = 1e-15);
    }

    #[test]
    fn fixed_start_is_respected_and_checked() {
        let gen = GeneratorSpec::two_state(1.0).unwrap();
        let pi = stationary_distribution(&gen).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let path = sample_chain_path(&gen, &pi, 1.0, 1.0, ChainStart::Fixed(1), &mut rng).unwrap();
        assert_eq!(path.states[0], 1);
        assert!(sample_chain_path(&gen, &pi, 1.0, 1.0, ChainStart::Fixed(2), &mut rng).is_err());
        assert!(sample_chain_path(&gen, &pi, 0.0, 1.0, ChainStart::Fixed(0), &mut rng).is_err());
    }

    #[test]
    fn path_states_alternate_and_stay_in_horizon() {
        let gen = GeneratorSpec::two_state(2.0).unwrap();
        let pi = stationary_distribution(&gen).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let path = sample_chain_path(&gen, &pi, 3.0, 10.0, ChainStart::Stationary, &mut rng).unwrap();
        assert!(path.states.windows(2).all(|w| w[0] != w[1]));
        assert!(path.times.windows(2).all(|w| w[0] <= w[1]));
        assert!(*path.times.last().unwrap() <= 10.0);
    }
}
