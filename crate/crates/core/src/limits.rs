//! Deterministic limit objects: the fluid path, the integral map, the
//! Ornstein-Uhlenbeck drift and diffusion, their moment equations and an
//! Euler-Maruyama sampler of the limiting SDE.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctmc::ChainSummary;
use crate::network::{AveragedRates, NetworkSpec};
use crate::simulate::{beta_exponent, InitRule};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LimitsError {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("diffusion matrix is not positive semidefinite at epoch {epoch} (min eigenvalue {min_eigenvalue:e})")]
    NonPsdDiffusion { epoch: usize, min_eigenvalue: f64 },
    #[error("invalid step {step} for horizon {horizon}")]
    InvalidStep { step: f64, horizon: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("alpha must be positive and finite, got {0}")]
    InvalidAlpha(f64),
}

/// Relative tolerance for a horizon that is not an exact multiple of the step.
const GRID_SLACK: f64 = 1e-9;

/// Epochs `0, h, 2h, …, T`. The horizon must be a multiple of the step.
pub fn uniform_grid(horizon: f64, step: f64) -> Result<Vec<f64>, LimitsError> {
    let bad = LimitsError::InvalidStep { step, horizon };
    if !(step > 0.0 && step.is_finite() && horizon.is_finite() && horizon >= step * (1.0 - GRID_SLACK)) {
        return Err(bad);
    }
    let cells = (horizon / step).round();
    if (cells * step - horizon).abs() > GRID_SLACK * horizon {
        return Err(bad);
    }
    Ok((0..=cells as usize).map(|j| j as f64 * step).collect())
}

/// Step of a uniform grid, or an error if the grid is not uniform.
pub fn grid_step(grid: &[f64]) -> Result<f64, LimitsError> {
    if grid.len() < 2 {
        return Err(LimitsError::GridMismatch("grid needs at least two epochs".into()));
    }
    let h = grid[1] - grid[0];
    if !(h > 0.0) {
        return Err(LimitsError::GridMismatch("grid must be increasing".into()));
    }
    for (j, w) in grid.windows(2).enumerate() {
        if ((w[1] - w[0]) - h).abs() > GRID_SLACK * (1.0 + w[1].abs()) {
            return Err(LimitsError::GridMismatch(format!("grid is not uniform at epoch {}", j + 1)));
        }
    }
    Ok(h)
}

fn check_len(what: &str, got: usize, want: usize) -> Result<(), LimitsError> {
    if got != want {
        return Err(LimitsError::GridMismatch(format!("{what} has {got} epochs, grid has {want}")));
    }
    Ok(())
}

/// Fluid path on a uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluidSolution {
    pub grid: Vec<f64>,
    pub rho: Vec<DVector<f64>>,
    pub step: f64,
}

/// Classical RK4 for `ρ' = λ^π + M ρ`, `ρ(0) = rho0`.
pub fn fluid_limit(
    avg: &AveragedRates,
    rho0: &DVector<f64>,
    horizon: f64,
    step: f64,
) -> Result<FluidSolution, LimitsError> {
    let l_count = avg.queues();
    if rho0.len() != l_count {
        return Err(LimitsError::DimensionMismatch(format!(
            "rho0 has {} entries, network has {l_count} queues",
            rho0.len()
        )));
    }
    let grid = uniform_grid(horizon, step)?;
    let m = &avg.drift;
    let f = |y: &DVector<f64>| &avg.lambda_pi + m * y;
    let mut rho = Vec::with_capacity(grid.len());
    let mut y = rho0.clone();
    rho.push(y.clone());
    for _ in 1..grid.len() {
        let k1 = f(&y);
        let k2 = f(&(&y + &k1 * (0.5 * step)));
        let k3 = f(&(&y + &k2 * (0.5 * step)));
        let k4 = f(&(&y + &k3 * step));
        y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (step / 6.0);
        rho.push(y.clone());
    }
    Ok(FluidSolution { grid, rho, step })
}

const PADE6: [f64; 7] = [
    1.0,
    1.0 / 2.0,
    5.0 / 44.0,
    1.0 / 66.0,
    1.0 / 792.0,
    1.0 / 15840.0,
    1.0 / 665280.0,
];

/// Matrix exponential by scaling and squaring with a diagonal (6,6) Padé
/// approximant, applied once `‖A/2^s‖₁ ≤ 1/2`.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    assert!(a.is_square(), "expm needs a square matrix");
    let n = a.nrows();
    let norm = (0..n).map(|j| a.column(j).iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max);
    let s = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let scaled = a / 2f64.powi(s);
    let mut num = DMatrix::identity(n, n);
    let mut den = DMatrix::identity(n, n);
    let mut power = DMatrix::identity(n, n);
    for (j, &c) in PADE6.iter().enumerate().skip(1) {
        power = &power * &scaled;
        num += &power * c;
        den += &power * if j % 2 == 0 { c } else { -c };
    }
    let mut r = den.lu().solve(&num).expect("Padé denominator is nonsingular for ‖A‖ ≤ 1/2");
    for _ in 0..s {
        r = &r * &r;
    }
    r
}

/// Solves `y(t) = b + x(t) + ∫₀ᵗ M y(s) ds` for `x` piecewise constant between
/// the (uniform) grid epochs.
///
/// With `z = y − x`, each cell is a linear ODE `z' = M z + M x_j`, whose exact
/// step is `z ← e^{Mh} z + (e^{Mh} − I) x_j`.
pub fn integral_map(
    b: &DVector<f64>,
    x: &[DVector<f64>],
    m: &DMatrix<f64>,
    grid: &[f64],
) -> Result<Vec<DVector<f64>>, LimitsError> {
    check_len("input path", x.len(), grid.len())?;
    if grid.len() == 1 {
        return Ok(vec![b + &x[0]]);
    }
    let h = grid_step(grid)?;
    let l_count = b.len();
    if m.nrows() != l_count || m.ncols() != l_count || x.iter().any(|v| v.len() != l_count) {
        return Err(LimitsError::DimensionMismatch("b, x and M must share one dimension".into()));
    }
    let e = expm(&(m * h));
    let e_minus_i = &e - DMatrix::identity(l_count, l_count);
    let mut z = b.clone();
    let mut y = Vec::with_capacity(grid.len());
    y.push(&z + &x[0]);
    for w in x.windows(2) {
        z = &e * &z + &e_minus_i * &w[0];
        y.push(&z + &w[1]);
    }
    Ok(y)
}

/// `b(t) = λ̂^π + M̂ ρ(t)` where `M̂` is the drift matrix built from `μ̂^π`.
pub fn ou_drift(avg: &AveragedRates, fluid: &FluidSolution) -> Vec<DVector<f64>> {
    let m_hat = crate::network::drift_matrix(&avg.mu_hat_pi);
    fluid.rho.iter().map(|rho| &avg.lambda_hat_pi + &m_hat * rho).collect()
}

/// Which noise sources enter the limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Regime {
    /// `α ≥ 1`: the Poisson streams contribute.
    pub poisson: bool,
    /// `α ≤ 1`: the background fluctuations contribute.
    pub modulation: bool,
}

impl Regime {
    pub fn from_alpha(alpha: f64) -> Result<Self, LimitsError> {
        beta_exponent(alpha).map_err(|_| LimitsError::InvalidAlpha(alpha))?;
        Ok(Self {
            poisson: alpha >= 1.0,
            modulation: alpha <= 1.0,
        })
    }
}

/// Covariance rate of the centred arrival and transfer streams at fluid level `rho`.
pub fn poisson_diffusion(avg: &AveragedRates, rho: &DVector<f64>) -> DMatrix<f64> {
    let l_count = avg.queues();
    let mu = &avg.mu_pi;
    let mut a = DMatrix::from_diagonal(&avg.lambda_pi);
    for k in 0..l_count {
        for l in (0..l_count).filter(|&l| l != k) {
            let flow = mu[(k, l)] * rho[k];
            a[(k, k)] += flow;
            a[(l, l)] += flow;
            a[(k, l)] -= flow;
            a[(l, k)] -= flow;
        }
    }
    a
}

/// `W(ρ)` with row `k` equal to `λ_k + Σ_l μ_lk ρ_l − Σ_l μ_kl ρ_k` over states.
pub fn modulation_loading(spec: &NetworkSpec, rho: &DVector<f64>) -> DMatrix<f64> {
    let (l_count, d) = (spec.queues(), spec.states());
    DMatrix::from_fn(l_count, d, |k, i| {
        let mu = spec.mu_in_state(i);
        let mut w = spec.lambda(k, i);
        for l in (0..l_count).filter(|&l| l != k) {
            w += mu[(l, k)] * rho[l] - mu[(k, l)] * rho[k];
        }
        w
    })
}

/// `W Σ Wᵀ`, the covariance rate contributed by the background chain.
pub fn modulation_diffusion(spec: &NetworkSpec, sigma: &DMatrix<f64>, rho: &DVector<f64>) -> DMatrix<f64> {
    let w = modulation_loading(spec, rho);
    let a = &w * sigma * w.transpose();
    (&a + a.transpose()) * 0.5
}

/// `A(t) = 1{α≥1} A_P(t) + 1{α≤1} W(t) Σ W(t)ᵀ` along the fluid path.
pub fn ou_diffusion(
    spec: &NetworkSpec,
    avg: &AveragedRates,
    summary: &ChainSummary,
    fluid: &FluidSolution,
    alpha: f64,
) -> Result<Vec<DMatrix<f64>>, LimitsError> {
    let regime = Regime::from_alpha(alpha)?;
    if summary.states() != spec.states() || avg.queues() != spec.queues() {
        return Err(LimitsError::DimensionMismatch(
            "chain summary, averaged rates and network disagree".into(),
        ));
    }
    let l_count = spec.queues();
    Ok(fluid
        .rho
        .iter()
        .map(|rho| {
            let mut a = DMatrix::zeros(l_count, l_count);
            if regime.poisson {
                a += poisson_diffusion(avg, rho);
            }
            if regime.modulation {
                a += modulation_diffusion(spec, &summary.sigma, rho);
            }
            a
        })
        .collect())
}

/// Initial covariance of the centred process: zero for a deterministic start,
/// `diag(ρ(0))` for Poisson initial populations when `β = 1/2`.
pub fn initial_covariance(rule: InitRule, beta: f64, rho0: &DVector<f64>) -> DMatrix<f64> {
    match rule {
        InitRule::Poisson if beta == 0.5 => DMatrix::from_diagonal(rho0),
        _ => DMatrix::zeros(rho0.len(), rho0.len()),
    }
}

/// Mean and covariance of the limiting linear SDE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuMoments {
    pub grid: Vec<f64>,
    pub drift_b: Vec<DVector<f64>>,
    pub diff_a: Vec<DMatrix<f64>>,
    pub mean_m: Vec<DVector<f64>>,
    pub cov_v: Vec<DMatrix<f64>>,
    pub regime: Option<Regime>,
    /// Largest `|V − Vᵀ|` seen before each symmetrization.
    pub max_asymmetry: f64,
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let sym = (a + a.transpose()) * 0.5;
    sym.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
}

/// Tolerance below zero accepted for the spectrum of a diffusion matrix.
pub const PSD_TOLERANCE: f64 = 1e-9;

fn check_psd(a: &[DMatrix<f64>]) -> Result<(), LimitsError> {
    for (epoch, m) in a.iter().enumerate() {
        let scale = 1.0 + m.amax();
        let min_eigenvalue = min_eigenvalue(m);
        if min_eigenvalue < -PSD_TOLERANCE * scale || !min_eigenvalue.is_finite() {
            return Err(LimitsError::NonPsdDiffusion { epoch, min_eigenvalue });
        }
    }
    Ok(())
}

/// RK4 for `m' = b + M m` and `V' = M V + V Mᵀ + A`, with `b` and `A`
/// interpolated linearly between epochs.
pub fn ou_moments(
    b: &[DVector<f64>],
    a: &[DMatrix<f64>],
    m: &DMatrix<f64>,
    m0: &DVector<f64>,
    v0: &DMatrix<f64>,
    grid: &[f64],
) -> Result<OuMoments, LimitsError> {
    check_len("drift path", b.len(), grid.len())?;
    check_len("diffusion path", a.len(), grid.len())?;
    let l_count = m0.len();
    if m.shape() != (l_count, l_count) || v0.shape() != (l_count, l_count) {
        return Err(LimitsError::DimensionMismatch("M, m0 and V0 must share one dimension".into()));
    }
    check_psd(a)?;
    let mut mean_m = Vec::with_capacity(grid.len());
    let mut cov_v = Vec::with_capacity(grid.len());
    let mut mean = m0.clone();
    let mut cov = (v0 + v0.transpose()) * 0.5;
    mean_m.push(mean.clone());
    cov_v.push(cov.clone());
    let mut max_asymmetry: f64 = 0.0;
    if grid.len() > 1 {
        let h = grid_step(grid)?;
        let mt = m.transpose();
        let fm = |y: &DVector<f64>, bb: &DVector<f64>| bb + m * y;
        let fv = |v: &DMatrix<f64>, aa: &DMatrix<f64>| m * v + v * &mt + aa;
        for j in 0..grid.len() - 1 {
            let b_mid = (&b[j] + &b[j + 1]) * 0.5;
            let a_mid = (&a[j] + &a[j + 1]) * 0.5;
            let k1 = fm(&mean, &b[j]);
            let k2 = fm(&(&mean + &k1 * (0.5 * h)), &b_mid);
            let k3 = fm(&(&mean + &k2 * (0.5 * h)), &b_mid);
            let k4 = fm(&(&mean + &k3 * h), &b[j + 1]);
            mean += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);

            let c1 = fv(&cov, &a[j]);
            let c2 = fv(&(&cov + &c1 * (0.5 * h)), &a_mid);
            let c3 = fv(&(&cov + &c2 * (0.5 * h)), &a_mid);
            let c4 = fv(&(&cov + &c3 * h), &a[j + 1]);
            cov += (c1 + c2 * 2.0 + c3 * 2.0 + c4) * (h / 6.0);
            max_asymmetry = max_asymmetry.max((&cov - cov.transpose()).amax());
            cov = (&cov + cov.transpose()) * 0.5;
            mean_m.push(mean.clone());
            cov_v.push(cov.clone());
        }
    }
    Ok(OuMoments {
        grid: grid.to_vec(),
        drift_b: b.to_vec(),
        diff_a: a.to_vec(),
        mean_m,
        cov_v,
        regime: None,
        max_asymmetry,
    })
}

/// All limit objects of one scaled network at once.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitBundle {
    pub summary: ChainSummary,
    pub averaged: AveragedRates,
    pub fluid: FluidSolution,
    pub moments: OuMoments,
}

/// Fluid path, drift, diffusion and moments for `spec` at exponent `alpha`,
/// with the initial covariance given by the initial-population rule.
pub fn ou_limit(
    spec: &NetworkSpec,
    alpha: f64,
    rho0: &DVector<f64>,
    init_rule: InitRule,
    horizon: f64,
    step: f64,
) -> crate::Result<LimitBundle> {
    let summary = ChainSummary::compute(spec.generator())?;
    let averaged = crate::network::averaged_rates(spec, &summary.pi)?;
    let fluid = fluid_limit(&averaged, rho0, horizon, step)?;
    let b = ou_drift(&averaged, &fluid);
    let a = ou_diffusion(spec, &averaged, &summary, &fluid, alpha)?;
    let beta = beta_exponent(alpha)?;
    let v0 = initial_covariance(init_rule, beta, rho0);
    let mut moments = ou_moments(&b, &a, &averaged.drift, &DVector::zeros(rho0.len()), &v0, &fluid.grid)?;
    moments.regime = Some(Regime::from_alpha(alpha)?);
    Ok(LimitBundle {
        summary,
        averaged,
        fluid,
        moments,
    })
}

/// Lower-triangular `L` with `L Lᵀ = A` for symmetric positive semidefinite `A`.
///
/// Pivots within `tol` of zero are treated as exact zeros, which factors
/// singular matrices without adding jitter.
pub fn psd_cholesky(a: &DMatrix<f64>, tol: f64) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let pivot = a[(j, j)] - (0..j).map(|k| l[(j, k)] * l[(j, k)]).sum::<f64>();
        if pivot < -tol {
            return None;
        }
        if pivot <= tol {
            for i in j + 1..n {
                let rest = a[(i, j)] - (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum::<f64>();
                if rest.abs() > tol.sqrt() {
                    return None;
                }
            }
            continue;
        }
        let root = pivot.sqrt();
        l[(j, j)] = root;
        for i in j + 1..n {
            l[(i, j)] = (a[(i, j)] - (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum::<f64>()) / root;
        }
    }
    Some(l)
}

/// Euler-Maruyama sampler of `dX = (b(t) + M X) dt + A(t)^{1/2} dB` on a uniform grid.
///
/// Square roots of `A` at the left end of every step are factored once.
#[derive(Debug, Clone)]
pub struct OuSampler {
    dim: usize,
    step: f64,
    drift: Vec<f64>,
    offsets: Vec<f64>,
    factors: Vec<f64>,
    grid: Vec<f64>,
}

impl OuSampler {
    pub fn new(
        b: &[DVector<f64>],
        a: &[DMatrix<f64>],
        m: &DMatrix<f64>,
        grid: &[f64],
    ) -> Result<Self, LimitsError> {
        check_len("drift path", b.len(), grid.len())?;
        check_len("diffusion path", a.len(), grid.len())?;
        let step = grid_step(grid)?;
        let dim = m.nrows();
        let sqrt_h = step.sqrt();
        let mut factors = Vec::with_capacity((grid.len() - 1) * dim * dim);
        let mut offsets = Vec::with_capacity((grid.len() - 1) * dim);
        for (epoch, (aj, bj)) in a.iter().zip(b).take(grid.len() - 1).enumerate() {
            let tol = 1e-12 * (1.0 + aj.amax());
            let chol = psd_cholesky(aj, tol).ok_or_else(|| LimitsError::NonPsdDiffusion {
                epoch,
                min_eigenvalue: min_eigenvalue(aj),
            })?;
            factors.extend(chol.transpose().iter().map(|x| x * sqrt_h));
            offsets.extend(bj.iter().map(|x| x * step));
        }
        let drift = m.transpose().iter().map(|x| x * step).collect();
        Ok(Self {
            dim,
            step,
            drift,
            offsets,
            factors,
            grid: grid.to_vec(),
        })
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    #[inline]
    fn advance<R: Rng + ?Sized>(&self, j: usize, x: &mut [f64], next: &mut [f64], noise: &mut [f64], rng: &mut R) {
        let n = self.dim;
        for z in noise.iter_mut() {
            *z = StandardNormal.sample(rng);
        }
        let f = &self.factors[j * n * n..(j + 1) * n * n];
        let o = &self.offsets[j * n..(j + 1) * n];
        for r in 0..n {
            let mut v = x[r] + o[r];
            let drow = &self.drift[r * n..(r + 1) * n];
            let frow = &f[r * n..(r + 1) * n];
            for c in 0..n {
                v += drow[c] * x[c] + frow[c] * noise[c];
            }
            next[r] = v;
        }
        x.copy_from_slice(next);
    }

    /// Value at the final epoch only.
    pub fn sample_final<R: Rng + ?Sized>(&self, x0: &DVector<f64>, rng: &mut R) -> DVector<f64> {
        let n = self.dim;
        let mut x = x0.as_slice().to_vec();
        let (mut next, mut noise) = (vec![0.0; n], vec![0.0; n]);
        for j in 0..self.grid.len() - 1 {
            self.advance(j, &mut x, &mut next, &mut noise, rng);
        }
        DVector::from_vec(x)
    }

    /// Whole path on the grid.
    pub fn sample_path<R: Rng + ?Sized>(&self, x0: &DVector<f64>, rng: &mut R) -> Vec<DVector<f64>> {
        let n = self.dim;
        let mut x = x0.as_slice().to_vec();
        let (mut next, mut noise) = (vec![0.0; n], vec![0.0; n]);
        let mut path = Vec::with_capacity(self.grid.len());
        path.push(x0.clone());
        for j in 0..self.grid.len() - 1 {
            self.advance(j, &mut x, &mut next, &mut noise, rng);
            path.push(DVector::from_column_slice(&x));
        }
        path
    }
}
