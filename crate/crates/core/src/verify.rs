//! Monte Carlo checks of the convergence statements at finite n.
//!
//! Every check runs seeded, independently streamed replications (see
//! [`crate::replicate`]) and returns a [`VerificationReport`] whose verdicts
//! carry the measured value, the reference and the tolerance applied.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp, Exp1};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::ctmc::{sample_chain_path, ChainStart, ChainSummary, GeneratorSpec};
use crate::limits::{fluid_limit, integral_map, ou_limit};
use crate::network::{averaged_rates, reduce_model3, Model3Spec, NetworkSpec};
use crate::replicate::replicate;
use crate::simulate::{
    build_scaled_system, centered_scaled_path, decompose, initial_condition, simulate, InitRule, SimOptions,
};
use crate::stats;

/// Thresholds of all checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Upper bound for the fluid error at the largest n.
    pub fluid_cap: f64,
    /// Relative slack on the occupation covariance.
    pub occupation_relative: f64,
    /// Relative slack on the diffusion mean and covariance.
    pub diffusion_relative: f64,
    /// Multiplier on standard errors in every tolerance.
    pub stderr_multiplier: f64,
    pub bootstrap_resamples: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            fluid_cap: 0.05,
            occupation_relative: 0.10,
            diffusion_relative: 0.10,
            stderr_multiplier: 3.0,
            bootstrap_resamples: stats::BOOTSTRAP_RESAMPLES,
        }
    }
}

/// Replication settings shared by the checks.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub reps: usize,
    pub seed: u64,
    pub workers: Option<usize>,
    pub horizon: f64,
    pub grid_step: f64,
    pub chain_start: ChainStart,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub criterion: String,
    pub passed: bool,
    pub measured: f64,
    pub reference: f64,
    pub tolerance: f64,
}

impl Verdict {
    /// Pass when `|measured − reference| ≤ tolerance`.
    pub fn within(criterion: impl Into<String>, measured: f64, reference: f64, tolerance: f64) -> Self {
        Self {
            criterion: criterion.into(),
            passed: (measured - reference).abs() <= tolerance,
            measured,
            reference,
            tolerance,
        }
    }

    /// Pass when `measured < reference`, or both are zero.
    pub fn decreasing(criterion: impl Into<String>, measured: f64, reference: f64) -> Self {
        Self {
            criterion: criterion.into(),
            passed: measured < reference || (measured == 0.0 && reference == 0.0),
            measured,
            reference,
            tolerance: 0.0,
        }
    }

    /// Pass when `measured ≤ cap`.
    pub fn below(criterion: impl Into<String>, measured: f64, cap: f64) -> Self {
        Self {
            criterion: criterion.into(),
            passed: measured <= cap,
            measured,
            reference: cap,
            tolerance: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub check: String,
    pub params: Value,
    pub stats: Value,
    pub verdicts: Vec<Verdict>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.passed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    /// Aligned plain-text table of the verdicts.
    pub fn to_table(&self) -> String {
        let rows: Vec<[String; 5]> = self
            .verdicts
            .iter()
            .map(|v| {
                [
                    v.criterion.clone(),
                    format!("{:.6e}", v.measured),
                    format!("{:.6e}", v.reference),
                    format!("{:.6e}", v.tolerance),
                    if v.passed { "PASS" } else { "FAIL" }.to_string(),
                ]
            })
            .collect();
        let header = ["criterion", "measured", "reference", "tolerance", "verdict"];
        let mut widths = header.map(str::len);
        for r in &rows {
            for (w, cell) in widths.iter_mut().zip(r) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let mut out = String::new();
        let _ = writeln!(out, "check: {}", self.check);
        let line = |cells: &[&str]| {
            cells
                .iter()
                .zip(widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let _ = writeln!(out, "{}", line(&header));
        for r in &rows {
            let cells: Vec<&str> = r.iter().map(String::as_str).collect();
            let _ = writeln!(out, "{}", line(&cells));
        }
        let _ = writeln!(out, "overall: {}", if self.passed() { "PASS" } else { "FAIL" });
        out
    }
}

fn matrix_json(m: &DMatrix<f64>) -> Value {
    Value::from(m.row_iter().map(|r| r.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>())
}

fn vector_json(v: &DVector<f64>) -> Value {
    Value::from(v.iter().copied().collect::<Vec<_>>())
}

fn check_increasing(ns: &[u64]) -> crate::Result<()> {
    if ns.is_empty() || ns.windows(2).any(|w| w[1] <= w[0]) {
        return Err(crate::config::ConfigError::Invalid("n list must be nonempty and strictly increasing".into()).into());
    }
    Ok(())
}

/// Offsets keeping the per-job oracle independent of the network simulation.
const PER_JOB_STREAM: u64 = 0x5EED_0F0B_5000_0000;

fn bootstrap_seed(seed: u64) -> u64 {
    seed ^ 0xB0B0_5EED_0000_0001
}

/// `E[sup_t Σ_k |Q_k/n − ρ_k|]` over the output grid for each n.
///
/// `rho_offset` is added to every fluid component before comparison; a
/// nonzero value gives a negative control.
pub fn verify_fluid(
    spec: &NetworkSpec,
    alpha: f64,
    ns: &[u64],
    rho0: &DVector<f64>,
    init_rule: InitRule,
    run: &RunSettings,
    tol: &Tolerances,
    rho_offset: f64,
) -> crate::Result<VerificationReport> {
    check_increasing(ns)?;
    let summary = ChainSummary::compute(spec.generator())?;
    let avg = averaged_rates(spec, &summary.pi)?;
    let fluid = fluid_limit(&avg, rho0, run.horizon, run.grid_step)?;
    let reference: Vec<DVector<f64>> = fluid.rho.iter().map(|r| r.add_scalar(rho_offset)).collect();
    let mut estimates = Vec::with_capacity(ns.len());
    let mut per_n = Vec::new();
    for &n in ns {
        let sys = build_scaled_system(spec, alpha, n, init_rule)?;
        let nf = n as f64;
        let sups = replicate(run.reps, run.seed ^ n, run.workers, |_, rng| -> crate::Result<f64> {
            let q0 = initial_condition(&sys, rho0, rng)?;
            let opts = SimOptions {
                chain_start: run.chain_start,
                ..Default::default()
            };
            let b = simulate(&sys, &q0, run.horizon, &fluid.grid, &summary.pi, opts, rng)?;
            Ok(b.snapshots
                .iter()
                .zip(&reference)
                .map(|(s, r)| s.queues.iter().zip(r.iter()).map(|(&q, &x)| (q as f64 / nf - x).abs()).sum::<f64>())
                .fold(0.0, f64::max))
        })?;
        let (m, se) = (stats::mean(&sups), stats::stderr_of_mean(&sups));
        per_n.push(json!({
            "n": n,
            "mean_sup_error": m,
            "stderr": se,
            "median": stats::median(&sups),
            "q90": stats::quantile(&sups, 0.9),
        }));
        estimates.push(m);
    }
    let mut verdicts: Vec<Verdict> = ns
        .windows(2)
        .zip(estimates.windows(2))
        .map(|(nw, ew)| Verdict::decreasing(format!("sup error decreases n={}->{}", nw[0], nw[1]), ew[1], ew[0]))
        .collect();
    verdicts.push(Verdict::below(
        format!("sup error at n={} below cap", ns[ns.len() - 1]),
        estimates[estimates.len() - 1],
        tol.fluid_cap,
    ));
    Ok(VerificationReport {
        check: "fluid".into(),
        params: json!({
            "alpha": alpha,
            "ns": ns,
            "reps": run.reps,
            "horizon": run.horizon,
            "grid_step": run.grid_step,
            "seed": run.seed,
            "rho_offset": rho_offset,
        }),
        stats: json!({ "per_n": per_n }),
        verdicts,
    })
}

/// Covariance of `n^{α/2} G(t)` against `reference_scale · Σ t`.
pub fn verify_occupation(
    gen: &GeneratorSpec,
    alpha: f64,
    n: u64,
    t: f64,
    reps: usize,
    seed: u64,
    workers: Option<usize>,
    tol: &Tolerances,
    reference_scale: f64,
) -> crate::Result<VerificationReport> {
    crate::simulate::beta_exponent(alpha)?;
    if n == 0 {
        return Err(crate::simulate::SimulationError::InvalidScale.into());
    }
    let summary = ChainSummary::compute(gen)?;
    let timescale = (n as f64).powf(alpha);
    let scale = (n as f64).powf(alpha / 2.0);
    let samples = replicate(reps, seed, workers, |_, rng| -> crate::Result<DVector<f64>> {
        let path = sample_chain_path(gen, &summary.pi, timescale, t, ChainStart::Stationary, rng)?;
        Ok(path.occupation_deviation(&summary.pi, t)? * scale)
    })?;
    let cov = stats::covariance(&samples);
    let se = stats::bootstrap_covariance_stderr(&samples, tol.bootstrap_resamples, bootstrap_seed(seed));
    let reference = &summary.sigma * (t * reference_scale);
    let d = gen.states();
    let mut verdicts = Vec::new();
    for i in 0..d {
        for j in i..d {
            let r = reference[(i, j)];
            verdicts.push(Verdict::within(
                format!("cov[{},{}]", i + 1, j + 1),
                cov[(i, j)],
                r,
                tol.occupation_relative * r.abs() + tol.stderr_multiplier * se[(i, j)],
            ));
        }
    }
    Ok(VerificationReport {
        check: "occupation".into(),
        params: json!({
            "alpha": alpha,
            "ns": [n],
            "reps": reps,
            "t": t,
            "seed": seed,
            "reference_scale": reference_scale,
        }),
        stats: json!({
            "empirical_covariance": matrix_json(&cov),
            "bootstrap_stderr": matrix_json(&se),
            "reference": matrix_json(&reference),
            "mean": vector_json(&stats::mean_vector(&samples)),
        }),
        verdicts,
    })
}

/// Mean and covariance of `Q̂ⁿ` at the epochs closest to `epochs` against the
/// moment equations of the limit.
pub fn verify_diffusion(
    spec: &NetworkSpec,
    alpha: f64,
    n: u64,
    rho0: &DVector<f64>,
    init_rule: InitRule,
    run: &RunSettings,
    epochs: &[f64],
    tol: &Tolerances,
    reference_scale: f64,
) -> crate::Result<VerificationReport> {
    let limit = ou_limit(spec, alpha, rho0, init_rule, run.horizon, run.grid_step)?;
    let sys = build_scaled_system(spec, alpha, n, init_rule)?;
    let grid = &limit.fluid.grid;
    let epochs: Vec<f64> = if epochs.is_empty() { vec![run.horizon] } else { epochs.to_vec() };
    let idx: Vec<usize> = epochs
        .iter()
        .map(|&t| ((t / run.grid_step).round().max(0.0) as usize).min(grid.len() - 1))
        .collect();
    let samples = replicate(run.reps, run.seed, run.workers, |_, rng| -> crate::Result<Vec<DVector<f64>>> {
        let q0 = initial_condition(&sys, rho0, rng)?;
        let opts = SimOptions {
            chain_start: run.chain_start,
            ..Default::default()
        };
        let b = simulate(&sys, &q0, run.horizon, grid, &limit.summary.pi, opts, rng)?;
        let path = centered_scaled_path(&b, &limit.fluid, &sys)?;
        Ok(idx.iter().map(|&j| path[j].clone()).collect())
    })?;
    let l_count = spec.queues();
    let mut verdicts = Vec::new();
    let mut per_epoch = Vec::new();
    for (e, &j) in idx.iter().enumerate() {
        let at: Vec<DVector<f64>> = samples.iter().map(|s| s[e].clone()).collect();
        let mean = stats::mean_vector(&at);
        let mean_se = stats::mean_stderr(&at);
        let cov = stats::covariance(&at);
        let cov_se = stats::bootstrap_covariance_stderr(&at, tol.bootstrap_resamples, bootstrap_seed(run.seed) ^ j as u64);
        let m_ref = &limit.moments.mean_m[j];
        let v_ref = &limit.moments.cov_v[j] * reference_scale;
        let t = grid[j];
        for k in 0..l_count {
            let slack = tol.diffusion_relative * m_ref[k].abs().max(v_ref[(k, k)].abs().sqrt());
            verdicts.push(Verdict::within(
                format!("t={t} mean[{}]", k + 1),
                mean[k],
                m_ref[k],
                tol.stderr_multiplier * mean_se[k] + slack,
            ));
        }
        for k in 0..l_count {
            for l in k..l_count {
                verdicts.push(Verdict::within(
                    format!("t={t} cov[{},{}]", k + 1, l + 1),
                    cov[(k, l)],
                    v_ref[(k, l)],
                    tol.stderr_multiplier * cov_se[(k, l)] + tol.diffusion_relative * v_ref[(k, l)].abs(),
                ));
            }
        }
        per_epoch.push(json!({
            "t": t,
            "empirical_mean": vector_json(&mean),
            "mean_stderr": vector_json(&mean_se),
            "reference_mean": vector_json(m_ref),
            "empirical_covariance": matrix_json(&cov),
            "covariance_stderr": matrix_json(&cov_se),
            "reference_covariance": matrix_json(&v_ref),
        }));
    }
    Ok(VerificationReport {
        check: "diffusion".into(),
        params: json!({
            "alpha": alpha,
            "beta": sys.beta,
            "ns": [n],
            "reps": run.reps,
            "horizon": run.horizon,
            "grid_step": run.grid_step,
            "seed": run.seed,
            "reference_scale": reference_scale,
        }),
        stats: json!({ "per_epoch": per_epoch }),
        verdicts,
    })
}

/// Gap `sup_t ‖Q̂ⁿ − Q̃ⁿ‖_∞` of one replication, where `Q̃ⁿ = H(Q̂ⁿ(0), X̂ⁿ)`.
pub fn equivalence_gap<R: Rng + ?Sized>(
    sys: &crate::simulate::ScaledSystem,
    fluid: &crate::limits::FluidSolution,
    pi: &DVector<f64>,
    drift: &DMatrix<f64>,
    rho0: &DVector<f64>,
    horizon: f64,
    chain_start: ChainStart,
    rng: &mut R,
) -> crate::Result<f64> {
    let q0 = initial_condition(sys, rho0, rng)?;
    let opts = SimOptions {
        chain_start,
        ..Default::default()
    };
    let b = simulate(sys, &q0, horizon, &fluid.grid, pi, opts, rng)?;
    let qhat = centered_scaled_path(&b, fluid, sys)?;
    let parts = decompose(&b, sys, fluid, pi)?;
    let qtilde = integral_map(&qhat[0], &parts.xhat, drift, &fluid.grid)?;
    Ok(qhat.iter().zip(&qtilde).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max))
}

/// Median equivalence gap for each n.
pub fn verify_equivalence(
    spec: &NetworkSpec,
    alpha: f64,
    ns: &[u64],
    rho0: &DVector<f64>,
    init_rule: InitRule,
    run: &RunSettings,
) -> crate::Result<VerificationReport> {
    check_increasing(ns)?;
    let summary = ChainSummary::compute(spec.generator())?;
    let avg = averaged_rates(spec, &summary.pi)?;
    let fluid = fluid_limit(&avg, rho0, run.horizon, run.grid_step)?;
    let mut medians = Vec::new();
    let mut per_n = Vec::new();
    for &n in ns {
        let sys = build_scaled_system(spec, alpha, n, init_rule)?;
        let gaps = replicate(run.reps, run.seed ^ n, run.workers, |_, rng| {
            equivalence_gap(&sys, &fluid, &summary.pi, &avg.drift, rho0, run.horizon, run.chain_start, rng)
        })?;
        let med = stats::median(&gaps);
        per_n.push(json!({
            "n": n,
            "median_gap": med,
            "mean_gap": stats::mean(&gaps),
            "q10": stats::quantile(&gaps, 0.1),
            "q90": stats::quantile(&gaps, 0.9),
        }));
        medians.push(med);
    }
    let verdicts = ns
        .windows(2)
        .zip(medians.windows(2))
        .map(|(nw, mw)| Verdict::decreasing(format!("median gap decreases n={}->{}", nw[0], nw[1]), mw[1], mw[0]))
        .collect();
    Ok(VerificationReport {
        check: "equivalence".into(),
        params: json!({
            "alpha": alpha,
            "ns": ns,
            "reps": run.reps,
            "horizon": run.horizon,
            "grid_step": run.grid_step,
            "seed": run.seed,
        }),
        stats: json!({ "per_n": per_n }),
        verdicts,
    })
}

/// In-service population and departure count at `horizon` from the reduced
/// network, one pair per replication.
pub fn model3_network_samples(
    m3: &Model3Spec,
    horizon: f64,
    reps: usize,
    seed: u64,
    workers: Option<usize>,
) -> crate::Result<Vec<(f64, f64)>> {
    let spec = reduce_model3(m3);
    let d = m3.states();
    let summary = ChainSummary::compute(&m3.gen)?;
    let sys = build_scaled_system(&spec, 1.0, 1, InitRule::Floor)?;
    replicate(reps, seed, workers, |_, rng| -> crate::Result<(f64, f64)> {
        let b = simulate(&sys, &vec![0; d + 1], horizon, &[0.0, horizon], &summary.pi, SimOptions::default(), rng)?;
        let q = &b.snapshots[b.snapshots.len() - 1].queues;
        Ok((q[..d].iter().sum::<u64>() as f64, q[d] as f64))
    })
}

/// Same quantities from a per-job simulation: each job draws a requirement
/// `E ~ Exp(κ*(type))` and is served at speed `μ*(J(t))`, so it is still
/// present at `T` iff `∫_a^T μ*(J) ds < E`.
pub fn model3_per_job_samples(
    m3: &Model3Spec,
    horizon: f64,
    reps: usize,
    seed: u64,
    workers: Option<usize>,
) -> crate::Result<Vec<(f64, f64)>> {
    let summary = ChainSummary::compute(&m3.gen)?;
    replicate(reps, seed, workers, |_, rng| -> crate::Result<(f64, f64)> {
        let path = sample_chain_path(&m3.gen, &summary.pi, 1.0, horizon, ChainStart::Stationary, rng)?;
        // Work done by the server by the start of each sojourn and by T.
        let mut work_at = Vec::with_capacity(path.times.len());
        let mut work = 0.0;
        for (idx, &start) in path.times.iter().enumerate() {
            work_at.push(work);
            let end = path.times.get(idx + 1).copied().unwrap_or(horizon);
            work += m3.mu_star[path.states[idx]] * (end - start);
        }
        let total_work = work;
        let (mut present, mut gone) = (0u64, 0u64);
        for (idx, &start) in path.times.iter().enumerate() {
            let i = path.states[idx];
            let end = path.times.get(idx + 1).copied().unwrap_or(horizon);
            let rate = m3.lambda_star[i];
            if rate <= 0.0 {
                continue;
            }
            let mut a = start;
            loop {
                let gap: f64 = Exp1.sample(rng);
                a += gap / rate;
                if a >= end {
                    break;
                }
                let kappa = m3.kappa_star[i];
                let served = total_work - (work_at[idx] + m3.mu_star[i] * (a - start));
                let stays = kappa <= 0.0 || served < Exp::new(kappa).expect("positive rate").sample(rng);
                if stays {
                    present += 1;
                } else {
                    gone += 1;
                }
            }
        }
        Ok((present as f64, gone as f64))
    })
}

/// Reduced network against the per-job simulation: means and variances of
/// the in-service population and the departure count.
pub fn verify_model3(
    m3: &Model3Spec,
    horizon: f64,
    reps: usize,
    seed: u64,
    workers: Option<usize>,
    tol: &Tolerances,
) -> crate::Result<VerificationReport> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(crate::simulate::SimulationError::InvalidHorizon(horizon).into());
    }
    let net = model3_network_samples(m3, horizon, reps, seed, workers)?;
    let job = model3_per_job_samples(m3, horizon, reps, seed ^ PER_JOB_STREAM, workers)?;
    let mut verdicts = Vec::new();
    let mut summary = serde_json::Map::new();
    for (name, pick) in [("in_service", 0usize), ("departures", 1usize)] {
        let a: Vec<f64> = net.iter().map(|p| if pick == 0 { p.0 } else { p.1 }).collect();
        let b: Vec<f64> = job.iter().map(|p| if pick == 0 { p.0 } else { p.1 }).collect();
        let (ma, mb) = (stats::mean(&a), stats::mean(&b));
        let (sa, sb) = (stats::stderr_of_mean(&a), stats::stderr_of_mean(&b));
        let (va, vb) = (stats::variance(&a), stats::variance(&b));
        let (sva, svb) = (stats::stderr_of_variance(&a), stats::stderr_of_variance(&b));
        let k = tol.stderr_multiplier;
        verdicts.push(Verdict::within(format!("{name} mean"), ma, mb, k * sa.hypot(sb)));
        verdicts.push(Verdict::within(format!("{name} variance"), va, vb, k * sva.hypot(svb)));
        summary.insert(
            name.into(),
            json!({
                "network_mean": ma, "network_mean_stderr": sa,
                "per_job_mean": mb, "per_job_mean_stderr": sb,
                "network_variance": va, "network_variance_stderr": sva,
                "per_job_variance": vb, "per_job_variance_stderr": svb,
            }),
        );
    }
    Ok(VerificationReport {
        check: "model3".into(),
        params: json!({
            "states": m3.states(),
            "reps": reps,
            "horizon": horizon,
            "seed": seed,
        }),
        stats: Value::Object(summary),
        verdicts,
    })
}
