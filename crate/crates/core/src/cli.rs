//! Command dispatch for the `mmq` binary.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde_json::json;

use crate::config::{network_block, ConfigError, Format, ResolvedConfig, RunConfig};
use crate::ctmc::ChainSummary;
use crate::limits::{fluid_limit, ou_limit, uniform_grid};
use crate::network::averaged_rates;
use crate::output;
use crate::replicate::replicate;
use crate::simulate::{build_scaled_system, initial_condition, simulate, SimOptions};
use crate::verify::{self, VerificationReport};
use crate::{Error, Result};

/// Exit status for success and passing checks.
pub const EXIT_OK: i32 = 0;
/// Exit status for a failed verification.
pub const EXIT_FAIL: i32 = 1;
/// Exit status for invalid input.
pub const EXIT_INPUT: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Validate,
    ChainSummary,
    Fluid,
    OuMoments,
    Simulate,
    VerifyFluid,
    VerifyOccupation,
    VerifyDiffusion,
    VerifyEquivalence,
    VerifyModel3,
    ReduceModel3,
}

impl Command {
    pub const ALL: [Command; 11] = [
        Command::Validate,
        Command::ChainSummary,
        Command::Fluid,
        Command::OuMoments,
        Command::Simulate,
        Command::VerifyFluid,
        Command::VerifyOccupation,
        Command::VerifyDiffusion,
        Command::VerifyEquivalence,
        Command::VerifyModel3,
        Command::ReduceModel3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::ChainSummary => "chain-summary",
            Command::Fluid => "fluid",
            Command::OuMoments => "ou-moments",
            Command::Simulate => "simulate",
            Command::VerifyFluid => "verify-fluid",
            Command::VerifyOccupation => "verify-occupation",
            Command::VerifyDiffusion => "verify-diffusion",
            Command::VerifyEquivalence => "verify-equivalence",
            Command::VerifyModel3 => "verify-model3",
            Command::ReduceModel3 => "reduce-model3",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Command::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Command::ALL.iter().map(|c| c.name()).collect();
            format!("unknown command `{s}`; expected one of {}", names.join(", "))
        })
    }
}

/// Command-line values that replace config fields.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub reps: Option<usize>,
    pub n: Option<u64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(out) = &self.out {
            cfg.output.directory = out.to_string_lossy().into_owned();
        }
        if let Some(seed) = self.seed {
            cfg.run.seed = seed;
        }
        if let Some(reps) = self.reps {
            cfg.run.reps = reps;
        }
        if let Some(n) = self.n {
            cfg.scaling.n = Some(n);
        }
    }
}

/// What a command produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub exit_code: i32,
    /// Human-readable summary for standard output.
    pub message: String,
    pub files: Vec<PathBuf>,
    pub report: Option<VerificationReport>,
}

impl Outcome {
    fn success(message: String, files: Vec<PathBuf>) -> Self {
        Self {
            exit_code: EXIT_OK,
            message,
            files,
            report: None,
        }
    }
}

/// Exit status for an error raised while running a command.
pub fn exit_code_for(_err: &Error) -> i32 {
    EXIT_INPUT
}

/// Parses `text`, applies the overrides, logs the resolved config and runs `cmd`.
pub fn run_with_text(cmd: Command, text: &str, overrides: &Overrides) -> Result<Outcome> {
    let mut cfg = RunConfig::from_json(text)?;
    overrides.apply(&mut cfg);
    let resolved = cfg.resolve()?;
    log::info!("resolved config:\n{}", resolved.config.to_json());
    run_command(cmd, &resolved)
}

pub fn run_file(cmd: Command, path: &Path, overrides: &Overrides) -> Result<Outcome> {
    run_with_text(cmd, &std::fs::read_to_string(path)?, overrides)
}

fn fmt_vector(v: &DVector<f64>) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.12}")).collect();
    format!("[{}]", parts.join(", "))
}

fn fmt_matrix(m: &DMatrix<f64>) -> String {
    let rows: Vec<String> = m
        .row_iter()
        .map(|r| format!("  [{}]", r.iter().map(|x| format!("{x:.12}")).collect::<Vec<_>>().join(", ")))
        .collect();
    rows.join("\n")
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn run_command(cmd: Command, rc: &ResolvedConfig) -> Result<Outcome> {
    let cfg = &rc.config;
    let out_dir = PathBuf::from(&cfg.output.directory);
    let spec = &rc.spec;
    match cmd {
        Command::Validate => Ok(Outcome::success(
            format!(
                "valid configuration\nL = {}\nd = {}\nalpha = {}\nbeta = {}\n",
                spec.queues(),
                spec.states(),
                rc.alpha(),
                rc.beta
            ),
            vec![],
        )),
        Command::ChainSummary => {
            let s = ChainSummary::compute_with(spec.generator(), &cfg.tolerances.chain)?;
            let mut files = vec![];
            if cfg.output.wants(Format::Json) {
                let body = json!({
                    "pi": s.pi.iter().copied().collect::<Vec<_>>(),
                    "deviation": matrix_rows(&s.deviation),
                    "sigma": matrix_rows(&s.sigma),
                });
                let text = serde_json::to_string_pretty(&body).expect("summary serializes");
                files.push(output::write_file(&out_dir.join("chain_summary.json"), |w| writeln!(w, "{text}"))?);
            }
            Ok(Outcome::success(
                format!(
                    "pi = {}\nD =\n{}\nSigma =\n{}\n",
                    fmt_vector(&s.pi),
                    fmt_matrix(&s.deviation),
                    fmt_matrix(&s.sigma)
                ),
                files,
            ))
        }
        Command::Fluid => {
            let s = ChainSummary::compute_with(spec.generator(), &cfg.tolerances.chain)?;
            let avg = averaged_rates(spec, &s.pi)?;
            let fluid = fluid_limit(&avg, &rc.rho0, cfg.run.horizon, cfg.run.grid_step)?;
            let mut files = vec![];
            if cfg.output.wants(Format::Csv) {
                files.push(output::write_file(&out_dir.join("fluid.csv"), |w| output::write_fluid_csv(w, &fluid))?);
            }
            let last = fluid.rho.last().expect("grid has epochs");
            Ok(Outcome::success(format!("rho({}) = {}\n", cfg.run.horizon, fmt_vector(last)), files))
        }
        Command::OuMoments => {
            let lim = ou_limit(spec, rc.alpha(), &rc.rho0, cfg.scaling.init_rule, cfg.run.horizon, cfg.run.grid_step)?;
            let mut files = vec![];
            if cfg.output.wants(Format::Csv) {
                files.push(output::write_file(&out_dir.join("moments.csv"), |w| {
                    output::write_moments_csv(w, &lim.moments)
                })?);
            }
            Ok(Outcome::success(
                format!(
                    "m({t}) = {}\nV({t}) =\n{}\n",
                    fmt_vector(lim.moments.mean_m.last().expect("grid has epochs")),
                    fmt_matrix(lim.moments.cov_v.last().expect("grid has epochs")),
                    t = cfg.run.horizon
                ),
                files,
            ))
        }
        Command::Simulate => {
            let n = rc.n()?;
            let sys = build_scaled_system(spec, rc.alpha(), n, cfg.scaling.init_rule)?;
            let s = ChainSummary::compute_with(spec.generator(), &cfg.tolerances.chain)?;
            let grid = uniform_grid(cfg.run.horizon, cfg.run.grid_step)?;
            let opts = SimOptions {
                chain_start: rc.chain_start(),
                ..Default::default()
            };
            let bundles = replicate(cfg.run.reps, cfg.run.seed, cfg.run.workers, |_, rng| -> Result<_> {
                let q0 = initial_condition(&sys, &rc.rho0, rng)?;
                Ok(simulate(&sys, &q0, cfg.run.horizon, &grid, &s.pi, opts, rng)?)
            })?;
            let mut files = vec![];
            if cfg.output.wants(Format::Csv) {
                for (rep, b) in bundles.iter().enumerate() {
                    let path = out_dir.join(output::trajectory_file_name(rep));
                    files.push(output::write_file(&path, |w| output::write_trajectory_csv(w, b))?);
                }
            }
            let events: u64 = bundles.iter().map(|b| b.queue_events).sum();
            Ok(Outcome::success(
                format!("simulated {} replications at n = {n} ({events} queue events)\n", bundles.len()),
                files,
            ))
        }
        Command::VerifyFluid => {
            let report = verify::verify_fluid(
                spec,
                rc.alpha(),
                &rc.n_list()?,
                &rc.rho0,
                cfg.scaling.init_rule,
                &rc.run_settings(),
                &cfg.tolerances.checks,
                cfg.checks.fluid_offset,
            )?;
            finish_report(report, rc, &out_dir)
        }
        Command::VerifyOccupation => {
            let report = verify::verify_occupation(
                spec.generator(),
                rc.alpha(),
                rc.n()?,
                cfg.checks.occupation_time.unwrap_or(cfg.run.horizon),
                cfg.run.reps,
                cfg.run.seed,
                cfg.run.workers,
                &cfg.tolerances.checks,
                cfg.checks.reference_scale,
            )?;
            finish_report(report, rc, &out_dir)
        }
        Command::VerifyDiffusion => {
            let report = verify::verify_diffusion(
                spec,
                rc.alpha(),
                rc.n()?,
                &rc.rho0,
                cfg.scaling.init_rule,
                &rc.run_settings(),
                &cfg.checks.epochs,
                &cfg.tolerances.checks,
                cfg.checks.reference_scale,
            )?;
            finish_report(report, rc, &out_dir)
        }
        Command::VerifyEquivalence => {
            let report = verify::verify_equivalence(
                spec,
                rc.alpha(),
                &rc.n_list()?,
                &rc.rho0,
                cfg.scaling.init_rule,
                &rc.run_settings(),
            )?;
            finish_report(report, rc, &out_dir)
        }
        Command::VerifyModel3 => {
            let m3 = rc.model3.as_ref().ok_or_else(|| ConfigError::MissingRequired("model3".into()))?;
            let report = verify::verify_model3(
                m3,
                cfg.run.horizon,
                cfg.run.reps,
                cfg.run.seed,
                cfg.run.workers,
                &cfg.tolerances.checks,
            )?;
            finish_report(report, rc, &out_dir)
        }
        Command::ReduceModel3 => {
            if rc.model3.is_none() {
                return Err(ConfigError::MissingRequired("model3".into()).into());
            }
            let block = network_block(spec);
            let text = serde_json::to_string_pretty(&block).expect("network serializes");
            let path = output::write_file(&out_dir.join("reduced_network.json"), |w| writeln!(w, "{text}"))?;
            Ok(Outcome::success(format!("{text}\n"), vec![path]))
        }
    }
}

fn finish_report(report: VerificationReport, rc: &ResolvedConfig, out_dir: &Path) -> Result<Outcome> {
    let mut files = vec![];
    if rc.config.output.wants(Format::Json) {
        files.push(output::write_report_json(&out_dir.join("report.json"), &report)?);
    }
    if rc.config.output.wants(Format::Txt) {
        files.push(output::write_report_text(&out_dir.join("report.txt"), &report)?);
    }
    Ok(Outcome {
        exit_code: if report.passed() { EXIT_OK } else { EXIT_FAIL },
        message: report.to_table(),
        files,
        report: Some(report),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_names_round_trip() {
        for c in Command::ALL {
            assert_eq!(c.name().parse::<Command>().unwrap(), c);
        }
        assert!("verify".parse::<Command>().is_err());
    }
}
