//! Browser front end for `mmq`: three JSON-in, JSON-out operations.
//!
//! The `*_json` functions are plain Rust and carry all the logic; the
//! `#[wasm_bindgen]` exports only forward to them.

use mmq::ctmc::{validate_generator, ChainStart, ChainSummary};
use mmq::limits::{ou_limit, uniform_grid};
use mmq::network::{validate_network, NetworkRates, NetworkSpec};
use mmq::simulate::{build_scaled_system, initial_condition, simulate, InitRule, SimOptions};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::json;
use wasm_bindgen::prelude::*;

/// Largest number of output epochs accepted from the page.
const MAX_EPOCHS: usize = 20_001;
/// Events per sampled path before the page is told to pick a smaller n.
const MAX_EVENTS: u64 = 5_000_000;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Model {
    generator: Vec<Vec<f64>>,
    lambda: Vec<Vec<f64>>,
    mu: Vec<Vec<Vec<f64>>>,
    alpha: f64,
    rho0: Vec<f64>,
    horizon: f64,
    step: f64,
    #[serde(default)]
    n: Option<u64>,
    #[serde(default)]
    seed: u64,
}

fn generator_from_rows(rows: &[Vec<f64>]) -> Result<mmq::ctmc::GeneratorSpec, String> {
    let d = rows.len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err("generator must be a non-empty square matrix".into());
    }
    let m = DMatrix::from_fn(d, d, |i, j| rows[i][j]);
    validate_generator(&m).map_err(|e| e.to_string())
}

fn parse_model(text: &str) -> Result<(Model, NetworkSpec), String> {
    let model: Model = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let gen = generator_from_rows(&model.generator)?;
    let rates = NetworkRates {
        lambda: model.lambda.clone(),
        mu: model.mu.clone(),
        lambda_hat: None,
        mu_hat: None,
    };
    let spec = validate_network(gen, &rates).map_err(|e| e.to_string())?;
    if model.rho0.len() != spec.queues() {
        return Err(format!("rho0 needs {} entries", spec.queues()));
    }
    if !(model.step > 0.0) || model.horizon / model.step > (MAX_EPOCHS - 1) as f64 {
        return Err(format!("at most {} grid epochs", MAX_EPOCHS - 1));
    }
    Ok((model, spec))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// `{"generator": [[…]]}` → stationary law, deviation matrix and `Σ`.
pub fn chain_summary_json(text: &str) -> Result<String, String> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Input {
        generator: Vec<Vec<f64>>,
    }
    let input: Input = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let s = ChainSummary::compute(&generator_from_rows(&input.generator)?).map_err(|e| e.to_string())?;
    Ok(json!({
        "pi": s.pi.iter().collect::<Vec<_>>(),
        "deviation": rows(&s.deviation),
        "sigma": rows(&s.sigma),
    })
    .to_string())
}

/// Fluid path and the band `ρ ± 2 n^{β−1} √V_kk` that the limit predicts for `Q/n`.
pub fn limits_json(text: &str) -> Result<String, String> {
    let (model, spec) = parse_model(text)?;
    let rho0 = DVector::from_column_slice(&model.rho0);
    let lim = ou_limit(&spec, model.alpha, &rho0, InitRule::Floor, model.horizon, model.step).map_err(|e| e.to_string())?;
    let beta = mmq::simulate::beta_exponent(model.alpha).map_err(|e| e.to_string())?;
    let n = model.n.unwrap_or(1000) as f64;
    let width = n.powf(beta - 1.0);
    let l_count = spec.queues();
    let (mut lower, mut upper) = (vec![Vec::new(); l_count], vec![Vec::new(); l_count]);
    let mut rho = vec![Vec::new(); l_count];
    for ((r, m), v) in lim.fluid.rho.iter().zip(&lim.moments.mean_m).zip(&lim.moments.cov_v) {
        for k in 0..l_count {
            let centre = r[k] + width * m[k];
            let sd = width * v[(k, k)].max(0.0).sqrt();
            rho[k].push(r[k]);
            lower[k].push(centre - 2.0 * sd);
            upper[k].push(centre + 2.0 * sd);
        }
    }
    Ok(json!({
        "t": lim.fluid.grid,
        "beta": beta,
        "rho": rho,
        "lower": lower,
        "upper": upper,
        "final_covariance": rows(lim.moments.cov_v.last().expect("grid has epochs")),
    })
    .to_string())
}

/// One exact sample of `Q/n` and the background state on the output grid.
pub fn trajectory_json(text: &str) -> Result<String, String> {
    let (model, spec) = parse_model(text)?;
    let n = model.n.ok_or("n is required for a sample path")?;
    let mut sys = build_scaled_system(&spec, model.alpha, n, InitRule::Floor).map_err(|e| e.to_string())?;
    sys.population_cap = sys.population_cap.min(10 * n.max(1000));
    let summary = ChainSummary::compute(spec.generator()).map_err(|e| e.to_string())?;
    let grid = uniform_grid(model.horizon, model.step).map_err(|e| e.to_string())?;
    let expected = sys.chain_timescale * model.horizon * (0..spec.states()).map(|i| spec.generator().exit_rate(i)).fold(0.0, f64::max);
    if expected > MAX_EVENTS as f64 {
        return Err(format!("about {expected:.0} background jumps; lower n or alpha"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
    let q0 = initial_condition(&sys, &DVector::from_column_slice(&model.rho0), &mut rng).map_err(|e| e.to_string())?;
    let opts = SimOptions {
        chain_start: ChainStart::Stationary,
        ..Default::default()
    };
    let b = simulate(&sys, &q0, model.horizon, &grid, &summary.pi, opts, &mut rng).map_err(|e| e.to_string())?;
    let nf = n as f64;
    let scaled: Vec<Vec<f64>> = (0..spec.queues())
        .map(|k| b.snapshots.iter().map(|s| s.queues[k] as f64 / nf).collect())
        .collect();
    Ok(json!({
        "t": b.grid(),
        "state": b.snapshots.iter().map(|s| s.state + 1).collect::<Vec<_>>(),
        "scaled": scaled,
        "queue_events": b.queue_events,
        "chain_jumps": b.chain_jumps,
    })
    .to_string())
}

#[wasm_bindgen]
pub fn chain_summary(input: &str) -> Result<String, JsValue> {
    chain_summary_json(input).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn limits(input: &str) -> Result<String, JsValue> {
    limits_json(input).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn trajectory(input: &str) -> Result<String, JsValue> {
    trajectory_json(input).map_err(|e| JsValue::from_str(&e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    const MODEL: &str = r#"{
        "generator": [[-1, 1], [1, -1]],
        "lambda": [[2, 4], [0, 0]],
        "mu": [[[0, 0], [1, 1]], [[0, 0], [0, 0]]],
        "alpha": 1.0, "rho0": [3, 0], "horizon": 2.0, "step": 0.01, "n": 500, "seed": 4
    }"#;

    fn parse(s: &str) -> Value {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn summary_of_symmetric_chain() {
        let v = parse(&chain_summary_json(r#"{"generator": [[-2, 2], [2, -2]]}"#).unwrap());
        assert!((v["pi"][0].as_f64().unwrap() - 0.5).abs() < 1e-12);
        assert!((v["sigma"][0][1].as_f64().unwrap() + 0.125).abs() < 1e-12);
        assert!(chain_summary_json(r#"{"generator": [[-1, 2], [1, -1]]}"#).is_err());
        assert!(chain_summary_json("[]").is_err());
    }

    #[test]
    fn bands_contain_fluid_path() {
        let v = parse(&limits_json(MODEL).unwrap());
        let t = v["t"].as_array().unwrap();
        assert_eq!(t.len(), 201);
        for k in 0..2 {
            for g in 0..t.len() {
                let rho = v["rho"][k][g].as_f64().unwrap();
                assert!(v["lower"][k][g].as_f64().unwrap() <= rho + 1e-12);
                assert!(v["upper"][k][g].as_f64().unwrap() >= rho - 1e-12);
            }
        }
        // Queue 1 starts at equilibrium, so its fluid value stays at λ^π/μ = 3.
        assert!((v["rho"][0][200].as_f64().unwrap() - 3.0).abs() < 1e-9);
    }

    #[test]
    fn trajectory_is_reproducible() {
        let a = trajectory_json(MODEL).unwrap();
        assert_eq!(a, trajectory_json(MODEL).unwrap());
        let v = parse(&a);
        assert_eq!(v["scaled"][0][0].as_f64().unwrap(), 3.0);
        assert_eq!(v["scaled"][0].as_array().unwrap().len(), 201);
        let other = MODEL.replace("\"seed\": 4", "\"seed\": 5");
        assert_ne!(a, trajectory_json(&other).unwrap());
    }

    #[test]
    fn bad_inputs_are_reported() {
        assert!(limits_json(&MODEL.replace("\"rho0\": [3, 0]", "\"rho0\": [3]")).is_err());
        assert!(limits_json(&MODEL.replace("\"step\": 0.01", "\"step\": 0.00001")).is_err());
        assert!(trajectory_json(&MODEL.replace("\"alpha\": 1.0", "\"alpha\": 3.0").replace("\"n\": 500", "\"n\": 100000")).is_err());
        assert!(limits_json(&MODEL.replace("\"alpha\"", "\"alfa\"")).is_err());
    }
}
