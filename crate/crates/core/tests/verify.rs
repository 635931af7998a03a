mod common;

use mmq::ctmc::{ChainStart, ChainSummary, GeneratorSpec};
use mmq::limits::fluid_limit;
use mmq::network::{averaged_rates, validate_network, Model3Spec, NetworkRates};
use mmq::replicate::replication_rng;
use mmq::simulate::{build_scaled_system, InitRule};
use mmq::stats;
use mmq::verify::*;
use nalgebra::{DMatrix, DVector};

use common::{sink, two_state};

fn settings(reps: usize, horizon: f64, grid_step: f64) -> RunSettings {
    RunSettings {
        reps,
        seed: 17,
        workers: None,
        horizon,
        grid_step,
        chain_start: ChainStart::Stationary,
    }
}

#[test]
fn fluid_check_and_offset_control() {
    let spec = sink(two_state(1.0), vec![2.0, 4.0], vec![1.0, 1.0]);
    let rho0 = DVector::from_vec(vec![0.0, 0.0]);
    let tol = Tolerances { fluid_cap: 0.5, ..Default::default() };
    let run = settings(40, 2.0, 0.05);
    let ok = verify_fluid(&spec, 1.0, &[50, 2000], &rho0, InitRule::Floor, &run, &tol, 0.0).unwrap();
    assert!(ok.passed(), "{}", ok.to_table());
    let off = verify_fluid(&spec, 1.0, &[50, 2000], &rho0, InitRule::Floor, &run, &tol, 0.5).unwrap();
    assert!(!off.passed());
}

#[test]
fn occupation_check_and_scale_control() {
    let gen = GeneratorSpec::two_state(1.0).unwrap();
    let tol = Tolerances::default();
    let ok = verify_occupation(&gen, 1.0, 100, 1.0, 3000, 4, None, &tol, 1.0).unwrap();
    assert!(ok.passed(), "{}", ok.to_table());
    let doubled = verify_occupation(&gen, 1.0, 100, 1.0, 3000, 4, None, &tol, 2.0).unwrap();
    assert!(!doubled.passed());
}

#[test]
fn diffusion_check_and_scale_control() {
    let spec = sink(GeneratorSpec::single_state(), vec![3.0], vec![1.0]);
    let rho0 = DVector::from_vec(vec![3.0, 0.0]);
    let run = settings(1500, 2.0, 0.01);
    let tol = Tolerances::default();
    let ok = verify_diffusion(&spec, 1.0, 400, &rho0, InitRule::Floor, &run, &[1.0, 2.0], &tol, 1.0).unwrap();
    assert!(ok.passed(), "{}", ok.to_table());
    let doubled = verify_diffusion(&spec, 1.0, 400, &rho0, InitRule::Floor, &run, &[1.0, 2.0], &tol, 2.0).unwrap();
    assert!(!doubled.passed());
}

#[test]
fn model3_check_and_requirement_control() {
    let m3 = Model3Spec::new(two_state(1.0), vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]).unwrap();
    let ok = verify_model3(&m3, 2.0, 3000, 5, None, &Tolerances::default()).unwrap();
    assert!(ok.passed(), "{}", ok.to_table());
    // Per-job reference with the service requirement rates halved.
    let swapped = Model3Spec::new(two_state(1.0), vec![1.0, 2.0], vec![1.5, 2.0], vec![5.0, 6.0]).unwrap();
    let net = model3_network_samples(&m3, 2.0, 3000, 5, None).unwrap();
    let job = model3_per_job_samples(&swapped, 2.0, 3000, 6, None).unwrap();
    let a: Vec<f64> = net.iter().map(|p| p.0).collect();
    let b: Vec<f64> = job.iter().map(|p| p.0).collect();
    let v = Verdict::within("in_service mean", stats::mean(&a), stats::mean(&b), 3.0 * stats::stderr_of_mean(&a).hypot(stats::stderr_of_mean(&b)));
    assert!(!v.passed, "{v:?}");
}

#[test]
fn reports_are_byte_identical() {
    let gen = GeneratorSpec::two_state(2.0).unwrap();
    let tol = Tolerances::default();
    let a = verify_occupation(&gen, 1.0, 50, 1.0, 300, 9, Some(1), &tol, 1.0).unwrap();
    let b = verify_occupation(&gen, 1.0, 50, 1.0, 300, 9, Some(3), &tol, 1.0).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    assert_eq!(a.to_table(), b.to_table());
    let c = verify_occupation(&gen, 1.0, 50, 1.0, 300, 10, Some(1), &tol, 1.0).unwrap();
    assert_ne!(a.to_json(), c.to_json());
}

#[test]
fn stderr_shrinks_with_replications() {
    let m3 = Model3Spec::new(GeneratorSpec::single_state(), vec![5.0], vec![1.0], vec![1.0]).unwrap();
    let se = |reps| {
        let r = verify_model3(&m3, 1.0, reps, 2, None, &Tolerances::default()).unwrap();
        r.stats["in_service"]["network_mean_stderr"].as_f64().unwrap()
    };
    let ratio = se(500) / se(2000);
    assert!((ratio - 2.0).abs() < 0.4, "ratio {ratio}");
}

#[test]
fn equivalence_is_exact_without_transfers() {
    // No routing: Q̂ = Q̂(0) + X̂ and the map is the identity shift.
    let gen = GeneratorSpec::single_state();
    let spec = validate_network(
        gen,
        &NetworkRates {
            lambda: vec![vec![2.0], vec![1.0]],
            mu: vec![vec![vec![0.0], vec![0.0]], vec![vec![0.0], vec![0.0]]],
            lambda_hat: None,
            mu_hat: None,
        },
    )
    .unwrap();
    let summary = ChainSummary::compute(spec.generator()).unwrap();
    let avg = averaged_rates(&spec, &summary.pi).unwrap();
    let rho0 = DVector::from_vec(vec![1.0, 1.0]);
    let fluid = fluid_limit(&avg, &rho0, 3.0, 0.01).unwrap();
    let sys = build_scaled_system(&spec, 1.0, 500, InitRule::Poisson).unwrap();
    for rep in 0..5 {
        let mut rng = replication_rng(1, rep);
        let gap = equivalence_gap(&sys, &fluid, &summary.pi, &avg.drift, &rho0, 3.0, ChainStart::Stationary, &mut rng).unwrap();
        assert!(gap < 1e-9, "gap {gap}");
    }
}

#[test]
fn equivalence_gap_shrinks_with_grid() {
    let spec = sink(GeneratorSpec::single_state(), vec![3.0], vec![1.0]);
    let summary = ChainSummary::compute(spec.generator()).unwrap();
    let avg = averaged_rates(&spec, &summary.pi).unwrap();
    let rho0 = DVector::from_vec(vec![3.0, 0.0]);
    let sys = build_scaled_system(&spec, 1.0, 1000, InitRule::Floor).unwrap();
    let median = |h: f64| {
        let fluid = fluid_limit(&avg, &rho0, 2.0, h).unwrap();
        let gaps: Vec<f64> = (0..30)
            .map(|rep| {
                let mut rng = replication_rng(3, rep);
                equivalence_gap(&sys, &fluid, &summary.pi, &avg.drift, &rho0, 2.0, ChainStart::Stationary, &mut rng).unwrap()
            })
            .collect();
        stats::median(&gaps)
    };
    let (coarse, fine) = (median(0.02), median(0.002));
    assert!(fine < coarse / 3.0, "{coarse} -> {fine}");
}

#[test]
fn equivalence_with_wrong_drift_does_not_converge() {
    let spec = sink(two_state(1.0), vec![2.0, 4.0], vec![0.5, 1.5]);
    let summary = ChainSummary::compute(spec.generator()).unwrap();
    let avg = averaged_rates(&spec, &summary.pi).unwrap();
    let rho0 = DVector::from_vec(vec![3.0, 0.0]);
    let fluid = fluid_limit(&avg, &rho0, 2.0, 0.005).unwrap();
    let wrong = &avg.drift * 0.5;
    let median = |n: u64, drift: &DMatrix<f64>| {
        let sys = build_scaled_system(&spec, 1.0, n, InitRule::Floor).unwrap();
        let gaps: Vec<f64> = (0..20)
            .map(|rep| {
                let mut rng = replication_rng(5, rep);
                equivalence_gap(&sys, &fluid, &summary.pi, drift, &rho0, 2.0, ChainStart::Stationary, &mut rng).unwrap()
            })
            .collect();
        stats::median(&gaps)
    };
    let good = (median(100, &avg.drift), median(3000, &avg.drift));
    let bad = (median(100, &wrong), median(3000, &wrong));
    assert!(good.1 < good.0);
    assert!(bad.1 > 0.5 * bad.0, "{bad:?}");
    assert!(bad.1 > 10.0 * good.1);
}

#[test]
fn bad_inputs_are_errors() {
    let spec = sink(two_state(1.0), vec![2.0, 4.0], vec![0.5, 1.5]);
    let rho0 = DVector::from_vec(vec![3.0, 0.0]);
    let run = settings(2, 1.0, 0.1);
    let tol = Tolerances::default();
    assert!(verify_fluid(&spec, 1.0, &[100, 10], &rho0, InitRule::Floor, &run, &tol, 0.0).is_err());
    assert!(verify_fluid(&spec, -1.0, &[10], &rho0, InitRule::Floor, &run, &tol, 0.0).is_err());
    let short = DVector::from_vec(vec![3.0]);
    assert!(verify_equivalence(&spec, 1.0, &[10], &short, InitRule::Floor, &run).is_err());
    let m3 = Model3Spec::new(two_state(1.0), vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]).unwrap();
    assert!(verify_model3(&m3, 0.0, 10, 1, None, &tol).is_err());
}
