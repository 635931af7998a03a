#![allow(dead_code)]

use mmq::ctmc::{validate_generator, GeneratorSpec};
use mmq::network::{validate_network, NetworkRates, NetworkSpec};
use nalgebra::DMatrix;
use proptest::prelude::*;

/// Two queues, jobs arrive at queue 1 and move to the collecting queue 2.
pub fn sink(gen: GeneratorSpec, lambda1: Vec<f64>, mu12: Vec<f64>) -> NetworkSpec {
    let d = gen.states();
    validate_network(
        gen,
        &NetworkRates {
            lambda: vec![lambda1, vec![0.0; d]],
            mu: vec![vec![vec![0.0; d], mu12], vec![vec![0.0; d], vec![0.0; d]]],
            lambda_hat: None,
            mu_hat: None,
        },
    )
    .unwrap()
}

pub fn two_state(q: f64) -> GeneratorSpec {
    GeneratorSpec::two_state(q).unwrap()
}

/// Generator from off-diagonal rates; the diagonal is filled in.
pub fn generator_from_rates(d: usize, rates: &[f64]) -> GeneratorSpec {
    let mut m = DMatrix::zeros(d, d);
    let mut it = rates.iter();
    for i in 0..d {
        for j in 0..d {
            if i != j {
                m[(i, j)] = *it.next().unwrap();
            }
        }
        let out: f64 = (0..d).filter(|&j| j != i).map(|j| m[(i, j)]).sum();
        m[(i, i)] = -out;
    }
    validate_generator(&m).unwrap()
}

/// Random irreducible generators with up to `max_d` states: a cycle with
/// rates in [0.1, 5] guarantees irreducibility, other edges are sparse.
pub fn arb_generator(max_d: usize) -> impl Strategy<Value = GeneratorSpec> {
    (1..=max_d).prop_flat_map(|d| {
        (
            proptest::collection::vec(0.1f64..5.0, d),
            proptest::collection::vec(prop_oneof![Just(0.0), 0.01f64..3.0], d * d),
        )
            .prop_map(move |(cycle, extra)| {
                let mut m = DMatrix::zeros(d, d);
                for i in 0..d {
                    for j in 0..d {
                        if i != j {
                            m[(i, j)] = extra[i * d + j];
                        }
                    }
                    if d > 1 {
                        m[(i, (i + 1) % d)] += cycle[i];
                    }
                }
                for i in 0..d {
                    let out: f64 = (0..d).filter(|&j| j != i).map(|j| m[(i, j)]).sum();
                    m[(i, i)] = -out;
                }
                validate_generator(&m).unwrap()
            })
    })
}
