//! Finite-difference gradient checks of every op and of the toy network.

use volformer::gradcheck::{check_model, op_suite, op_suite_errors};
use volformer::ModelConfig;

const OP_TOL: f64 = 1e-4;
const MODEL_TOL: f64 = 1e-3;

#[test]
fn every_op_over_twenty_seeds() {
    let names: Vec<_> = op_suite().iter().map(|c| c.name).collect();
    let mut worst = vec![0.0f64; names.len()];
    for seed in 0..20 {
        for (k, (name, err)) in op_suite_errors(seed).unwrap().into_iter().enumerate() {
            assert_eq!(name, names[k]);
            worst[k] = worst[k].max(err);
        }
    }
    let failing: Vec<_> = names
        .iter()
        .zip(&worst)
        .filter(|(_, e)| **e >= OP_TOL)
        .map(|(n, e)| format!("{n}: {e:.2e}"))
        .collect();
    assert!(failing.is_empty(), "{failing:?}");
}

#[test]
fn toy_network_every_parameter() {
    let cfg = ModelConfig::toy();
    for seed in [0, 7, 13] {
        for p in check_model(&cfg, [8, 8, 8], seed, 3).unwrap() {
            assert!(p.rel_error < MODEL_TOL, "seed {seed} {}: {:.2e}", p.name, p.rel_error);
        }
    }
}

#[test]
fn non_default_variants_have_correct_gradients() {
    for variant in ["sr_avg", "sr_features", "sr_volume"] {
        let cfg = ModelConfig {
            variant: variant.parse().unwrap(),
            ..ModelConfig::toy()
        };
        for p in check_model(&cfg, [8, 8, 8], 3, 2).unwrap() {
            assert!(p.rel_error < MODEL_TOL, "{variant} {}: {:.2e}", p.name, p.rel_error);
        }
    }
}
