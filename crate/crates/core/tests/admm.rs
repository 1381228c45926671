mod common;

use common::{admm_agreement, restricted_minimum, COMM_TIMEOUT};
use scot_core::engine::{solve_initial_relaxation, AdmmConfig, AdmmStatus};
use scot_core::model::generate_dslinr;
use scot_core::transport::run_inproc;

#[test]
fn distributed_solves_match_centralized_and_backends_agree() {
    let check = admm_agreement(12, 5);
    assert!(check.mismatched_backends.is_empty(), "{:?}", check.mismatched_backends);
    assert!(check.worst_rel <= 1e-5, "relative error {:e}", check.worst_rel);
    assert!(check.worst_residual <= 1e-6, "consensus residual {:e}", check.worst_residual);
}

#[test]
fn relaxation_of_a_dense_budget_is_the_unconstrained_minimum() {
    // kappa = n leaves the l1 ball inactive once M covers the minimizer
    let mut inst = generate_dslinr(5, 40, 2, 5, 0.5, 0.5, 9).unwrap();
    inst.ensure_big_m().unwrap();
    let all: Vec<usize> = (0..5).collect();
    let (_, reference) = restricted_minimum(&inst, &all);
    let sols = run_inproc(2, COMM_TIMEOUT, |mut w| solve_initial_relaxation(&mut w, &inst, AdmmConfig::default()).unwrap());
    assert_eq!(sols[0].status, AdmmStatus::Converged);
    assert!((sols[0].objective - reference).abs() <= 1e-5 * reference.max(1.0));
}
