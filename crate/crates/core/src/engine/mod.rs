//! Local smooth solvers, the distributed relaxed consensus ADMM used for
//! primal solves, and the centralized verification oracles.

mod admm;
mod newton;
mod oracle;
mod projection;

pub use admm::{
    solve_initial_relaxation, solve_primal_rhadmm, AdmmConfig, AdmmStatus, PrimalSolution, RhAdmm,
};
pub use newton::{minimize_on_support, NewtonOptions, NewtonResult};
pub use oracle::{
    eval_value_grad, strong_convexity_constant, ConvexityInfo, Prox, Smooth, SmoothOracle, SumOracle,
};
pub use projection::project_l1_box;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ProblemInstance;
use crate::transport::CommError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("nonlinear solve failed: {0}")]
    NlpFailure(String),
    #[error("support enumeration needs {count} solves, limit is {limit}")]
    TooLarge { count: u128, limit: u128 },
    #[error("invalid primal request: {0}")]
    InvalidRequest(String),
    #[error("linear constraints in the primal problem are not supported ({0} rows)")]
    UnsupportedLinearConstraints(usize),
    #[error(transparent)]
    Comm(#[from] CommError),
}

/// Active coordinates of a boolean mask.
pub fn mask_to_coords(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &on)| on).map(|(k, _)| k).collect()
}

/// Minimizer of `f(x) + rho/2 |x - v|^2` over vectors supported on `mask`.
pub fn solve_local_prox(
    oracle: &SmoothOracle<'_>,
    v: &[f64],
    rho: f64,
    mask: &[bool],
) -> Result<Vec<f64>, EngineError> {
    solve_local_prox_from(oracle, v, rho, mask, v)
}

pub(crate) fn solve_local_prox_from(
    oracle: &SmoothOracle<'_>,
    v: &[f64],
    rho: f64,
    mask: &[bool],
    start: &[f64],
) -> Result<Vec<f64>, EngineError> {
    if !(rho > 0.0) {
        return Err(EngineError::InvalidRequest(format!("rho must be positive, got {rho}")));
    }
    let coords = mask_to_coords(mask);
    let prox = Prox { oracle, center: v, rho };
    let res = minimize_on_support(&prox, start, &coords, NewtonOptions::default())?;
    Ok(res.x)
}

/// Minimizes `sum_i f_i(x)` over one shared `x` supported on `support`.
pub fn solve_restricted_centralized(
    inst: &ProblemInstance,
    support: &[usize],
) -> Result<(Vec<f64>, f64), EngineError> {
    let sum = SumOracle { parts: inst.objectives.iter().map(SmoothOracle::new).collect() };
    let n = inst.n;
    if let Some(&k) = support.iter().find(|&&k| k >= n) {
        return Err(EngineError::InvalidRequest(format!("support index {k} >= n = {n}")));
    }
    let res = minimize_on_support(
        &sum,
        &vec![0.0; n],
        support,
        NewtonOptions { grad_tol: 1e-10, max_iter: 200 },
    )?;
    Ok((res.x, res.value))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSolution {
    pub support: Vec<usize>,
    pub x: Vec<f64>,
    pub value: f64,
    pub supports_evaluated: usize,
}

pub const ORACLE_ENUMERATION_LIMIT: u128 = 1_000_000;

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k.min(n));
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Number of supports of size at most `kappa` out of `n` coordinates.
pub fn enumeration_count(n: usize, kappa: usize) -> u128 {
    (0..=kappa.min(n)).map(|s| binomial(n, s)).sum()
}

/// Best support of size at most `kappa` by exhaustive enumeration. Values
/// equal to within `1e-12` relative are ties, resolved toward the
/// lexicographically smallest support.
pub fn brute_force_oracle(inst: &ProblemInstance) -> Result<OracleSolution, EngineError> {
    let n = inst.n;
    let kappa = inst.sparsity.kappa.min(n);
    let count = enumeration_count(n, kappa);
    if count > ORACLE_ENUMERATION_LIMIT {
        return Err(EngineError::TooLarge { count, limit: ORACLE_ENUMERATION_LIMIT });
    }

    let mut best: Option<OracleSolution> = None;
    let mut evaluated = 0usize;
    for size in 0..=kappa {
        let mut comb: Vec<usize> = (0..size).collect();
        loop {
            let (x, value) = solve_restricted_centralized(inst, &comb)?;
            evaluated += 1;
            let replace = match &best {
                None => true,
                Some(b) => {
                    let tol = 1e-12 * b.value.abs().max(1.0);
                    value < b.value - tol || (value <= b.value + tol && comb < b.support)
                }
            };
            if replace {
                best = Some(OracleSolution { support: comb.clone(), x, value, supports_evaluated: 0 });
            }
            if !next_combination(&mut comb, n) {
                break;
            }
        }
    }
    let mut best = best.expect("the empty support is always evaluated");
    best.supports_evaluated = evaluated;
    Ok(best)
}

/// Advances to the next `k`-subset of `0..n` in lexicographic order.
fn next_combination(comb: &mut [usize], n: usize) -> bool {
    let k = comb.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if comb[i] < n - k + i {
            comb[i] += 1;
            for j in i + 1..k {
                comb[j] = comb[j - 1] + 1;
            }
            return true;
        }
    }
    false
}
