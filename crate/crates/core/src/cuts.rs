//! First- and second-order outer approximations of the node objectives and
//! their deduplicating store.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::SmoothOracle;

pub const DEDUP_TOL: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CutError {
    #[error("second-order cut needs a positive strong-convexity constant, got {0}")]
    InvalidM(f64),
    #[error("cut for node {node} has non-finite coefficients")]
    NonFinite { node: usize },
}

/// `gamma_node >= f0 + g'(x - point)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearCut {
    pub node: usize,
    pub point: Vec<f64>,
    pub f0: f64,
    pub grad: Vec<f64>,
}

impl LinearCut {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.f0 + self.grad.iter().zip(x).zip(&self.point).map(|((g, a), b)| g * (a - b)).sum::<f64>()
    }

    /// Row form `g'x - gamma <= g'point - f0`: returns `(g, rhs)`.
    pub fn row(&self) -> (&[f64], f64) {
        let gx0: f64 = self.grad.iter().zip(&self.point).map(|(g, p)| g * p).sum();
        (&self.grad, gx0 - self.f0)
    }
}

/// `gamma_node >= f0 + g'(x - point) + m/2 |x - point|^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticCut {
    #[serde(flatten)]
    pub linear: LinearCut,
    pub m: f64,
}

impl QuadraticCut {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let sq: f64 = x.iter().zip(&self.linear.point).map(|(a, b)| (a - b) * (a - b)).sum();
        self.linear.eval(x) + 0.5 * self.m * sq
    }

    /// Tangent plane of the quadratic model at `x`.
    pub fn linearize(&self, x: &[f64]) -> LinearCut {
        let grad = self.linear.grad.iter().zip(x).zip(&self.linear.point).map(|((g, a), b)| g + self.m * (a - b)).collect();
        LinearCut { node: self.linear.node, point: x.to_vec(), f0: self.eval(x), grad }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Cut {
    Linear(LinearCut),
    Quadratic(QuadraticCut),
}

impl Cut {
    pub fn node(&self) -> usize {
        self.linear_part().node
    }

    pub fn point(&self) -> &[f64] {
        &self.linear_part().point
    }

    pub fn linear_part(&self) -> &LinearCut {
        match self {
            Cut::Linear(c) => c,
            Cut::Quadratic(q) => &q.linear,
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Cut::Linear(c) => c.eval(x),
            Cut::Quadratic(q) => q.eval(x),
        }
    }

    pub fn is_quadratic(&self) -> bool {
        matches!(self, Cut::Quadratic(_))
    }
}

pub fn gen_first_order_cut(oracle: &SmoothOracle<'_>, node: usize, x0: &[f64]) -> LinearCut {
    let (f0, grad) = oracle.value_grad(x0);
    LinearCut { node, point: x0.to_vec(), f0, grad }
}

pub fn gen_second_order_cut(
    oracle: &SmoothOracle<'_>,
    node: usize,
    x0: &[f64],
    m: f64,
) -> Result<QuadraticCut, CutError> {
    if !(m > 0.0) || !m.is_finite() {
        return Err(CutError::InvalidM(m));
    }
    Ok(QuadraticCut { linear: gen_first_order_cut(oracle, node, x0), m })
}

/// Cut assembled from values computed elsewhere (e.g. gathered from a rank).
/// `m > 0` yields a quadratic cut.
pub fn cut_from_parts(node: usize, point: Vec<f64>, f0: f64, grad: Vec<f64>, m: Option<f64>) -> Result<Cut, CutError> {
    if !f0.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(CutError::NonFinite { node });
    }
    let linear = LinearCut { node, point, f0, grad };
    match m {
        None => Ok(Cut::Linear(linear)),
        Some(m) if m > 0.0 && m.is_finite() => Ok(Cut::Quadratic(QuadraticCut { linear, m })),
        Some(m) => Err(CutError::InvalidM(m)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AddOutcome {
    Added,
    Duplicate,
}

/// Append-only per-node cut lists. A cut whose generation point lies within
/// `dedup_tol` (sup-norm) of a stored point of the same node is rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CutStorage {
    pub dedup_tol: f64,
    per_node: Vec<Vec<Cut>>,
    /// Insertion order across nodes as `(node, index)`.
    order: Vec<(usize, usize)>,
}

impl CutStorage {
    pub fn new(num_nodes: usize) -> Self {
        Self::with_tolerance(num_nodes, DEDUP_TOL)
    }

    pub fn with_tolerance(num_nodes: usize, dedup_tol: f64) -> Self {
        Self { dedup_tol, per_node: vec![Vec::new(); num_nodes], order: Vec::new() }
    }

    pub fn add_cut(&mut self, cut: Cut) -> AddOutcome {
        let node = cut.node();
        let dup = self.per_node[node].iter().any(|c| {
            c.point().iter().zip(cut.point()).all(|(a, b)| (a - b).abs() < self.dedup_tol)
        });
        if dup {
            return AddOutcome::Duplicate;
        }
        self.order.push((node, self.per_node[node].len()));
        self.per_node[node].push(cut);
        AddOutcome::Added
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn node_cuts(&self, node: usize) -> &[Cut] {
        &self.per_node[node]
    }

    /// All cuts in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = &Cut> + '_ {
        self.order.iter().map(|&(i, k)| &self.per_node[i][k])
    }

    /// Cuts inserted at or after position `from` of the insertion order.
    pub fn since(&self, from: usize) -> impl Iterator<Item = &Cut> + '_ {
        self.order[from.min(self.order.len())..].iter().map(|&(i, k)| &self.per_node[i][k])
    }

    pub fn count_quadratic(&self) -> usize {
        self.iter().filter(|c| c.is_quadratic()).count()
    }
}
