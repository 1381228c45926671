//! Relaxed consensus ADMM over the hypergraph. Node `i` owns `x_i` and one
//! scaled dual `u_ij` per incident hyperedge `j`; every rank holds a replica
//! of all edge variables `y_j`, updated from a rank-ordered sum.

use serde::{Deserialize, Serialize};

use super::oracle::SmoothOracle;
use super::projection::project_l1_box;
use super::{solve_local_prox_from, EngineError};
use crate::model::ProblemInstance;
use crate::transport::{CommWorld, ReduceOp};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdmmConfig {
    pub rho: f64,
    pub alpha: f64,
    pub eps_primal: f64,
    pub eps_dual: f64,
    pub max_iter: usize,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self { rho: 1.0, alpha: 1.6, eps_primal: 1e-6, eps_dual: 1e-6, max_iter: 5000 }
    }
}

impl AdmmConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if !(self.rho > 0.0) {
            return Err(EngineError::InvalidRequest(format!("rho must be positive, got {}", self.rho)));
        }
        if !(self.alpha > 0.0 && self.alpha < 2.0) {
            return Err(EngineError::InvalidRequest(format!("alpha must lie in (0, 2), got {}", self.alpha)));
        }
        if !(self.eps_primal > 0.0 && self.eps_dual > 0.0) || self.max_iter == 0 {
            return Err(EngineError::InvalidRequest("ADMM tolerances and max_iter must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdmmStatus {
    Converged,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimalSolution {
    /// Local copies, one per node.
    pub x: Vec<Vec<f64>>,
    /// Consensus variables, one per hyperedge.
    pub y: Vec<Vec<f64>>,
    /// `f_i` evaluated at the consensus variable of node `i`'s primary edge.
    pub node_values: Vec<f64>,
    /// Sum of `node_values`, accumulated in rank order.
    pub objective: f64,
    /// `max_{j, i in E_j} |x_i - y_j|_inf`.
    pub residual: f64,
    pub iterations: usize,
    pub status: AdmmStatus,
}

impl PrimalSolution {
    /// Indices of nonzero entries of the first consensus variable.
    pub fn support(&self) -> Vec<usize> {
        self.y[0].iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(k, _)| k).collect()
    }
}

/// One rank's ADMM state. Iterates persist between solves and are reused as
/// the starting point of the next one.
#[derive(Debug)]
pub struct RhAdmm<'a> {
    inst: &'a ProblemInstance,
    node: usize,
    oracle: SmoothOracle<'a>,
    cfg: AdmmConfig,
    edges: Vec<usize>,
    primary: usize,
    x: Vec<f64>,
    u: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
}

enum YStep<'m> {
    Masked(&'m [Vec<bool>]),
    Projected(Vec<(f64, f64)>),
}

impl<'a> RhAdmm<'a> {
    pub fn new(inst: &'a ProblemInstance, node: usize, cfg: AdmmConfig) -> Self {
        let n = inst.n;
        let edges = inst.hypergraph.edges_of(node);
        let primary = inst.hypergraph.primary_edge(node).expect("node belongs to an edge");
        Self {
            inst,
            node,
            oracle: SmoothOracle::new(&inst.objectives[node]),
            cfg,
            u: vec![vec![0.0; n]; edges.len()],
            edges,
            primary,
            x: vec![0.0; n],
            y: vec![vec![0.0; n]; inst.hypergraph.num_edges()],
        }
    }

    pub fn config(&self) -> &AdmmConfig {
        &self.cfg
    }

    fn check(&self, world: &CommWorld) -> Result<(), EngineError> {
        self.cfg.validate()?;
        if world.size() != self.inst.num_nodes() {
            return Err(EngineError::InvalidRequest(format!(
                "world size {} differs from node count {}",
                world.size(),
                self.inst.num_nodes()
            )));
        }
        if world.rank() != self.node {
            return Err(EngineError::InvalidRequest(format!("rank {} driving node {}", world.rank(), self.node)));
        }
        if self.inst.linear.rows() > 0 {
            return Err(EngineError::UnsupportedLinearConstraints(self.inst.linear.rows()));
        }
        Ok(())
    }

    /// Solves the primal problem with the support of edge `j` fixed to
    /// `delta[j]`.
    pub fn solve(&mut self, world: &mut CommWorld, delta: &[Vec<bool>]) -> Result<PrimalSolution, EngineError> {
        self.check(world)?;
        let k = self.inst.hypergraph.num_edges();
        if delta.len() != k || delta.iter().any(|d| d.len() != self.inst.n) {
            return Err(EngineError::InvalidRequest(format!("expected {k} support masks of length {}", self.inst.n)));
        }
        let kappa = self.inst.sparsity.kappa;
        if let Some(j) = delta.iter().position(|d| d.iter().filter(|&&b| b).count() > kappa) {
            return Err(EngineError::InvalidRequest(format!("support of edge {j} exceeds kappa = {kappa}")));
        }
        self.iterate(world, YStep::Masked(delta))
    }

    /// Solves the continuous relaxation, where each `y_j` is confined to
    /// `{|y|_1 <= M_j kappa, |y|_inf <= M_j}`.
    pub fn solve_relaxed(&mut self, world: &mut CommWorld) -> Result<PrimalSolution, EngineError> {
        self.check(world)?;
        let big_m = &self.inst.sparsity.big_m;
        if big_m.len() != self.inst.hypergraph.num_edges() {
            return Err(EngineError::InvalidRequest("big-M must be set before the relaxation".into()));
        }
        let kappa = self.inst.sparsity.kappa as f64;
        let balls = big_m.iter().map(|&m| (m * kappa, m)).collect();
        self.iterate(world, YStep::Projected(balls))
    }

    fn iterate(&mut self, world: &mut CommWorld, step: YStep<'_>) -> Result<PrimalSolution, EngineError> {
        let n = self.inst.n;
        let k = self.inst.hypergraph.num_edges();
        let cfg = self.cfg;
        let x_mask: Vec<bool> = match &step {
            YStep::Masked(delta) => (0..n).map(|c| self.edges.iter().all(|&j| delta[j][c])).collect(),
            YStep::Projected(_) => vec![true; n],
        };
        if let YStep::Masked(delta) = &step {
            for c in (0..n).filter(|&c| !x_mask[c]) {
                self.x[c] = 0.0;
            }
            for (pos, &j) in self.edges.iter().enumerate() {
                for c in (0..n).filter(|&c| !delta[j][c]) {
                    self.u[pos][c] = 0.0;
                }
            }
            for (j, yj) in self.y.iter_mut().enumerate() {
                for c in (0..n).filter(|&c| !delta[j][c]) {
                    yj[c] = 0.0;
                }
            }
        }
        let members: Vec<f64> = self.inst.hypergraph.edges.iter().map(|e| e.len() as f64).collect();
        let rho_eff = cfg.rho * self.edges.len() as f64;
        let mut status = AdmmStatus::MaxIterations;
        let mut residual = f64::INFINITY;
        let mut iterations = 0;
        let mut buf = vec![0.0; k * n + 1];
        let mut v = vec![0.0; n];

        for it in 1..=cfg.max_iter {
            iterations = it;
            v.iter_mut().for_each(|e| *e = 0.0);
            for (pos, &j) in self.edges.iter().enumerate() {
                for c in 0..n {
                    v[c] += self.y[j][c] - self.u[pos][c];
                }
            }
            let inv = 1.0 / self.edges.len() as f64;
            v.iter_mut().for_each(|e| *e *= inv);
            let failed = match solve_local_prox_from(&self.oracle, &v, rho_eff, &x_mask, &self.x) {
                Ok(x) => {
                    self.x = x;
                    false
                }
                Err(_) => true,
            };

            buf.iter_mut().for_each(|e| *e = 0.0);
            let mut x_hat = Vec::with_capacity(self.edges.len());
            for (pos, &j) in self.edges.iter().enumerate() {
                let xh: Vec<f64> = (0..n).map(|c| cfg.alpha * self.x[c] + (1.0 - cfg.alpha) * self.y[j][c]).collect();
                for c in 0..n {
                    buf[j * n + c] = xh[c] + self.u[pos][c];
                }
                x_hat.push(xh);
            }
            buf[k * n] = if failed { 1.0 } else { 0.0 };
            let sums = world.allreduce(&buf, ReduceOp::Sum)?;
            if sums[k * n] > 0.0 {
                return Err(EngineError::NlpFailure(format!("local proximal solve failed at ADMM iteration {it}")));
            }

            let mut dual = 0.0f64;
            for j in 0..k {
                let mut yj: Vec<f64> = sums[j * n..(j + 1) * n].iter().map(|s| s / members[j]).collect();
                match &step {
                    YStep::Masked(delta) => {
                        for c in (0..n).filter(|&c| !delta[j][c]) {
                            yj[c] = 0.0;
                        }
                    }
                    YStep::Projected(balls) => yj = project_l1_box(&yj, balls[j].0, balls[j].1),
                }
                for c in 0..n {
                    dual = dual.max((yj[c] - self.y[j][c]).abs());
                }
                self.y[j] = yj;
            }
            dual *= cfg.rho;
            let mut local = 0.0f64;
            for (pos, &j) in self.edges.iter().enumerate() {
                for c in 0..n {
                    self.u[pos][c] += x_hat[pos][c] - self.y[j][c];
                    local = local.max((self.x[c] - self.y[j][c]).abs());
                }
            }
            residual = world.allreduce(&[local], ReduceOp::Max)?[0];
            if residual <= cfg.eps_primal && dual <= cfg.eps_dual {
                status = AdmmStatus::Converged;
                break;
            }
        }

        let value = self.oracle.value(&self.y[self.primary]);
        let node_values: Vec<f64> = world.allgather(&[value])?.into_iter().map(|v| v[0]).collect();
        let objective = node_values.iter().fold(0.0, |acc, v| acc + v);
        let x = world.allgather(&self.x)?;
        Ok(PrimalSolution { x, y: self.y.clone(), node_values, objective, residual, iterations, status })
    }
}

/// Fixed-support primal solve from a cold start.
pub fn solve_primal_rhadmm(
    world: &mut CommWorld,
    inst: &ProblemInstance,
    delta: &[Vec<bool>],
    cfg: AdmmConfig,
) -> Result<PrimalSolution, EngineError> {
    RhAdmm::new(inst, world.rank(), cfg).solve(world, delta)
}

/// Continuous relaxation of the sparse problem from a cold start.
pub fn solve_initial_relaxation(
    world: &mut CommWorld,
    inst: &ProblemInstance,
    cfg: AdmmConfig,
) -> Result<PrimalSolution, EngineError> {
    RhAdmm::new(inst, world.rank(), cfg).solve_relaxed(world)
}
