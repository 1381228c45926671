//! The mixed-integer master problem and the machinery that solves it.
//!
//! Local copies are eliminated through the consensus equalities, so node `i`
//! speaks through the variable `y` of its primary edge. Columns are laid out
//! as `[y_0 .. y_{K-1} | delta_0 .. delta_{K-1} | gamma_0 .. gamma_{N-1} | t_0 .. t_{K-1}]`.
//!
//! A quadratic cut expands to `m sum_c t_c + (g - m p)'y + const`, where
//! `t_c` stands for `y_c^2 / 2`. The LP only sees perspective tangents
//! `t_c >= a y_c - a^2 delta_c / 2`, added by the Kelley loop until every
//! quadratic cut holds at the LP point. On integral `delta` these are plain
//! tangents; on fractional `delta` they bound `y_c^2 / (2 delta_c)`, which is
//! much tighter than the big-M relaxation alone.

mod bnb;
pub mod lp;

pub use bnb::{bnb_single_tree, bnb_solve, BnbConfig, BnbResult, BnbStats, BnbStatus, LazyResponse};
pub use lp::{Lp, LpError, LpSolution, LpStatus, Sense};

use thiserror::Error;

use crate::cuts::{Cut, CutStorage, LinearCut, QuadraticCut};
use crate::model::{ProblemInstance, SparsityMode};

pub const KELLEY_MAX_ROUNDS: usize = 100;
/// Quadratic-cut violation accepted at a Kelley fixed point, relative to
/// `max(1, |q|)`.
pub const KELLEY_TOL: f64 = 1e-7;
const PERSPECTIVE_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MasterError {
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error("Kelley loop did not converge in {rounds} rounds (bound {bound})")]
    KelleyStall { rounds: usize, bound: f64 },
    #[error("invalid master model: {0}")]
    InvalidModel(String),
}

/// Node relaxation outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Relaxation {
    pub status: LpStatus,
    pub x: Vec<f64>,
    pub objective: f64,
    pub rounds: usize,
}

/// Master solution split by variable block.
#[derive(Debug, Clone, PartialEq)]
pub struct MasterPoint {
    pub y: Vec<Vec<f64>>,
    pub delta: Vec<Vec<f64>>,
    pub gamma: Vec<f64>,
    pub objective: f64,
}

impl MasterPoint {
    /// `delta >= 0.5` per edge.
    pub fn support_masks(&self) -> Vec<Vec<bool>> {
        self.delta.iter().map(|d| d.iter().map(|&v| v >= 0.5).collect()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct MasterModel {
    lp: Lp,
    n: usize,
    k: usize,
    nodes: usize,
    primary: Vec<usize>,
    mode: SparsityMode,
    quads: Vec<QuadraticCut>,
    root_lb: Vec<f64>,
    root_ub: Vec<f64>,
    kelley_rows: usize,
    cut_rows: usize,
}

impl MasterModel {
    pub fn build(inst: &ProblemInstance, cuts: &CutStorage) -> Result<Self, MasterError> {
        let n = inst.n;
        let k = inst.hypergraph.num_edges();
        let nodes = inst.num_nodes();
        let big_m = &inst.sparsity.big_m;
        if big_m.len() != k {
            return Err(MasterError::InvalidModel("big-M must be set for every hyperedge".into()));
        }
        let primary = (0..nodes)
            .map(|i| inst.hypergraph.primary_edge(i))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| MasterError::InvalidModel("node without hyperedge".into()))?;

        let nv = 3 * k * n + nodes;
        let mut cost = vec![0.0; nv];
        let mut lb = vec![0.0; nv];
        let mut ub = vec![1.0; nv];
        for j in 0..k {
            for c in 0..n {
                lb[j * n + c] = -big_m[j];
                ub[j * n + c] = big_m[j];
            }
        }
        for i in 0..nodes {
            cost[2 * k * n + i] = 1.0;
            lb[2 * k * n + i] = inst.objectives[i].lower_bound();
            ub[2 * k * n + i] = f64::INFINITY;
        }
        for v in 2 * k * n + nodes..nv {
            ub[v] = f64::INFINITY;
        }
        let mut model = Self {
            lp: Lp::new(cost, lb.clone(), ub.clone()),
            n,
            k,
            nodes,
            primary,
            mode: inst.sparsity.mode,
            quads: Vec::new(),
            root_lb: lb,
            root_ub: ub,
            kelley_rows: 0,
            cut_rows: 0,
        };

        if model.mode != SparsityMode::Sos1 {
            for j in 0..k {
                for c in 0..n {
                    let mut a = vec![0.0; nv];
                    a[model.y(j, c)] = 1.0;
                    a[model.delta(j, c)] = -big_m[j];
                    model.lp.add_row(a.clone(), Sense::Le, 0.0);
                    a[model.y(j, c)] = -1.0;
                    model.lp.add_row(a, Sense::Le, 0.0);
                }
            }
        }
        for j in 0..k {
            let mut a = vec![0.0; nv];
            for c in 0..n {
                a[model.delta(j, c)] = 1.0;
            }
            model.lp.add_row(a, Sense::Le, inst.sparsity.kappa as f64);
        }
        for i in 0..nodes {
            for j in inst.hypergraph.edges_of(i).into_iter().filter(|&j| j != model.primary[i]) {
                for c in 0..n {
                    let mut a = vec![0.0; nv];
                    a[model.y(j, c)] = 1.0;
                    a[model.y(model.primary[i], c)] = -1.0;
                    model.lp.add_row(a, Sense::Eq, 0.0);
                }
            }
        }
        let mut seen_edges = Vec::new();
        for &j in &model.primary {
            if seen_edges.contains(&j) {
                continue;
            }
            seen_edges.push(j);
            for r in 0..inst.linear.rows() {
                let mut a = vec![0.0; nv];
                for c in 0..n {
                    a[model.y(j, c)] = inst.linear.a[(r, c)];
                }
                model.lp.add_row(a, Sense::Le, inst.linear.b[r]);
            }
        }
        for cut in cuts.iter() {
            model.add_cut(cut);
        }
        Ok(model)
    }

    pub fn y(&self, edge: usize, coord: usize) -> usize {
        edge * self.n + coord
    }

    pub fn delta(&self, edge: usize, coord: usize) -> usize {
        (self.k + edge) * self.n + coord
    }

    pub fn gamma(&self, node: usize) -> usize {
        2 * self.k * self.n + node
    }

    /// Epigraph column of `y_{edge, coord}^2 / 2`.
    pub fn t(&self, edge: usize, coord: usize) -> usize {
        2 * self.k * self.n + self.nodes + edge * self.n + coord
    }

    pub fn num_vars(&self) -> usize {
        self.lp.num_vars()
    }

    pub fn num_rows(&self) -> usize {
        self.lp.num_rows()
    }

    pub fn mode(&self) -> SparsityMode {
        self.mode
    }

    pub fn quadratic_cuts(&self) -> &[QuadraticCut] {
        &self.quads
    }

    /// Tangent rows added by the Kelley loop so far.
    pub fn kelley_rows(&self) -> usize {
        self.kelley_rows
    }

    pub fn cut_rows(&self) -> usize {
        self.cut_rows
    }

    fn add_linear_row(&mut self, cut: &LinearCut) {
        let (g, rhs) = cut.row();
        let mut a = vec![0.0; self.num_vars()];
        let e = self.primary[cut.node];
        for (c, &gc) in g.iter().enumerate() {
            a[self.y(e, c)] = gc;
        }
        a[self.gamma(cut.node)] = -1.0;
        self.lp.add_row(a, Sense::Le, rhs);
    }

    /// `(g - m p)'y + m sum_c t_c - gamma <= g'p - f0 - m |p|^2 / 2`.
    fn add_quadratic_row(&mut self, q: &QuadraticCut) {
        let l = &q.linear;
        let mut a = vec![0.0; self.num_vars()];
        let e = self.primary[l.node];
        let mut rhs = -l.f0;
        for c in 0..self.n {
            a[self.y(e, c)] = l.grad[c] - q.m * l.point[c];
            a[self.t(e, c)] = q.m;
            rhs += l.grad[c] * l.point[c] - 0.5 * q.m * l.point[c] * l.point[c];
        }
        a[self.gamma(l.node)] = -1.0;
        self.lp.add_row(a, Sense::Le, rhs);
    }

    /// Adds a stored cut. A quadratic cut also contributes its tangent at
    /// the generation point and joins the Kelley pool.
    pub fn add_cut(&mut self, cut: &Cut) {
        self.add_linear_row(cut.linear_part());
        self.cut_rows += 1;
        if let Cut::Quadratic(q) = cut {
            self.add_quadratic_row(q);
            self.quads.push(q.clone());
        }
    }

    /// `t_{edge, coord} >= a y - a^2 delta / 2`. Valid wherever `delta = 0`
    /// forces `y = 0`, and the plain tangent of `y^2 / 2` when `delta = 1`.
    fn add_square_tangent(&mut self, edge: usize, coord: usize, a: f64) {
        let mut row = vec![0.0; self.num_vars()];
        row[self.y(edge, coord)] = a;
        row[self.delta(edge, coord)] = -0.5 * a * a;
        row[self.t(edge, coord)] = -1.0;
        self.lp.add_row(row, Sense::Le, 0.0);
    }

    /// Restores root bounds and applies `(var, lo, hi)` overrides.
    pub fn apply_bounds(&mut self, fixes: &[(usize, f64, f64)]) {
        let mut lo = self.root_lb.clone();
        let mut hi = self.root_ub.clone();
        for &(v, l, u) in fixes {
            lo[v] = l;
            hi[v] = u;
        }
        for v in 0..lo.len() {
            if self.lp.bounds(v) != (lo[v], hi[v]) {
                self.lp.set_bounds(v, lo[v], hi[v]);
            }
        }
    }

    /// Edge block of the full column vector.
    pub fn edge_y<'x>(&self, x: &'x [f64], edge: usize) -> &'x [f64] {
        &x[edge * self.n..(edge + 1) * self.n]
    }

    /// Weight of `sum_c t_c` in the objective through the quadratic cuts,
    /// per edge.
    fn square_weights(&self) -> Vec<f64> {
        let mut per_node = vec![0.0f64; self.nodes];
        for q in &self.quads {
            per_node[q.linear.node] = per_node[q.linear.node].max(q.m);
        }
        let mut w = vec![0.0; self.k];
        for (i, m) in per_node.into_iter().enumerate() {
            w[self.primary[i]] += m;
        }
        w
    }

    /// Most violated perspective tangent of `t >= y^2 / (2 delta)` at an LP
    /// point, as `(slope, violation)`.
    fn perspective_tangent(&self, x: &[f64], e: usize, c: usize) -> (f64, f64) {
        let (y, d, t) = (x[self.y(e, c)], x[self.delta(e, c)], x[self.t(e, c)]);
        let cap = self.root_ub[self.y(e, c)].max(y.abs());
        let a = if d > PERSPECTIVE_EPS {
            (y / d).clamp(-cap, cap)
        } else if y.abs() > PERSPECTIVE_EPS {
            cap.copysign(y)
        } else {
            0.0
        };
        (a, a * y - 0.5 * a * a * d - t)
    }

    /// LP over the current rows, then perspective tangents on the lifted
    /// squares until the lifted terms are exact up to tolerance and every
    /// quadratic cut holds at the LP point.
    pub fn solve_relaxation(&mut self) -> Result<Relaxation, MasterError> {
        let weights = self.square_weights();
        for round in 0..=KELLEY_MAX_ROUNDS {
            let sol = self.lp.solve()?;
            if sol.status != LpStatus::Optimal || self.quads.is_empty() {
                return Ok(Relaxation { status: sol.status, x: sol.x, objective: sol.objective, rounds: round });
            }
            let per_coord = KELLEY_TOL * sol.objective.abs().max(1.0) / self.n as f64;
            let mut tangents = Vec::new();
            for e in (0..self.k).filter(|&e| weights[e] > 0.0) {
                for c in 0..self.n {
                    let (a, viol) = self.perspective_tangent(&sol.x, e, c);
                    if weights[e] * viol > per_coord {
                        tangents.push((e, c, a));
                    }
                }
            }
            let mut worst: Vec<Option<(f64, usize)>> = vec![None; self.nodes];
            for (qi, q) in self.quads.iter().enumerate() {
                let node = q.linear.node;
                let qv = q.eval(self.edge_y(&sol.x, self.primary[node]));
                let viol = qv - sol.x[self.gamma(node)];
                if viol > KELLEY_TOL * qv.abs().max(1.0) && worst[node].is_none_or(|(w, _)| viol > w) {
                    worst[node] = Some((viol, qi));
                }
            }
            if tangents.is_empty() && worst.iter().all(Option::is_none) {
                return Ok(Relaxation { status: sol.status, x: sol.x, objective: sol.objective, rounds: round });
            }
            if round == KELLEY_MAX_ROUNDS {
                return Err(MasterError::KelleyStall { rounds: round, bound: sol.objective });
            }
            if tangents.is_empty() {
                // Violation left by LP round-off alone: cut it off directly.
                for (_, qi) in worst.into_iter().flatten() {
                    let node = self.quads[qi].linear.node;
                    let yv = self.edge_y(&sol.x, self.primary[node]).to_vec();
                    let tangent = self.quads[qi].linearize(&yv);
                    self.add_linear_row(&tangent);
                    self.kelley_rows += 1;
                }
            }
            for (e, c, a) in tangents {
                self.add_square_tangent(e, c, a);
                self.kelley_rows += 1;
            }
        }
        unreachable!("loop returns on its last round")
    }

    pub fn point(&self, x: &[f64], objective: f64) -> MasterPoint {
        let n = self.n;
        MasterPoint {
            y: (0..self.k).map(|j| x[j * n..(j + 1) * n].to_vec()).collect(),
            delta: (0..self.k).map(|j| x[(self.k + j) * n..(self.k + j + 1) * n].to_vec()).collect(),
            gamma: x[2 * self.k * n..2 * self.k * n + self.nodes].to_vec(),
            objective,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cuts::{gen_second_order_cut, CutStorage};
    use crate::engine::SmoothOracle;
    use crate::model::NodeObjective;
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn kelley_on_a_parabola() {
        // gamma >= y^2 with y in [-1, 1]; min gamma = 0 at y = 0.
        let obj = NodeObjective::least_squares(DMatrix::from_element(1, 1, 1.0), DVector::zeros(1), 0.0);
        let inst = ProblemInstance::with_single_edge(vec![obj.clone()], 1).with_big_m(1.0).with_mode(SparsityMode::Sos1);
        let mut store = CutStorage::new(1);
        let q = gen_second_order_cut(&SmoothOracle::new(&obj), 0, &[0.7], 2.0).unwrap();
        store.add_cut(Cut::Quadratic(q));
        let mut model = MasterModel::build(&inst, &store).unwrap();
        let rel = model.solve_relaxation().unwrap();
        assert_eq!(rel.status, LpStatus::Optimal);
        assert!(rel.objective.abs() < 1e-6, "{rel:?}");
        assert!(rel.x[model.y(0, 0)].abs() < 1e-3);
        assert!(rel.rounds > 0);
    }

    #[test]
    fn layout_is_contiguous() {
        let obj = NodeObjective::least_squares(DMatrix::identity(3, 3), DVector::zeros(3), 0.0);
        let inst = ProblemInstance::with_single_edge(vec![obj.clone(), obj], 2).with_big_m(2.0);
        let model = MasterModel::build(&inst, &CutStorage::new(2)).unwrap();
        assert_eq!((model.y(0, 2), model.delta(0, 0), model.gamma(1)), (2, 3, 7));
        assert_eq!(model.t(0, 0), 8);
        assert_eq!(model.num_vars(), 11);
        // 2n big-M rows plus the cardinality row
        assert_eq!(model.num_rows(), 7);
    }
}
