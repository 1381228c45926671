//! Dense bounded-variable simplex.
//!
//! Rows `a'x {<=, >=, =} b` receive one slack each, `a'x + s = b`, with the
//! sense encoded in the slack bounds. The full tableau `B^-1 [A | I]` is kept
//! so rows and bound changes can be applied to the current basis and the
//! next solve starts from it. Phase 1 minimizes the sum of bound violations
//! of basic variables, phase 2 the objective; both use the same pivoting.
//! Pricing is Dantzig's rule with a switch to Bland's rule after a run of
//! degenerate pivots.

use log::debug;
use nalgebra::DMatrix;
use thiserror::Error;

const FEAS_TOL: f64 = 1e-9;
const OPT_TOL: f64 = 1e-9;
const PIVOT_TOL: f64 = 1e-9;
const DEGENERATE_RUN: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Le,
    Ge,
    Eq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("simplex iteration limit {0} reached")]
    IterationLimit(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub status: LpStatus,
    /// Structural variable values.
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
struct Row {
    a: Vec<f64>,
    rhs: f64,
}

#[derive(Debug, Clone)]
pub struct Lp {
    n: usize,
    cost: Vec<f64>,
    rows: Vec<Row>,
    lb: Vec<f64>,
    ub: Vec<f64>,
    /// Current value of every variable, structural then slack.
    val: Vec<f64>,
    /// Row of the basis holding each variable, if basic.
    basic_row: Vec<Option<usize>>,
    basis: Vec<usize>,
    tab: Vec<Vec<f64>>,
    pivots_since_refactor: usize,
    pub max_iter: usize,
}

impl Lp {
    /// `min cost'x` over `lb <= x <= ub` with no rows yet.
    pub fn new(cost: Vec<f64>, lb: Vec<f64>, ub: Vec<f64>) -> Self {
        let n = cost.len();
        assert!(lb.len() == n && ub.len() == n, "bound vectors must match the cost length");
        let val = lb.iter().zip(&ub).map(|(&l, &u)| nonbasic_start(l, u)).collect();
        Self {
            n,
            cost,
            rows: Vec::new(),
            lb,
            ub,
            val,
            basic_row: vec![None; n],
            basis: Vec::new(),
            tab: Vec::new(),
            pivots_since_refactor: 0,
            max_iter: 100_000,
        }
    }

    pub fn num_vars(&self) -> usize {
        self.n
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn bounds(&self, j: usize) -> (f64, f64) {
        (self.lb[j], self.ub[j])
    }

    pub fn add_row(&mut self, a: Vec<f64>, sense: Sense, rhs: f64) -> usize {
        assert_eq!(a.len(), self.n, "row length must equal the number of variables");
        let m = self.rows.len();
        for t in &mut self.tab {
            t.push(0.0);
        }
        let mut r = Vec::with_capacity(self.n + m + 1);
        r.extend_from_slice(&a);
        r.resize(self.n + m, 0.0);
        r.push(1.0);
        for (i, &b) in self.basis.iter().enumerate() {
            let f = r[b];
            if f != 0.0 {
                for (rv, tv) in r.iter_mut().zip(&self.tab[i]) {
                    *rv -= f * tv;
                }
                r[b] = 0.0;
            }
        }
        let activity: f64 = a.iter().zip(&self.val).map(|(c, v)| c * v).sum();
        let (l, u) = match sense {
            Sense::Le => (0.0, f64::INFINITY),
            Sense::Ge => (f64::NEG_INFINITY, 0.0),
            Sense::Eq => (0.0, 0.0),
        };
        self.lb.push(l);
        self.ub.push(u);
        self.val.push(rhs - activity);
        self.basic_row.push(Some(m));
        self.basis.push(self.n + m);
        self.tab.push(r);
        self.rows.push(Row { a, rhs });
        m
    }

    /// Changes the bounds of structural variable `j`, keeping the basis.
    pub fn set_bounds(&mut self, j: usize, l: f64, u: f64) {
        assert!(j < self.n && l <= u, "invalid bounds [{l}, {u}] for variable {j}");
        let (old_l, old_u) = (self.lb[j], self.ub[j]);
        self.lb[j] = l;
        self.ub[j] = u;
        if self.basic_row[j].is_some() {
            return;
        }
        let old = self.val[j];
        let new = if old == old_l && l.is_finite() {
            l
        } else if old == old_u && u.is_finite() {
            u
        } else if l.is_finite() || u.is_finite() {
            old.clamp(l, u)
        } else {
            0.0
        };
        self.shift_nonbasic(j, new - old);
    }

    fn shift_nonbasic(&mut self, j: usize, delta: f64) {
        if delta == 0.0 {
            return;
        }
        self.val[j] += delta;
        for (i, &b) in self.basis.iter().enumerate() {
            self.val[b] -= delta * self.tab[i][j];
        }
    }

    /// Row duals `c_B' B^-1` of the current basis.
    pub fn duals(&self) -> Vec<f64> {
        let m = self.rows.len();
        (0..m)
            .map(|r| self.basis.iter().enumerate().map(|(i, &b)| self.cost_of(b) * self.tab[i][self.n + r]).sum())
            .collect()
    }

    fn cost_of(&self, j: usize) -> f64 {
        if j < self.n {
            self.cost[j]
        } else {
            0.0
        }
    }

    pub fn solve(&mut self) -> Result<LpSolution, LpError> {
        let mut iterations = 0usize;
        let mut degenerate = 0usize;
        let mut verified_refactor = false;
        let nt = self.n + self.rows.len();
        let mut cb = vec![0.0; self.rows.len()];
        let mut d = vec![0.0; nt];
        loop {
            if self.pivots_since_refactor >= 50.max(self.rows.len()) {
                self.refactor()?;
            }
            let mut phase1 = false;
            for (i, &b) in self.basis.iter().enumerate() {
                let v = self.val[b];
                cb[i] = if v < self.lb[b] - FEAS_TOL {
                    phase1 = true;
                    -1.0
                } else if v > self.ub[b] + FEAS_TOL {
                    phase1 = true;
                    1.0
                } else {
                    0.0
                };
            }
            if !phase1 {
                for (i, &b) in self.basis.iter().enumerate() {
                    cb[i] = self.cost_of(b);
                }
            }
            for (j, dj) in d.iter_mut().enumerate() {
                *dj = if phase1 { 0.0 } else { self.cost_of(j) };
            }
            for (i, row) in self.tab.iter().enumerate() {
                let c = cb[i];
                if c != 0.0 {
                    for (dj, t) in d.iter_mut().zip(row) {
                        *dj -= c * t;
                    }
                }
            }

            let bland = degenerate >= DEGENERATE_RUN;
            let mut enter: Option<(usize, f64)> = None;
            let mut best = 0.0;
            for j in 0..nt {
                if self.basic_row[j].is_some() || self.lb[j] == self.ub[j] {
                    continue;
                }
                let dir = if d[j] < -OPT_TOL && self.val[j] < self.ub[j] {
                    1.0
                } else if d[j] > OPT_TOL && self.val[j] > self.lb[j] {
                    -1.0
                } else {
                    continue;
                };
                if bland {
                    enter = Some((j, dir));
                    break;
                }
                if d[j].abs() > best {
                    best = d[j].abs();
                    enter = Some((j, dir));
                }
            }

            let Some((j, dir)) = enter else {
                if !verified_refactor && self.pivots_since_refactor > 0 && self.residual() > 1e-8 {
                    self.refactor()?;
                    verified_refactor = true;
                    continue;
                }
                if phase1 {
                    return Ok(self.solution(LpStatus::Infeasible, iterations));
                }
                return Ok(self.solution(LpStatus::Optimal, iterations));
            };

            iterations += 1;
            if iterations > self.max_iter {
                return Err(LpError::IterationLimit(self.max_iter));
            }

            // Ratio test: x_j moves by dir*t, basic i moves by -dir*t*tab[i][j].
            let mut t_best = if dir > 0.0 { self.ub[j] - self.val[j] } else { self.val[j] - self.lb[j] };
            let mut leave: Option<(usize, f64)> = None;
            for (i, &b) in self.basis.iter().enumerate() {
                let a = self.tab[i][j];
                if a.abs() <= PIVOT_TOL {
                    continue;
                }
                let rate = -dir * a;
                let v = self.val[b];
                let (l, u) = (self.lb[b], self.ub[b]);
                let target = if rate > 0.0 {
                    if v < l - FEAS_TOL {
                        l
                    } else if v <= u + FEAS_TOL {
                        u
                    } else {
                        continue;
                    }
                } else if v > u + FEAS_TOL {
                    u
                } else if v >= l - FEAS_TOL {
                    l
                } else {
                    continue;
                };
                if !target.is_finite() {
                    continue;
                }
                let t = ((target - v) / rate).max(0.0);
                let better = match leave {
                    None => t < t_best,
                    Some((li, _)) => {
                        if bland {
                            t < t_best || (t == t_best && b < self.basis[li])
                        } else {
                            t < t_best - 1e-12 || (t <= t_best + 1e-12 && a.abs() > self.tab[li][j].abs())
                        }
                    }
                };
                if better {
                    t_best = t;
                    leave = Some((i, target));
                }
            }

            if !t_best.is_finite() {
                if phase1 {
                    // A phase-1 ray cannot exist in exact arithmetic.
                    self.refactor()?;
                    continue;
                }
                return Ok(self.solution(LpStatus::Unbounded, iterations));
            }
            degenerate = if t_best <= 1e-12 { degenerate + 1 } else { 0 };

            match leave {
                None => {
                    // Bound flip of the entering variable.
                    let target = if dir > 0.0 { self.ub[j] } else { self.lb[j] };
                    let delta = target - self.val[j];
                    self.shift_nonbasic(j, delta);
                    self.val[j] = target;
                }
                Some((r, target)) => {
                    self.shift_nonbasic(j, dir * t_best);
                    let out = self.basis[r];
                    self.val[out] = target;
                    self.pivot(r, j);
                }
            }
        }
    }

    fn pivot(&mut self, r: usize, j: usize) {
        let out = self.basis[r];
        let p = self.tab[r][j];
        let inv = 1.0 / p;
        for v in self.tab[r].iter_mut() {
            *v *= inv;
        }
        self.tab[r][j] = 1.0;
        let (before, rest) = self.tab.split_at_mut(r);
        let (pivot_row, after) = rest.split_first_mut().expect("pivot row exists");
        for row in before.iter_mut().chain(after.iter_mut()) {
            let f = row[j];
            if f != 0.0 {
                for (v, pv) in row.iter_mut().zip(pivot_row.iter()) {
                    *v -= f * pv;
                }
                row[j] = 0.0;
            }
        }
        self.basis[r] = j;
        self.basic_row[j] = Some(r);
        self.basic_row[out] = None;
        self.pivots_since_refactor += 1;
    }

    /// Largest violation of `A x + s = b` at the current values.
    fn residual(&self) -> f64 {
        self.rows
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let ax: f64 = row.a.iter().zip(&self.val).map(|(a, v)| a * v).sum();
                (ax + self.val[self.n + i] - row.rhs).abs() / (1.0 + row.rhs.abs())
            })
            .fold(0.0, f64::max)
    }

    /// Recomputes the tableau and basic values from the original rows. A
    /// numerically singular basis is replaced by the slack basis, keeping
    /// the structural values; the next phase 1 restores feasibility.
    fn refactor(&mut self) -> Result<(), LpError> {
        if !self.try_refactor() {
            debug!(target: "scot::lp", "singular basis, restarting from slacks");
            self.slack_basis();
        }
        Ok(())
    }

    fn slack_basis(&mut self) {
        let m = self.rows.len();
        for j in 0..self.n {
            self.basic_row[j] = None;
            if !self.val[j].is_finite() {
                self.val[j] = nonbasic_start(self.lb[j], self.ub[j]);
            }
        }
        self.basis = (0..m).map(|i| self.n + i).collect();
        for i in 0..m {
            let mut r = self.rows[i].a.clone();
            r.resize(self.n + m, 0.0);
            r[self.n + i] = 1.0;
            self.tab[i] = r;
            self.basic_row[self.n + i] = Some(i);
            let ax: f64 = self.rows[i].a.iter().zip(&self.val).map(|(a, v)| a * v).sum();
            self.val[self.n + i] = self.rows[i].rhs - ax;
        }
        self.pivots_since_refactor = 0;
    }

    fn try_refactor(&mut self) -> bool {
        let m = self.rows.len();
        let nt = self.n + m;
        self.pivots_since_refactor = 0;
        if m == 0 {
            return true;
        }
        let column = |j: usize, i: usize| -> f64 {
            if j < self.n {
                self.rows[i].a[j]
            } else if j - self.n == i {
                1.0
            } else {
                0.0
            }
        };
        let b_mat = DMatrix::from_fn(m, m, |i, k| column(self.basis[k], i));
        let lu = b_mat.lu();
        let full = DMatrix::from_fn(m, nt, |i, j| column(j, i));
        let Some(t) = lu.solve(&full) else {
            return false;
        };
        if t.iter().any(|v| !v.is_finite() || v.abs() > 1e12) {
            return false;
        }
        // rhs for basics: b - N x_N
        let mut rhs = nalgebra::DVector::from_fn(m, |i, _| self.rows[i].rhs);
        for j in (0..nt).filter(|&j| self.basic_row[j].is_none()) {
            let v = self.val[j];
            if v != 0.0 {
                for i in 0..m {
                    rhs[i] -= column(j, i) * v;
                }
            }
        }
        let Some(xb) = lu.solve(&rhs) else {
            return false;
        };
        for i in 0..m {
            self.tab[i] = t.row(i).iter().copied().collect();
            let b = self.basis[i];
            self.tab[i][b] = 1.0;
            self.val[b] = xb[i];
        }
        true
    }

    fn solution(&self, status: LpStatus, iterations: usize) -> LpSolution {
        let x = self.val[..self.n].to_vec();
        let objective = self.cost.iter().zip(&x).map(|(c, v)| c * v).sum();
        LpSolution { status, x, objective, iterations }
    }
}

fn nonbasic_start(l: f64, u: f64) -> f64 {
    if l.is_finite() {
        l
    } else if u.is_finite() {
        u
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maximize_single_bounded_variable() {
        let mut lp = Lp::new(vec![-1.0], vec![0.0], vec![5.0]);
        let sol = lp.solve().unwrap();
        assert_eq!(sol.status, LpStatus::Optimal);
        assert_eq!(sol.x, vec![5.0]);
        assert_eq!(sol.objective, -5.0);
    }

    #[test]
    fn contradictory_rows_are_infeasible() {
        let mut lp = Lp::new(vec![0.0], vec![f64::NEG_INFINITY], vec![f64::INFINITY]);
        lp.add_row(vec![1.0], Sense::Le, 1.0);
        lp.add_row(vec![1.0], Sense::Ge, 2.0);
        assert_eq!(lp.solve().unwrap().status, LpStatus::Infeasible);
    }

    #[test]
    fn free_descent_is_unbounded() {
        let mut lp = Lp::new(vec![1.0, 0.0], vec![f64::NEG_INFINITY, 0.0], vec![f64::INFINITY, 1.0]);
        lp.add_row(vec![1.0, 1.0], Sense::Le, 3.0);
        assert_eq!(lp.solve().unwrap().status, LpStatus::Unbounded);
    }

    #[test]
    fn equality_rows_and_duals() {
        // min x + 2y s.t. x + y = 1, x <= 0.25, x,y >= 0 -> x = 0.25, y = 0.75
        let mut lp = Lp::new(vec![1.0, 2.0], vec![0.0, 0.0], vec![0.25, f64::INFINITY]);
        lp.add_row(vec![1.0, 1.0], Sense::Eq, 1.0);
        let sol = lp.solve().unwrap();
        assert!((sol.x[0] - 0.25).abs() < 1e-12 && (sol.x[1] - 0.75).abs() < 1e-12);
        assert!((sol.objective - 1.75).abs() < 1e-12);
        assert!((lp.duals()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn warm_start_after_new_row_and_bounds() {
        let mut lp = Lp::new(vec![-1.0, -1.0], vec![0.0, 0.0], vec![4.0, 4.0]);
        assert_eq!(lp.solve().unwrap().objective, -8.0);
        lp.add_row(vec![1.0, 2.0], Sense::Le, 4.0);
        let sol = lp.solve().unwrap();
        assert!((sol.objective + 4.0).abs() < 1e-12, "{sol:?}");
        lp.set_bounds(0, 0.0, 1.0);
        let sol = lp.solve().unwrap();
        assert!((sol.objective + 2.5).abs() < 1e-12, "{sol:?}");
        lp.set_bounds(0, 0.0, 4.0);
        assert!((lp.solve().unwrap().objective + 4.0).abs() < 1e-12);
    }
}
