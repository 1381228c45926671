//! Best-first branch-and-bound over the master model, in two flavours: a
//! fresh search returning the master optimum, and a persistent search that
//! hands every integral node to a callback which may add lazy cuts.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::Instant;

use log::debug;
use serde::{Deserialize, Serialize};

use super::{LpStatus, MasterError, MasterModel, MasterPoint, Relaxation};
use crate::cuts::Cut;
use crate::model::SparsityMode;

#[derive(Debug, Clone)]
pub struct BnbConfig {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub int_tol: f64,
    pub node_limit: usize,
    pub deadline: Option<Instant>,
    pub log_nodes: bool,
}

impl Default for BnbConfig {
    fn default() -> Self {
        Self { abs_tol: 1e-6, rel_tol: 0.0, int_tol: 1e-6, node_limit: 1_000_000, deadline: None, log_nodes: false }
    }
}

impl BnbConfig {
    fn prune_tol(&self, bound: f64) -> f64 {
        self.abs_tol.max(self.rel_tol * bound.abs())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnbStatus {
    Optimal,
    NodeLimit,
    TimeLimit,
    Infeasible,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BnbStats {
    pub nodes: usize,
    pub branchings: usize,
    pub max_depth: usize,
    pub lp_solves: usize,
    pub kelley_stalls: usize,
    pub callbacks: usize,
    pub lazy_cuts: usize,
}

#[derive(Debug, Clone)]
pub struct BnbResult {
    /// Best integral master point found with objective below the cutoff.
    pub incumbent: Option<MasterPoint>,
    /// Minimum bound over open and fathomed nodes.
    pub lb: f64,
    /// Cutoff at termination, lowered by callback upper bounds.
    pub cutoff: f64,
    pub status: BnbStatus,
    pub stats: BnbStats,
}

/// Answer of the integral-node callback in the single-tree search.
#[derive(Debug, Clone, Default)]
pub struct LazyResponse {
    /// New cuts, already deduplicated against the store.
    pub cuts: Vec<Cut>,
    /// Verified objective of a feasible point, if one was computed.
    pub ub: Option<f64>,
    /// Stop the search (time limit on the caller's side).
    pub stop: bool,
}

#[derive(Debug, Clone)]
struct Node {
    id: usize,
    depth: usize,
    parent_lb: f64,
    fixes: Vec<(usize, f64, f64)>,
}

struct Open(Node);

impl PartialEq for Open {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Open {}
impl PartialOrd for Open {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Open {
    // Max-heap order: lowest bound first, then lowest id.
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.parent_lb.total_cmp(&self.0.parent_lb).then(other.0.id.cmp(&self.0.id))
    }
}

enum Branch {
    Delta(usize, usize),
    Sos(usize, usize),
}

fn branching_candidate(model: &MasterModel, x: &[f64], int_tol: f64) -> Option<Branch> {
    let (n, k) = (model.n, model.k);
    let mut best: Option<(f64, usize, usize)> = None;
    for j in 0..k {
        for c in 0..n {
            let v = x[model.delta(j, c)];
            let frac = v.min(1.0 - v);
            if frac > int_tol && best.is_none_or(|(b, _, _)| frac > b) {
                best = Some((frac, j, c));
            }
        }
    }
    if let Some((_, j, c)) = best {
        return Some(Branch::Delta(j, c));
    }
    if model.mode() == SparsityMode::Sos1 {
        let mut worst: Option<(f64, usize, usize)> = None;
        for j in 0..k {
            let m = model.root_ub[model.y(j, 0)].max(1.0);
            for c in 0..n {
                let y = x[model.y(j, c)].abs() / m;
                let d = x[model.delta(j, c)];
                if y > int_tol && d < 1.0 - int_tol {
                    let score = y.min(1.0 - d);
                    if worst.is_none_or(|(w, _, _)| score > w) {
                        worst = Some((score, j, c));
                    }
                }
            }
        }
        if let Some((_, j, c)) = worst {
            return Some(Branch::Sos(j, c));
        }
    }
    None
}

fn children(model: &MasterModel, node: &Node, branch: Branch, lb: f64, next_id: &mut usize) -> [Node; 2] {
    let mut make = |extra: Vec<(usize, f64, f64)>| {
        let mut fixes = node.fixes.clone();
        fixes.extend(extra);
        *next_id += 1;
        Node { id: *next_id - 1, depth: node.depth + 1, parent_lb: lb, fixes }
    };
    match branch {
        Branch::Delta(j, c) => {
            let (d, y) = (model.delta(j, c), model.y(j, c));
            [make(vec![(d, 0.0, 0.0), (y, 0.0, 0.0)]), make(vec![(d, 1.0, 1.0)])]
        }
        Branch::Sos(j, c) => {
            let (d, y) = (model.delta(j, c), model.y(j, c));
            [make(vec![(y, 0.0, 0.0)]), make(vec![(d, 1.0, 1.0)])]
        }
    }
}

fn relax(model: &mut MasterModel, stats: &mut BnbStats) -> Result<Relaxation, MasterError> {
    stats.lp_solves += 1;
    match model.solve_relaxation() {
        Err(MasterError::KelleyStall { bound, .. }) => {
            // The LP over the tangents gathered so far is still a relaxation.
            stats.kelley_stalls += 1;
            let x = model.lp.solve()?.x;
            Ok(Relaxation { status: LpStatus::Optimal, x, objective: bound, rounds: super::KELLEY_MAX_ROUNDS })
        }
        other => other,
    }
}

fn search<E, F>(
    model: &mut MasterModel,
    cfg: &BnbConfig,
    mut cutoff: f64,
    mut callback: Option<F>,
) -> Result<BnbResult, E>
where
    E: From<MasterError>,
    F: FnMut(&MasterPoint) -> Result<LazyResponse, E>,
{
    let mut heap = BinaryHeap::new();
    heap.push(Open(Node { id: 0, depth: 0, parent_lb: f64::NEG_INFINITY, fixes: Vec::new() }));
    let mut next_id = 1;
    let mut stats = BnbStats::default();
    let mut fathomed_lb = f64::INFINITY;
    let mut incumbent: Option<MasterPoint> = None;
    let mut status = BnbStatus::Optimal;

    while let Some(Open(node)) = heap.pop() {
        if stats.nodes >= cfg.node_limit {
            heap.push(Open(node));
            status = BnbStatus::NodeLimit;
            break;
        }
        if cfg.deadline.is_some_and(|d| Instant::now() >= d) {
            heap.push(Open(node));
            status = BnbStatus::TimeLimit;
            break;
        }
        let bound = incumbent.as_ref().map_or(cutoff, |p| p.objective.min(cutoff));
        if node.parent_lb >= bound - cfg.prune_tol(bound) {
            fathomed_lb = fathomed_lb.min(node.parent_lb);
            continue;
        }
        stats.nodes += 1;
        stats.max_depth = stats.max_depth.max(node.depth);
        model.apply_bounds(&node.fixes);

        let mut requeue = false;
        loop {
            let rel = relax(model, &mut stats)?;
            if rel.status != LpStatus::Optimal {
                if cfg.log_nodes {
                    debug!(target: "scot::bnb", "node {} depth {} lb - {:?}", node.id, node.depth, rel.status);
                }
                break;
            }
            let lb = rel.objective.max(node.parent_lb);
            let bound = incumbent.as_ref().map_or(cutoff, |p| p.objective.min(cutoff));
            if lb >= bound - cfg.prune_tol(bound) {
                fathomed_lb = fathomed_lb.min(lb);
                if cfg.log_nodes {
                    debug!(target: "scot::bnb", "node {} depth {} lb {lb:.10e} pruned", node.id, node.depth);
                }
                break;
            }
            if let Some(branch) = branching_candidate(model, &rel.x, cfg.int_tol) {
                stats.branchings += 1;
                for child in children(model, &node, branch, lb, &mut next_id) {
                    heap.push(Open(child));
                }
                if cfg.log_nodes {
                    debug!(target: "scot::bnb", "node {} depth {} lb {lb:.10e} branched", node.id, node.depth);
                }
                break;
            }
            let point = model.point(&rel.x, lb);
            let Some(cb) = callback.as_mut() else {
                if cfg.log_nodes {
                    debug!(target: "scot::bnb", "node {} depth {} lb {lb:.10e} integral", node.id, node.depth);
                }
                fathomed_lb = fathomed_lb.min(lb);
                incumbent = Some(point);
                break;
            };
            stats.callbacks += 1;
            let resp = cb(&point)?;
            if let Some(ub) = resp.ub {
                cutoff = cutoff.min(ub);
            }
            stats.lazy_cuts += resp.cuts.len();
            for cut in &resp.cuts {
                model.add_cut(cut);
            }
            if resp.stop {
                requeue = true;
                status = BnbStatus::TimeLimit;
                break;
            }
            if resp.cuts.is_empty() {
                if cfg.log_nodes {
                    debug!(target: "scot::bnb", "node {} depth {} lb {lb:.10e} accepted", node.id, node.depth);
                }
                fathomed_lb = fathomed_lb.min(lb);
                if incumbent.as_ref().is_none_or(|p| lb < p.objective) {
                    incumbent = Some(point);
                }
                break;
            }
        }
        if requeue {
            heap.push(Open(node));
            break;
        }
    }

    let open_lb = heap.iter().map(|o| o.0.parent_lb).fold(f64::INFINITY, f64::min);
    let lb = open_lb.min(fathomed_lb);
    if lb == f64::INFINITY && status == BnbStatus::Optimal {
        status = BnbStatus::Infeasible;
    }
    Ok(BnbResult { incumbent, lb, cutoff, status, stats })
}

/// Master optimum by a fresh search. Nodes whose bound reaches `cutoff`
/// are pruned, so no incumbent means nothing beats `cutoff`.
pub fn bnb_solve(model: &mut MasterModel, cfg: &BnbConfig, cutoff: f64) -> Result<BnbResult, MasterError> {
    search::<MasterError, fn(&MasterPoint) -> Result<LazyResponse, MasterError>>(model, cfg, cutoff, None)
}

/// Single persistent search. Each integral node goes to `callback`; cuts it
/// returns join the shared row pool and the node is solved again. A node is
/// accepted once the callback has nothing new to add.
pub fn bnb_single_tree<E, F>(model: &mut MasterModel, cfg: &BnbConfig, cutoff: f64, callback: F) -> Result<BnbResult, E>
where
    E: From<MasterError>,
    F: FnMut(&MasterPoint) -> Result<LazyResponse, E>,
{
    search(model, cfg, cutoff, Some(callback))
}
