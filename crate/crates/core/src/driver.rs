//! DiHOA and DiPOA orchestration.
//!
//! Every rank runs [`run_dihoa`] / [`run_dipoa`]. Rank 0 owns the cut store
//! and the master problem and steers the others with broadcast commands;
//! all ranks take part in every primal solve and contribute their cut data
//! through a gather. The finished report is broadcast so that each rank
//! returns the same value.

use std::collections::HashSet;
use std::time::{Duration, Instant};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cuts::{cut_from_parts, AddOutcome, Cut, CutError, CutStorage};
use crate::engine::{strong_convexity_constant, AdmmConfig, AdmmStatus, EngineError, PrimalSolution, RhAdmm, SmoothOracle};
use crate::master::{bnb_single_tree, bnb_solve, BnbConfig, BnbStatus, LazyResponse, MasterError, MasterModel};
use crate::model::{ModelError, ProblemInstance, SparsityMode};
use crate::transport::{CommError, CommWorld};

const BIG_M_BINDING: f64 = 0.999;

#[derive(Debug, Error)]
pub enum DriverError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Master(#[from] MasterError),
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Cut(#[from] CutError),
    #[error("invalid settings: {0}")]
    InvalidSettings(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("coordinator aborted the run")]
    Aborted,
    #[error("malformed report broadcast: {0}")]
    Report(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    Dihoa,
    Dipoa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SwitchMode {
    #[default]
    Relative,
    Absolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CutPolicy {
    Linear,
    Quadratic,
    /// Second-order cuts in the multi-tree phase of DiHOA, first-order
    /// everywhere else.
    #[default]
    PerPhase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub algorithm: Algorithm,
    pub relative_gap: f64,
    pub absolute_gap: f64,
    pub switch_tol: f64,
    pub switch_mode: SwitchMode,
    /// Seconds.
    pub time_limit: f64,
    pub max_oa_iters: usize,
    pub cut_policy: CutPolicy,
    /// Overrides the mode stored with the problem.
    pub sparsity_mode: Option<SparsityMode>,
    pub node_limit: usize,
    pub big_m_retries: usize,
    /// Normalize datasets whose files are marked as not normalized.
    pub normalize: bool,
    /// Seconds a rank waits inside one collective.
    pub comm_timeout: f64,
    /// 0 quiet, 1 iterations, 2 details, 3 branch-and-bound nodes.
    pub verbosity: u8,
    pub admm: AdmmConfig,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Dihoa,
            relative_gap: 1e-5,
            absolute_gap: 1e-6,
            switch_tol: 1e-3,
            switch_mode: SwitchMode::Relative,
            time_limit: 100.0,
            max_oa_iters: 100,
            cut_policy: CutPolicy::PerPhase,
            sparsity_mode: None,
            node_limit: 1_000_000,
            big_m_retries: 3,
            normalize: false,
            comm_timeout: 30.0,
            verbosity: 0,
            admm: AdmmConfig::default(),
        }
    }
}

impl Settings {
    pub fn validate(&self) -> Result<(), DriverError> {
        let bad = |m: &str| Err(DriverError::InvalidSettings(m.into()));
        if !(self.relative_gap > 0.0) || !(self.absolute_gap > 0.0) {
            return bad("gaps must be positive");
        }
        if !(self.time_limit > 0.0) {
            return bad("time_limit must be positive");
        }
        if !(self.switch_tol >= 0.0) {
            return bad("switch_tol must be nonnegative");
        }
        if !(self.comm_timeout > 0.0) {
            return bad("comm_timeout must be positive");
        }
        if self.max_oa_iters == 0 || self.node_limit == 0 {
            return bad("iteration and node limits must be positive");
        }
        self.admm.validate().map_err(|e| DriverError::InvalidSettings(e.to_string()))
    }

    pub fn comm_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.comm_timeout)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    TimeLimit,
    NodeLimit,
    Infeasible,
    /// The search ended without closing the gap (repeated supports).
    Stalled,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CutCounts {
    pub linear: usize,
    pub quadratic: usize,
    pub lazy: usize,
    pub duplicates: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub initialization: f64,
    pub multi_tree: f64,
    pub single_tree: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub algorithm: Algorithm,
    pub status: SolveStatus,
    #[serde(with = "nonfinite::pos")]
    pub objective: f64,
    #[serde(with = "nonfinite::neg")]
    pub lower_bound: f64,
    #[serde(with = "nonfinite::pos")]
    pub gap: f64,
    pub x: Vec<f64>,
    pub support: Vec<usize>,
    #[serde(with = "nonfinite::pos::vec")]
    pub ub_trace: Vec<f64>,
    #[serde(with = "nonfinite::neg::vec")]
    pub lb_trace: Vec<f64>,
    pub q_switch: Option<usize>,
    pub iterations: usize,
    pub cuts: CutCounts,
    pub primal_solves: usize,
    pub master_builds: usize,
    pub master_builds_after_switch: usize,
    pub bnb_nodes: usize,
    #[serde(with = "nonfinite::pos")]
    pub consensus_residual: f64,
    pub big_m: Vec<f64>,
    pub big_m_estimated: bool,
    pub big_m_resolves: usize,
    pub warnings: Vec<String>,
    pub times: PhaseTimes,
}

impl SolveReport {
    /// Equality up to wall-clock timings.
    pub fn same_outcome(&self, other: &Self) -> bool {
        let mut a = self.clone();
        a.times = other.times.clone();
        &a == other
    }
}

/// JSON has no infinities; they travel as `null`. Each field has one
/// possible non-finite value, restored on the way back in.
mod nonfinite {
    macro_rules! fill {
        ($name:ident, $fill:expr) => {
            pub mod $name {
                use serde::{Deserialize, Deserializer, Serializer};

                pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
                    if v.is_finite() {
                        s.serialize_f64(*v)
                    } else {
                        s.serialize_none()
                    }
                }

                pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
                    Ok(Option::<f64>::deserialize(d)?.unwrap_or($fill))
                }

                pub mod vec {
                    use serde::{Deserialize, Deserializer, Serializer};

                    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
                        s.collect_seq(v.iter().map(|x| x.is_finite().then_some(*x)))
                    }

                    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
                        Ok(Vec::<Option<f64>>::deserialize(d)?.into_iter().map(|x| x.unwrap_or($fill)).collect())
                    }
                }
            }
        };
    }
    fill!(pos, f64::INFINITY);
    fill!(neg, f64::NEG_INFINITY);
}

/// `(ub - lb) / max(1e-10, |ub|)`, infinite without an upper bound.
pub fn gap(ub: f64, lb: f64) -> f64 {
    if ub == f64::INFINITY {
        return f64::INFINITY;
    }
    (ub - lb) / ub.abs().max(1e-10)
}

/// Whether the last lower-bound improvement is at most `eps`, relative to
/// `max(1, |lb|)`.
pub fn check_switch(lb_trace: &[f64], eps: f64) -> Result<bool, DriverError> {
    check_switch_with(lb_trace, eps, SwitchMode::Relative)
}

pub fn check_switch_with(lb_trace: &[f64], eps: f64, mode: SwitchMode) -> Result<bool, DriverError> {
    let [.., prev, last] = lb_trace else {
        return Err(DriverError::Precondition("switch test needs two lower bounds".into()));
    };
    let step = last - prev;
    Ok(match mode {
        SwitchMode::Relative => step / last.abs().max(1.0) <= eps,
        SwitchMode::Absolute => step <= eps,
    })
}

pub fn run_dihoa(world: &mut CommWorld, inst: &ProblemInstance, settings: &Settings) -> Result<SolveReport, DriverError> {
    run(world, inst, &Settings { algorithm: Algorithm::Dihoa, ..settings.clone() })
}

pub fn run_dipoa(world: &mut CommWorld, inst: &ProblemInstance, settings: &Settings) -> Result<SolveReport, DriverError> {
    run(world, inst, &Settings { algorithm: Algorithm::Dipoa, ..settings.clone() })
}

const CMD_STOP: f64 = 0.0;
const CMD_SOLVE: f64 = 1.0;
const STOP_DONE: f64 = 0.0;
const STOP_RESTART: f64 = 1.0;
const STOP_ABORT: f64 = 2.0;

/// Runs the algorithm selected in `settings`.
pub fn run(world: &mut CommWorld, inst: &ProblemInstance, settings: &Settings) -> Result<SolveReport, DriverError> {
    settings.validate()?;
    if world.size() != inst.num_nodes() {
        return Err(DriverError::Precondition(format!(
            "world of size {} for {} nodes",
            world.size(),
            inst.num_nodes()
        )));
    }
    let start = Instant::now();
    world.set_timeout(settings.comm_timeout());
    let mut inst = inst.clone();
    if let Some(mode) = settings.sparsity_mode {
        inst.sparsity.mode = mode;
    }
    let estimated = inst.sparsity.big_m.len() != inst.hypergraph.num_edges();
    let mut big_m = if world.is_root() && estimated {
        crate::model::estimate_big_m(&inst)?
    } else {
        inst.sparsity.big_m.clone()
    };
    big_m = world.broadcast(0, &big_m)?;
    inst.sparsity.big_m = big_m;
    inst.sparsity.estimated = estimated;

    let mut resolves = 0;
    let mut carried_warnings = Vec::new();
    loop {
        let mut rank = RankState::new(world.rank(), &inst, settings);
        if world.is_root() {
            let mut coord = Coordinator::new(&inst, settings, start);
            let outcome = coord.solve(world, &mut rank);
            let mut report = match outcome {
                Ok(report) => report,
                Err(e) => {
                    let _ = world.broadcast(0, &[CMD_STOP, STOP_ABORT]);
                    return Err(e);
                }
            };
            report.big_m_resolves = resolves;
            report.big_m_estimated = estimated;
            let mut warnings = std::mem::take(&mut carried_warnings);
            warnings.append(&mut report.warnings);
            report.warnings = warnings;
            let m_min = inst.sparsity.big_m.iter().copied().fold(f64::INFINITY, f64::min);
            let peak = report.x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let binding = report.objective.is_finite() && peak >= BIG_M_BINDING * m_min;
            if binding {
                let msg = format!("big-M binding: |x|_inf = {peak:.6e} reaches {BIG_M_BINDING} * M = {m_min:.6e}");
                warn!("{msg}");
                report.warnings.push(msg);
            }
            if binding && resolves < settings.big_m_retries {
                world.broadcast(0, &[CMD_STOP, STOP_RESTART])?;
                resolves += 1;
                carried_warnings = report.warnings;
                for m in &mut inst.sparsity.big_m {
                    *m *= 2.0;
                }
                continue;
            }
            world.broadcast(0, &[CMD_STOP, STOP_DONE])?;
            report.times.total = start.elapsed().as_secs_f64();
            let json = serde_json::to_vec(&report).map_err(|e| DriverError::Report(e.to_string()))?;
            let wire: Vec<f64> = json.iter().map(|&b| b as f64).collect();
            world.broadcast(0, &wire)?;
            return Ok(report);
        }
        let deadline = start + Duration::from_secs_f64(settings.time_limit.min(1e9));
        match rank.serve(world, deadline, settings.comm_timeout())? {
            Control::Restart => {
                for m in &mut inst.sparsity.big_m {
                    *m *= 2.0;
                }
                continue;
            }
            Control::Done => {
                let wire = world.broadcast(0, &[])?;
                let bytes: Vec<u8> = wire.iter().map(|&v| v as u8).collect();
                return serde_json::from_slice(&bytes).map_err(|e| DriverError::Report(e.to_string()));
            }
        }
    }
}

enum Control {
    Restart,
    Done,
}

/// Per-rank view: this node's ADMM state and objective.
struct RankState<'a> {
    admm: RhAdmm<'a>,
    oracle: SmoothOracle<'a>,
    m: f64,
    primary: usize,
}

impl<'a> RankState<'a> {
    fn new(rank: usize, inst: &'a ProblemInstance, settings: &Settings) -> Self {
        let obj = &inst.objectives[rank];
        Self {
            admm: RhAdmm::new(inst, rank, settings.admm),
            oracle: SmoothOracle::new(obj),
            m: strong_convexity_constant(obj).m,
            primary: inst.hypergraph.primary_edge(rank).expect("validated hypergraph"),
        }
    }

    /// `[f_i, m_i, grad f_i]` at this node's consensus variable.
    fn cut_data(&self, sol: &PrimalSolution) -> Vec<f64> {
        let (f, g) = self.oracle.value_grad(&sol.y[self.primary]);
        let mut out = Vec::with_capacity(g.len() + 2);
        out.push(f);
        out.push(self.m);
        out.extend(g);
        out
    }

    fn relax(&mut self, world: &mut CommWorld) -> Result<(PrimalSolution, Option<Vec<Vec<f64>>>), DriverError> {
        let sol = self.admm.solve_relaxed(world)?;
        let parts = world.gather(0, &self.cut_data(&sol))?;
        Ok((sol, parts))
    }

    fn primal(
        &mut self,
        world: &mut CommWorld,
        masks: &[Vec<bool>],
    ) -> Result<(PrimalSolution, Option<Vec<Vec<f64>>>), DriverError> {
        let sol = self.admm.solve(world, masks)?;
        let parts = world.gather(0, &self.cut_data(&sol))?;
        Ok((sol, parts))
    }

    /// Worker loop of a non-root rank. The root may spend the whole time
    /// budget in the master between two commands, so the wait for a command
    /// is stretched to the remaining budget.
    fn serve(&mut self, world: &mut CommWorld, deadline: Instant, comm: Duration) -> Result<Control, DriverError> {
        self.relax(world)?;
        let n = self.admm_n();
        loop {
            world.set_timeout(deadline.saturating_duration_since(Instant::now()) + comm);
            let cmd = world.broadcast(0, &[]);
            world.set_timeout(comm);
            let cmd = cmd?;
            match cmd.first().copied() {
                Some(CMD_SOLVE) => {
                    let masks: Vec<Vec<bool>> = cmd[1..].chunks(n).map(|c| c.iter().map(|&v| v != 0.0).collect()).collect();
                    self.primal(world, &masks)?;
                }
                Some(CMD_STOP) => {
                    return match cmd.get(1).copied() {
                        Some(STOP_RESTART) => Ok(Control::Restart),
                        Some(STOP_DONE) => Ok(Control::Done),
                        _ => Err(DriverError::Aborted),
                    };
                }
                _ => return Err(DriverError::Report(format!("unknown command {cmd:?}"))),
            }
        }
    }

    fn admm_n(&self) -> usize {
        self.oracle.objective().dim()
    }
}

/// Rank-0 bookkeeping.
struct Coordinator<'a> {
    inst: &'a ProblemInstance,
    settings: &'a Settings,
    start: Instant,
    deadline: Instant,
    store: CutStorage,
    visited: HashSet<Vec<bool>>,
    ub: f64,
    lb: f64,
    incumbent: Option<PrimalSolution>,
    lb_trace: Vec<f64>,
    ub_trace: Vec<f64>,
    master_lbs: Vec<f64>,
    counts: CutCounts,
    primal_solves: usize,
    master_builds: usize,
    bnb_nodes: usize,
    iterations: usize,
    q_switch: Option<usize>,
    warnings: Vec<String>,
    times: PhaseTimes,
}

enum Phase {
    MultiTree,
    SingleTree,
}

impl<'a> Coordinator<'a> {
    fn new(inst: &'a ProblemInstance, settings: &'a Settings, start: Instant) -> Self {
        Self {
            inst,
            settings,
            start,
            deadline: start + Duration::from_secs_f64(settings.time_limit.min(1e9)),
            store: CutStorage::new(inst.num_nodes()),
            visited: HashSet::new(),
            ub: f64::INFINITY,
            lb: f64::NEG_INFINITY,
            incumbent: None,
            lb_trace: Vec::new(),
            ub_trace: Vec::new(),
            master_lbs: Vec::new(),
            counts: CutCounts::default(),
            primal_solves: 0,
            master_builds: 0,
            bnb_nodes: 0,
            iterations: 0,
            q_switch: None,
            warnings: Vec::new(),
            times: PhaseTimes::default(),
        }
    }

    fn timed_out(&self) -> bool {
        Instant::now() >= self.deadline
    }

    fn converged(&self) -> bool {
        self.ub - self.lb <= self.settings.absolute_gap || gap(self.ub, self.lb) <= self.settings.relative_gap
    }

    fn quadratic_cuts(&self, phase: Phase) -> bool {
        match self.settings.cut_policy {
            CutPolicy::Linear => false,
            CutPolicy::Quadratic => true,
            CutPolicy::PerPhase => {
                matches!(phase, Phase::MultiTree) && self.settings.algorithm == Algorithm::Dihoa
            }
        }
    }

    fn bnb_config(&self) -> BnbConfig {
        BnbConfig {
            abs_tol: self.settings.absolute_gap,
            rel_tol: 0.5 * self.settings.relative_gap,
            node_limit: self.settings.node_limit,
            deadline: Some(self.deadline),
            log_nodes: self.settings.verbosity >= 3,
            ..BnbConfig::default()
        }
    }

    fn record(&mut self) {
        self.lb_trace.push(self.lb);
        self.ub_trace.push(self.ub);
    }

    fn raise_lb(&mut self, lb: f64) {
        self.lb = self.lb.max(lb.min(self.ub));
    }

    /// Adds cuts built from gathered rank data; returns the new ones.
    fn absorb_cuts(&mut self, sol: &PrimalSolution, parts: &[Vec<f64>], quadratic: bool) -> Result<Vec<Cut>, DriverError> {
        let mut added = Vec::new();
        for (node, p) in parts.iter().enumerate() {
            let point = sol.y[self.inst.hypergraph.primary_edge(node).expect("validated")].clone();
            let m = (quadratic && p[1] > 0.0).then_some(p[1]);
            let cut = cut_from_parts(node, point, p[0], p[2..].to_vec(), m)?;
            let quad = cut.is_quadratic();
            match self.store.add_cut(cut.clone()) {
                AddOutcome::Added => {
                    if quad {
                        self.counts.quadratic += 1;
                    } else {
                        self.counts.linear += 1;
                    }
                    added.push(cut);
                }
                AddOutcome::Duplicate => self.counts.duplicates += 1,
            }
        }
        Ok(added)
    }

    fn accept(&mut self, sol: PrimalSolution) {
        if sol.status != AdmmStatus::Converged {
            self.warnings.push(format!(
                "primal solve stopped after {} ADMM iterations with residual {:.3e}",
                sol.iterations, sol.residual
            ));
        }
        if sol.objective < self.ub {
            self.ub = sol.objective;
            self.incumbent = Some(sol);
        }
    }

    /// Broadcasts a primal request, solves, and folds in the result. Also
    /// returns the relaxation bound linearized at the new primal point.
    fn evaluate(
        &mut self,
        world: &mut CommWorld,
        rank: &mut RankState<'_>,
        masks: &[Vec<bool>],
        quadratic: bool,
    ) -> Result<(Vec<Cut>, f64), DriverError> {
        let mut cmd = vec![CMD_SOLVE];
        cmd.extend(masks.iter().flatten().map(|&b| if b { 1.0 } else { 0.0 }));
        world.broadcast(0, &cmd)?;
        let (sol, parts) = rank.primal(world, masks)?;
        let parts = parts.expect("root receives the gather");
        self.primal_solves += 1;
        self.visited.insert(masks.concat());
        let cuts = self.absorb_cuts(&sol, &parts, quadratic)?;
        let bound = self.relaxation_bound(&sol, &parts);
        if self.settings.verbosity >= 1 {
            info!(
                "primal solve {}: support {:?} value {:.10e} ({} ADMM iterations)",
                self.primal_solves,
                sol.support(),
                sol.objective,
                sol.iterations
            );
        }
        self.accept(sol);
        Ok((cuts, bound))
    }

    fn masks_from_support(&self, support: &[usize]) -> Vec<Vec<bool>> {
        let mut mask = vec![false; self.inst.n];
        for &k in support {
            mask[k] = true;
        }
        vec![mask; self.inst.hypergraph.num_edges()]
    }

    fn solve(&mut self, world: &mut CommWorld, rank: &mut RankState<'_>) -> Result<SolveReport, DriverError> {
        let status = self.phases(world, rank)?;
        Ok(self.report(status))
    }

    fn phases(&mut self, world: &mut CommWorld, rank: &mut RankState<'_>) -> Result<SolveStatus, DriverError> {
        let t0 = Instant::now();
        let kappa = self.inst.sparsity.kappa;
        let (relaxed, parts) = rank.relax(world)?;
        let parts = parts.expect("root receives the gather");
        let fw = self.relaxation_bound(&relaxed, &parts);
        self.absorb_cuts(&relaxed, &parts, false)?;

        let mut order: Vec<usize> = (0..self.inst.n).filter(|&k| relaxed.y[0][k] != 0.0).collect();
        order.sort_by(|&a, &b| relaxed.y[0][b].abs().total_cmp(&relaxed.y[0][a].abs()).then(a.cmp(&b)));
        order.truncate(kappa);
        order.sort_unstable();
        let masks = self.masks_from_support(&order);
        let quad = self.quadratic_cuts(Phase::MultiTree);
        let (_, at_primal) = self.evaluate(world, rank, &masks, quad)?;
        // Valid at any point of the relaxed feasible set; closes the gap
        // when the relaxation is kappa-sparse.
        self.raise_lb(fw.max(at_primal));
        if self.converged() {
            self.record();
            self.times.initialization = t0.elapsed().as_secs_f64();
            return Ok(SolveStatus::Optimal);
        }
        self.times.initialization = t0.elapsed().as_secs_f64();

        let t1 = Instant::now();
        let outcome = self.multi_tree(world, rank);
        self.times.multi_tree = t1.elapsed().as_secs_f64();
        if let Some(status) = outcome? {
            return Ok(status);
        }

        let t2 = Instant::now();
        let outcome = self.single_tree(world, rank);
        self.times.single_tree = t2.elapsed().as_secs_f64();
        outcome
    }

    /// Lower bound of the continuous relaxation from any point `sol`: the
    /// linearization of `sum f_i` there,
    /// minimized over `{|y|_1 <= M kappa, |y|_inf <= M}`.
    fn relaxation_bound(&self, sol: &PrimalSolution, parts: &[Vec<f64>]) -> f64 {
        let n = self.inst.n;
        let m = self.inst.sparsity.big_m.iter().copied().fold(f64::INFINITY, f64::min);
        let mut f = 0.0;
        let mut g = vec![0.0; n];
        for p in parts {
            f += p[0];
            for (gk, pk) in g.iter_mut().zip(&p[2..]) {
                *gk += pk;
            }
        }
        let y = &sol.y[0];
        let gy: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
        let mut mags: Vec<f64> = g.iter().map(|v| v.abs()).collect();
        mags.sort_by(|a, b| b.total_cmp(a));
        let top: f64 = mags.iter().take(self.inst.sparsity.kappa).sum();
        f - gy - m * top
    }

    /// Returns a final status, or `None` to continue with the single tree.
    fn multi_tree(&mut self, world: &mut CommWorld, rank: &mut RankState<'_>) -> Result<Option<SolveStatus>, DriverError> {
        let dihoa = self.settings.algorithm == Algorithm::Dihoa;
        let mut q = 0;
        loop {
            if self.timed_out() {
                self.record();
                return Ok(Some(SolveStatus::TimeLimit));
            }
            q += 1;
            self.iterations += 1;
            let mut master = MasterModel::build(self.inst, &self.store)?;
            self.master_builds += 1;
            let res = bnb_solve(&mut master, &self.bnb_config(), self.ub)?;
            self.bnb_nodes += res.stats.nodes;
            match res.status {
                BnbStatus::TimeLimit => {
                    self.raise_lb(res.lb);
                    self.record();
                    return Ok(Some(SolveStatus::TimeLimit));
                }
                BnbStatus::NodeLimit => {
                    self.raise_lb(res.lb);
                    self.record();
                    return Ok(Some(SolveStatus::NodeLimit));
                }
                BnbStatus::Infeasible if self.ub == f64::INFINITY => return Ok(Some(SolveStatus::Infeasible)),
                _ => {}
            }
            self.raise_lb(res.lb);
            self.master_lbs.push(res.lb.min(self.ub));
            if self.settings.verbosity >= 1 {
                info!("multi-tree iteration {q}: lb {:.10e} ub {:.10e} ({} nodes)", self.lb, self.ub, res.stats.nodes);
            }
            if self.converged() {
                self.record();
                return Ok(Some(SolveStatus::Optimal));
            }
            let Some(point) = res.incumbent else {
                self.record();
                self.warnings.push("master found nothing below the incumbent yet the gap is open".into());
                return Ok(Some(SolveStatus::Stalled));
            };
            let masks = point.support_masks();
            if self.visited.contains(&masks.concat()) {
                self.record();
                if dihoa {
                    self.q_switch = Some(q);
                    return Ok(None);
                }
                self.warnings.push(format!("master returned an evaluated support at iteration {q}"));
                return Ok(Some(SolveStatus::Stalled));
            }
            let quad = self.quadratic_cuts(Phase::MultiTree);
            self.evaluate(world, rank, &masks, quad)?;
            self.record();
            if self.converged() {
                return Ok(Some(SolveStatus::Optimal));
            }
            if dihoa {
                let stalled = self.master_lbs.len() >= 2
                    && check_switch_with(&self.master_lbs, self.settings.switch_tol, self.settings.switch_mode)?;
                if stalled || q >= self.settings.max_oa_iters {
                    if !stalled {
                        self.warnings.push(format!("switch forced after {q} multi-tree iterations"));
                    }
                    self.q_switch = Some(q);
                    return Ok(None);
                }
            }
        }
    }

    fn single_tree(&mut self, world: &mut CommWorld, rank: &mut RankState<'_>) -> Result<SolveStatus, DriverError> {
        let mut master = MasterModel::build(self.inst, &self.store)?;
        self.master_builds += 1;
        let cfg = self.bnb_config();
        let cutoff = self.ub;
        let res = bnb_single_tree(&mut master, &cfg, cutoff, |point| -> Result<LazyResponse, DriverError> {
            if self.timed_out() {
                return Ok(LazyResponse { stop: true, ..LazyResponse::default() });
            }
            let masks = point.support_masks();
            if self.visited.contains(&masks.concat()) {
                return Ok(LazyResponse::default());
            }
            self.iterations += 1;
            let quad = self.quadratic_cuts(Phase::SingleTree);
            let (cuts, _) = self.evaluate(world, rank, &masks, quad)?;
            self.counts.lazy += cuts.len();
            self.record();
            Ok(LazyResponse { cuts, ub: Some(self.ub), stop: false })
        })?;
        self.bnb_nodes += res.stats.nodes;
        self.raise_lb(res.lb);
        self.record();
        Ok(match res.status {
            BnbStatus::TimeLimit => SolveStatus::TimeLimit,
            BnbStatus::NodeLimit => SolveStatus::NodeLimit,
            BnbStatus::Infeasible if self.ub == f64::INFINITY => SolveStatus::Infeasible,
            _ if self.converged() => SolveStatus::Optimal,
            _ => {
                self.warnings.push(format!("single-tree search ended with gap {:.3e}", gap(self.ub, self.lb)));
                SolveStatus::Stalled
            }
        })
    }

    fn report(&mut self, status: SolveStatus) -> SolveReport {
        let (x, support, residual) = match &self.incumbent {
            Some(sol) => (sol.y[0].clone(), sol.support(), sol.residual),
            None => (vec![0.0; self.inst.n], Vec::new(), f64::INFINITY),
        };
        self.times.total = self.start.elapsed().as_secs_f64();
        SolveReport {
            algorithm: self.settings.algorithm,
            status,
            objective: self.ub,
            lower_bound: self.lb,
            gap: gap(self.ub, self.lb),
            x,
            support,
            ub_trace: self.ub_trace.clone(),
            lb_trace: self.lb_trace.clone(),
            q_switch: self.q_switch,
            iterations: self.iterations,
            cuts: self.counts.clone(),
            primal_solves: self.primal_solves,
            master_builds: self.master_builds,
            master_builds_after_switch: self.master_builds.saturating_sub(self.q_switch.map_or(usize::MAX, |q| q + 1)),
            bnb_nodes: self.bnb_nodes,
            consensus_residual: residual,
            big_m: self.inst.sparsity.big_m.clone(),
            big_m_estimated: self.inst.sparsity.estimated,
            big_m_resolves: 0,
            warnings: std::mem::take(&mut self.warnings),
            times: self.times.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn switch_fires_on_stall() {
        let trace = [0.0, 0.8, 0.80005];
        assert!(!check_switch(&trace[..2], 1e-3).unwrap());
        assert!(check_switch(&trace, 1e-3).unwrap());
        assert!(check_switch(&trace[..1], 1e-3).is_err());
    }

    #[test]
    fn steady_progress_never_switches() {
        let eps = 1e-3;
        let trace: Vec<f64> = (0..10).map(|q| 2.0 * eps * q as f64).collect();
        for end in 2..=trace.len() {
            assert!(!check_switch(&trace[..end], eps).unwrap());
        }
    }

    #[test]
    fn gap_values() {
        assert_eq!(gap(1.0, 1.0), 0.0);
        assert_eq!(gap(2.0, 1.0), 0.5);
        assert_eq!(gap(f64::INFINITY, -3.0), f64::INFINITY);
    }

    #[test]
    fn settings_reject_unknown_keys() {
        assert!(serde_json::from_str::<Settings>(r#"{"relative_gap": 1e-4}"#).is_ok());
        assert!(serde_json::from_str::<Settings>(r#"{"relativ_gap": 1e-4}"#).is_err());
    }

    #[derive(Serialize, Deserialize)]
    struct Wrapped(#[serde(with = "nonfinite::pos")] f64);

    #[derive(Serialize, Deserialize)]
    struct Trace(#[serde(with = "nonfinite::neg::vec")] Vec<f64>);

    #[test]
    fn lower_bounds_keep_their_sign() {
        let json = serde_json::to_string(&Trace(vec![f64::NEG_INFINITY, 1.5])).unwrap();
        assert_eq!(json, "[null,1.5]");
        assert_eq!(serde_json::from_str::<Trace>(&json).unwrap().0, vec![f64::NEG_INFINITY, 1.5]);
    }

    #[test]
    fn infinities_travel_as_null() {
        assert_eq!(serde_json::to_string(&Wrapped(f64::INFINITY)).unwrap(), "null");
        assert_eq!(serde_json::from_str::<Wrapped>("null").unwrap().0, f64::INFINITY);
        assert_eq!(serde_json::from_str::<Wrapped>("2.5").unwrap().0, 2.5);
    }
}
