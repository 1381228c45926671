//! Reference solvers and instance families shared by the integration tests.
//! Nothing here calls into the solver code it is used to check.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use scot_core::model::{generate_dslinr, generate_dslogr, NodeObjective, ObjectiveKind, ProblemInstance};

pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        t.exp() / (1.0 + t.exp())
    }
}

/// Objective value straight from the definition.
pub fn value(obj: &NodeObjective, theta: &[f64]) -> f64 {
    let x = &obj.data.x;
    let ridge = 0.5 * obj.lambda * theta.iter().map(|t| t * t).sum::<f64>();
    let mut loss = 0.0;
    for l in 0..x.nrows() {
        let z: f64 = (0..x.ncols()).map(|k| x[(l, k)] * theta[k]).sum();
        let yl = obj.data.y[l];
        loss += match obj.kind {
            ObjectiveKind::Logistic => softplus(-yl * z),
            ObjectiveKind::LeastSquares => (z - yl) * (z - yl),
        };
    }
    loss + ridge
}

pub fn total_value(inst: &ProblemInstance, theta: &[f64]) -> f64 {
    inst.objectives.iter().map(|o| value(o, theta)).sum()
}

/// Gradient and Hessian of `sum_i f_i` restricted to `support`.
fn restricted_derivatives(inst: &ProblemInstance, support: &[usize], theta: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let s = support.len();
    let mut g = DVector::zeros(s);
    let mut h = DMatrix::zeros(s, s);
    for obj in &inst.objectives {
        let x = &obj.data.x;
        for l in 0..x.nrows() {
            let z: f64 = support.iter().map(|&k| x[(l, k)] * theta[k]).sum();
            let yl = obj.data.y[l];
            let (d1, d2) = match obj.kind {
                ObjectiveKind::Logistic => {
                    let s = sigmoid(-yl * z);
                    (-yl * s, s * (1.0 - s))
                }
                ObjectiveKind::LeastSquares => (2.0 * (z - yl), 2.0),
            };
            for (a, &ka) in support.iter().enumerate() {
                g[a] += d1 * x[(l, ka)];
                for (b, &kb) in support.iter().enumerate() {
                    h[(a, b)] += d2 * x[(l, ka)] * x[(l, kb)];
                }
            }
        }
        for (a, &ka) in support.iter().enumerate() {
            g[a] += obj.lambda * theta[ka];
            h[(a, a)] += obj.lambda;
        }
    }
    (g, h)
}

/// Minimizer of `sum_i f_i` with coordinates outside `support` at zero, by
/// damped Newton with an explicit Hessian.
pub fn restricted_minimum(inst: &ProblemInstance, support: &[usize]) -> (Vec<f64>, f64) {
    let n = inst.n;
    let mut theta = vec![0.0; n];
    if support.is_empty() {
        return (theta.clone(), total_value(inst, &theta));
    }
    for _ in 0..200 {
        let (g, h) = restricted_derivatives(inst, support, &theta);
        if g.amax() < 1e-11 {
            break;
        }
        let step = h.cholesky().expect("restricted problems are strongly convex").solve(&g);
        let f0 = total_value(inst, &theta);
        let slope = -g.dot(&step);
        let mut t = 1.0;
        loop {
            let trial: Vec<f64> = {
                let mut v = theta.clone();
                for (a, &k) in support.iter().enumerate() {
                    v[k] -= t * step[a];
                }
                v
            };
            if total_value(inst, &trial) <= f0 + 1e-4 * t * slope || t < 1e-12 {
                theta = trial;
                break;
            }
            t *= 0.5;
        }
    }
    let v = total_value(inst, &theta);
    (theta, v)
}

#[derive(Debug, Clone)]
pub struct Reference {
    pub value: f64,
    pub support: Vec<usize>,
    pub x: Vec<f64>,
    /// Values of every support of size `kappa`, for tie detection.
    pub values: Vec<(Vec<usize>, f64)>,
}

/// Exhaustive search over supports of size at most `kappa`.
pub fn enumerate_supports(inst: &ProblemInstance) -> Reference {
    let n = inst.n;
    let kappa = inst.sparsity.kappa.min(n);
    let mut values = Vec::new();
    let mut best: Option<(f64, Vec<usize>, Vec<f64>)> = None;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize > kappa {
            continue;
        }
        let support: Vec<usize> = (0..n).filter(|k| mask & (1 << k) != 0).collect();
        let (x, v) = restricted_minimum(inst, &support);
        if best.as_ref().is_none_or(|b| v < b.0) {
            best = Some((v, support.clone(), x));
        }
        values.push((support, v));
    }
    let (value, support, x) = best.expect("the empty support is always evaluated");
    Reference { value, support, x, values }
}

impl Reference {
    /// Whether `support` attains the optimum up to `rel`.
    pub fn is_optimal_support(&self, support: &[usize], rel: f64) -> bool {
        let mut s = support.to_vec();
        s.sort_unstable();
        self.values.iter().any(|(sup, v)| {
            // Nonzero patterns of an optimal point may be a subset of the
            // support that was fixed when it was computed.
            let covers = s.iter().all(|k| sup.contains(k));
            covers && (v - self.value).abs() <= rel * self.value.abs().max(1.0)
        })
    }
}

#[derive(Debug, Clone)]
pub struct SuiteCase {
    pub label: String,
    pub inst: ProblemInstance,
}

/// Deterministic family of oracle-scale instances: n <= 12, p <= 200 per
/// node, N in {1, 2, 3}, kappa in {1, 2, 3}, one hyperedge.
pub fn oracle_suite(count: usize) -> Vec<SuiteCase> {
    (0..count)
        .map(|i| {
            let seed = 1000 + i as u64;
            let n = 4 + (i * 5) % 9;
            let nodes = 1 + i % 3;
            let kappa = 1 + (i / 3) % 3;
            let p = 20 + (i * 37) % 120;
            let logistic = i % 2 == 0;
            let inst = if logistic {
                generate_dslogr(n, p, nodes, kappa, 1.0, seed)
            } else {
                generate_dslinr(n, p, nodes, kappa, 0.5, 0.5, seed)
            }
            .expect("suite parameters are valid");
            let kind = if logistic { "dslogr" } else { "dslinr" };
            SuiteCase { label: format!("{kind} n={n} p={p} N={nodes} k={kappa} seed={seed}"), inst }
        })
        .collect()
}

/// Rows `a'x <= b` for a tiny LP.
#[derive(Debug, Clone)]
pub struct TinyLp {
    pub cost: Vec<f64>,
    pub lb: Vec<f64>,
    pub ub: Vec<f64>,
    pub rows: Vec<(Vec<f64>, f64)>,
}

/// Optimum of a bounded LP by enumerating every basic solution: each choice
/// of `n` tight constraints among rows and bounds.
pub fn vertex_enumeration(lp: &TinyLp) -> Option<(f64, Vec<f64>)> {
    let n = lp.cost.len();
    let mut cons: Vec<(Vec<f64>, f64)> = lp.rows.clone();
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        cons.push((e.clone(), lp.ub[j]));
        e[j] = -1.0;
        cons.push((e, -lp.lb[j]));
    }
    let feasible = |x: &[f64]| cons.iter().all(|(a, b)| a.iter().zip(x).map(|(p, q)| p * q).sum::<f64>() <= b + 1e-7);
    let mut best: Option<(f64, Vec<f64>)> = None;
    let m = cons.len();
    let mut pick: Vec<usize> = (0..n).collect();
    loop {
        let a = DMatrix::from_fn(n, n, |r, c| cons[pick[r]].0[c]);
        let b = DVector::from_fn(n, |r, _| cons[pick[r]].1);
        if let Some(x) = a.lu().solve(&b) {
            let x: Vec<f64> = x.iter().copied().collect();
            if x.iter().all(|v| v.is_finite()) && feasible(&x) {
                let obj: f64 = lp.cost.iter().zip(&x).map(|(c, v)| c * v).sum();
                if best.as_ref().is_none_or(|(o, _)| obj < *o) {
                    best = Some((obj, x));
                }
            }
        }
        // next n-subset of 0..m
        let mut i = n;
        loop {
            if i == 0 {
                return best;
            }
            i -= 1;
            if pick[i] < m - n + i {
                pick[i] += 1;
                for j in i + 1..n {
                    pick[j] = pick[j - 1] + 1;
                }
                break;
            }
        }
    }
}

pub fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_box(rng: &mut impl rand::Rng, n: usize, half: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-half..=half)).collect()
}

/// Small instance of either kind with unnormalized features, so that the
/// least-squares Gram matrix is far from the identity.
pub fn small_objective(kind: ObjectiveKind, n: usize, p: usize, seed: u64) -> NodeObjective {
    use rand::Rng;
    let mut r = rng(seed);
    let x = DMatrix::from_fn(p, n, |_, _| r.random_range(-2.0..2.0));
    let lambda = r.random_range(0.1..2.0);
    match kind {
        ObjectiveKind::Logistic => {
            let y = DVector::from_fn(p, |_, _| if r.random::<bool>() { 1.0 } else { -1.0 });
            NodeObjective::logistic(x, y, lambda)
        }
        ObjectiveKind::LeastSquares => {
            let b = DVector::from_fn(p, |_, _| r.random_range(-3.0..3.0));
            NodeObjective::least_squares(x, b, lambda)
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CutCheck {
    pub pairs: usize,
    /// Largest `cut(x) - f(x)`.
    pub worst_excess: f64,
    /// Largest relative deviation of `quadratic - linear` from `m/2 |x - x0|^2`.
    pub worst_dominance: f64,
}

/// Samples `pairs` (cut, point) pairs inside the big-M box of oracle-suite
/// instances and compares every cut against the objective.
pub fn cut_validity(pairs: usize, seed: u64) -> CutCheck {
    use scot_core::cuts::{gen_first_order_cut, gen_second_order_cut};
    use scot_core::engine::{strong_convexity_constant, SmoothOracle};
    let mut r = rng(seed);
    let suite = oracle_suite(10);
    let mut out = CutCheck::default();
    while out.pairs < pairs {
        for case in &suite {
            let mut inst = case.inst.clone();
            inst.ensure_big_m().expect("big-M estimate");
            let big_m = inst.sparsity.big_m[0];
            for (i, obj) in inst.objectives.iter().enumerate() {
                let oracle = SmoothOracle::new(obj);
                let m = strong_convexity_constant(obj).m;
                let x0 = uniform_box(&mut r, inst.n, big_m);
                let lin = gen_first_order_cut(&oracle, i, &x0);
                let quad = gen_second_order_cut(&oracle, i, &x0, m).expect("positive m");
                for _ in 0..10 {
                    let x = uniform_box(&mut r, inst.n, big_m);
                    let f = value(obj, &x);
                    let (l, q) = (lin.eval(&x), quad.eval(&x));
                    out.worst_excess = out.worst_excess.max(l - f).max(q - f);
                    let sq: f64 = x.iter().zip(&x0).map(|(a, b)| (a - b) * (a - b)).sum();
                    let expected = 0.5 * m * sq;
                    let dev = ((q - l) - expected).abs() / expected.abs().max(1.0);
                    out.worst_dominance = out.worst_dominance.max(dev);
                    out.pairs += 2;
                }
            }
        }
    }
    out
}

/// Largest relative error of the analytic gradient against central
/// differences of the definition, over `points` random points.
pub fn gradient_error(kind: ObjectiveKind, points: usize, seed: u64) -> f64 {
    use scot_core::engine::SmoothOracle;
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for t in 0..points {
        let obj = small_objective(kind, 3 + t % 5, 15 + t % 20, seed.wrapping_add(t as u64));
        let theta = uniform_box(&mut r, obj.dim(), 1.5);
        let (_, g) = SmoothOracle::new(&obj).value_grad(&theta);
        let mut fd = vec![0.0; theta.len()];
        for k in 0..theta.len() {
            let h = 1e-5 * theta[k].abs().max(1.0);
            let (mut up, mut dn) = (theta.clone(), theta.clone());
            up[k] += h;
            dn[k] -= h;
            fd[k] = (value(&obj, &up) - value(&obj, &dn)) / (2.0 * h);
        }
        let diff: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let norm: f64 = fd.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(diff / norm.max(1.0));
    }
    worst
}

/// Smallest `d'Hd / |d|^2 - m` over sampled points and directions, with the
/// Hessian built in this module.
pub fn rayleigh_margin(kind: ObjectiveKind, points: usize, seed: u64) -> f64 {
    use scot_core::engine::strong_convexity_constant;
    let mut r = rng(seed);
    let mut worst = f64::INFINITY;
    for t in 0..points {
        let obj = small_objective(kind, 2 + t % 5, 4 + t % 12, seed.wrapping_add(1000 + t as u64));
        let m = strong_convexity_constant(&obj).m;
        let n = obj.dim();
        let theta = uniform_box(&mut r, n, 3.0);
        let inst = ProblemInstance::with_single_edge(vec![obj], 1);
        let all: Vec<usize> = (0..n).collect();
        let (_, h) = restricted_derivatives(&inst, &all, &theta);
        for _ in 0..5 {
            let d = DVector::from_vec(uniform_box(&mut r, n, 1.0));
            let q = d.dot(&(&h * &d)) / d.norm_squared();
            worst = worst.min(q - m);
        }
        // the extreme direction as well
        let eig = h.symmetric_eigen();
        worst = worst.min(eig.eigenvalues.min() - m);
    }
    worst
}

pub const COMM_TIMEOUT: std::time::Duration = std::time::Duration::from_secs(60);

#[derive(Debug, Clone, Default)]
pub struct AdmmCheck {
    pub instances: usize,
    pub worst_rel: f64,
    pub worst_residual: f64,
    pub mismatched_backends: Vec<String>,
}

/// Fixed-support distributed solves against the centralized minimum over
/// the same support, on both backends.
pub fn admm_agreement(count: usize, seed: u64) -> AdmmCheck {
    use rand::seq::index::sample;
    use scot_core::engine::{solve_primal_rhadmm, solve_restricted_centralized, AdmmConfig};
    use scot_core::transport::{run_inproc, run_tcp_threads};
    let mut r = rng(seed);
    let mut out = AdmmCheck::default();
    for case in oracle_suite(count) {
        let inst = &case.inst;
        let size = 1 + sample(&mut r, inst.sparsity.kappa, 1).index(0);
        let mut coords = sample(&mut r, inst.n, size).into_vec();
        coords.sort_unstable();
        let mask: Vec<bool> = (0..inst.n).map(|k| coords.contains(&k)).collect();
        let delta = vec![mask];
        let cfg = AdmmConfig::default();
        let solve = |mut w: scot_core::transport::CommWorld| {
            solve_primal_rhadmm(&mut w, inst, &delta, cfg).expect("ADMM solve")
        };
        let inproc = run_inproc(inst.num_nodes(), COMM_TIMEOUT, solve);
        let tcp = run_tcp_threads(inst.num_nodes(), COMM_TIMEOUT, solve).expect("loopback sockets");
        if inproc != tcp || inproc.windows(2).any(|w| w[0] != w[1]) {
            out.mismatched_backends.push(case.label.clone());
        }
        let sol = &inproc[0];
        let (_, own) = restricted_minimum(inst, &coords);
        let (_, lib) = solve_restricted_centralized(inst, &coords).expect("centralized solve");
        for reference in [own, lib] {
            out.worst_rel = out.worst_rel.max((sol.objective - reference).abs() / reference.abs().max(1.0));
        }
        out.worst_residual = out.worst_residual.max(sol.residual);
        out.instances += 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollectiveTrace {
    pub broadcast: Vec<f64>,
    pub scatter: Vec<f64>,
    pub gather: Option<Vec<Vec<f64>>>,
    pub gather_then_broadcast: Vec<f64>,
    pub allgather: Vec<Vec<f64>>,
    pub reduce: Option<Vec<f64>>,
    pub reduce_then_broadcast: Vec<f64>,
    pub allreduce: [Vec<f64>; 3],
}

fn collective_trace(w: &mut scot_core::transport::CommWorld, root: usize, data: &[Vec<f64>]) -> CollectiveTrace {
    use scot_core::transport::ReduceOp;
    let mine = &data[w.rank()];
    let broadcast = w.broadcast(root, mine).unwrap();
    let scatter = w.scatter(root, data).unwrap();
    let gather = w.gather(root, mine).unwrap();
    let flat = gather.as_ref().map(|g| g.concat()).unwrap_or_default();
    let gather_then_broadcast = w.broadcast(root, &flat).unwrap();
    let allgather = w.allgather(mine).unwrap();
    let reduce = w.reduce(root, mine, ReduceOp::Sum).unwrap();
    let reduce_then_broadcast = w.broadcast(root, reduce.as_deref().unwrap_or(&[])).unwrap();
    let allreduce = [ReduceOp::Sum, ReduceOp::Max, ReduceOp::Min].map(|op| w.allreduce(mine, op).unwrap());
    w.barrier().unwrap();
    CollectiveTrace { broadcast, scatter, gather, gather_then_broadcast, allgather, reduce, reduce_then_broadcast, allreduce }
}

/// Runs every collective on `backend` and compares each rank's results with
/// the definitions evaluated sequentially. `Err` names the first mismatch.
pub fn collective_semantics(backend: scot_core::transport::Backend, root: usize, data: &[Vec<f64>]) -> Result<(), String> {
    use scot_core::transport::{run_inproc, run_tcp_threads, Backend};
    let size = data.len();
    let traces = match backend {
        Backend::Inproc => run_inproc(size, COMM_TIMEOUT, |mut w| collective_trace(&mut w, root, data)),
        Backend::Tcp => run_tcp_threads(size, COMM_TIMEOUT, |mut w| collective_trace(&mut w, root, data)).map_err(|e| e.to_string())?,
    };
    let fold = |f: fn(f64, f64) -> f64| -> Vec<f64> {
        let mut acc = data[0].clone();
        for d in &data[1..] {
            for (a, b) in acc.iter_mut().zip(d) {
                *a = f(*a, *b);
            }
        }
        acc
    };
    let sum = fold(|a, b| a + b);
    let max = fold(f64::max);
    let min = fold(f64::min);
    let concat = data.concat();
    for (rank, t) in traces.iter().enumerate() {
        let fail = |what: &str| Err(format!("rank {rank}: {what}"));
        if t.broadcast != data[root] {
            return fail("broadcast");
        }
        if t.scatter != data[rank] {
            return fail("scatter");
        }
        if (rank == root) != t.gather.is_some() || t.gather.as_ref().is_some_and(|g| g.as_slice() != data) {
            return fail("gather");
        }
        if t.allgather.as_slice() != data || t.allgather.concat() != t.gather_then_broadcast || t.gather_then_broadcast != concat {
            return fail("allgather");
        }
        // bit equality: the sum is accumulated in rank order
        if (rank == root) != t.reduce.is_some() || t.reduce.as_ref().is_some_and(|r| *r != sum) {
            return fail("reduce");
        }
        if t.allreduce[0] != t.reduce_then_broadcast || t.allreduce[0] != sum {
            return fail("allreduce sum");
        }
        if t.allreduce[1] != max || t.allreduce[2] != min {
            return fail("allreduce max/min");
        }
    }
    Ok(())
}

/// Solves on an in-process world and checks that every rank reports the
/// same outcome.
pub fn solve_inproc(
    inst: &ProblemInstance,
    settings: &scot_core::driver::Settings,
) -> Result<scot_core::driver::SolveReport, String> {
    let reports = scot_core::transport::run_inproc(inst.num_nodes(), COMM_TIMEOUT, |mut w| {
        scot_core::driver::run(&mut w, inst, settings).map_err(|e| e.to_string())
    });
    let mut it = reports.into_iter();
    let first = it.next().expect("at least one rank")?;
    for (rank, r) in it.enumerate() {
        if !r?.same_outcome(&first) {
            return Err(format!("rank {} report differs from rank 0", rank + 1));
        }
    }
    Ok(first)
}

/// Failures of the bound sandwich: every lower bound below the reference
/// value and every upper bound above it, both traces monotone.
pub fn sandwich_violations(report: &scot_core::driver::SolveReport, reference: f64, tol: f64) -> Vec<String> {
    let mut out = Vec::new();
    let scale = reference.abs().max(1.0);
    if let Some(lb) = report.lb_trace.iter().find(|&&lb| lb > reference + tol * scale) {
        out.push(format!("lb {lb} above {reference}"));
    }
    if let Some(ub) = report.ub_trace.iter().find(|&&ub| ub < reference - tol * scale) {
        out.push(format!("ub {ub} below {reference}"));
    }
    if report.lb_trace.windows(2).any(|w| w[1] < w[0]) {
        out.push("lb trace decreases".into());
    }
    if report.ub_trace.windows(2).any(|w| w[1] > w[0]) {
        out.push("ub trace increases".into());
    }
    out
}

#[derive(Debug, Clone)]
pub struct SuiteRun {
    pub label: String,
    pub mode: scot_core::model::SparsityMode,
    pub algorithm: scot_core::driver::Algorithm,
    pub report: scot_core::driver::SolveReport,
}

/// Every case under both sparsity modes and both algorithms. Returns the
/// runs and the failures as readable messages.
pub fn run_oracle_suite(cases: &[SuiteCase]) -> (Vec<(SuiteRun, Reference)>, Vec<String>) {
    use scot_core::driver::{Algorithm, Settings, SolveStatus};
    use scot_core::model::SparsityMode;
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for case in cases {
        let reference = enumerate_supports(&case.inst);
        for mode in [SparsityMode::BigM, SparsityMode::Sos1] {
            for algorithm in [Algorithm::Dihoa, Algorithm::Dipoa] {
                let settings = Settings { algorithm, sparsity_mode: Some(mode), ..Settings::default() };
                let tag = format!("{} {mode:?} {algorithm:?}", case.label);
                match solve_inproc(&case.inst, &settings) {
                    Err(e) => failures.push(format!("{tag}: {e}")),
                    Ok(report) => {
                        let rel = (report.objective - reference.value).abs() / reference.value.abs().max(1.0);
                        if report.status != SolveStatus::Optimal {
                            failures.push(format!("{tag}: status {:?}", report.status));
                        } else if rel > 1e-5 {
                            failures.push(format!("{tag}: objective {} vs {} (rel {rel:e})", report.objective, reference.value));
                        } else if !reference.is_optimal_support(&report.support, 1e-5) {
                            failures.push(format!("{tag}: support {:?} vs {:?}", report.support, reference.support));
                        }
                        let nnz = report.x.iter().filter(|v| **v != 0.0).count();
                        if nnz > case.inst.sparsity.kappa {
                            failures.push(format!("{tag}: {nnz} nonzeros"));
                        }
                        runs.push((SuiteRun { label: case.label.clone(), mode, algorithm, report }, reference.clone()));
                    }
                }
            }
        }
    }
    (runs, failures)
}
