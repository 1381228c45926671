//! Problem data: per-node smooth objectives, the hypergraph of local fusion
//! centers, the sparsity model, and instance generators for sparse logistic
//! and linear regression.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{self, EngineError};

/// Centered columns with a norm below this are rejected by [`normalize_dataset`].
pub const DEGENERATE_COLUMN_NORM: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("column {column} is constant (centered norm {norm:e})")]
    DegenerateColumn { column: usize, norm: f64 },
    #[error("dataset needs at least {min} samples, got {got}")]
    TooFewSamples { min: usize, got: usize },
    #[error("invalid generator argument: {0}")]
    InvalidArgument(String),
    #[error("big-M estimation failed: {0}")]
    NlpFailure(#[from] EngineError),
}

/// Samples in rows, features in columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Self {
        Self { x, y }
    }

    pub fn samples(&self) -> usize {
        self.x.nrows()
    }

    pub fn features(&self) -> usize {
        self.x.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// `sum_l log(1 + exp(-y_l x_l' theta)) + lambda/2 |theta|^2`, labels in {-1, +1}.
    Logistic,
    /// `|X theta - b|^2 + lambda/2 |theta|^2`.
    LeastSquares,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeObjective {
    pub kind: ObjectiveKind,
    pub data: Dataset,
    pub lambda: f64,
}

impl NodeObjective {
    pub fn logistic(x: DMatrix<f64>, y: DVector<f64>, lambda: f64) -> Self {
        Self { kind: ObjectiveKind::Logistic, data: Dataset::new(x, y), lambda }
    }

    pub fn least_squares(x: DMatrix<f64>, b: DVector<f64>, lambda: f64) -> Self {
        Self { kind: ObjectiveKind::LeastSquares, data: Dataset::new(x, b), lambda }
    }

    pub fn dim(&self) -> usize {
        self.data.features()
    }

    /// Both objective families are sums of nonnegative terms.
    pub fn lower_bound(&self) -> f64 {
        0.0
    }
}

/// Nodes joined by hyperedges; each hyperedge is one local fusion center
/// holding a consensus copy of the decision vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hypergraph {
    pub num_nodes: usize,
    pub edges: Vec<Vec<usize>>,
}

impl Hypergraph {
    /// A single fusion center connected to every node.
    pub fn single_edge(num_nodes: usize) -> Self {
        Self { num_nodes, edges: vec![(0..num_nodes).collect()] }
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Edges containing `node`, in ascending edge order.
    pub fn edges_of(&self, node: usize) -> Vec<usize> {
        self.edges
            .iter()
            .enumerate()
            .filter(|(_, e)| e.contains(&node))
            .map(|(j, _)| j)
            .collect()
    }

    /// The edge whose consensus variable stands in for `x_node` in the master.
    pub fn primary_edge(&self, node: usize) -> Option<usize> {
        self.edges.iter().position(|e| e.contains(&node))
    }

    /// Connectivity through chains of hyperedges sharing at least one node.
    pub fn is_connected(&self) -> bool {
        if self.num_nodes == 0 {
            return false;
        }
        let mut seen = vec![false; self.num_nodes];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for edge in self.edges.iter().filter(|e| e.contains(&v)) {
                for &w in edge {
                    if w < self.num_nodes && !seen[w] {
                        seen[w] = true;
                        stack.push(w);
                    }
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SparsityMode {
    BigM,
    Sos1,
    #[default]
    Both,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsityModel {
    pub kappa: usize,
    /// One bound per hyperedge. Empty until estimated or supplied.
    pub big_m: Vec<f64>,
    pub mode: SparsityMode,
    pub estimated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearConstraints {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl LinearConstraints {
    pub fn empty(n: usize) -> Self {
        Self { a: DMatrix::zeros(0, n), b: DVector::zeros(0) }
    }

    pub fn rows(&self) -> usize {
        self.a.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemInstance {
    pub objectives: Vec<NodeObjective>,
    pub hypergraph: Hypergraph,
    pub sparsity: SparsityModel,
    pub linear: LinearConstraints,
    pub n: usize,
}

impl ProblemInstance {
    /// Single fusion center, no linear constraints, big-M left unset.
    pub fn with_single_edge(objectives: Vec<NodeObjective>, kappa: usize) -> Self {
        let n = objectives.first().map_or(0, NodeObjective::dim);
        let num_nodes = objectives.len();
        Self {
            objectives,
            hypergraph: Hypergraph::single_edge(num_nodes),
            sparsity: SparsityModel {
                kappa,
                big_m: Vec::new(),
                mode: SparsityMode::default(),
                estimated: false,
            },
            linear: LinearConstraints::empty(n),
            n,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.objectives.len()
    }

    pub fn with_big_m(mut self, m: f64) -> Self {
        self.sparsity.big_m = vec![m; self.hypergraph.num_edges()];
        self.sparsity.estimated = false;
        self
    }

    pub fn with_mode(mut self, mode: SparsityMode) -> Self {
        self.sparsity.mode = mode;
        self
    }

    /// Fills in big-M by [`estimate_big_m`] when none was supplied.
    pub fn ensure_big_m(&mut self) -> Result<(), ModelError> {
        if self.sparsity.big_m.len() != self.hypergraph.num_edges() {
            self.sparsity.big_m = estimate_big_m(self)?;
            self.sparsity.estimated = true;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation { path: path.into(), message: message.into() });
    }

    pub fn mentions(&self, needle: &str) -> bool {
        self.violations.iter().any(|v| v.message.contains(needle))
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_ok() {
            return write!(f, "ok");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{}: {}", v.path, v.message)?;
        }
        Ok(())
    }
}

/// Collects every invariant violation instead of stopping at the first.
pub fn validate_instance(inst: &ProblemInstance) -> ValidationReport {
    let mut report = ValidationReport::default();
    let n = inst.n;
    if n == 0 {
        report.push("n", "dimension must be positive");
    }
    if inst.objectives.len() != inst.hypergraph.num_nodes {
        report.push(
            "objectives",
            format!(
                "{} objectives for a hypergraph with {} nodes",
                inst.objectives.len(),
                inst.hypergraph.num_nodes
            ),
        );
    }

    for (i, obj) in inst.objectives.iter().enumerate() {
        let base = format!("objectives[{i}]");
        let d = &obj.data;
        if d.samples() == 0 {
            report.push(format!("{base}.data.x"), "no samples");
        }
        if d.features() != n {
            report.push(
                format!("{base}.data.x"),
                format!("dimension mismatch: {} features, expected {n}", d.features()),
            );
        }
        if d.y.len() != d.samples() {
            report.push(
                format!("{base}.data.y"),
                format!("response length {} != samples {}", d.y.len(), d.samples()),
            );
        }
        if d.x.iter().chain(d.y.iter()).any(|v| !v.is_finite()) {
            report.push(format!("{base}.data"), "non-finite entry");
        }
        if obj.kind == ObjectiveKind::Logistic && d.y.iter().any(|&v| v != 1.0 && v != -1.0) {
            report.push(format!("{base}.data.y"), "classification labels must be -1 or +1");
        }
        if !(obj.lambda >= 0.0) || !obj.lambda.is_finite() {
            report.push(format!("{base}.lambda"), "lambda must be finite and nonnegative");
        }
    }

    let hg = &inst.hypergraph;
    if hg.num_nodes == 0 {
        report.push("hypergraph.num_nodes", "no nodes");
    }
    if hg.edges.is_empty() {
        report.push("hypergraph.edges", "no hyperedges");
    }
    let mut covered = vec![false; hg.num_nodes];
    let mut indices_ok = true;
    for (j, edge) in hg.edges.iter().enumerate() {
        if edge.is_empty() {
            report.push(format!("hypergraph.edges[{j}]"), "empty hyperedge");
        }
        for &v in edge {
            if v >= hg.num_nodes {
                report.push(
                    format!("hypergraph.edges[{j}]"),
                    format!("node index {v} out of range"),
                );
                indices_ok = false;
            } else {
                covered[v] = true;
            }
        }
    }
    for (v, c) in covered.iter().enumerate() {
        if !c {
            report.push("hypergraph.edges", format!("node {v} belongs to no hyperedge"));
        }
    }
    if indices_ok && hg.num_nodes > 0 && !hg.is_connected() {
        report.push("hypergraph", "hypergraph not connected");
    }

    let sp = &inst.sparsity;
    if sp.kappa < 1 || sp.kappa > n {
        report.push("sparsity.kappa", format!("kappa out of range: {} not in [1, {n}]", sp.kappa));
    }
    if !sp.big_m.is_empty() {
        if sp.big_m.len() != hg.num_edges() {
            report.push(
                "sparsity.big_m",
                format!("{} values for {} hyperedges", sp.big_m.len(), hg.num_edges()),
            );
        }
        for (j, &m) in sp.big_m.iter().enumerate() {
            if !(m > 0.0) || !m.is_finite() {
                report.push(format!("sparsity.big_m[{j}]"), "big-M must be positive and finite");
            }
        }
    }

    let lc = &inst.linear;
    if lc.a.nrows() > 0 && lc.a.ncols() != n {
        report.push(
            "linear.a",
            format!("{} columns, expected {n}", lc.a.ncols()),
        );
    }
    if lc.a.nrows() != lc.b.len() {
        report.push("linear.b", format!("{} rows in A but {} in b", lc.a.nrows(), lc.b.len()));
    }
    report
}

/// Centers every column, then scales it to unit Euclidean norm.
pub fn normalize_dataset(d: &Dataset) -> Result<Dataset, ModelError> {
    let p = d.samples();
    if p < 2 {
        return Err(ModelError::TooFewSamples { min: 2, got: p });
    }
    let mut x = d.x.clone();
    for (k, mut col) in x.column_iter_mut().enumerate() {
        let mean = col.sum() / p as f64;
        col.add_scalar_mut(-mean);
        let norm = col.norm();
        if norm < DEGENERATE_COLUMN_NORM {
            return Err(ModelError::DegenerateColumn { column: k, norm });
        }
        col /= norm;
    }
    Ok(Dataset { x, y: d.y.clone() })
}

/// Shared planted model: `kappa` distinct coordinates with magnitudes in [1, 2]
/// and random signs, all other coordinates zero.
fn planted_coefficients(rng: &mut ChaCha8Rng, n: usize, kappa: usize) -> DVector<f64> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..kappa {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    let mut beta = DVector::zeros(n);
    for &k in &idx[..kappa] {
        let mag: f64 = rng.random_range(1.0..2.0);
        beta[k] = if rng.random_bool(0.5) { mag } else { -mag };
    }
    beta
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, p: usize, n: usize) -> DMatrix<f64> {
    // Row-major fill so the stream order does not depend on storage layout.
    let mut x = DMatrix::zeros(p, n);
    for l in 0..p {
        for k in 0..n {
            x[(l, k)] = rng.sample(StandardNormal);
        }
    }
    x
}

fn check_generator_args(n: usize, p: usize, nodes: usize, kappa: usize) -> Result<(), ModelError> {
    if n == 0 || p < 2 || nodes == 0 {
        return Err(ModelError::InvalidArgument(format!(
            "need n >= 1, p >= 2, nodes >= 1 (got n={n}, p={p}, nodes={nodes})"
        )));
    }
    if kappa == 0 || kappa > n {
        return Err(ModelError::InvalidArgument(format!("kappa {kappa} not in [1, {n}]")));
    }
    Ok(())
}

/// Distributed sparse logistic regression. Labels are drawn from the planted
/// model on the raw Gaussian features; features are then normalized per node.
pub fn generate_dslogr(
    n: usize,
    p: usize,
    nodes: usize,
    kappa: usize,
    lambda: f64,
    seed: u64,
) -> Result<ProblemInstance, ModelError> {
    check_generator_args(n, p, nodes, kappa)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta = planted_coefficients(&mut rng, n, kappa);
    let mut objectives = Vec::with_capacity(nodes);
    for _ in 0..nodes {
        let raw = gaussian_matrix(&mut rng, p, n);
        let logits = &raw * &beta;
        let y = DVector::from_iterator(
            p,
            logits.iter().map(|&z| {
                let prob = 1.0 / (1.0 + (-z).exp());
                if rng.random::<f64>() < prob {
                    1.0
                } else {
                    -1.0
                }
            }),
        );
        let data = normalize_dataset(&Dataset::new(raw, y))?;
        objectives.push(NodeObjective { kind: ObjectiveKind::Logistic, data, lambda });
    }
    Ok(ProblemInstance::with_single_edge(objectives, kappa))
}

/// Distributed sparse linear regression: `b = X_normalized beta + noise`.
pub fn generate_dslinr(
    n: usize,
    p: usize,
    nodes: usize,
    kappa: usize,
    lambda: f64,
    noise_sd: f64,
    seed: u64,
) -> Result<ProblemInstance, ModelError> {
    check_generator_args(n, p, nodes, kappa)?;
    if !(noise_sd >= 0.0) {
        return Err(ModelError::InvalidArgument(format!("noise_sd {noise_sd} < 0")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta = planted_coefficients(&mut rng, n, kappa);
    let mut objectives = Vec::with_capacity(nodes);
    for _ in 0..nodes {
        let raw = gaussian_matrix(&mut rng, p, n);
        let data = normalize_dataset(&Dataset::new(raw, DVector::zeros(p)))?;
        let mut b = &data.x * &beta;
        for v in b.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *v += noise_sd * e;
        }
        objectives.push(NodeObjective::least_squares(data.x, b, lambda));
    }
    Ok(ProblemInstance::with_single_edge(objectives, kappa))
}

/// `M = max(1, 2 |x_hat|_inf)` per hyperedge, `x_hat` the dense minimizer of
/// the summed objectives.
pub fn estimate_big_m(inst: &ProblemInstance) -> Result<Vec<f64>, ModelError> {
    let full: Vec<usize> = (0..inst.n).collect();
    let (x_hat, _) = engine::solve_restricted_centralized(inst, &full)?;
    let m = x_hat.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    Ok(vec![(2.0 * m).max(1.0); inst.hypergraph.num_edges()])
}
