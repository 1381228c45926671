//! JSON problem, settings and results files, and performance-profile data.
//!
//! A problem is stored as one file per node, `<name>_node<rank>.json`. All
//! files carry `"schema": 1` and are parsed strictly: unknown keys are
//! rejected and errors point at the offending value with a JSON pointer.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::driver::{Settings, SolveReport, SolveStatus};
use crate::engine::OracleSolution;
use crate::model::{normalize_dataset, validate_instance, ModelError, NodeObjective, ObjectiveKind, ProblemInstance};

pub const SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("no problem files in {0}")]
    NoProblemFiles(PathBuf),
    #[error("missing problem file for rank {0}")]
    MissingRank(usize),
    #[error("duplicate problem files for rank {0}")]
    DuplicateRank(usize),
    #[error("schema violation in {file} at {pointer}: {message}")]
    SchemaViolation { file: String, pointer: String, message: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("inconsistent problem files: {0}")]
    Inconsistent(String),
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("no results files match {0}")]
    NoResults(String),
}

impl IoError {
    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        IoError::Io { path: path.to_path_buf(), message: e.to_string() }
    }

    fn schema(file: &str, pointer: impl Into<String>, message: impl Into<String>) -> Self {
        IoError::SchemaViolation { file: file.to_string(), pointer: pointer.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemType {
    Classification,
    Regression,
}

impl From<ObjectiveKind> for ProblemType {
    fn from(kind: ObjectiveKind) -> Self {
        match kind {
            ObjectiveKind::Logistic => ProblemType::Classification,
            ObjectiveKind::LeastSquares => ProblemType::Regression,
        }
    }
}

impl From<ProblemType> for ObjectiveKind {
    fn from(t: ProblemType) -> Self {
        match t {
            ProblemType::Classification => ObjectiveKind::Logistic,
            ProblemType::Regression => ObjectiveKind::LeastSquares,
        }
    }
}

/// One node's share of a problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    pub schema: u64,
    pub name: String,
    pub node_rank: usize,
    #[serde(rename = "type")]
    pub problem_type: ProblemType,
    /// Row-major, one inner array per sample.
    #[serde(rename = "X")]
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub lambda: f64,
    pub kappa: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub big_m: Option<f64>,
    pub normalized: bool,
}

impl ProblemFile {
    pub fn file_name(name: &str, rank: usize) -> String {
        format!("{name}_node{rank}.json")
    }

    /// Compact serialization with shortest round-trip floats; the form that
    /// is written to disk and digested.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("problem files always serialize")
    }

    fn objective(&self) -> NodeObjective {
        let rows = self.x.len();
        let cols = self.x.first().map_or(0, Vec::len);
        let x = DMatrix::from_fn(rows, cols, |r, c| self.x[r][c]);
        let y = DVector::from_column_slice(&self.y);
        NodeObjective { kind: self.problem_type.into(), data: crate::model::Dataset::new(x, y), lambda: self.lambda }
    }
}

/// Splits an instance into per-node files. A single big-M value is stored
/// when the instance carries one.
pub fn problem_files(inst: &ProblemInstance, name: &str, normalized: bool) -> Vec<ProblemFile> {
    let big_m = inst.sparsity.big_m.first().copied().filter(|_| !inst.sparsity.estimated);
    inst.objectives
        .iter()
        .enumerate()
        .map(|(rank, obj)| ProblemFile {
            schema: SCHEMA_VERSION,
            name: name.to_string(),
            node_rank: rank,
            problem_type: obj.kind.into(),
            x: (0..obj.data.x.nrows()).map(|r| obj.data.x.row(r).iter().copied().collect()).collect(),
            y: obj.data.y.iter().copied().collect(),
            lambda: obj.lambda,
            kappa: inst.sparsity.kappa,
            big_m,
            normalized,
        })
        .collect()
}

/// Writes one canonical file per node and returns their paths in rank order.
pub fn write_problem_dir(
    dir: &Path,
    inst: &ProblemInstance,
    name: &str,
    normalized: bool,
) -> Result<Vec<PathBuf>, IoError> {
    fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    problem_files(inst, name, normalized)
        .into_iter()
        .map(|file| {
            let path = dir.join(ProblemFile::file_name(name, file.node_rank));
            fs::write(&path, file.canonical_json() + "\n").map_err(|e| IoError::io(&path, e))?;
            Ok(path)
        })
        .collect()
}

/// Strict deserialization of a JSON value; failures carry a JSON pointer.
fn from_value<T: DeserializeOwned>(file: &str, value: Value) -> Result<T, IoError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let pointer = json_pointer(e.path());
        IoError::schema(file, pointer, e.inner().to_string())
    })
}

fn json_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => {
                let _ = write!(out, "{index}");
            }
            Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

fn parse_json(file: &str, text: &str) -> Result<Value, IoError> {
    serde_json::from_str(text).map_err(|e| IoError::schema(file, "/", e.to_string()))
}

/// Requires `"schema": 1` at the top level and removes it.
fn take_schema(file: &str, value: &mut Value) -> Result<(), IoError> {
    let Some(obj) = value.as_object_mut() else {
        return Err(IoError::schema(file, "/", "expected a JSON object"));
    };
    match obj.remove("schema") {
        Some(Value::Number(v)) if v.as_u64() == Some(SCHEMA_VERSION) => Ok(()),
        Some(other) => Err(IoError::schema(file, "/schema", format!("unsupported schema version {other}"))),
        None => Err(IoError::schema(file, "/schema", "missing field `schema`")),
    }
}

pub fn parse_problem_file(file: &str, text: &str) -> Result<ProblemFile, IoError> {
    let mut value = parse_json(file, text)?;
    take_schema(file, &mut value)?;
    if let Some(obj) = value.as_object_mut() {
        obj.insert("schema".into(), Value::from(SCHEMA_VERSION));
    }
    let pf: ProblemFile = from_value(file, value)?;
    let cols = pf.x.first().map_or(0, Vec::len);
    if pf.x.is_empty() || cols == 0 {
        return Err(IoError::schema(file, "/X", "data matrix must be non-empty"));
    }
    if let Some(r) = pf.x.iter().position(|row| row.len() != cols) {
        return Err(IoError::schema(file, format!("/X/{r}"), format!("row has {} entries, expected {cols}", pf.x[r].len())));
    }
    if pf.y.len() != pf.x.len() {
        return Err(IoError::schema(file, "/y", format!("{} responses for {} samples", pf.y.len(), pf.x.len())));
    }
    Ok(pf)
}

/// Problem files of `dir`, keyed and checked by rank.
pub fn read_problem_dir(dir: &Path) -> Result<Vec<ProblemFile>, IoError> {
    let entries = fs::read_dir(dir).map_err(|e| IoError::io(dir, e))?;
    let mut by_rank: BTreeMap<usize, ProblemFile> = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| IoError::io(dir, e))?.path();
        let Some(fname) = path.file_name().and_then(|f| f.to_str()) else {
            continue;
        };
        let Some(rank) = rank_of(fname) else {
            continue;
        };
        let text = fs::read_to_string(&path).map_err(|e| IoError::io(&path, e))?;
        let pf = parse_problem_file(fname, &text)?;
        if pf.node_rank != rank {
            return Err(IoError::schema(fname, "/node_rank", format!("file name says rank {rank}, content says {}", pf.node_rank)));
        }
        if ProblemFile::file_name(&pf.name, rank) != fname {
            return Err(IoError::schema(fname, "/name", format!("file name does not match problem name {:?}", pf.name)));
        }
        if by_rank.insert(rank, pf).is_some() {
            return Err(IoError::DuplicateRank(rank));
        }
    }
    if by_rank.is_empty() {
        return Err(IoError::NoProblemFiles(dir.to_path_buf()));
    }
    if let Some(missing) = (0..by_rank.len()).find(|r| !by_rank.contains_key(r)) {
        return Err(IoError::MissingRank(missing));
    }
    Ok(by_rank.into_values().collect())
}

/// `<name>_node<rank>.json` → rank.
fn rank_of(fname: &str) -> Option<usize> {
    let stem = fname.strip_suffix(".json")?;
    let (_, rank) = stem.rsplit_once("_node")?;
    if rank.is_empty() || !rank.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    rank.parse().ok()
}

/// Assembles a validated instance from per-node files. Datasets marked as
/// not normalized are normalized when `normalize` is set.
pub fn assemble_instance(files: &[ProblemFile], normalize: bool) -> Result<ProblemInstance, IoError> {
    let first = files.first().ok_or_else(|| IoError::Inconsistent("no node files".into()))?;
    let n = first.x[0].len();
    for f in files {
        let cols = f.x[0].len();
        if cols != n {
            return Err(IoError::DimensionMismatch(format!("node 0 has {n} features, node {} has {cols}", f.node_rank)));
        }
        if f.name != first.name {
            return Err(IoError::Inconsistent(format!("names {:?} and {:?}", first.name, f.name)));
        }
        if f.problem_type != first.problem_type {
            return Err(IoError::Inconsistent(format!("node {} has a different problem type", f.node_rank)));
        }
        if f.kappa != first.kappa {
            return Err(IoError::Inconsistent(format!("node {} has kappa {}, node 0 has {}", f.node_rank, f.kappa, first.kappa)));
        }
        if f.big_m != first.big_m {
            return Err(IoError::Inconsistent(format!("node {} has a different big_m", f.node_rank)));
        }
    }
    let mut objectives = Vec::with_capacity(files.len());
    for f in files {
        let mut obj = f.objective();
        if normalize && !f.normalized {
            obj.data = normalize_dataset(&obj.data)?;
        }
        objectives.push(obj);
    }
    let mut inst = ProblemInstance::with_single_edge(objectives, first.kappa);
    if let Some(m) = first.big_m {
        inst = inst.with_big_m(m);
    }
    let report = validate_instance(&inst);
    if !report.is_ok() {
        let msgs: Vec<String> = report.violations.iter().map(|v| format!("{}: {}", v.path, v.message)).collect();
        return Err(IoError::Invalid(msgs.join("; ")));
    }
    Ok(inst)
}

pub fn parse_problem_dir(dir: &Path, normalize: bool) -> Result<ProblemInstance, IoError> {
    assemble_instance(&read_problem_dir(dir)?, normalize)
}

/// SHA-256 over the canonical JSON of the node files in rank order.
pub fn instance_digest(files: &[ProblemFile]) -> String {
    let mut h = Sha256::new();
    for f in files {
        h.update(f.canonical_json().as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Strict settings parsing: `"schema": 1` plus known keys only.
pub fn parse_settings(file: &str, text: &str) -> Result<Settings, IoError> {
    let mut value = parse_json(file, text)?;
    take_schema(file, &mut value)?;
    let settings: Settings = from_value(file, value)?;
    settings.validate().map_err(|e| IoError::schema(file, "/", e.to_string()))?;
    Ok(settings)
}

pub fn read_settings(path: &Path) -> Result<Settings, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    parse_settings(&path.display().to_string(), &text)
}

pub fn settings_json(settings: &Settings) -> String {
    let mut value = serde_json::to_value(settings).expect("settings always serialize");
    if let Some(obj) = value.as_object_mut() {
        obj.insert("schema".into(), Value::from(SCHEMA_VERSION));
    }
    serde_json::to_string_pretty(&value).expect("settings always serialize")
}

/// Outcome of one solver run on one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultsFile {
    pub schema: u64,
    /// `dihoa`, `dipoa` or `oracle`.
    pub solver: String,
    /// Label grouping runs into one performance-profile curve.
    pub config: String,
    pub instance: String,
    pub digest: String,
    pub status: SolveStatus,
    pub objective: Option<f64>,
    pub support: Vec<usize>,
    pub x: Vec<f64>,
    /// Wall-clock seconds.
    pub time: f64,
    /// Full report of a DiHOA or DiPOA run.
    pub report: Option<SolveReport>,
}

impl ResultsFile {
    pub fn from_report(config: &str, files: &[ProblemFile], report: SolveReport) -> Self {
        let solver = serde_json::to_value(report.algorithm).ok().and_then(|v| v.as_str().map(String::from));
        Self {
            schema: SCHEMA_VERSION,
            solver: solver.unwrap_or_default(),
            config: config.to_string(),
            instance: files.first().map(|f| f.name.clone()).unwrap_or_default(),
            digest: instance_digest(files),
            status: report.status,
            objective: report.objective.is_finite().then_some(report.objective),
            support: report.support.clone(),
            x: report.x.clone(),
            time: report.times.total,
            report: Some(report),
        }
    }

    pub fn from_oracle(config: &str, files: &[ProblemFile], sol: &OracleSolution, time: f64) -> Self {
        Self {
            schema: SCHEMA_VERSION,
            solver: "oracle".into(),
            config: config.to_string(),
            instance: files.first().map(|f| f.name.clone()).unwrap_or_default(),
            digest: instance_digest(files),
            status: SolveStatus::Optimal,
            objective: Some(sol.value),
            support: sol.support.clone(),
            x: sol.x.clone(),
            time,
            report: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("results always serialize")
    }

    pub fn parse(file: &str, text: &str) -> Result<Self, IoError> {
        let value = parse_json(file, text)?;
        let res: Self = from_value(file, value)?;
        if res.schema != SCHEMA_VERSION {
            return Err(IoError::schema(file, "/schema", format!("unsupported schema version {}", res.schema)));
        }
        Ok(res)
    }

    /// Whether `files` are the inputs this result was computed from.
    pub fn matches(&self, files: &[ProblemFile]) -> bool {
        self.digest == instance_digest(files)
    }
}

/// 30 time limits from 0.5 s to 50 s, evenly spaced on a log scale.
pub fn profile_limits() -> Vec<f64> {
    const COUNT: usize = 30;
    let (lo, hi) = (0.5f64.ln(), 50.0f64.ln());
    (0..COUNT)
        .map(|i| if i + 1 == COUNT { 50.0 } else { (lo + (hi - lo) * i as f64 / (COUNT - 1) as f64).exp() })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProfileRow {
    pub config: String,
    pub limit: f64,
    pub fraction: f64,
}

/// Fraction of instances each configuration solved to optimality within
/// each limit. Instances are counted per configuration; a configuration
/// run twice on one instance keeps its faster optimal run.
pub fn performance_profile(results: &[ResultsFile], limits: &[f64]) -> Vec<ProfileRow> {
    let mut best: BTreeMap<&str, BTreeMap<&str, Option<f64>>> = BTreeMap::new();
    for r in results {
        let solved = (r.status == SolveStatus::Optimal).then_some(r.time);
        let slot = best.entry(&r.config).or_default().entry(&r.digest).or_insert(None);
        *slot = match (*slot, solved) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
    }
    let mut rows = Vec::new();
    for (config, instances) in best {
        let total = instances.len() as f64;
        for &limit in limits {
            let solved = instances.values().filter(|t| t.is_some_and(|t| t <= limit)).count();
            rows.push(ProfileRow { config: config.to_string(), limit, fraction: solved as f64 / total });
        }
    }
    rows
}

pub fn profile_csv(rows: &[ProfileRow]) -> String {
    let mut out = String::from("config,time_limit,fraction_solved\n");
    for r in rows {
        let config = if r.config.contains([',', '"', '\n']) {
            format!("\"{}\"", r.config.replace('"', "\"\""))
        } else {
            r.config.clone()
        };
        let _ = writeln!(out, "{config},{},{}", r.limit, r.fraction);
    }
    out
}
