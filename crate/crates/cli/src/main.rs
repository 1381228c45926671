//! `scot`: generate problems, solve them on a local network of ranks, run
//! the brute-force oracle, and emit performance-profile data.

use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Stdio};
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context, Result};
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use log::info;

use scot_core::driver::{run, Algorithm, Settings, SolveReport, SolveStatus};
use scot_core::engine::brute_force_oracle;
use scot_core::io::{
    performance_profile, profile_csv, profile_limits, read_problem_dir, read_settings, settings_json, assemble_instance,
    write_problem_dir, IoError, ResultsFile,
};
use scot_core::model::{generate_dslinr, generate_dslogr, ProblemInstance};
use scot_core::transport::{connect_tcp, loopback_addrs, run_inproc};

#[derive(Parser)]
#[command(name = "scot", version, about = "Distributed sparse convex optimization")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProblemKind {
    Classification,
    Regression,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendArg {
    Inproc,
    Tcp,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgorithmArg {
    Dihoa,
    Dipoa,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a random DSLogR or DSLinR instance.
    Gen {
        #[arg(long = "type", value_enum)]
        kind: ProblemKind,
        /// Number of features.
        #[arg(long)]
        n: usize,
        /// Samples per node.
        #[arg(long)]
        p: usize,
        #[arg(long)]
        nodes: usize,
        #[arg(long)]
        kappa: usize,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        /// Standard deviation of the regression noise.
        #[arg(long, default_value_t = 0.5)]
        noise_sd: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Problem name; defaults to `<type>_n<n>_p<p>_s<seed>`.
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve a problem directory.
    Run {
        #[arg(long)]
        problem_dir: PathBuf,
        #[arg(long)]
        settings: Option<PathBuf>,
        /// Overrides the algorithm of the settings file.
        #[arg(long, value_enum)]
        algorithm: Option<AlgorithmArg>,
        #[arg(long, value_enum, default_value = "inproc")]
        backend: BackendArg,
        /// First TCP port; rank r listens on port-base + r. Free ports are
        /// picked when omitted.
        #[arg(long)]
        port_base: Option<u16>,
        /// Label of this run in performance profiles; defaults to the
        /// algorithm name.
        #[arg(long)]
        config: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve by enumerating every support (small instances only).
    Oracle {
        #[arg(long)]
        problem_dir: PathBuf,
        #[arg(long)]
        settings: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fraction of instances solved per configuration and time limit.
    Profile {
        #[arg(long)]
        results_glob: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// One rank of a TCP run; started by `run --backend tcp`.
    #[command(hide = true)]
    Worker {
        #[arg(long)]
        problem_dir: PathBuf,
        #[arg(long)]
        settings: Option<PathBuf>,
        #[arg(long, value_enum)]
        algorithm: Option<AlgorithmArg>,
        #[arg(long)]
        rank: usize,
        /// Comma-separated ports, one per rank.
        #[arg(long)]
        ports: String,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SCOT_LOG", "warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::Gen { kind, n, p, nodes, kappa, lambda, noise_sd, seed, name, out } => {
            if kappa == 0 || kappa > n {
                Cli::command()
                    .error(clap::error::ErrorKind::ValueValidation, format!("--kappa must lie in 1..={n}, got {kappa}"))
                    .exit();
            }
            gen(kind, n, p, nodes, kappa, lambda, noise_sd, seed, name, &out)?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Run { problem_dir, settings, algorithm, backend, port_base, config, out } => {
            let settings = load_settings(settings.as_deref(), algorithm)?;
            let files = read_problem_dir(&problem_dir)?;
            let report = match backend {
                BackendArg::Inproc => {
                    let inst = assemble_instance(&files, settings.normalize)?;
                    solve_inproc(&inst, &settings)?
                }
                BackendArg::Tcp => solve_tcp(&problem_dir, files.len(), &settings, port_base)?,
            };
            let label = config.unwrap_or_else(|| algorithm_name(report.algorithm).to_string());
            let status = report.status;
            let results = ResultsFile::from_report(&label, &files, report);
            write_file(&out, &results.to_json())?;
            info!("{}: {:?}, objective {:?}", results.instance, status, results.objective);
            Ok(exit_code(status))
        }
        Cmd::Oracle { problem_dir, settings, out } => {
            let settings = load_settings(settings.as_deref(), None)?;
            let files = read_problem_dir(&problem_dir)?;
            let mut inst = assemble_instance(&files, settings.normalize)?;
            if let Some(mode) = settings.sparsity_mode {
                inst.sparsity.mode = mode;
            }
            let start = Instant::now();
            let sol = brute_force_oracle(&inst)?;
            let results = ResultsFile::from_oracle("oracle", &files, &sol, start.elapsed().as_secs_f64());
            write_file(&out, &results.to_json())?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Profile { results_glob, out } => {
            let mut results = Vec::new();
            for entry in glob::glob(&results_glob).with_context(|| format!("bad pattern {results_glob:?}"))? {
                let path = entry?;
                let text = std::fs::read_to_string(&path).with_context(|| path.display().to_string())?;
                results.push(ResultsFile::parse(&path.display().to_string(), &text)?);
            }
            if results.is_empty() {
                return Err(IoError::NoResults(results_glob).into());
            }
            let rows = performance_profile(&results, &profile_limits());
            write_file(&out, &profile_csv(&rows))?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Worker { problem_dir, settings, algorithm, rank, ports } => {
            let settings = load_settings(settings.as_deref(), algorithm)?;
            let report = worker(&problem_dir, &settings, rank, &ports)?;
            if let Some(report) = report {
                println!("{}", serde_json::to_string(&report)?);
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn gen(
    kind: ProblemKind,
    n: usize,
    p: usize,
    nodes: usize,
    kappa: usize,
    lambda: f64,
    noise_sd: f64,
    seed: u64,
    name: Option<String>,
    out: &Path,
) -> Result<()> {
    let (inst, tag) = match kind {
        ProblemKind::Classification => (generate_dslogr(n, p, nodes, kappa, lambda, seed)?, "dslogr"),
        ProblemKind::Regression => (generate_dslinr(n, p, nodes, kappa, lambda, noise_sd, seed)?, "dslinr"),
    };
    let name = name.unwrap_or_else(|| format!("{tag}_n{n}_p{p}_s{seed}"));
    write_problem_dir(out, &inst, &name, true)?;
    write_file(&out.join("settings.json"), &settings_json(&Settings::default()))?;
    Ok(())
}

fn load_settings(path: Option<&Path>, algorithm: Option<AlgorithmArg>) -> Result<Settings> {
    let mut settings = match path {
        Some(p) => read_settings(p)?,
        None => Settings::default(),
    };
    if let Some(a) = algorithm {
        settings.algorithm = match a {
            AlgorithmArg::Dihoa => Algorithm::Dihoa,
            AlgorithmArg::Dipoa => Algorithm::Dipoa,
        };
    }
    Ok(settings)
}

fn algorithm_name(a: Algorithm) -> &'static str {
    match a {
        Algorithm::Dihoa => "dihoa",
        Algorithm::Dipoa => "dipoa",
    }
}

fn exit_code(status: SolveStatus) -> ExitCode {
    match status {
        SolveStatus::Optimal => ExitCode::SUCCESS,
        _ => ExitCode::from(2),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| dir.display().to_string())?;
    }
    std::fs::write(path, text).with_context(|| path.display().to_string())
}

fn solve_inproc(inst: &ProblemInstance, settings: &Settings) -> Result<SolveReport> {
    let outcomes = run_inproc(inst.num_nodes(), settings.comm_timeout(), |mut world| run(&mut world, inst, settings));
    outcomes.into_iter().next().expect("at least one rank").map_err(Into::into)
}

/// Starts one worker process per rank and returns the report of rank 0.
fn solve_tcp(problem_dir: &Path, size: usize, settings: &Settings, port_base: Option<u16>) -> Result<SolveReport> {
    let ports: Vec<u16> = match port_base {
        Some(base) => (0..size)
            .map(|r| u16::try_from(base as usize + r).map_err(|_| anyhow!("port range exceeds 65535")))
            .collect::<Result<_>>()?,
        None => {
            let (listeners, addrs) = loopback_addrs(size)?;
            drop(listeners);
            addrs.iter().map(SocketAddr::port).collect()
        }
    };
    let ports_arg = ports.iter().map(u16::to_string).collect::<Vec<_>>().join(",");
    let settings_file = tempfile::Builder::new().suffix(".json").tempfile()?;
    std::fs::write(settings_file.path(), settings_json(settings))?;
    let exe = std::env::current_exe()?;
    let mut children = Vec::with_capacity(size);
    for rank in 0..size {
        let child = Command::new(&exe)
            .arg("worker")
            .arg("--problem-dir")
            .arg(problem_dir)
            .arg("--settings")
            .arg(settings_file.path())
            .arg("--rank")
            .arg(rank.to_string())
            .arg("--ports")
            .arg(&ports_arg)
            .stdout(if rank == 0 { Stdio::piped() } else { Stdio::null() })
            .spawn()
            .with_context(|| format!("spawning rank {rank}"))?;
        children.push(child);
    }
    let mut root_output = None;
    let mut failed = Vec::new();
    for (rank, child) in children.into_iter().enumerate() {
        let output = child.wait_with_output()?;
        if !output.status.success() {
            failed.push(rank);
        }
        if rank == 0 {
            root_output = Some(output.stdout);
        }
    }
    if !failed.is_empty() {
        bail!("ranks {failed:?} failed");
    }
    let stdout = root_output.expect("rank 0 was started");
    serde_json::from_slice(&stdout).context("reading the report of rank 0")
}

fn worker(problem_dir: &Path, settings: &Settings, rank: usize, ports: &str) -> Result<Option<SolveReport>> {
    let ports: Vec<u16> = ports.split(',').map(str::parse).collect::<Result<_, _>>().context("parsing --ports")?;
    let inst = assemble_instance(&read_problem_dir(problem_dir)?, settings.normalize)?;
    if ports.len() != inst.num_nodes() || rank >= ports.len() {
        bail!("{} ports for {} nodes, rank {rank}", ports.len(), inst.num_nodes());
    }
    let addrs: Vec<SocketAddr> = ports.iter().map(|&p| SocketAddr::from(([127, 0, 0, 1], p))).collect();
    let listener = bind_retry(addrs[rank], settings.comm_timeout())?;
    let mut world = connect_tcp(rank, ports.len(), listener, &addrs, settings.comm_timeout())?;
    let report = run(&mut world, &inst, settings)?;
    Ok((rank == 0).then_some(report))
}

fn bind_retry(addr: SocketAddr, timeout: Duration) -> Result<TcpListener> {
    let deadline = Instant::now() + timeout;
    loop {
        match TcpListener::bind(addr) {
            Ok(l) => return Ok(l),
            Err(_) if Instant::now() < deadline => std::thread::sleep(Duration::from_millis(20)),
            Err(e) => return Err(e).with_context(|| format!("binding {addr}")),
        }
    }
}
