//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::*;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use scot_core::driver::{Algorithm, Settings, SolveStatus};
use scot_core::engine::brute_force_oracle;
use scot_core::io::{performance_profile, problem_files, profile_limits, ResultsFile};
use scot_core::model::{generate_dslinr, generate_dslogr, ObjectiveKind};
use scot_core::transport::Backend;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn first_few(v: &[String]) -> String {
    v.iter().take(3).cloned().collect::<Vec<_>>().join("; ")
}

fn oracle_equivalence(runs: &[(SuiteRun, Reference)], failures: &[String], cases: &[SuiteCase], elapsed: f64) -> Outcome {
    let mut bad = failures.to_vec();
    for case in cases {
        match brute_force_oracle(&case.inst) {
            Ok(lib) => {
                let own = enumerate_supports(&case.inst);
                if (lib.value - own.value).abs() > 1e-8 * own.value.abs().max(1.0) {
                    bad.push(format!("{}: library oracle {} vs enumeration {}", case.label, lib.value, own.value));
                }
            }
            Err(e) => bad.push(format!("{}: {e}", case.label)),
        }
    }
    if elapsed >= 600.0 {
        bad.push(format!("suite took {elapsed:.1} s"));
    }
    let detail = format!("{} instances, {} runs in {elapsed:.1} s", cases.len(), runs.len());
    if bad.is_empty() {
        outcome(true, detail)
    } else {
        outcome(false, format!("{detail}; {} failures: {}", bad.len(), first_few(&bad)))
    }
}

fn cross_mode(runs: &[(SuiteRun, Reference)]) -> Outcome {
    let mut bad = Vec::new();
    let mut pairs = 0;
    for (run, _) in runs.iter().filter(|(r, _)| r.algorithm == Algorithm::Dihoa) {
        let r = &run.report;
        let Some((other, _)) = runs
            .iter()
            .find(|(o, _)| o.label == run.label && o.mode == run.mode && o.algorithm == Algorithm::Dipoa)
        else {
            bad.push(format!("{}: no DiPOA run", run.label));
            continue;
        };
        pairs += 1;
        let (a, b) = (r.objective, other.report.objective);
        if (a - b).abs() > 1e-5 * b.abs().max(1.0) {
            bad.push(format!("{} {:?}: DiHOA {a} vs DiPOA {b}", run.label, run.mode));
        }
        if let Some(q) = r.q_switch {
            if r.master_builds > q + 1 {
                bad.push(format!("{}: {} builds with switch at {q}", run.label, r.master_builds));
            }
        }
        if r.master_builds_after_switch != 0 {
            bad.push(format!("{}: {} builds after the switch", run.label, r.master_builds_after_switch));
        }
    }
    let detail = format!("{pairs} DiHOA/DiPOA pairs");
    if bad.is_empty() {
        outcome(true, detail)
    } else {
        outcome(false, format!("{detail}; {}", first_few(&bad)))
    }
}

fn bound_sandwich(runs: &[(SuiteRun, Reference)]) -> Outcome {
    let mut bad = Vec::new();
    for (run, reference) in runs {
        for v in sandwich_violations(&run.report, reference.value, 1e-7) {
            bad.push(format!("{} {:?} {:?}: {v}", run.label, run.mode, run.algorithm));
        }
    }
    let detail = format!("{} runs", runs.len());
    if bad.is_empty() {
        outcome(true, detail)
    } else {
        outcome(false, format!("{detail}; {}", first_few(&bad)))
    }
}

fn cut_suite() -> Outcome {
    let c = cut_validity(10_000, 2024);
    outcome(
        c.worst_excess <= 1e-9 && c.worst_dominance <= 1e-9,
        format!("{} pairs, max excess {:.2e}, max dominance error {:.2e}", c.pairs, c.worst_excess, c.worst_dominance),
    )
}

fn gradients_and_convexity() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for kind in [ObjectiveKind::Logistic, ObjectiveKind::LeastSquares] {
        let g = gradient_error(kind, 100, 99);
        let r = rayleigh_margin(kind, 100, 199);
        pass &= g < 1e-6 && r >= -1e-8;
        parts.push(format!("{kind:?}: gradient rel {g:.2e}, curvature margin {r:.2e}"));
    }
    outcome(pass, parts.join(", "))
}

fn distributed_vs_centralized() -> Outcome {
    let c = admm_agreement(20, 4242);
    outcome(
        c.worst_rel <= 1e-5 && c.worst_residual <= 1e-6 && c.mismatched_backends.is_empty(),
        format!(
            "{} instances, max rel {:.2e}, max residual {:.2e}, backend mismatches {}",
            c.instances,
            c.worst_rel,
            c.worst_residual,
            c.mismatched_backends.len()
        ),
    )
}

fn transport_semantics() -> Outcome {
    let strategy = (1usize..=4, 0usize..=5).prop_flat_map(|(size, len)| {
        (0..size, prop::collection::vec(prop::collection::vec(-1e6f64..1e6, len), size))
    });
    let mut parts = Vec::new();
    let mut pass = true;
    for backend in [Backend::Inproc, Backend::Tcp] {
        let mut runner = TestRunner::new(Config { cases: 64, failure_persistence: None, ..Config::default() });
        let res = runner.run(&strategy, |(root, data)| {
            collective_semantics(backend, root, &data).map_err(TestCaseError::fail)
        });
        pass &= res.is_ok();
        parts.push(match res {
            Ok(()) => format!("{backend}: 64 cases"),
            Err(e) => format!("{backend}: {e}"),
        });
    }
    outcome(pass, parts.join(", "))
}

fn scenario_one() -> Outcome {
    let settings = Settings { relative_gap: 1e-5, time_limit: 100.0, ..Settings::default() };
    let mut results = Vec::new();
    let mut solved = 0;
    let mut errors = Vec::new();
    for i in 0..20u64 {
        let n = 20 + (i as usize * 7) % 11;
        let p = 1000 + (i as usize * 379) % 1501;
        let sparsity = if i % 2 == 0 { 0.8 } else { 0.9 };
        let kappa = ((1.0 - sparsity) * n as f64).round().max(1.0) as usize;
        // 15 logistic to 5 linear
        let inst = if i % 4 == 3 {
            generate_dslinr(n, p, 2, kappa, 0.5, 0.5, 5000 + i)
        } else {
            generate_dslogr(n, p, 2, kappa, 1.0, 5000 + i)
        }
        .expect("scenario parameters are valid");
        let files = problem_files(&inst, &format!("scenario1_{i}"), true);
        match solve_inproc(&inst, &settings) {
            Ok(report) => {
                if report.status == SolveStatus::Optimal && report.times.total <= settings.time_limit {
                    solved += 1;
                }
                results.push(ResultsFile::from_report("dihoa", &files, report));
            }
            Err(e) => errors.push(format!("instance {i}: {e}")),
        }
    }
    let rows = performance_profile(&results, &profile_limits());
    let monotone = rows.windows(2).all(|w| w[0].config != w[1].config || w[0].fraction <= w[1].fraction);
    let slowest = results.iter().map(|r| r.time).fold(0.0f64, f64::max);
    let pass = errors.is_empty() && solved * 10 >= 20 * 9 && monotone;
    outcome(
        pass,
        format!(
            "{solved}/20 solved, slowest {slowest:.2} s, profile monotone {monotone}{}",
            if errors.is_empty() { String::new() } else { format!("; {}", first_few(&errors)) }
        ),
    )
}

fn main() -> ExitCode {
    let mut report: Vec<(&str, Outcome)> = Vec::new();

    let start = Instant::now();
    let cases = oracle_suite(50);
    let (runs, failures) = run_oracle_suite(&cases);
    let elapsed = start.elapsed().as_secs_f64();
    report.push(("oracle equivalence", oracle_equivalence(&runs, &failures, &cases, elapsed)));
    report.push(("cross-mode agreement", cross_mode(&runs)));
    report.push(("bound sandwich", bound_sandwich(&runs)));
    report.push(("cut validity", cut_suite()));
    report.push(("gradient and convexity", gradients_and_convexity()));
    report.push(("distributed vs centralized", distributed_vs_centralized()));
    report.push(("transport semantics", transport_semantics()));
    report.push(("scenario-1 benchmark", scenario_one()));

    let mut all = true;
    for (name, o) in &report {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        all &= o.pass;
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
