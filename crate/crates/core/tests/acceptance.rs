//! End-to-end acceptance checks on the three reference cases. Prints one
//! PASS/FAIL line per criterion and exits non-zero if any fails.

use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use etrm_core::bvp::{collocate, uniform_mesh, FnProblem, MeshFunction, SolverSettings};
use etrm_core::config::{BuiltinForce, ExcitationConfig, RunConfig};
use etrm_core::excitation::{
    builtin_case, case1_initial_conditions, periodic_force, HYDRODYNAMIC_DAMPING,
};
use etrm_core::postprocess::ArcKind;
use etrm_core::runner::{execute, sweep_epsilon, RunSummary};

const CASES: [&str; 3] = ["case1", "case2", "case3"];
const WALL_CLOCK_LIMIT: Duration = Duration::from_secs(600);

struct CaseRun {
    summary: RunSummary,
    elapsed: Duration,
}

fn run_case(id: &str) -> &'static CaseRun {
    static RUNS: [OnceLock<CaseRun>; 3] = [OnceLock::new(), OnceLock::new(), OnceLock::new()];
    let index = CASES.iter().position(|c| *c == id).expect("known case");
    RUNS[index].get_or_init(|| {
        let clock = Instant::now();
        let artifacts = execute(&RunConfig::builtin(id)).expect("built-in configuration is valid");
        CaseRun {
            summary: artifacts.summary,
            elapsed: clock.elapsed(),
        }
    })
}

fn energy_mj(id: &str) -> Option<f64> {
    run_case(id).summary.energy_mj
}

fn within(value: f64, target: f64, rel: f64) -> bool {
    (value - target).abs() <= rel * target
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn energy_criterion(id: &str, target: f64, rel: f64) -> Outcome {
    let run = run_case(id);
    match energy_mj(id) {
        Some(e) => {
            let in_time = run.elapsed <= WALL_CLOCK_LIMIT;
            outcome(
                within(e, target, rel) && in_time,
                format!(
                    "{id}: E = {e:.4} MJ, target {target} MJ ± {:.0}% ({:+.2}%), {:.2} s",
                    rel * 100.0,
                    (e / target - 1.0) * 100.0,
                    run.elapsed.as_secs_f64()
                ),
            )
        }
        None => outcome(
            false,
            format!("{id}: no converged solution ({:?})", run.summary.error),
        ),
    }
}

fn arc_sequences() -> Outcome {
    let label = |id: &str| {
        run_case(id)
            .summary
            .arcs
            .clone()
            .unwrap_or_else(|| "-".into())
    };
    let (l1, l2, l3) = (label("case1"), label("case2"), label("case3"));
    let segments = &run_case("case3").summary.segments;
    let case3_ok = segments.len() == 13
        && segments.iter().enumerate().all(|(i, s)| {
            let bang = matches!(s.kind, ArcKind::BangPlus | ArcKind::BangMinus);
            bang == (i % 2 == 0)
        });
    outcome(
        l1 == "S-B" && l2 == "B-S-B" && case3_ok,
        format!(
            "case1 {l1} (want S-B), case2 {l2} (want B-S-B), case3 {} segments {l3} (want 13, B first and last, alternating)",
            segments.len()
        ),
    )
}

fn initial_conditions() -> Outcome {
    let (x1, x2) = case1_initial_conditions(&periodic_force(), HYDRODYNAMIC_DAMPING)
        .expect("non-zero frequencies");
    let round4 = |v: f64| (v * 1e4).round() / 1e4;
    outcome(
        round4(x1) == -0.5093 && round4(x2) == 0.7480,
        format!("({x1:.6}, {x2:.6}) vs (-0.5093, 0.7480)"),
    )
}

fn improvement() -> Outcome {
    let (e1, e2) = (energy_mj("case1"), energy_mj("case2"));
    let pass = matches!((e1, e2), (Some(a), Some(b)) if a > 0.7966 && b > 0.7166);
    outcome(
        pass,
        format!("case1 {e1:.4?} MJ > 0.7966, case2 {e2:.4?} MJ > 0.7166"),
    )
}

fn per_case(check: impl Fn(&RunSummary) -> (bool, String)) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for id in CASES {
        let summary = &run_case(id).summary;
        let (ok, text) = if summary.diagnostics.is_some() {
            check(summary)
        } else {
            (false, "no converged solution".into())
        };
        pass &= ok;
        parts.push(format!("{id} {text}"));
    }
    outcome(pass, parts.join("; "))
}

fn hamiltonian_constancy() -> Outcome {
    let limit = 10.0 * SolverSettings::default().rel_tol;
    per_case(|s| {
        let d = s.diagnostics.as_ref().unwrap();
        (
            d.hamiltonian_relative_drift <= limit,
            format!("{:.2e}", d.hamiltonian_relative_drift),
        )
    })
}

fn pmp_audit() -> Outcome {
    per_case(|s| {
        let d = s.diagnostics.as_ref().unwrap();
        (
            d.pmp_probes == 64 * 1024 && d.pmp_violations == 0,
            format!("{}/{}", d.pmp_violations, d.pmp_probes),
        )
    })
}

fn singular_oracle() -> Outcome {
    per_case(|s| {
        let d = s.diagnostics.as_ref().unwrap();
        let h1_limit = 1e-2 * d.h1_max_abs;
        let ok = d
            .singular_arcs
            .iter()
            .all(|a| a.oracle_deviation < 1e-2 && a.max_abs_h1 < h1_limit);
        (
            ok,
            format!(
                "{} arcs, max |u-u_sing|/gamma {:.2e}, max |H1| {:.2e} (limit {:.2e})",
                d.singular_arcs.len(),
                d.singular_oracle_max,
                d.singular_h1_max,
                h1_limit
            ),
        )
    })
}

/// Nodal error at the right end for `y' = cos(t) y`, `y(0) = 1`, whose
/// solution is `exp(sin t)`.
fn manufactured_error(intervals: usize) -> f64 {
    let (t0, tf) = (0.0, 4.0);
    let problem = FnProblem {
        dim: 1,
        t0,
        tf,
        rhs: |t: f64, y: &[f64], f: &mut [f64]| f[0] = t.cos() * y[0],
        bc: |ya: &[f64], _yb: &[f64], r: &mut [f64]| r[0] = ya[0] - 1.0,
    };
    let guess = MeshFunction::from_fn(1, uniform_mesh(t0, tf, intervals + 1), |_| vec![1.0]);
    let settings = SolverSettings {
        rel_tol: 1e-12,
        abs_tol: 1e-12,
        ..SolverSettings::default()
    };
    let sol = collocate(&problem, &guess, &settings).expect("linear problem converges");
    (sol.node(intervals)[0] - tf.sin().exp()).abs()
}

fn solver_order() -> Outcome {
    let clock = Instant::now();
    let meshes = [8usize, 16, 32, 64];
    let errors: Vec<f64> = meshes.iter().map(|&n| manufactured_error(n)).collect();
    // Least-squares slope of log error against log step.
    let xs: Vec<f64> = meshes.iter().map(|&n| (4.0 / n as f64).ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / 4.0, ys.iter().sum::<f64>() / 4.0);
    let slope = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    outcome(
        (slope - 4.0).abs() <= 0.3,
        format!(
            "order {slope:.3} from errors [{}] over {meshes:?} intervals, {:.3} s",
            errors
                .iter()
                .map(|e| format!("{e:.2e}"))
                .collect::<Vec<_>>()
                .join(", "),
            clock.elapsed().as_secs_f64()
        ),
    )
}

fn epsilon_monotonicity() -> Outcome {
    let list = [0.1, 0.03, 0.01, 0.003];
    let table = sweep_epsilon(&RunConfig::builtin("case1"), &list, 1).expect("valid sweep");
    let energies = table.energies();
    let complete = table.error.is_none() && energies.len() == list.len();
    let monotone = energies.windows(2).all(|w| w[1] >= w[0]);
    let shown: Vec<String> = table
        .rows
        .iter()
        .map(|r| format!("{}: {:.4}", r.epsilon, r.energy_j / 1e6))
        .collect();
    outcome(
        complete && monotone,
        format!(
            "case1 energies (MJ) [{}], want non-decreasing",
            shown.join(", ")
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("case 1 energy", || energy_criterion("case1", 0.8412, 0.02)),
        ("case 2 energy", || energy_criterion("case2", 0.7599, 0.02)),
        ("case 3 energy", || energy_criterion("case3", 1.5040, 0.03)),
        ("arc sequences", arc_sequences),
        ("case 1 initial conditions", initial_conditions),
        ("improvement over reference", improvement),
        ("hamiltonian constancy", hamiltonian_constancy),
        ("pointwise minimality audit", pmp_audit),
        ("singular arc oracle", singular_oracle),
        ("collocation order", solver_order),
        ("epsilon sweep monotonicity", epsilon_monotonicity),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        failed += usize::from(!o.pass);
        println!(
            "{} {:>2} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail
        );
    }

    // Not a criterion: the irregular-sea case with the excitation scale one
    // decade lower, for comparison with the case 3 targets above.
    let case = builtin_case("case3").unwrap();
    let scale = case.excitation.scale / 10.0;
    let cfg = RunConfig {
        case: None,
        id: Some("case3-scaled".into()),
        model: Some(case.model),
        boundary: Some(case.boundary),
        excitation: Some(ExcitationConfig {
            builtin: Some(BuiltinForce::NonPeriodic),
            scale: Some(scale),
            terms: None,
        }),
        ..RunConfig::builtin("case3")
    };
    if let Ok(a) = execute(&cfg) {
        let s = a.summary;
        println!(
            "note: case3 with excitation scale {scale:e} N: E = {} MJ, {} segments {}",
            s.energy_mj.map_or("-".into(), |e| format!("{e:.4}")),
            s.segments.len(),
            s.arcs.unwrap_or_default()
        );
    }

    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
