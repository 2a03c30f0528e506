//! End-to-end runs: continuation, post-processing and artifact files.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, OutputFormat, RunConfig, SCHEMA_VERSION};
use crate::continuation::{
    march_epsilon, march_final_time, start, ContinuationError, ContinuationState, ContinuationTrace,
};
use crate::excitation::CaseSpec;
use crate::postprocess::{
    classify_arcs, diagnostics, harvested_energy, ArcSegment, DiagnosticsReport, Trajectory,
};

pub const TRAJECTORY_HEADER: &str = "t,x1,x2,x3,lam1,lam2,lam3,u,u_trig,H1,H,E_cum";
pub const SWEEP_HEADER: &str = "epsilon,energy_J";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Converged,
    SolverFailed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub case_id: String,
    pub status: RunStatus,
    pub energy_j: Option<f64>,
    pub energy_mj: Option<f64>,
    /// Arc label such as `B-S-B`.
    pub arcs: Option<String>,
    pub segments: Vec<ArcSegment>,
    /// Epsilon and final time of the last converged solution.
    pub final_epsilon: Option<f64>,
    pub final_tf: Option<f64>,
    pub mesh_points: Option<usize>,
    pub wall_clock_s: f64,
    pub diagnostics: Option<DiagnosticsReport>,
    pub error: Option<String>,
    pub trace: ContinuationTrace,
}

impl RunSummary {
    pub fn converged(&self) -> bool {
        self.status == RunStatus::Converged
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// Everything a run produces in memory.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub summary: RunSummary,
    pub trajectory: Option<Trajectory>,
    pub state: Option<ContinuationState>,
}

/// Validates the configuration, then runs both continuation stages and
/// post-processes the final solution. Solver failures are reported through
/// the summary status; only configuration problems are errors.
pub fn execute(config: &RunConfig) -> Result<RunArtifacts, ConfigError> {
    let case = config.resolve()?;
    let clock = Instant::now();
    let outcome = continuation_path(&case, config, &config.schedule.eps_values(), &mut |_| {});
    let wall_clock_s = clock.elapsed().as_secs_f64();
    Ok(match outcome {
        Ok(state) => converged_artifacts(&case, config, state, wall_clock_s),
        Err(e) => RunArtifacts {
            summary: failed_summary(&case, &e, wall_clock_s),
            trajectory: None,
            state: None,
        },
    })
}

fn continuation_path(
    case: &CaseSpec,
    config: &RunConfig,
    eps_targets: &[f64],
    on_step: &mut dyn FnMut(&ContinuationState),
) -> Result<ContinuationState, ContinuationError> {
    let mut state = start(case, &config.schedule, &config.solver)?;
    march_final_time(&mut state, case, &config.schedule, &config.solver)?;
    on_step(&state);
    march_epsilon(
        &mut state,
        eps_targets,
        config.schedule.step_policy,
        &config.solver,
        on_step,
    )?;
    Ok(state)
}

fn converged_artifacts(
    case: &CaseSpec,
    config: &RunConfig,
    state: ContinuationState,
    wall_clock_s: f64,
) -> RunArtifacts {
    let params = &state.problem.params;
    let post = Trajectory::from_solution(
        &state.solution,
        params,
        &state.problem.force,
        config.output.resolution,
    )
    .and_then(|traj| harvested_energy(&traj).map(|e| (traj, e)));
    let (traj, energy) = match post {
        Ok(v) => v,
        Err(e) => {
            // Resolution was validated, so this only happens on a degenerate mesh.
            let summary = RunSummary {
                error: Some(format!("post-processing failed: {e}")),
                ..failed_base(case, state.trace.clone(), wall_clock_s)
            };
            return RunArtifacts {
                summary,
                trajectory: None,
                state: Some(state),
            };
        }
    };
    let arcs = classify_arcs(&traj, params, &config.arcs);
    let report = diagnostics(&traj, &arcs, params, &state.problem.force);
    info!(
        "{}: E = {:.6} MJ, arcs {}, {} nodes",
        case.id,
        energy / 1e6,
        arcs.label(),
        state.solution.mesh_points
    );
    let summary = RunSummary {
        schema_version: SCHEMA_VERSION,
        case_id: case.id.clone(),
        status: RunStatus::Converged,
        energy_j: Some(energy),
        energy_mj: Some(energy / 1e6),
        arcs: Some(arcs.label()),
        segments: arcs.segments.clone(),
        final_epsilon: Some(params.epsilon),
        final_tf: Some(state.problem.boundary.tf),
        mesh_points: Some(state.solution.mesh_points),
        wall_clock_s,
        diagnostics: Some(report),
        error: None,
        trace: state.trace.clone(),
    };
    RunArtifacts {
        summary,
        trajectory: Some(traj),
        state: Some(state),
    }
}

fn failed_base(case: &CaseSpec, trace: ContinuationTrace, wall_clock_s: f64) -> RunSummary {
    let last = trace.last_success().cloned();
    RunSummary {
        schema_version: SCHEMA_VERSION,
        case_id: case.id.clone(),
        status: RunStatus::SolverFailed,
        energy_j: None,
        energy_mj: None,
        arcs: None,
        segments: Vec::new(),
        final_epsilon: last.as_ref().map(|r| r.epsilon),
        final_tf: last.as_ref().map(|r| r.tf),
        mesh_points: last.as_ref().map(|r| r.mesh_points),
        wall_clock_s,
        diagnostics: None,
        error: None,
        trace,
    }
}

fn failed_summary(case: &CaseSpec, e: &ContinuationError, wall_clock_s: f64) -> RunSummary {
    RunSummary {
        error: Some(e.to_string()),
        ..failed_base(case, e.trace().cloned().unwrap_or_default(), wall_clock_s)
    }
}

/// Writes the dense trajectory as CSV (LF line endings, shortest
/// round-trip scientific notation).
pub fn write_trajectory_csv(traj: &Trajectory, out: &mut impl Write) -> io::Result<()> {
    writeln!(out, "{TRAJECTORY_HEADER}")?;
    for (s, e) in traj.samples.iter().zip(&traj.energy_cum) {
        let z = &s.state;
        let c = &s.control;
        writeln!(
            out,
            "{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            s.t, z.x1, z.x2, z.x3, z.lam1, z.lam2, z.lam3, c.u, c.u_trig, c.h1, c.hamiltonian, e
        )?;
    }
    Ok(())
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), RunError> {
    fs::write(path, contents).map_err(|source| RunError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `<case>_trajectory.csv` and/or `<case>_summary.json` into `dir`,
/// returning the paths written. A failed run still gets its summary.
pub fn write_artifacts(
    artifacts: &RunArtifacts,
    dir: &Path,
    formats: &[OutputFormat],
) -> Result<Vec<PathBuf>, RunError> {
    fs::create_dir_all(dir).map_err(|source| RunError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let id = &artifacts.summary.case_id;
    let mut written = Vec::new();
    if formats.contains(&OutputFormat::Csv) {
        if let Some(traj) = &artifacts.trajectory {
            let path = dir.join(format!("{id}_trajectory.csv"));
            let mut buf = Vec::new();
            write_trajectory_csv(traj, &mut buf).expect("writing to memory");
            write_file(&path, &buf)?;
            written.push(path);
        }
    }
    if formats.contains(&OutputFormat::Json) {
        let path = dir.join(format!("{id}_summary.json"));
        write_file(&path, artifacts.summary.to_json().as_bytes())?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub energy_j: f64,
}

/// Energies at the requested epsilons. On a solver failure the rows reached
/// before it are kept and `error` is set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub case_id: String,
    pub rows: Vec<SweepRow>,
    pub error: Option<String>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{SWEEP_HEADER}\n");
        for r in &self.rows {
            s.push_str(&format!("{:e},{:e}\n", r.epsilon, r.energy_j));
        }
        s
    }

    pub fn energies(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.energy_j).collect()
    }
}

/// The second-stage epsilon grid passing through every value in `list`:
/// the schedule's own grid merged with the list, strictly decreasing.
pub fn sweep_grid(config: &RunConfig, list: &[f64]) -> Result<Vec<f64>, ConfigError> {
    let invalid = |message: String| ConfigError::Invalid {
        key: "epsilons".into(),
        message,
    };
    if list.is_empty() {
        return Err(invalid("empty epsilon list".into()));
    }
    let eps_start = config.schedule.eps_start;
    for &e in list {
        if !(e.is_finite() && e > 0.0) {
            return Err(invalid(format!("{e} is not a positive finite value")));
        }
        if e > eps_start {
            return Err(invalid(format!(
                "{e} exceeds the schedule's eps_start ({eps_start})"
            )));
        }
    }
    if list.windows(2).any(|w| w[1] >= w[0]) {
        return Err(invalid("values must be strictly decreasing".into()));
    }
    let mut grid: Vec<f64> = config
        .schedule
        .eps_values()
        .into_iter()
        .chain(list.iter().copied().filter(|&e| e < eps_start))
        .collect();
    grid.sort_by(|a, b| b.total_cmp(a));
    grid.dedup();
    Ok(grid)
}

fn energy_at(state: &ContinuationState, resolution: usize) -> Option<f64> {
    let p = &state.problem;
    Trajectory::from_solution(&state.solution, &p.params, &p.force, resolution)
        .ok()
        .and_then(|traj| harvested_energy(&traj).ok())
}

/// Pauses the epsilon stage at every listed value and records the harvested
/// energy there. With `jobs > 1` the points are computed concurrently, each
/// replaying the same path up to its epsilon, so the table does not depend
/// on `jobs`.
pub fn sweep_epsilon(
    config: &RunConfig,
    list: &[f64],
    jobs: usize,
) -> Result<SweepTable, ConfigError> {
    let case = config.resolve()?;
    let grid = sweep_grid(config, list)?;
    let resolution = config.output.resolution;

    // Rows recorded on the way down to `upto`, plus the error that stopped
    // the path early, if any.
    let run_to = |upto: f64| -> (Vec<SweepRow>, Option<String>) {
        let cut = grid.iter().position(|&e| e < upto).unwrap_or(grid.len());
        let mut rows = Vec::new();
        let result = continuation_path(&case, config, &grid[..cut], &mut |state| {
            let eps = state.problem.params.epsilon;
            if list.contains(&eps) {
                if let Some(energy_j) = energy_at(state, resolution) {
                    rows.push(SweepRow {
                        epsilon: eps,
                        energy_j,
                    });
                }
            }
        });
        (rows, result.err().map(|e| e.to_string()))
    };

    let (rows, error) = if jobs <= 1 || list.len() == 1 {
        run_to(*list.last().expect("list is non-empty"))
    } else {
        let per_point: Vec<(Vec<SweepRow>, Option<String>)> = std::thread::scope(|scope| {
            let mut out = Vec::with_capacity(list.len());
            for chunk in list.chunks(jobs) {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|&eps| scope.spawn(move || run_to(eps)))
                    .collect();
                out.extend(
                    handles
                        .into_iter()
                        .map(|h| h.join().expect("sweep worker panicked")),
                );
            }
            out
        });
        let mut rows = Vec::new();
        let mut error = None;
        for (&eps, (point_rows, point_error)) in list.iter().zip(per_point) {
            rows.extend(point_rows.into_iter().find(|r| r.epsilon == eps));
            if point_error.is_some() {
                error = point_error;
                break;
            }
        }
        (rows, error)
    };
    Ok(SweepTable {
        case_id: case.id,
        rows,
        error,
    })
}
