//! Two-stage natural-parameter continuation: stretch the horizon from a
//! short, easy problem to the target final time, then tighten the
//! regularization parameter. Every converged solution seeds the next solve.

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bvp::{solve, uniform_mesh, BvpError, BvpSolution, MeshFunction, SolverSettings};
use crate::excitation::CaseSpec;
use crate::postprocess::{harvested_energy, Trajectory, DEFAULT_RESOLUTION};
use crate::problem::WecProblem;

/// Bisections of a failed step before giving up.
pub const MAX_HALVINGS: usize = 8;
/// Cold-start value of every costate.
pub const COLD_START_COSTATE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum StepPolicy {
    /// A failed step aborts the run.
    Fixed,
    /// A failed step is retried from the last good solution with half the
    /// increment, up to [`MAX_HALVINGS`] times.
    #[default]
    AdaptiveHalving,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContinuationSchedule {
    pub tf_start: f64,
    /// `None` means the case's own final time.
    pub tf_target: Option<f64>,
    /// Number of equal final-time increments.
    pub tf_steps: usize,
    pub eps_start: f64,
    pub eps_target: f64,
    /// Number of logarithmically equal epsilon decrements.
    pub eps_steps: usize,
    pub step_policy: StepPolicy,
}

impl Default for ContinuationSchedule {
    fn default() -> Self {
        Self {
            tf_start: 1.0,
            tf_target: None,
            tf_steps: 10,
            eps_start: 0.1,
            eps_target: 1e-3,
            eps_steps: 8,
            step_policy: StepPolicy::AdaptiveHalving,
        }
    }
}

impl ContinuationSchedule {
    pub fn final_time(&self, case: &CaseSpec) -> f64 {
        self.tf_target.unwrap_or(case.boundary.tf)
    }

    pub fn validate(&self, case: &CaseSpec) -> Result<(), ContinuationError> {
        let bad = |msg: String| Err(ContinuationError::InvalidSchedule(msg));
        let tf_target = self.final_time(case);
        let t0 = case.boundary.t0;
        if !(self.tf_start.is_finite() && tf_target.is_finite()) {
            return bad("final times must be finite".into());
        }
        if self.tf_start <= t0 {
            return bad(format!(
                "tf_start ({}) must exceed t0 ({t0})",
                self.tf_start
            ));
        }
        if self.tf_start > tf_target {
            return bad(format!(
                "tf_start ({}) exceeds tf_target ({tf_target})",
                self.tf_start
            ));
        }
        if !(self.eps_target > 0.0 && self.eps_start.is_finite()) {
            return bad("epsilon values must be finite and positive".into());
        }
        if self.eps_target > self.eps_start {
            return bad(format!(
                "eps_target ({}) exceeds eps_start ({})",
                self.eps_target, self.eps_start
            ));
        }
        if self.tf_steps == 0 || self.eps_steps == 0 {
            return bad("step counts must be at least 1".into());
        }
        Ok(())
    }

    /// Final times of the first stage, starting with `tf_start`.
    pub fn tf_values(&self, case: &CaseSpec) -> Vec<f64> {
        let target = self.final_time(case);
        let mut values = vec![self.tf_start];
        for i in 1..=self.tf_steps {
            let tf = if i == self.tf_steps {
                target
            } else {
                self.tf_start + (target - self.tf_start) * i as f64 / self.tf_steps as f64
            };
            if tf > *values.last().unwrap() {
                values.push(tf);
            }
        }
        values
    }

    /// Epsilon values of the second stage after `eps_start`.
    pub fn eps_values(&self) -> Vec<f64> {
        let ratio = self.eps_target / self.eps_start;
        let mut values: Vec<f64> = Vec::new();
        for i in 1..=self.eps_steps {
            let eps = if i == self.eps_steps {
                self.eps_target
            } else {
                self.eps_start * ratio.powf(i as f64 / self.eps_steps as f64)
            };
            if eps < values.last().copied().unwrap_or(self.eps_start) {
                values.push(eps);
            }
        }
        values
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    FinalTime,
    Epsilon,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub tf: f64,
    pub epsilon: f64,
    pub converged: bool,
    pub newton_iterations: usize,
    pub mesh_points: usize,
    /// Collocation defect; absent when the solver produced none.
    pub residual: Option<f64>,
    /// Harvested energy of the converged solution (J).
    pub energy_j: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ContinuationTrace {
    pub records: Vec<StepRecord>,
}

impl ContinuationTrace {
    pub fn successes(&self) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter(|r| r.converged)
    }

    pub fn last_success(&self) -> Option<&StepRecord> {
        self.records.iter().rev().find(|r| r.converged)
    }
}

#[derive(Debug, Error)]
pub enum ContinuationError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("continuation stalled in the {stage:?} stage between {from} and {to}: {reason}")]
    Stall {
        stage: Stage,
        from: f64,
        to: f64,
        reason: BvpError,
        trace: ContinuationTrace,
    },
    #[error("initial solve failed: {source}")]
    Solver {
        #[source]
        source: BvpError,
        trace: ContinuationTrace,
    },
}

impl ContinuationError {
    pub fn trace(&self) -> Option<&ContinuationTrace> {
        match self {
            ContinuationError::InvalidSchedule(_) => None,
            ContinuationError::Stall { trace, .. } | ContinuationError::Solver { trace, .. } => {
                Some(trace)
            }
        }
    }
}

/// Latest converged point of a continuation run.
#[derive(Clone, Debug)]
pub struct ContinuationState {
    pub problem: WecProblem,
    pub solution: BvpSolution,
    pub trace: ContinuationTrace,
}

/// Nodal guess for a cold start: states linear from the initial condition to
/// zero, the clock equal to time and every costate at
/// [`COLD_START_COSTATE`].
pub fn cold_start_guess(case: &CaseSpec, tf: f64, mesh_size: usize) -> MeshFunction {
    let b = &case.boundary;
    let span = tf - b.t0;
    MeshFunction::from_fn(6, uniform_mesh(b.t0, tf, mesh_size), |t| {
        let w = 1.0 - (t - b.t0) / span;
        vec![
            b.x1_0 * w,
            b.x2_0 * w,
            t,
            COLD_START_COSTATE,
            COLD_START_COSTATE,
            COLD_START_COSTATE,
        ]
    })
}

/// Stretches a solution on `[t0, tf_old]` onto `[t0, tf_new]`: nodes are
/// mapped affinely, nodal values are kept and the clock is reset to the new
/// node times. An unchanged horizon returns the nodes untouched.
pub fn rescale_guess(solution: &BvpSolution, tf_new: f64) -> MeshFunction {
    let (t0, tf_old) = solution.interval();
    if tf_new == tf_old {
        return solution.nodes.clone();
    }
    let factor = (tf_new - t0) / (tf_old - t0);
    let n = solution.mesh().len();
    let mesh: Vec<f64> = solution
        .mesh()
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            if i + 1 == n {
                tf_new
            } else {
                t0 + (t - t0) * factor
            }
        })
        .collect();
    let mut values = solution.nodes.values.clone();
    for (node, &t) in values.chunks_exact_mut(6).zip(&mesh) {
        node[2] = t;
    }
    MeshFunction::new(6, mesh, values)
}

fn energy_of(problem: &WecProblem, solution: &BvpSolution) -> Option<f64> {
    Trajectory::from_solution(
        solution,
        &problem.params,
        &problem.force,
        DEFAULT_RESOLUTION,
    )
    .ok()
    .and_then(|traj| harvested_energy(&traj).ok())
}

fn record(
    stage: Stage,
    problem: &WecProblem,
    outcome: &Result<BvpSolution, BvpError>,
) -> StepRecord {
    let (tf, epsilon) = (problem.boundary.tf, problem.params.epsilon);
    match outcome {
        Ok(sol) => StepRecord {
            stage,
            tf,
            epsilon,
            converged: true,
            newton_iterations: sol.newton_iterations,
            mesh_points: sol.mesh_points,
            residual: Some(sol.residual_norm),
            energy_j: energy_of(problem, sol),
            error: None,
        },
        Err(e) => StepRecord {
            stage,
            tf,
            epsilon,
            converged: false,
            newton_iterations: match e {
                BvpError::NoConvergence { iterations, .. } => *iterations,
                _ => 0,
            },
            mesh_points: 0,
            residual: match e {
                BvpError::NoConvergence { residual, .. } if residual.is_finite() => Some(*residual),
                _ => None,
            },
            energy_j: None,
            error: Some(e.to_string()),
        },
    }
}

/// Solves the first problem of the schedule from a cold start.
pub fn start(
    case: &CaseSpec,
    schedule: &ContinuationSchedule,
    settings: &SolverSettings,
) -> Result<ContinuationState, ContinuationError> {
    schedule.validate(case)?;
    let problem = WecProblem::from_case(case)
        .with_final_time(schedule.tf_start)
        .with_epsilon(schedule.eps_start);
    let guess = cold_start_guess(case, schedule.tf_start, settings.initial_mesh_size);
    let outcome = solve(&problem, &guess, settings);
    let mut trace = ContinuationTrace::default();
    trace
        .records
        .push(record(Stage::FinalTime, &problem, &outcome));
    match outcome {
        Ok(solution) => {
            info!(
                "cold start tf={} eps={}: {} newton iterations, {} nodes",
                schedule.tf_start,
                schedule.eps_start,
                solution.newton_iterations,
                solution.mesh_points
            );
            Ok(ContinuationState {
                problem,
                solution,
                trace,
            })
        }
        Err(source) => Err(ContinuationError::Solver { source, trace }),
    }
}

/// One continuation stage: walks the parameter through `targets`, bisecting
/// failed steps per `policy`. `interpolate(a, b)` gives the midpoint
/// parameter and `apply` builds the problem and guess for a parameter value.
fn march(
    state: &mut ContinuationState,
    stage: Stage,
    targets: &[f64],
    policy: StepPolicy,
    settings: &SolverSettings,
    on_step: &mut dyn FnMut(&ContinuationState),
) -> Result<(), ContinuationError> {
    let parameter = |p: &WecProblem| match stage {
        Stage::FinalTime => p.boundary.tf,
        Stage::Epsilon => p.params.epsilon,
    };
    let midpoint = |a: f64, b: f64| match stage {
        Stage::FinalTime => 0.5 * (a + b),
        Stage::Epsilon => (a * b).sqrt(),
    };
    for &target in targets {
        let mut halvings: usize = 0;
        loop {
            let current = parameter(&state.problem);
            if current == target {
                break;
            }
            let mut next = target;
            for _ in 0..halvings {
                next = midpoint(current, next);
            }
            let (problem, guess) = match stage {
                Stage::FinalTime => (
                    state.problem.clone().with_final_time(next),
                    rescale_guess(&state.solution, next),
                ),
                Stage::Epsilon => (
                    state.problem.clone().with_epsilon(next),
                    state.solution.nodes.clone(),
                ),
            };
            let outcome = solve(&problem, &guess, settings);
            state.trace.records.push(record(stage, &problem, &outcome));
            match outcome {
                Ok(solution) => {
                    debug!(
                        "{stage:?} step to {next}: {} newton iterations, {} nodes, residual {:.2e}",
                        solution.newton_iterations, solution.mesh_points, solution.residual_norm
                    );
                    state.problem = problem;
                    state.solution = solution;
                    on_step(state);
                    halvings = halvings.saturating_sub(1);
                }
                Err(reason) => {
                    if policy == StepPolicy::Fixed || halvings >= MAX_HALVINGS {
                        return Err(ContinuationError::Stall {
                            stage,
                            from: current,
                            to: next,
                            reason,
                            trace: std::mem::take(&mut state.trace),
                        });
                    }
                    halvings += 1;
                    warn!("{stage:?} step {current} -> {next} failed ({reason}); halving");
                }
            }
        }
    }
    Ok(())
}

/// Stage one: march the final time to the schedule target.
pub fn march_final_time(
    state: &mut ContinuationState,
    case: &CaseSpec,
    schedule: &ContinuationSchedule,
    settings: &SolverSettings,
) -> Result<(), ContinuationError> {
    let targets = schedule.tf_values(case);
    march(
        state,
        Stage::FinalTime,
        &targets[1..],
        schedule.step_policy,
        settings,
        &mut |_| {},
    )
}

/// Stage two: march epsilon through `targets` (strictly decreasing), calling
/// `on_step` after every converged solve.
pub fn march_epsilon(
    state: &mut ContinuationState,
    targets: &[f64],
    policy: StepPolicy,
    settings: &SolverSettings,
    on_step: &mut dyn FnMut(&ContinuationState),
) -> Result<(), ContinuationError> {
    march(state, Stage::Epsilon, targets, policy, settings, on_step)
}

/// Runs both stages of the schedule and returns the final converged state.
pub fn run_continuation(
    case: &CaseSpec,
    schedule: &ContinuationSchedule,
    settings: &SolverSettings,
) -> Result<ContinuationState, ContinuationError> {
    let mut state = start(case, schedule, settings)?;
    march_final_time(&mut state, case, schedule, settings)?;
    march_epsilon(
        &mut state,
        &schedule.eps_values(),
        schedule.step_policy,
        settings,
        &mut |_| {},
    )?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::excitation::builtin_case;

    #[test]
    fn default_grids() {
        let case = builtin_case("case1").unwrap();
        let s = ContinuationSchedule::default();
        let tf = s.tf_values(&case);
        assert_eq!(tf.len(), 11);
        assert_eq!(tf[0], 1.0);
        assert_eq!(*tf.last().unwrap(), 50.0);
        assert!((tf[1] - 5.9).abs() < 1e-12);
        let eps = s.eps_values();
        assert_eq!(eps.len(), 8);
        assert_eq!(*eps.last().unwrap(), 1e-3);
        assert!((eps[3] - 0.01).abs() < 1e-15);
        assert!(eps.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn degenerate_schedule_has_no_steps() {
        let case = builtin_case("case2").unwrap();
        let s = ContinuationSchedule {
            tf_target: Some(1.0),
            eps_steps: 1,
            eps_start: 1e-2,
            eps_target: 1e-2,
            ..ContinuationSchedule::default()
        };
        assert_eq!(s.tf_values(&case), vec![1.0]);
        assert!(s.eps_values().is_empty());
    }

    #[test]
    fn validation() {
        let case = builtin_case("case1").unwrap();
        let ok = ContinuationSchedule::default();
        assert!(ok.validate(&case).is_ok());
        let inverted = ContinuationSchedule {
            eps_target: 0.5,
            ..ok.clone()
        };
        assert!(matches!(
            inverted.validate(&case),
            Err(ContinuationError::InvalidSchedule(_))
        ));
        let zero = ContinuationSchedule {
            tf_steps: 0,
            ..ok.clone()
        };
        assert!(zero.validate(&case).is_err());
        let late = ContinuationSchedule {
            tf_start: 60.0,
            ..ok
        };
        assert!(late.validate(&case).is_err());
    }

    #[test]
    fn cold_start_for_zero_initial_conditions() {
        let case = builtin_case("case2").unwrap();
        let g = cold_start_guess(&case, 1.0, 11);
        for i in 0..g.len() {
            let y = g.node(i);
            assert_eq!(&y[..2], &[0.0, 0.0]);
            assert_eq!(y[2], g.mesh[i]);
            assert_eq!(&y[3..], &[0.1; 3]);
        }
    }

    #[test]
    fn cold_start_meets_initial_state() {
        let case = builtin_case("case1").unwrap();
        let g = cold_start_guess(&case, 1.0, 5);
        assert_eq!(g.node(0)[0], case.boundary.x1_0);
        assert_eq!(g.node(0)[1], case.boundary.x2_0);
        assert_eq!(g.node(0)[2], 0.0);
        assert_eq!(&g.node(4)[..2], &[0.0, 0.0]);
    }
}
