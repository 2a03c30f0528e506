//! Properties of converged WEC extremals on a short horizon.

use std::sync::OnceLock;

use etrm_core::bvp::{BvpProblem, SolverSettings};
use etrm_core::continuation::{run_continuation, ContinuationSchedule, ContinuationState};
use etrm_core::excitation::builtin_case;
use etrm_core::model::{control_hamiltonian, AugmentedState};
use etrm_core::postprocess::{classify_arcs, diagnostics, ArcKind, ArcThresholds, Trajectory};
use proptest::prelude::*;

fn state() -> &'static ContinuationState {
    static STATE: OnceLock<ContinuationState> = OnceLock::new();
    STATE.get_or_init(|| {
        let case = builtin_case("case2").unwrap();
        let schedule = ContinuationSchedule {
            tf_target: Some(12.0),
            tf_steps: 3,
            eps_target: 3e-3,
            eps_steps: 4,
            ..ContinuationSchedule::default()
        };
        run_continuation(&case, &schedule, &SolverSettings::default()).unwrap()
    })
}

fn trajectory() -> Trajectory {
    let s = state();
    Trajectory::from_solution(&s.solution, &s.problem.params, &s.problem.force, 1201).unwrap()
}

#[test]
fn boundary_conditions_hold() {
    let s = state();
    let n = s.solution.mesh().len();
    let mut r = [0.0; 6];
    s.problem
        .bc(s.solution.node(0), s.solution.node(n - 1), &mut r);
    for v in r {
        assert!(v.abs() < 1e-8, "{r:?}");
    }
}

#[test]
fn control_respects_bound_and_switching_sign() {
    let traj = trajectory();
    let p = &state().problem.params;
    for s in &traj.samples {
        assert!(s.control.u.abs() <= p.gamma);
    }
    let arcs = classify_arcs(&traj, p, &ArcThresholds::default());
    let report = diagnostics(&traj, &arcs, p, &state().problem.force);
    assert!(!report.bang_h1_means.is_empty());
    for (kind, mean) in &report.bang_h1_means {
        match kind {
            ArcKind::BangPlus => assert!(*mean < 0.0, "{kind:?} {mean}"),
            ArcKind::BangMinus => assert!(*mean > 0.0, "{kind:?} {mean}"),
            ArcKind::Singular => unreachable!(),
        }
    }
    assert_eq!(report.pmp_violations, 0);
    // On this short horizon H itself is a near-cancellation of terms the
    // size of the instantaneous power, so measure drift against that scale.
    let power = traj
        .samples
        .iter()
        .map(|s| (s.control.u * s.state.x2).abs())
        .fold(0.0, f64::max);
    assert!(
        report.hamiltonian_drift <= 1e-3 * power,
        "{} vs {power}",
        report.hamiltonian_drift
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// The chosen control minimizes the Hamiltonian among probe controls at
    /// arbitrary times along the extremal.
    #[test]
    fn pointwise_minimality_along_extremal(frac in 0.0f64..=1.0, probe in -std::f64::consts::PI..std::f64::consts::PI) {
        let s = state();
        let (t0, tf) = s.solution.interval();
        let z = AugmentedState::from_slice(&s.solution.eval(t0 + frac * (tf - t0)));
        let p = &s.problem.params;
        let chosen = etrm_core::model::optimal_trig_control(&z, p);
        let best = control_hamiltonian(&z, chosen, p);
        let slack = 1e-12 * (p.gamma * etrm_core::model::switching_function(&z, p).abs() + p.epsilon * z.lam1.abs()).max(1.0);
        prop_assert!(best <= control_hamiltonian(&z, probe, p) + slack);
    }

    /// The clock state tracks time on the interpolant, not just at nodes.
    #[test]
    fn clock_state_is_time(frac in 0.0f64..=1.0) {
        let s = state();
        let (t0, tf) = s.solution.interval();
        let t = t0 + frac * (tf - t0);
        prop_assert!((s.solution.eval(t)[2] - t).abs() < 1e-9);
    }
}
