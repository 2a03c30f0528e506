//! The regularized WEC extremal as a two-point boundary value problem.

use crate::bvp::BvpProblem;
use crate::excitation::{BoundaryMode, BoundarySpec, CaseSpec, FourierForce};
use crate::model::{rhs_augmented, rhs_jacobian, AugmentedState, ModelParams};

/// Augmented state/costate system on `[t0, tf]` with the WEC boundary
/// conditions. The clock state starts at `t0`; the terminal costates vanish
/// (free terminal displacement and velocity, and `lam3(tf) = 0` fixes the
/// otherwise arbitrary additive constant of the Hamiltonian).
#[derive(Clone, Debug)]
pub struct WecProblem {
    pub params: ModelParams,
    pub force: FourierForce,
    pub boundary: BoundarySpec,
}

impl WecProblem {
    pub fn new(params: ModelParams, force: FourierForce, boundary: BoundarySpec) -> Self {
        Self {
            params,
            force,
            boundary,
        }
    }

    pub fn from_case(case: &CaseSpec) -> Self {
        Self::new(case.model, case.excitation.clone(), case.boundary.clone())
    }

    pub fn with_final_time(mut self, tf: f64) -> Self {
        self.boundary.tf = tf;
        self
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.params = self.params.with_epsilon(epsilon);
        self
    }
}

impl BvpProblem for WecProblem {
    fn dim(&self) -> usize {
        AugmentedState::DIM
    }

    fn interval(&self) -> (f64, f64) {
        (self.boundary.t0, self.boundary.tf)
    }

    fn rhs(&self, t: f64, y: &[f64], dydt: &mut [f64]) {
        let d = rhs_augmented(t, &AugmentedState::from_slice(y), &self.params, &self.force);
        dydt.copy_from_slice(&d.to_array());
    }

    fn rhs_jacobian(&self, _t: f64, y: &[f64], jac: &mut [f64]) -> bool {
        let j = rhs_jacobian(&AugmentedState::from_slice(y), &self.params, &self.force);
        for (row, dst) in j.iter().zip(jac.chunks_exact_mut(6)) {
            dst.copy_from_slice(row);
        }
        true
    }

    fn bc(&self, ya: &[f64], yb: &[f64], r: &mut [f64]) {
        let b = &self.boundary;
        match b.mode {
            BoundaryMode::FixedInitial => {
                r[0] = ya[0] - b.x1_0;
                r[1] = ya[1] - b.x2_0;
            }
            BoundaryMode::FreeInitial => {
                r[0] = ya[3];
                r[1] = ya[4];
            }
        }
        r[2] = ya[2] - b.t0;
        r[3] = yb[3];
        r[4] = yb[4];
        r[5] = yb[5];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::excitation::builtin_case;

    #[test]
    fn boundary_residual_vanishes_on_consistent_endpoints() {
        let case = builtin_case("case1").unwrap();
        let p = WecProblem::from_case(&case);
        let ya = [case.boundary.x1_0, case.boundary.x2_0, 0.0, 3.0, -1.0, 2.0];
        let yb = [0.3, -0.1, 50.0, 0.0, 0.0, 0.0];
        let mut r = [1.0; 6];
        p.bc(&ya, &yb, &mut r);
        assert_eq!(r, [0.0; 6]);
    }

    #[test]
    fn free_initial_mode_pins_costates() {
        let mut case = builtin_case("case2").unwrap();
        case.boundary.mode = BoundaryMode::FreeInitial;
        let p = WecProblem::from_case(&case);
        let mut r = [0.0; 6];
        p.bc(&[5.0, 6.0, 0.0, 0.25, -0.5, 0.0], &[0.0; 6], &mut r);
        assert_eq!(&r[..2], &[0.25, -0.5]);
    }
}
