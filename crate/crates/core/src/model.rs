//! Regularized point-absorber dynamics, Hamiltonian and optimal control law.
//!
//! The PTO force is written as `u = gamma sin(u_trig)` and the displacement
//! equation picks up an `epsilon cos(u_trig)` error term. With that
//! substitution the Hamiltonian is smooth in the new control, so bang and
//! singular arcs both come out of one closed-form law and the problem stays
//! a two-point boundary value problem.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::excitation::FourierForce;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("model.{field} must be finite and positive (got {value})")]
    NotPositive { field: &'static str, value: f64 },
    #[error("control bounds must satisfy u_min < u_max (got {u_min} >= {u_max})")]
    InvalidBounds { u_min: f64, u_max: f64 },
}

/// Physical constants of the buoy plus the regularization parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    /// Mass (kg).
    pub m: f64,
    /// Hydrostatic stiffness (N/m).
    pub k: f64,
    /// Hydrodynamic damping (N s/m).
    pub c: f64,
    /// Symmetric PTO force bound, `|u| <= gamma` (N).
    pub gamma: f64,
    /// Regularization error parameter (m/s).
    pub epsilon: f64,
}

impl ModelParams {
    pub fn new(m: f64, k: f64, c: f64, gamma: f64, epsilon: f64) -> Result<Self, ModelError> {
        let params = Self {
            m,
            k,
            c,
            gamma,
            epsilon,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (field, value) in [
            ("m", self.m),
            ("k", self.k),
            ("c", self.c),
            ("gamma", self.gamma),
            ("epsilon", self.epsilon),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return Err(ModelError::NotPositive { field, value });
            }
        }
        Ok(())
    }

    pub fn with_epsilon(self, epsilon: f64) -> Self {
        Self { epsilon, ..self }
    }

    /// Generalized Legendre-Clebsch quantity `2c/m` for the singular arc.
    pub fn legendre_clebsch(&self) -> f64 {
        2.0 * self.c / self.m
    }
}

/// States `(x1, x2, x3)` and their costates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentedState {
    /// Displacement (m).
    pub x1: f64,
    /// Velocity (m/s).
    pub x2: f64,
    /// Clock state (s).
    pub x3: f64,
    pub lam1: f64,
    pub lam2: f64,
    pub lam3: f64,
}

impl AugmentedState {
    pub const DIM: usize = 6;

    pub fn new(x1: f64, x2: f64, x3: f64, lam1: f64, lam2: f64, lam3: f64) -> Self {
        Self {
            x1,
            x2,
            x3,
            lam1,
            lam2,
            lam3,
        }
    }

    /// Reads the first six entries of `y`.
    pub fn from_slice(y: &[f64]) -> Self {
        Self::new(y[0], y[1], y[2], y[3], y[4], y[5])
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.x1, self.x2, self.x3, self.lam1, self.lam2, self.lam3]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

impl From<[f64; 6]> for AugmentedState {
    fn from(y: [f64; 6]) -> Self {
        Self::from_slice(&y)
    }
}

/// Optimal control evaluated at one state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlSample {
    /// Trigonometric control in `(-pi, pi]` (rad).
    pub u_trig: f64,
    /// PTO force `gamma sin(u_trig)` (N).
    pub u: f64,
    /// Switching function (m/s).
    pub h1: f64,
    pub hamiltonian: f64,
}

/// Switching function `H1 = -(lam2 + m x2) / m`.
pub fn switching_function(z: &AugmentedState, p: &ModelParams) -> f64 {
    -(z.lam2 + p.m * z.x2) / p.m
}

/// Coefficients `(a, b)` of the control-dependent Hamiltonian part
/// `a sin(u_trig) + b cos(u_trig)`.
fn control_coefficients(z: &AugmentedState, p: &ModelParams) -> (f64, f64) {
    (p.gamma * switching_function(z, p), p.epsilon * z.lam1)
}

/// The `u_trig`-dependent part of the Hamiltonian,
/// `gamma H1 sin(u_trig) + epsilon lam1 cos(u_trig)`.
pub fn control_hamiltonian(z: &AugmentedState, u_trig: f64, p: &ModelParams) -> f64 {
    let (a, b) = control_coefficients(z, p);
    a * u_trig.sin() + b * u_trig.cos()
}

fn wrap_angle(angle: f64) -> f64 {
    if angle <= -PI {
        angle + 2.0 * PI
    } else {
        angle
    }
}

/// Minimizer of `a sin + b cos` over the circle. The two stationary branches
/// `atan(a/b)` and `atan(a/b) + pi` collapse into one quadrant-aware
/// `atan2(-a, -b)`; when both coefficients vanish the Hamiltonian does not
/// depend on the control and zero force is returned.
pub fn optimal_trig_control(z: &AugmentedState, p: &ModelParams) -> f64 {
    let (a, b) = control_coefficients(z, p);
    if a == 0.0 && b == 0.0 {
        return 0.0;
    }
    let u_trig = wrap_angle((-a).atan2(-b));
    debug_assert!(
        branch_check(a, b, u_trig),
        "branch selection disagrees with H comparison"
    );
    u_trig
}

#[cfg(debug_assertions)]
fn branch_check(a: f64, b: f64, chosen: f64) -> bool {
    let phi = |u: f64| a * u.sin() + b * u.cos();
    let base = if b != 0.0 { (a / b).atan() } else { PI / 2.0 };
    let best = phi(base).min(phi(base + PI));
    phi(chosen) <= best + 1e-12 * (a.abs() + b.abs())
}

#[cfg(not(debug_assertions))]
fn branch_check(_a: f64, _b: f64, _chosen: f64) -> bool {
    true
}

/// Applies the minimum principle at `z` and evaluates the full sample.
pub fn optimal_control(z: &AugmentedState, p: &ModelParams, f: &FourierForce) -> ControlSample {
    let u_trig = optimal_trig_control(z, p);
    ControlSample {
        u_trig,
        u: p.gamma * u_trig.sin(),
        h1: switching_function(z, p),
        hamiltonian: hamiltonian(z, u_trig, p, f),
    }
}

/// Hamiltonian of the regularized problem.
pub fn hamiltonian(z: &AugmentedState, u_trig: f64, p: &ModelParams, f: &FourierForce) -> f64 {
    let (s, c) = u_trig.sin_cos();
    let force = f.eval(z.x3);
    -p.gamma * z.x2 * s
        + z.lam1 * (z.x2 + p.epsilon * c)
        + (z.lam2 / p.m) * (force - p.k * z.x1 - p.c * z.x2 - p.gamma * s)
        + z.lam3
}

/// State and costate derivatives at the optimal control.
pub fn rhs_augmented(
    _t: f64,
    z: &AugmentedState,
    p: &ModelParams,
    f: &FourierForce,
) -> AugmentedState {
    let u_trig = optimal_trig_control(z, p);
    rhs_with_control(z, u_trig, p, f)
}

/// State and costate derivatives for a given trigonometric control.
pub fn rhs_with_control(
    z: &AugmentedState,
    u_trig: f64,
    p: &ModelParams,
    f: &FourierForce,
) -> AugmentedState {
    let (s, c) = u_trig.sin_cos();
    let force = f.eval(z.x3);
    let force_rate = f.derivative(z.x3);
    AugmentedState {
        x1: z.x2 + p.epsilon * c,
        x2: (force - p.k * z.x1 - p.c * z.x2 - p.gamma * s) / p.m,
        x3: 1.0,
        lam1: p.k * z.lam2 / p.m,
        lam2: -z.lam1 + p.c * z.lam2 / p.m + p.gamma * s,
        lam3: -(z.lam2 / p.m) * force_rate,
    }
}

/// Jacobian of [`rhs_augmented`] with respect to the augmented state,
/// including the dependence of the optimal control on the state.
/// Row `i` holds the partials of derivative component `i`.
pub fn rhs_jacobian(z: &AugmentedState, p: &ModelParams, f: &FourierForce) -> [[f64; 6]; 6] {
    let (a, b) = control_coefficients(z, p);
    let r2 = a * a + b * b;
    // Partials of sin(u*) and cos(u*) with respect to (x2, lam1, lam2).
    let (ds, dc) = if r2 > 0.0 {
        let r3 = r2 * r2.sqrt();
        let ds_da = -b * b / r3;
        let ds_db = a * b / r3;
        let dc_da = a * b / r3;
        let dc_db = -a * a / r3;
        let da_dx2 = -p.gamma;
        let da_dl2 = -p.gamma / p.m;
        let db_dl1 = p.epsilon;
        (
            [ds_da * da_dx2, ds_db * db_dl1, ds_da * da_dl2],
            [dc_da * da_dx2, dc_db * db_dl1, dc_da * da_dl2],
        )
    } else {
        ([0.0; 3], [0.0; 3])
    };
    let force_rate = f.derivative(z.x3);
    let force_curvature = f.second_derivative(z.x3);
    let (m, k, c, g, e) = (p.m, p.k, p.c, p.gamma, p.epsilon);

    let mut jac = [[0.0; 6]; 6];
    jac[0][1] = 1.0 + e * dc[0];
    jac[0][3] = e * dc[1];
    jac[0][4] = e * dc[2];

    jac[1][0] = -k / m;
    jac[1][1] = (-c - g * ds[0]) / m;
    jac[1][2] = force_rate / m;
    jac[1][3] = -g * ds[1] / m;
    jac[1][4] = -g * ds[2] / m;

    jac[3][4] = k / m;

    jac[4][1] = g * ds[0];
    jac[4][3] = -1.0 + g * ds[1];
    jac[4][4] = c / m + g * ds[2];

    jac[5][2] = -(z.lam2 / m) * force_curvature;
    jac[5][4] = -force_rate / m;
    jac
}

/// Singular control from the unregularized problem, obtained by
/// differentiating the switching function twice along the extremal.
pub fn singular_control_oracle(z: &AugmentedState, p: &ModelParams, f: &FourierForce) -> f64 {
    let force = f.eval(z.x3);
    let force_rate = f.derivative(z.x3);
    (p.k * z.lam2 + p.m * p.k * z.x2 + 2.0 * p.c * (force - p.c * z.x2 - p.k * z.x1)
        - p.m * force_rate)
        / (2.0 * p.c)
}

/// Maps a trigonometric control onto `[u_min, u_max]`.
pub fn trig_map_asymmetric(u_trig: f64, u_min: f64, u_max: f64) -> Result<f64, ModelError> {
    if !(u_min < u_max) {
        return Err(ModelError::InvalidBounds { u_min, u_max });
    }
    let offset = 0.5 * (u_max + u_min);
    let half_width = 0.5 * (u_max - u_min);
    Ok((half_width * u_trig.sin() + offset).clamp(u_min, u_max))
}
