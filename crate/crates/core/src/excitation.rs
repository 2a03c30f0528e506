//! Wave excitation force models and the built-in case definitions.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelParams;

const COEFFICIENTS: &str = include_str!("../data/excitation.toml");

#[derive(Debug, Error, PartialEq)]
pub enum ExcitationError {
    #[error("term {index}: angular frequency {omega} must be finite and non-negative")]
    InvalidFrequency { index: usize, omega: f64 },
    #[error(
        "term {index}: angular frequency is zero, steady-state initial conditions are undefined"
    )]
    ZeroFrequency { index: usize },
    #[error("term {index}: amplitude and phase must be finite")]
    NonFinite { index: usize },
    #[error("excitation scale must be finite")]
    InvalidScale,
    #[error("coefficient vectors have mismatched lengths ({0})")]
    LengthMismatch(String),
}

/// One sinusoid `a sin(omega t + phi)` of an excitation series.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForceTerm {
    pub amplitude: f64,
    pub omega: f64,
    pub phase: f64,
}

/// Finite sinusoid series `scale * sum a_i sin(omega_i t + phi_i)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierForce {
    pub scale: f64,
    pub terms: Vec<ForceTerm>,
}

impl FourierForce {
    pub fn new(scale: f64, terms: Vec<ForceTerm>) -> Result<Self, ExcitationError> {
        let force = Self { scale, terms };
        force.validate()?;
        Ok(force)
    }

    /// Builds a series from parallel coefficient vectors.
    pub fn from_vectors(
        scale: f64,
        amplitudes: &[f64],
        omegas: &[f64],
        phases: &[f64],
    ) -> Result<Self, ExcitationError> {
        if amplitudes.len() != omegas.len() || amplitudes.len() != phases.len() {
            return Err(ExcitationError::LengthMismatch(format!(
                "{} amplitudes, {} omegas, {} phases",
                amplitudes.len(),
                omegas.len(),
                phases.len()
            )));
        }
        let terms = amplitudes
            .iter()
            .zip(omegas)
            .zip(phases)
            .map(|((&amplitude, &omega), &phase)| ForceTerm {
                amplitude,
                omega,
                phase,
            })
            .collect();
        Self::new(scale, terms)
    }

    /// The identically-zero force.
    pub fn zero() -> Self {
        Self {
            scale: 1.0,
            terms: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), ExcitationError> {
        if !self.scale.is_finite() {
            return Err(ExcitationError::InvalidScale);
        }
        for (index, term) in self.terms.iter().enumerate() {
            if !(term.omega.is_finite() && term.omega >= 0.0) {
                return Err(ExcitationError::InvalidFrequency {
                    index,
                    omega: term.omega,
                });
            }
            if !(term.amplitude.is_finite() && term.phase.is_finite()) {
                return Err(ExcitationError::NonFinite { index });
            }
        }
        Ok(())
    }

    /// Force value at time `t` (N).
    pub fn eval(&self, t: f64) -> f64 {
        let sum: f64 = self
            .terms
            .iter()
            .map(|term| term.amplitude * (term.omega * t + term.phase).sin())
            .sum();
        self.scale * sum
    }

    /// Exact time derivative of [`FourierForce::eval`] (N/s).
    pub fn derivative(&self, t: f64) -> f64 {
        let sum: f64 = self
            .terms
            .iter()
            .map(|term| term.amplitude * term.omega * (term.omega * t + term.phase).cos())
            .sum();
        self.scale * sum
    }

    /// Second time derivative (N/s²), used by the analytic Jacobian.
    pub fn second_derivative(&self, t: f64) -> f64 {
        let sum: f64 = self
            .terms
            .iter()
            .map(|term| {
                -term.amplitude * term.omega * term.omega * (term.omega * t + term.phase).sin()
            })
            .sum();
        self.scale * sum
    }

    /// Concatenates the terms of two series with equal scale.
    pub fn superpose(&self, other: &FourierForce) -> FourierForce {
        let rescale = |f: &FourierForce| {
            f.terms
                .iter()
                .map(|t| ForceTerm {
                    amplitude: t.amplitude * f.scale,
                    ..*t
                })
                .collect::<Vec<_>>()
        };
        let mut terms = rescale(self);
        terms.extend(rescale(other));
        FourierForce { scale: 1.0, terms }
    }
}

/// Free-function form of [`FourierForce::eval`].
pub fn force_eval(force: &FourierForce, t: f64) -> f64 {
    force.eval(t)
}

/// Free-function form of [`FourierForce::derivative`].
pub fn force_derivative(force: &FourierForce, t: f64) -> f64 {
    force.derivative(t)
}

/// Steady-state displacement and velocity at `t = 0` for a buoy driven by
/// `force` under the singular (velocity-matched) control.
pub fn case1_initial_conditions(
    force: &FourierForce,
    c: f64,
) -> Result<(f64, f64), ExcitationError> {
    force.validate()?;
    let mut cos_sum = 0.0;
    let mut sin_sum = 0.0;
    for (index, term) in force.terms.iter().enumerate() {
        if term.omega == 0.0 {
            return Err(ExcitationError::ZeroFrequency { index });
        }
        cos_sum += term.amplitude * term.phase.cos() / term.omega;
        sin_sum += term.amplitude * term.phase.sin();
    }
    let factor = force.scale / (2.0 * c);
    Ok((-factor * cos_sum, factor * sin_sum))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryMode {
    /// `x1(t0)` and `x2(t0)` are prescribed.
    FixedInitial,
    /// Initial displacement and velocity are free: `lam1(t0) = lam2(t0) = 0`.
    FreeInitial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundarySpec {
    pub mode: BoundaryMode,
    pub x1_0: f64,
    pub x2_0: f64,
    pub t0: f64,
    pub tf: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseSpec {
    pub id: String,
    pub model: ModelParams,
    pub excitation: FourierForce,
    pub boundary: BoundarySpec,
}

#[derive(Deserialize)]
struct CoefficientFile {
    schema_version: u32,
    periodic: PeriodicTable,
    non_periodic: NonPeriodicTable,
}

#[derive(Deserialize)]
struct PeriodicTable {
    scale: f64,
    amplitude_unit: f64,
    amplitudes: Vec<f64>,
    period: f64,
    omega_pi_multiples: Vec<f64>,
    phase_pi_divisors: Vec<f64>,
}

#[derive(Deserialize)]
struct NonPeriodicTable {
    scale: f64,
    amplitudes: Vec<f64>,
    omegas: Vec<f64>,
    phases: Vec<f64>,
}

fn coefficient_file() -> CoefficientFile {
    let file: CoefficientFile =
        toml::from_str(COEFFICIENTS).expect("bundled excitation coefficients parse");
    assert_eq!(file.schema_version, 1, "unsupported coefficient schema");
    file
}

/// Five-term periodic excitation with a 10 s base period.
pub fn periodic_force() -> FourierForce {
    let table = coefficient_file().periodic;
    let amplitudes: Vec<f64> = table
        .amplitudes
        .iter()
        .map(|a| a * table.amplitude_unit)
        .collect();
    let omegas: Vec<f64> = table
        .omega_pi_multiples
        .iter()
        .map(|k| k * PI / table.period)
        .collect();
    let phases: Vec<f64> = table.phase_pi_divisors.iter().map(|d| PI / d).collect();
    FourierForce::from_vectors(table.scale, &amplitudes, &omegas, &phases)
        .expect("bundled periodic coefficients are valid")
}

/// Eight-term Fourier fit of an irregular sea state.
pub fn non_periodic_force() -> FourierForce {
    let table = coefficient_file().non_periodic;
    FourierForce::from_vectors(table.scale, &table.amplitudes, &table.omegas, &table.phases)
        .expect("bundled non-periodic coefficients are valid")
}

pub const BUOY_MASS: f64 = 2.0e5;
pub const HYDROSTATIC_STIFFNESS: f64 = 1.2e5;
pub const HYDRODYNAMIC_DAMPING: f64 = 1.0e5;
pub const DEFAULT_EPSILON: f64 = 1.0e-3;
pub const CASE_FINAL_TIME: f64 = 50.0;

fn buoy(gamma: f64) -> ModelParams {
    ModelParams {
        m: BUOY_MASS,
        k: HYDROSTATIC_STIFFNESS,
        c: HYDRODYNAMIC_DAMPING,
        gamma,
        epsilon: DEFAULT_EPSILON,
    }
}

/// The three reference cases: steady-state start (case1), start from rest
/// (case2) and start from rest under the irregular excitation (case3).
pub fn builtin_cases() -> Vec<CaseSpec> {
    let periodic = periodic_force();
    let (x1_0, x2_0) = case1_initial_conditions(&periodic, HYDRODYNAMIC_DAMPING)
        .expect("periodic frequencies are non-zero");
    vec![
        CaseSpec {
            id: "case1".into(),
            model: buoy(1.5e5),
            excitation: periodic.clone(),
            boundary: BoundarySpec {
                mode: BoundaryMode::FixedInitial,
                x1_0,
                x2_0,
                t0: 0.0,
                tf: CASE_FINAL_TIME,
            },
        },
        CaseSpec {
            id: "case2".into(),
            model: buoy(1.5e5),
            excitation: periodic,
            boundary: BoundarySpec {
                mode: BoundaryMode::FixedInitial,
                x1_0: 0.0,
                x2_0: 0.0,
                t0: 0.0,
                tf: CASE_FINAL_TIME,
            },
        },
        CaseSpec {
            id: "case3".into(),
            model: buoy(1.0e5),
            excitation: non_periodic_force(),
            boundary: BoundarySpec {
                mode: BoundaryMode::FixedInitial,
                x1_0: 0.0,
                x2_0: 0.0,
                t0: 0.0,
                tf: CASE_FINAL_TIME,
            },
        },
    ]
}

/// Looks up a built-in case by id (`case1`, `case2`, `case3`).
pub fn builtin_case(id: &str) -> Option<CaseSpec> {
    builtin_cases().into_iter().find(|case| case.id == id)
}
