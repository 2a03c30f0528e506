//! Dense trajectory sampling, energy quadrature, arc classification and
//! optimality diagnostics.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bvp::BvpSolution;
use crate::excitation::FourierForce;
use crate::model::{
    control_hamiltonian, optimal_control, singular_control_oracle, AugmentedState, ControlSample,
    ModelParams,
};

pub const DEFAULT_RESOLUTION: usize = 2001;
pub const PMP_PROBE_TIMES: usize = 64;
pub const PMP_PROBE_CONTROLS: usize = 1024;

#[derive(Debug, Error, PartialEq)]
pub enum PostprocessError {
    #[error("quadrature needs at least 3 samples (got {0})")]
    TooFewSamples(usize),
    #[error("sample times must be strictly increasing")]
    NonIncreasingTimes,
    #[error("sample arrays differ in length")]
    LengthMismatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub state: AugmentedState,
    pub control: ControlSample,
}

/// Dense samples of an extremal together with the cumulative harvested
/// energy `E(t) = integral of u x2` (J).
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub samples: Vec<TrajectorySample>,
    pub energy_cum: Vec<f64>,
}

impl Trajectory {
    /// Samples the solution interpolant at `resolution` equally spaced times.
    pub fn from_solution(
        solution: &BvpSolution,
        params: &ModelParams,
        force: &FourierForce,
        resolution: usize,
    ) -> Result<Self, PostprocessError> {
        if resolution < 3 {
            return Err(PostprocessError::TooFewSamples(resolution));
        }
        let (t0, tf) = solution.interval();
        let mut y = [0.0; 6];
        let states = (0..resolution).map(|i| {
            let t = if i + 1 == resolution {
                tf
            } else {
                t0 + (tf - t0) * i as f64 / (resolution - 1) as f64
            };
            solution.eval_into(t, &mut y);
            (t, AugmentedState::from(y))
        });
        Self::from_states(states, params, force)
    }

    pub fn from_states(
        states: impl IntoIterator<Item = (f64, AugmentedState)>,
        params: &ModelParams,
        force: &FourierForce,
    ) -> Result<Self, PostprocessError> {
        let samples: Vec<TrajectorySample> = states
            .into_iter()
            .map(|(t, state)| TrajectorySample {
                t,
                state,
                control: optimal_control(&state, params, force),
            })
            .collect();
        let times: Vec<f64> = samples.iter().map(|s| s.t).collect();
        let power: Vec<f64> = samples.iter().map(|s| s.control.u * s.state.x2).collect();
        let energy_cum = cumulative_simpson(&times, &power)?;
        Ok(Self {
            samples,
            energy_cum,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }

    pub fn controls(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.control.u).collect()
    }
}

/// Two-point Gauss–Legendre rule; exact for the quadratic pieces below.
fn integrate_quadratic(ts: [f64; 3], ys: [f64; 3], a: f64, b: f64) -> f64 {
    let lagrange = |t: f64| {
        let [t0, t1, t2] = ts;
        ys[0] * (t - t1) * (t - t2) / ((t0 - t1) * (t0 - t2))
            + ys[1] * (t - t0) * (t - t2) / ((t1 - t0) * (t1 - t2))
            + ys[2] * (t - t0) * (t - t1) / ((t2 - t0) * (t2 - t1))
    };
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let off = half / 3f64.sqrt();
    half * (lagrange(mid - off) + lagrange(mid + off))
}

fn check_samples(t: &[f64], y: &[f64]) -> Result<(), PostprocessError> {
    if t.len() != y.len() {
        return Err(PostprocessError::LengthMismatch);
    }
    if t.len() < 3 {
        return Err(PostprocessError::TooFewSamples(t.len()));
    }
    if t.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(PostprocessError::NonIncreasingTimes);
    }
    Ok(())
}

/// Running integral of the piecewise-quadratic interpolant through
/// consecutive sample triples. The last value is composite Simpson's rule
/// (for an even sample count the final interval uses the last triple).
pub fn cumulative_simpson(t: &[f64], y: &[f64]) -> Result<Vec<f64>, PostprocessError> {
    check_samples(t, y)?;
    let n = t.len();
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i + 2 < n {
        let ts = [t[i], t[i + 1], t[i + 2]];
        let ys = [y[i], y[i + 1], y[i + 2]];
        out[i + 1] = out[i] + integrate_quadratic(ts, ys, t[i], t[i + 1]);
        out[i + 2] = out[i] + integrate_quadratic(ts, ys, t[i], t[i + 2]);
        i += 2;
    }
    if i + 1 < n {
        let ts = [t[n - 3], t[n - 2], t[n - 1]];
        let ys = [y[n - 3], y[n - 2], y[n - 1]];
        out[n - 1] = out[n - 2] + integrate_quadratic(ts, ys, t[n - 2], t[n - 1]);
    }
    Ok(out)
}

/// Composite Simpson integral of sampled data.
pub fn simpson(t: &[f64], y: &[f64]) -> Result<f64, PostprocessError> {
    Ok(*cumulative_simpson(t, y)?.last().unwrap())
}

/// Harvested energy `integral of u x2 dt` over the trajectory (J).
pub fn harvested_energy(traj: &Trajectory) -> Result<f64, PostprocessError> {
    if traj.len() < 3 {
        return Err(PostprocessError::TooFewSamples(traj.len()));
    }
    Ok(*traj.energy_cum.last().unwrap())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArcKind {
    BangPlus,
    BangMinus,
    Singular,
}

impl ArcKind {
    pub fn letter(self) -> &'static str {
        match self {
            ArcKind::BangPlus | ArcKind::BangMinus => "B",
            ArcKind::Singular => "S",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArcSegment {
    pub kind: ArcKind,
    pub t_start: f64,
    pub t_end: f64,
}

impl ArcSegment {
    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArcSequence {
    pub segments: Vec<ArcSegment>,
}

impl ArcSequence {
    /// Compact label such as `B-S-B`.
    pub fn label(&self) -> String {
        self.segments
            .iter()
            .map(|s| s.kind.letter())
            .collect::<Vec<_>>()
            .join("-")
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

impl fmt::Display for ArcSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArcThresholds {
    /// A sample is a bang sample when `|u| >= (1 - eta) gamma`.
    pub eta: f64,
    /// Segments shorter than this (s) are absorbed by a neighbour.
    pub min_dwell: f64,
}

impl Default for ArcThresholds {
    fn default() -> Self {
        Self {
            eta: 0.05,
            min_dwell: 0.25,
        }
    }
}

pub fn classify_sample(u: f64, gamma: f64, eta: f64) -> ArcKind {
    let level = (1.0 - eta) * gamma;
    if u >= level {
        ArcKind::BangPlus
    } else if u <= -level {
        ArcKind::BangMinus
    } else {
        ArcKind::Singular
    }
}

pub fn classify_arcs(
    traj: &Trajectory,
    p: &ModelParams,
    thresholds: &ArcThresholds,
) -> ArcSequence {
    let labels: Vec<ArcKind> = traj
        .samples
        .iter()
        .map(|s| classify_sample(s.control.u, p.gamma, thresholds.eta))
        .collect();
    segment_labels(&traj.times(), &labels, thresholds.min_dwell)
}

/// Groups a labelled sample stream into segments. Label changes are placed
/// halfway between samples; segments shorter than `min_dwell` are absorbed,
/// shortest first, by their longer neighbour, and equal neighbours are
/// joined.
pub fn segment_labels(times: &[f64], labels: &[ArcKind], min_dwell: f64) -> ArcSequence {
    assert_eq!(times.len(), labels.len());
    if times.is_empty() {
        return ArcSequence { segments: vec![] };
    }
    let mut segments = vec![ArcSegment {
        kind: labels[0],
        t_start: times[0],
        t_end: *times.last().unwrap(),
    }];
    for i in 1..labels.len() {
        if labels[i] != labels[i - 1] {
            let cut = 0.5 * (times[i - 1] + times[i]);
            segments.last_mut().unwrap().t_end = cut;
            segments.push(ArcSegment {
                kind: labels[i],
                t_start: cut,
                t_end: *times.last().unwrap(),
            });
        }
    }
    loop {
        join_equal_neighbours(&mut segments);
        if segments.len() < 2 {
            break;
        }
        let (idx, shortest) = segments
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.duration().total_cmp(&b.1.duration()))
            .map(|(i, s)| (i, *s))
            .unwrap();
        if shortest.duration() >= min_dwell {
            break;
        }
        let absorb_left = match (idx.checked_sub(1), segments.get(idx + 1)) {
            (Some(l), Some(r)) => segments[l].duration() >= r.duration(),
            (Some(_), None) => true,
            _ => false,
        };
        if absorb_left {
            segments[idx - 1].t_end = shortest.t_end;
        } else {
            segments[idx + 1].t_start = shortest.t_start;
        }
        segments.remove(idx);
    }
    ArcSequence { segments }
}

fn join_equal_neighbours(segments: &mut Vec<ArcSegment>) {
    let mut joined: Vec<ArcSegment> = Vec::with_capacity(segments.len());
    for seg in segments.drain(..) {
        match joined.last_mut() {
            Some(prev) if prev.kind == seg.kind => prev.t_end = seg.t_end,
            _ => joined.push(seg),
        }
    }
    *segments = joined;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingularArcCheck {
    pub t_start: f64,
    pub t_end: f64,
    /// `max |u - u_sing| / gamma` over the samples of the arc.
    pub oracle_deviation: f64,
    pub max_abs_h1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    /// `max_t |H(t) - H(t0)|`.
    pub hamiltonian_drift: f64,
    pub hamiltonian_max_abs: f64,
    /// Drift divided by `max_t |H(t)|`.
    pub hamiltonian_relative_drift: f64,
    pub pmp_probes: usize,
    pub pmp_violations: usize,
    /// Largest amount by which a probe control undercut the chosen one.
    pub pmp_worst_excess: f64,
    pub singular_arcs: Vec<SingularArcCheck>,
    pub singular_oracle_max: f64,
    pub singular_h1_max: f64,
    /// `max_t |H1(t)|` over the whole trajectory.
    pub h1_max_abs: f64,
    /// Mean switching function on each bang arc, in arc order.
    pub bang_h1_means: Vec<(ArcKind, f64)>,
}

pub fn diagnostics(
    traj: &Trajectory,
    arcs: &ArcSequence,
    p: &ModelParams,
    f: &FourierForce,
) -> DiagnosticsReport {
    let h0 = traj.samples.first().map_or(0.0, |s| s.control.hamiltonian);
    let mut drift = 0.0f64;
    let mut h_max = 0.0f64;
    let mut h1_max = 0.0f64;
    for s in &traj.samples {
        drift = drift.max((s.control.hamiltonian - h0).abs());
        h_max = h_max.max(s.control.hamiltonian.abs());
        h1_max = h1_max.max(s.control.h1.abs());
    }
    let relative = if h_max > 0.0 { drift / h_max } else { 0.0 };

    let (pmp_probes, pmp_violations, pmp_worst_excess) = pmp_audit(traj, p);

    let mut singular_arcs = Vec::new();
    let mut bang_h1_means = Vec::new();
    for seg in &arcs.segments {
        let inside = traj
            .samples
            .iter()
            .filter(|s| s.t >= seg.t_start && s.t <= seg.t_end);
        match seg.kind {
            ArcKind::Singular => {
                let mut dev = 0.0f64;
                let mut h1 = 0.0f64;
                for s in inside {
                    let u_sing = singular_control_oracle(&s.state, p, f);
                    dev = dev.max((s.control.u - u_sing).abs() / p.gamma);
                    h1 = h1.max(s.control.h1.abs());
                }
                singular_arcs.push(SingularArcCheck {
                    t_start: seg.t_start,
                    t_end: seg.t_end,
                    oracle_deviation: dev,
                    max_abs_h1: h1,
                });
            }
            kind => {
                let (sum, count) =
                    inside.fold((0.0, 0usize), |(s, c), x| (s + x.control.h1, c + 1));
                if count > 0 {
                    bang_h1_means.push((kind, sum / count as f64));
                }
            }
        }
    }
    DiagnosticsReport {
        hamiltonian_drift: drift,
        hamiltonian_max_abs: h_max,
        hamiltonian_relative_drift: relative,
        pmp_probes,
        pmp_violations,
        pmp_worst_excess,
        singular_oracle_max: singular_arcs
            .iter()
            .map(|a| a.oracle_deviation)
            .fold(0.0, f64::max),
        singular_h1_max: singular_arcs
            .iter()
            .map(|a| a.max_abs_h1)
            .fold(0.0, f64::max),
        singular_arcs,
        h1_max_abs: h1_max,
        bang_h1_means,
    }
}

/// Compares the chosen control against a uniform grid on `(-pi, pi]` at
/// evenly spaced sample times. A probe counts as a violation when it lowers
/// the control-dependent Hamiltonian by more than rounding allows.
fn pmp_audit(traj: &Trajectory, p: &ModelParams) -> (usize, usize, f64) {
    let n = traj.len();
    if n == 0 {
        return (0, 0, 0.0);
    }
    let times = PMP_PROBE_TIMES.min(n);
    let mut probes = 0;
    let mut violations = 0;
    let mut worst = 0.0f64;
    for k in 0..times {
        let idx = if times == 1 {
            0
        } else {
            k * (n - 1) / (times - 1)
        };
        let s = &traj.samples[idx];
        let best = control_hamiltonian(&s.state, s.control.u_trig, p);
        let slack =
            1e-12 * (p.gamma * s.control.h1.abs() + p.epsilon * s.state.lam1.abs()).max(1.0);
        for j in 1..=PMP_PROBE_CONTROLS {
            let u = -PI + 2.0 * PI * j as f64 / PMP_PROBE_CONTROLS as f64;
            let excess = best - control_hamiltonian(&s.state, u, p);
            probes += 1;
            if excess > slack {
                violations += 1;
            }
            worst = worst.max(excess);
        }
    }
    (probes, violations, worst)
}
