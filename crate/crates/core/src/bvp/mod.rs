//! Two-point boundary value solver for first-order ODE systems.
//!
//! The discretization is three-stage Lobatto IIIA collocation (the scheme
//! behind MATLAB's `bvp4c`): on every mesh interval the solution is a cubic
//! that matches the ODE at both ends and at the midpoint. Each Newton system
//! is block bidiagonal with separated boundary rows and is solved by a banded
//! LU. After each converged Newton solve the local defect of the C¹ cubic
//! interpolant is estimated on every interval and the mesh is refined until
//! the scaled defect falls below the requested tolerance.

pub mod banded;

use log::debug;
use thiserror::Error;

use banded::{BandLu, BandMatrix};

/// Newton stops once a full step is below this fraction of the tolerance.
const NEWTON_STEP_TOL: f64 = 1e-2;
/// Smallest line-search damping factor.
const MIN_DAMPING: f64 = 1.0 / 1024.0;
const ARMIJO_SLOPE: f64 = 1e-4;
const MAX_MESH_PASSES: usize = 60;

const GAUSS3: [(f64, f64); 3] = [
    (-0.774_596_669_241_483_4, 5.0 / 9.0),
    (0.0, 8.0 / 9.0),
    (0.774_596_669_241_483_4, 5.0 / 9.0),
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BvpError {
    #[error("Newton iteration did not converge after {iterations} iterations (last scaled residual {residual:e})")]
    NoConvergence { residual: f64, iterations: usize },
    #[error("mesh refinement needs {required} points, more than the cap of {max_mesh}")]
    MeshOverflow { required: usize, max_mesh: usize },
    #[error("collocation Jacobian is singular near mesh node {node}")]
    SingularJacobian { node: usize },
    #[error("boundary condition {row} couples both ends; only separated conditions are supported")]
    NonSeparatedBoundary { row: usize },
    #[error("invalid initial guess: {0}")]
    InvalidGuess(String),
    #[error("invalid solver settings: {0}")]
    InvalidSettings(String),
}

/// A first-order two-point boundary value problem `y' = f(t, y)`,
/// `g(y(t0), y(tf)) = 0` with `dim` equations and `dim` boundary conditions.
pub trait BvpProblem {
    fn dim(&self) -> usize;

    fn interval(&self) -> (f64, f64);

    fn rhs(&self, t: f64, y: &[f64], dydt: &mut [f64]);

    /// Writes the row-major `dim x dim` Jacobian of `rhs`. Returning `false`
    /// selects one-sided finite differences.
    fn rhs_jacobian(&self, _t: f64, _y: &[f64], _jac: &mut [f64]) -> bool {
        false
    }

    fn bc(&self, ya: &[f64], yb: &[f64], residual: &mut [f64]);
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSettings {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_mesh: usize,
    pub max_newton: usize,
    pub initial_mesh_size: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            rel_tol: 1e-4,
            abs_tol: 1e-4,
            max_mesh: 10_000,
            max_newton: 40,
            initial_mesh_size: 21,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<(), BvpError> {
        let bad = |msg: &str| Err(BvpError::InvalidSettings(msg.to_string()));
        if !(self.rel_tol.is_finite() && self.rel_tol > 0.0) {
            return bad("rel_tol must be positive");
        }
        if !(self.abs_tol.is_finite() && self.abs_tol > 0.0) {
            return bad("abs_tol must be positive");
        }
        if self.initial_mesh_size < 3 {
            return bad("initial_mesh_size must be at least 3");
        }
        if self.max_mesh < self.initial_mesh_size {
            return bad("max_mesh must be at least initial_mesh_size");
        }
        if self.max_newton == 0 {
            return bad("max_newton must be at least 1");
        }
        Ok(())
    }

    fn threshold(&self) -> f64 {
        self.abs_tol / self.rel_tol
    }
}

/// Nodal values on a mesh; used both as an initial guess and as the raw
/// content of a solution.
#[derive(Clone, Debug, PartialEq)]
pub struct MeshFunction {
    pub dim: usize,
    pub mesh: Vec<f64>,
    /// Row-major `mesh.len() x dim`.
    pub values: Vec<f64>,
}

impl MeshFunction {
    pub fn new(dim: usize, mesh: Vec<f64>, values: Vec<f64>) -> Self {
        Self { dim, mesh, values }
    }

    /// Evaluates `init(t)` at every mesh node.
    pub fn from_fn(dim: usize, mesh: Vec<f64>, mut init: impl FnMut(f64) -> Vec<f64>) -> Self {
        let mut values = Vec::with_capacity(mesh.len() * dim);
        for &t in &mesh {
            let y = init(t);
            assert_eq!(y.len(), dim);
            values.extend_from_slice(&y);
        }
        Self { dim, mesh, values }
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn len(&self) -> usize {
        self.mesh.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mesh.is_empty()
    }
}

/// `n` equally spaced points on `[a, b]`.
pub fn uniform_mesh(a: f64, b: f64, n: usize) -> Vec<f64> {
    let last = (n - 1) as f64;
    (0..n)
        .map(|i| {
            if i + 1 == n {
                b
            } else {
                a + (b - a) * i as f64 / last
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct BvpSolution {
    pub nodes: MeshFunction,
    /// `f(t_i, y_i)` at every node, the slopes of the Hermite interpolant.
    pub slopes: Vec<f64>,
    /// Scaled defect per mesh interval.
    pub interval_residuals: Vec<f64>,
    /// Maximum of `interval_residuals`.
    pub residual_norm: f64,
    /// Maximum scaled boundary-condition residual.
    pub bc_residual: f64,
    pub newton_iterations: usize,
    pub mesh_points: usize,
    pub mesh_passes: usize,
    /// Non-zero Jacobian entries that fell outside the collocation band
    /// (always 0 for a correct assembly).
    pub out_of_band_writes: usize,
}

impl BvpSolution {
    pub fn mesh(&self) -> &[f64] {
        &self.nodes.mesh
    }

    pub fn dim(&self) -> usize {
        self.nodes.dim
    }

    pub fn node(&self, i: usize) -> &[f64] {
        self.nodes.node(i)
    }

    pub fn interval(&self) -> (f64, f64) {
        (self.nodes.mesh[0], *self.nodes.mesh.last().unwrap())
    }

    /// Evaluates the C¹ piecewise-cubic interpolant at `t` (clamped to the
    /// mesh interval).
    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(t, &mut out);
        out
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        hermite_eval(&self.nodes, &self.slopes, t, out);
    }

    /// Derivative of the interpolant at `t`.
    pub fn eval_derivative(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        hermite_derivative(&self.nodes, &self.slopes, t, &mut out);
        out
    }

    /// Interpolant sampled on `mesh`.
    pub fn resample(&self, mesh: &[f64]) -> MeshFunction {
        MeshFunction::from_fn(self.dim(), mesh.to_vec(), |t| self.eval(t))
    }
}

fn locate(mesh: &[f64], t: f64) -> usize {
    let idx = mesh.partition_point(|&x| x <= t);
    idx.clamp(1, mesh.len() - 1) - 1
}

fn hermite_eval(nodes: &MeshFunction, slopes: &[f64], t: f64, out: &mut [f64]) {
    let n = nodes.dim;
    let mesh = &nodes.mesh;
    let i = locate(mesh, t);
    let h = mesh[i + 1] - mesh[i];
    let s = ((t - mesh[i]) / h).clamp(0.0, 1.0);
    let s2 = s * s;
    let s3 = s2 * s;
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    let (y0, y1) = (nodes.node(i), nodes.node(i + 1));
    let (f0, f1) = (
        &slopes[i * n..(i + 1) * n],
        &slopes[(i + 1) * n..(i + 2) * n],
    );
    for c in 0..n {
        out[c] = h00 * y0[c] + h10 * h * f0[c] + h01 * y1[c] + h11 * h * f1[c];
    }
}

fn hermite_derivative(nodes: &MeshFunction, slopes: &[f64], t: f64, out: &mut [f64]) {
    let n = nodes.dim;
    let mesh = &nodes.mesh;
    let i = locate(mesh, t);
    let h = mesh[i + 1] - mesh[i];
    let s = ((t - mesh[i]) / h).clamp(0.0, 1.0);
    let s2 = s * s;
    let d00 = (6.0 * s2 - 6.0 * s) / h;
    let d10 = 3.0 * s2 - 4.0 * s + 1.0;
    let d01 = (-6.0 * s2 + 6.0 * s) / h;
    let d11 = 3.0 * s2 - 2.0 * s;
    let (y0, y1) = (nodes.node(i), nodes.node(i + 1));
    let (f0, f1) = (
        &slopes[i * n..(i + 1) * n],
        &slopes[(i + 1) * n..(i + 2) * n],
    );
    for c in 0..n {
        out[c] = d00 * y0[c] + d10 * f0[c] + d01 * y1[c] + d11 * f1[c];
    }
}

fn validate_guess<P: BvpProblem + ?Sized>(
    problem: &P,
    guess: &MeshFunction,
) -> Result<(), BvpError> {
    let bad = |msg: String| Err(BvpError::InvalidGuess(msg));
    let n = problem.dim();
    if n == 0 {
        return bad("problem dimension is zero".into());
    }
    if guess.dim != n {
        return bad(format!(
            "guess dimension {} differs from problem dimension {n}",
            guess.dim
        ));
    }
    if guess.mesh.len() < 2 {
        return bad("mesh needs at least two nodes".into());
    }
    if guess.values.len() != guess.mesh.len() * n {
        return bad("value array does not match mesh size".into());
    }
    if guess.mesh.windows(2).any(|w| !(w[1] > w[0])) {
        return bad("mesh must be strictly increasing".into());
    }
    let (t0, tf) = problem.interval();
    if !(tf > t0) {
        return bad(format!("interval end {tf} must exceed start {t0}"));
    }
    let span = tf - t0;
    if (guess.mesh[0] - t0).abs() > 1e-12 * span
        || (guess.mesh[guess.mesh.len() - 1] - tf).abs() > 1e-12 * span
    {
        return bad(format!(
            "mesh [{}, {}] does not span [{t0}, {tf}]",
            guess.mesh[0],
            guess.mesh[guess.mesh.len() - 1]
        ));
    }
    if guess.values.iter().any(|v| !v.is_finite()) {
        return bad("guess contains non-finite values".into());
    }
    Ok(())
}

/// Work arrays for evaluating the collocation equations on one mesh.
struct Collocation<'a, P: BvpProblem + ?Sized> {
    problem: &'a P,
    mesh: &'a [f64],
    n: usize,
    /// Number of boundary rows applied at `t0`.
    left_rows: Vec<usize>,
    right_rows: Vec<usize>,
}

struct Evaluation {
    residual: Vec<f64>,
    node_rates: Vec<f64>,
    mid_states: Vec<f64>,
}

impl<'a, P: BvpProblem + ?Sized> Collocation<'a, P> {
    fn intervals(&self) -> usize {
        self.mesh.len() - 1
    }

    fn evaluate(&self, y: &[f64]) -> Evaluation {
        let n = self.n;
        let nint = self.intervals();
        let mut node_rates = vec![0.0; y.len()];
        for i in 0..=nint {
            self.problem.rhs(
                self.mesh[i],
                &y[i * n..(i + 1) * n],
                &mut node_rates[i * n..(i + 1) * n],
            );
        }
        let mut residual = vec![0.0; y.len()];
        let mut mid_states = vec![0.0; nint * n];
        let mut mid_rate = vec![0.0; n];
        let p = self.left_rows.len();
        for i in 0..nint {
            let h = self.mesh[i + 1] - self.mesh[i];
            let tm = self.mesh[i] + 0.5 * h;
            let (y0, y1) = (&y[i * n..(i + 1) * n], &y[(i + 1) * n..(i + 2) * n]);
            let (f0, f1) = (
                &node_rates[i * n..(i + 1) * n],
                &node_rates[(i + 1) * n..(i + 2) * n],
            );
            let ym = &mut mid_states[i * n..(i + 1) * n];
            for c in 0..n {
                ym[c] = 0.5 * (y0[c] + y1[c]) - 0.125 * h * (f1[c] - f0[c]);
            }
            self.problem.rhs(tm, ym, &mut mid_rate);
            for c in 0..n {
                residual[p + i * n + c] =
                    y1[c] - y0[c] - h / 6.0 * (f0[c] + 4.0 * mid_rate[c] + f1[c]);
            }
        }
        let mut bc = vec![0.0; n];
        self.problem.bc(&y[..n], &y[nint * n..], &mut bc);
        for (k, &row) in self.left_rows.iter().enumerate() {
            residual[k] = bc[row];
        }
        for (k, &row) in self.right_rows.iter().enumerate() {
            residual[p + nint * n + k] = bc[row];
        }
        Evaluation {
            residual,
            node_rates,
            mid_states,
        }
    }

    fn jacobian_at(&self, t: f64, y: &[f64], rate: &[f64], jac: &mut [f64]) {
        if self.problem.rhs_jacobian(t, y, jac) {
            return;
        }
        finite_difference_jacobian(self.problem, t, y, rate, jac);
    }

    fn assemble(&self, y: &[f64], eval: &Evaluation, bc_jac: &[f64]) -> BandMatrix {
        let n = self.n;
        let nint = self.intervals();
        let p = self.left_rows.len();
        let size = y.len();
        let mut band = BandMatrix::zeros(size, p + n - 1, 2 * n - 1 - p);

        for (k, &row) in self.left_rows.iter().enumerate() {
            for c in 0..n {
                band.set(k, c, bc_jac[row * 2 * n + c]);
            }
        }
        for (k, &row) in self.right_rows.iter().enumerate() {
            for c in 0..n {
                band.set(p + nint * n + k, nint * n + c, bc_jac[row * 2 * n + n + c]);
            }
        }

        let mut j_left = vec![0.0; n * n];
        let mut j_right = vec![0.0; n * n];
        let mut j_mid = vec![0.0; n * n];
        let mut mid_rate = vec![0.0; n];
        self.jacobian_at(self.mesh[0], &y[..n], &eval.node_rates[..n], &mut j_right);
        for i in 0..nint {
            std::mem::swap(&mut j_left, &mut j_right);
            let h = self.mesh[i + 1] - self.mesh[i];
            let tm = self.mesh[i] + 0.5 * h;
            let y1 = &y[(i + 1) * n..(i + 2) * n];
            self.jacobian_at(
                self.mesh[i + 1],
                y1,
                &eval.node_rates[(i + 1) * n..(i + 2) * n],
                &mut j_right,
            );
            let ym = &eval.mid_states[i * n..(i + 1) * n];
            self.problem.rhs(tm, ym, &mut mid_rate);
            self.jacobian_at(tm, ym, &mid_rate, &mut j_mid);

            let row0 = p + i * n;
            for r in 0..n {
                for c in 0..n {
                    // (J_mid * (I/2 + h/8 J_left))[r][c] and (J_mid * (I/2 - h/8 J_right))[r][c]
                    let mut ml = 0.5 * j_mid[r * n + c];
                    let mut mr = 0.5 * j_mid[r * n + c];
                    for q in 0..n {
                        let jm = j_mid[r * n + q];
                        if jm != 0.0 {
                            ml += jm * 0.125 * h * j_left[q * n + c];
                            mr -= jm * 0.125 * h * j_right[q * n + c];
                        }
                    }
                    let delta = if r == c { 1.0 } else { 0.0 };
                    let a = -delta - h / 6.0 * (j_left[r * n + c] + 4.0 * ml);
                    let b = delta - h / 6.0 * (j_right[r * n + c] + 4.0 * mr);
                    band.set(row0 + r, i * n + c, a);
                    band.set(row0 + r, (i + 1) * n + c, b);
                }
            }
        }
        band
    }
}

fn finite_difference_jacobian<P: BvpProblem + ?Sized>(
    problem: &P,
    t: f64,
    y: &[f64],
    rate: &[f64],
    jac: &mut [f64],
) {
    let n = y.len();
    let mut shifted = y.to_vec();
    let mut out = vec![0.0; n];
    let sqrt_eps = f64::EPSILON.sqrt();
    for j in 0..n {
        let step = sqrt_eps * y[j].abs().max(1.0);
        shifted[j] = y[j] + step;
        let actual = shifted[j] - y[j];
        problem.rhs(t, &shifted, &mut out);
        for i in 0..n {
            jac[i * n + j] = (out[i] - rate[i]) / actual;
        }
        shifted[j] = y[j];
    }
}

/// Jacobian of the boundary residual with respect to `(ya, yb)`, row-major
/// `dim x 2 dim`.
fn boundary_jacobian<P: BvpProblem + ?Sized>(problem: &P, ya: &[f64], yb: &[f64]) -> Vec<f64> {
    let n = ya.len();
    let mut base = vec![0.0; n];
    problem.bc(ya, yb, &mut base);
    let mut jac = vec![0.0; n * 2 * n];
    let mut a = ya.to_vec();
    let mut b = yb.to_vec();
    let mut out = vec![0.0; n];
    let sqrt_eps = f64::EPSILON.sqrt();
    for j in 0..2 * n {
        let (vec, idx) = if j < n { (&mut a, j) } else { (&mut b, j - n) };
        let orig = vec[idx];
        let step = sqrt_eps * orig.abs().max(1.0);
        vec[idx] = orig + step;
        let actual = vec[idx] - orig;
        problem.bc(&a, &b, &mut out);
        for i in 0..n {
            jac[i * 2 * n + j] = (out[i] - base[i]) / actual;
        }
        if j < n {
            a[idx] = orig;
        } else {
            b[idx] = orig;
        }
    }
    jac
}

fn classify_boundary_rows(jac: &[f64], n: usize) -> Result<(Vec<usize>, Vec<usize>), BvpError> {
    let mut left = Vec::new();
    let mut right = Vec::new();
    for row in 0..n {
        let r = &jac[row * 2 * n..(row + 1) * 2 * n];
        let touches_left = r[..n].iter().any(|&v| v != 0.0);
        let touches_right = r[n..].iter().any(|&v| v != 0.0);
        match (touches_left, touches_right) {
            (true, true) => return Err(BvpError::NonSeparatedBoundary { row }),
            (false, true) => right.push(row),
            _ => left.push(row),
        }
    }
    Ok((left, right))
}

/// Each boundary row is scaled by the largest magnitude among the components it touches.
fn boundary_row_scales(bc_jac: &[f64], y_scale: &[f64], threshold: f64) -> Vec<f64> {
    let n = y_scale.len();
    (0..n)
        .map(|row| {
            let r = &bc_jac[row * 2 * n..(row + 1) * 2 * n];
            (0..2 * n)
                .filter(|&j| r[j] != 0.0)
                .map(|j| y_scale[j % n])
                .fold(threshold, f64::max)
        })
        .collect()
}

fn component_scales(values: &[f64], n: usize, threshold: f64) -> Vec<f64> {
    let mut scale = vec![threshold; n];
    for node in values.chunks_exact(n) {
        for c in 0..n {
            scale[c] = scale[c].max(node[c].abs());
        }
    }
    scale
}

struct NewtonOutcome {
    iterations: usize,
    converged: bool,
    /// Scaled size of the last full Newton correction.
    last_step: f64,
    out_of_band_writes: usize,
}

/// Damped Newton iteration on the collocation equations.
///
/// Damping uses the natural level function `|J(y_k)^-1 F(y)|`: a trial point
/// is accepted when the Newton correction computed there with the current
/// factorization shrinks by the Armijo factor. This measure is invariant to
/// the scaling of the equations and copes far better with the steep control
/// switches of bang/singular problems than the plain residual norm. When the
/// line search bottoms out the smallest step is taken anyway and the caller
/// decides (via refinement) how to proceed; `converged` reports whether the
/// final correction met the tolerance.
fn newton<P: BvpProblem + ?Sized>(
    problem: &P,
    mesh: &[f64],
    y: &mut [f64],
    settings: &SolverSettings,
) -> Result<NewtonOutcome, BvpError> {
    let n = problem.dim();
    let nint = mesh.len() - 1;
    let threshold = settings.threshold();

    let bc_jac = boundary_jacobian(problem, &y[..n], &y[nint * n..]);
    let (left_rows, right_rows) = classify_boundary_rows(&bc_jac, n)?;

    let mut colloc = Collocation {
        problem,
        mesh,
        n,
        left_rows,
        right_rows,
    };

    let mut eval = colloc.evaluate(y);
    let mut out_of_band = 0;
    let mut last_step = f64::INFINITY;
    for iteration in 1..=settings.max_newton {
        let bc_jac = boundary_jacobian(problem, &y[..n], &y[nint * n..]);
        let (left, right) = classify_boundary_rows(&bc_jac, n)?;
        if left != colloc.left_rows || right != colloc.right_rows {
            colloc.left_rows = left;
            colloc.right_rows = right;
            eval = colloc.evaluate(y);
        }
        let band = colloc.assemble(y, &eval, &bc_jac);
        out_of_band += band.out_of_band_writes();
        let lu: BandLu = band
            .factor()
            .map_err(|pivot| BvpError::SingularJacobian { node: pivot.0 / n })?;
        let mut step: Vec<f64> = eval.residual.iter().map(|r| -r).collect();
        lu.solve_in_place(&mut step);
        if step.iter().any(|v| !v.is_finite()) {
            return Err(BvpError::SingularJacobian { node: 0 });
        }
        last_step = step
            .iter()
            .zip(y.iter())
            .map(|(d, v)| d.abs() / (settings.abs_tol + settings.rel_tol * v.abs()))
            .fold(0.0, f64::max);

        if last_step <= NEWTON_STEP_TOL {
            for (v, d) in y.iter_mut().zip(&step) {
                *v += d;
            }
            debug!(
                "newton converged in {iteration} iterations on {} nodes",
                mesh.len()
            );
            return Ok(NewtonOutcome {
                iterations: iteration,
                converged: true,
                last_step,
                out_of_band_writes: out_of_band,
            });
        }

        let weights: Vec<f64> = component_scales(y, n, threshold)
            .iter()
            .map(|s| 1.0 / s)
            .collect();
        let level = |d: &[f64]| -> f64 {
            d.chunks_exact(n)
                .flat_map(|node| node.iter().zip(&weights).map(|(v, w)| (v * w).powi(2)))
                .sum()
        };
        let level0 = level(&step);
        let mut damping = 1.0;
        let mut trial = y.to_vec();
        loop {
            for ((t, v), d) in trial.iter_mut().zip(y.iter()).zip(&step) {
                *t = v + damping * d;
            }
            let trial_eval = colloc.evaluate(&trial);
            let mut trial_step: Vec<f64> = trial_eval.residual.iter().map(|r| -r).collect();
            lu.solve_in_place(&mut trial_step);
            let trial_level = level(&trial_step);
            let finite = trial_level.is_finite() && trial.iter().all(|v| v.is_finite());
            let accept = finite && trial_level <= (1.0 - 2.0 * ARMIJO_SLOPE * damping) * level0;
            if accept || (finite && damping * 0.5 < MIN_DAMPING) {
                y.copy_from_slice(&trial);
                eval = trial_eval;
                break;
            }
            damping *= 0.5;
            if damping < MIN_DAMPING {
                return Ok(NewtonOutcome {
                    iterations: iteration,
                    converged: false,
                    last_step,
                    out_of_band_writes: out_of_band,
                });
            }
        }
        debug!("newton iteration {iteration}: step {last_step:.3e}, damping {damping}");
    }
    Ok(NewtonOutcome {
        iterations: settings.max_newton,
        converged: false,
        last_step,
        out_of_band_writes: out_of_band,
    })
}

fn node_rates<P: BvpProblem + ?Sized>(problem: &P, nodes: &MeshFunction) -> Vec<f64> {
    let n = nodes.dim;
    let mut rates = vec![0.0; nodes.values.len()];
    for i in 0..nodes.len() {
        problem.rhs(nodes.mesh[i], nodes.node(i), &mut rates[i * n..(i + 1) * n]);
    }
    rates
}

/// Scaled defect of the cubic interpolant on every mesh interval.
///
/// On each half of an interval the defect is
/// `S(end) - S(start) - integral f(t, S(t)) dt`, with the integral taken by
/// three-point Gauss quadrature at points that are not collocation points.
/// Each component is divided by `max(max_i |y_i|, abs_tol / rel_tol)` and the
/// interval value is the maximum over components and halves. The defect is
/// fourth order in the interval length.
pub fn estimate_residual<P: BvpProblem + ?Sized>(
    problem: &P,
    candidate: &MeshFunction,
    settings: &SolverSettings,
) -> Vec<f64> {
    let slopes = node_rates(problem, candidate);
    let scale = component_scales(&candidate.values, candidate.dim, settings.threshold());
    interval_defects(problem, candidate, &slopes, &scale)
}

fn interval_defects<P: BvpProblem + ?Sized>(
    problem: &P,
    nodes: &MeshFunction,
    slopes: &[f64],
    scale: &[f64],
) -> Vec<f64> {
    let n = nodes.dim;
    let mesh = &nodes.mesh;
    let mut state = vec![0.0; n];
    let mut rate = vec![0.0; n];
    let mut start = vec![0.0; n];
    let mut end = vec![0.0; n];
    let mut integral = vec![0.0; n];
    let mut out = Vec::with_capacity(mesh.len() - 1);
    for i in 0..mesh.len() - 1 {
        let (a, b) = (mesh[i], mesh[i + 1]);
        let h = b - a;
        let mut worst: f64 = 0.0;
        for (lo, hi) in [(a, a + 0.5 * h), (a + 0.5 * h, b)] {
            let half = 0.5 * (hi - lo);
            let centre = 0.5 * (hi + lo);
            integral.iter_mut().for_each(|v| *v = 0.0);
            for &(xi, w) in &GAUSS3 {
                let t = centre + half * xi;
                hermite_on(nodes, slopes, i, t, &mut state);
                problem.rhs(t, &state, &mut rate);
                for c in 0..n {
                    integral[c] += w * half * rate[c];
                }
            }
            hermite_on(nodes, slopes, i, lo, &mut start);
            hermite_on(nodes, slopes, i, hi, &mut end);
            for c in 0..n {
                let defect = (end[c] - start[c] - integral[c]).abs() / scale[c];
                worst = worst.max(defect);
            }
        }
        out.push(if worst.is_finite() {
            worst
        } else {
            f64::INFINITY
        });
    }
    out
}

/// Hermite cubic on interval `i` evaluated at `t` (no interval search).
fn hermite_on(nodes: &MeshFunction, slopes: &[f64], i: usize, t: f64, out: &mut [f64]) {
    let n = nodes.dim;
    let h = nodes.mesh[i + 1] - nodes.mesh[i];
    let s = (t - nodes.mesh[i]) / h;
    let s2 = s * s;
    let s3 = s2 * s;
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    let (y0, y1) = (nodes.node(i), nodes.node(i + 1));
    let (f0, f1) = (
        &slopes[i * n..(i + 1) * n],
        &slopes[(i + 1) * n..(i + 2) * n],
    );
    for c in 0..n {
        out[c] = h00 * y0[c] + h10 * h * f0[c] + h01 * y1[c] + h11 * h * f1[c];
    }
}

/// Builds the next mesh from per-interval residuals.
///
/// Intervals above `rel_tol` are halved, or quartered above `100 rel_tol`.
/// Neighbouring pairs that are both far below tolerance are merged. The
/// result never exceeds `max_mesh` nodes.
pub fn refine_mesh(
    mesh: &[f64],
    residuals: &[f64],
    settings: &SolverSettings,
) -> Result<Vec<f64>, BvpError> {
    assert_eq!(mesh.len(), residuals.len() + 1, "one residual per interval");
    let tol = settings.rel_tol;
    // Merging two intervals raises the defect by roughly 2^4.
    let merge_below = tol / 64.0;
    let mut out = vec![mesh[0]];
    let mut i = 0;
    let nint = residuals.len();
    while i < nint {
        let (a, b) = (mesh[i], mesh[i + 1]);
        let r = residuals[i];
        if r > tol {
            let pieces = if r > 100.0 * tol { 4 } else { 2 };
            for k in 1..pieces {
                out.push(a + (b - a) * k as f64 / pieces as f64);
            }
            out.push(b);
            i += 1;
        } else if i + 1 < nint
            && r < merge_below
            && residuals[i + 1] < merge_below
            && mesh.len() > 3
        {
            out.push(mesh[i + 2]);
            i += 2;
        } else {
            out.push(b);
            i += 1;
        }
    }
    if out.len() < 3 && mesh.len() >= 3 {
        return Ok(mesh.to_vec());
    }
    if out.len() > settings.max_mesh {
        return Err(BvpError::MeshOverflow {
            required: out.len(),
            max_mesh: settings.max_mesh,
        });
    }
    Ok(out)
}

fn bc_residual<P: BvpProblem + ?Sized>(problem: &P, nodes: &MeshFunction, threshold: f64) -> f64 {
    let n = nodes.dim;
    let (ya, yb) = (nodes.node(0), nodes.node(nodes.len() - 1));
    let mut res = vec![0.0; n];
    problem.bc(ya, yb, &mut res);
    let y_scale = component_scales(&nodes.values, n, threshold);
    let scales = boundary_row_scales(&boundary_jacobian(problem, ya, yb), &y_scale, threshold);
    res.iter()
        .zip(&scales)
        .map(|(r, s)| r.abs() / s)
        .fold(0.0, f64::max)
}

fn finish<P: BvpProblem + ?Sized>(
    problem: &P,
    nodes: MeshFunction,
    settings: &SolverSettings,
    newton_iterations: usize,
    mesh_passes: usize,
    out_of_band_writes: usize,
) -> (BvpSolution, Vec<f64>) {
    let slopes = node_rates(problem, &nodes);
    let scale = component_scales(&nodes.values, nodes.dim, settings.threshold());
    let residuals = interval_defects(problem, &nodes, &slopes, &scale);
    let residual_norm = residuals.iter().copied().fold(0.0, f64::max);
    let bc_residual = bc_residual(problem, &nodes, settings.threshold());
    let mesh_points = nodes.len();
    (
        BvpSolution {
            nodes,
            slopes: slopes.clone(),
            interval_residuals: residuals,
            residual_norm,
            bc_residual,
            newton_iterations,
            mesh_points,
            mesh_passes,
            out_of_band_writes,
        },
        slopes,
    )
}

/// Solves the collocation equations on the guess mesh without refinement.
pub fn collocate<P: BvpProblem + ?Sized>(
    problem: &P,
    guess: &MeshFunction,
    settings: &SolverSettings,
) -> Result<BvpSolution, BvpError> {
    settings.validate()?;
    validate_guess(problem, guess)?;
    let mut nodes = guess.clone();
    let outcome = newton(problem, &nodes.mesh.clone(), &mut nodes.values, settings)?;
    if !outcome.converged {
        return Err(BvpError::NoConvergence {
            residual: outcome.last_step,
            iterations: outcome.iterations,
        });
    }
    Ok(finish(
        problem,
        nodes,
        settings,
        outcome.iterations,
        1,
        outcome.out_of_band_writes,
    )
    .0)
}

fn bisect_all(mesh: &[f64]) -> Vec<f64> {
    mesh.windows(2)
        .flat_map(|w| [w[0], 0.5 * (w[0] + w[1])])
        .chain(std::iter::once(mesh[mesh.len() - 1]))
        .collect()
}

/// Solves the boundary value problem to the requested tolerance, refining
/// the mesh adaptively.
///
/// A Newton solve that does not converge is not fatal: its last iterate is
/// used to place new nodes where the defect is largest (or, when the defect
/// gives no signal, every interval is bisected) and Newton restarts on the
/// finer mesh. Success requires a converged Newton solve whose defect is
/// below `rel_tol`.
pub fn solve<P: BvpProblem + ?Sized>(
    problem: &P,
    guess: &MeshFunction,
    settings: &SolverSettings,
) -> Result<BvpSolution, BvpError> {
    settings.validate()?;
    validate_guess(problem, guess)?;
    if guess.len() > settings.max_mesh {
        return Err(BvpError::MeshOverflow {
            required: guess.len(),
            max_mesh: settings.max_mesh,
        });
    }
    let mut nodes = guess.clone();
    let mut total_newton = 0;
    let mut out_of_band = 0;
    let mut last_step = f64::NAN;
    for pass in 1..=MAX_MESH_PASSES {
        let mesh = nodes.mesh.clone();
        let mut values = nodes.values.clone();
        let outcome = newton(problem, &mesh, &mut values, settings)?;
        total_newton += outcome.iterations;
        out_of_band += outcome.out_of_band_writes;
        last_step = outcome.last_step;
        let usable = values.iter().all(|v| v.is_finite());
        if usable {
            nodes.values = values;
        }
        let (solution, slopes) = finish(problem, nodes, settings, total_newton, pass, out_of_band);
        debug!(
            "mesh pass {pass}: {} nodes, newton {}, residual {:.3e}",
            solution.mesh_points,
            if outcome.converged {
                "converged"
            } else {
                "failed"
            },
            solution.residual_norm
        );
        if outcome.converged && solution.residual_norm <= settings.rel_tol {
            return Ok(solution);
        }
        let signal = usable
            && solution.interval_residuals.iter().all(|r| r.is_finite())
            && solution.residual_norm > settings.rel_tol;
        let new_mesh = if signal {
            refine_mesh(solution.mesh(), &solution.interval_residuals, settings)?
        } else {
            let finer = bisect_all(solution.mesh());
            if finer.len() > settings.max_mesh {
                return Err(BvpError::NoConvergence {
                    residual: last_step,
                    iterations: total_newton,
                });
            }
            finer
        };
        let old = solution.nodes;
        nodes = MeshFunction::from_fn(old.dim, new_mesh, |t| {
            let mut out = vec![0.0; old.dim];
            hermite_eval(&old, &slopes, t, &mut out);
            out
        });
    }
    Err(BvpError::NoConvergence {
        residual: last_step,
        iterations: total_newton,
    })
}

/// A [`BvpProblem`] assembled from closures.
pub struct FnProblem<F, G>
where
    F: Fn(f64, &[f64], &mut [f64]),
    G: Fn(&[f64], &[f64], &mut [f64]),
{
    pub dim: usize,
    pub t0: f64,
    pub tf: f64,
    pub rhs: F,
    pub bc: G,
}

impl<F, G> BvpProblem for FnProblem<F, G>
where
    F: Fn(f64, &[f64], &mut [f64]),
    G: Fn(&[f64], &[f64], &mut [f64]),
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn interval(&self) -> (f64, f64) {
        (self.t0, self.tf)
    }

    fn rhs(&self, t: f64, y: &[f64], dydt: &mut [f64]) {
        (self.rhs)(t, y, dydt)
    }

    fn bc(&self, ya: &[f64], yb: &[f64], residual: &mut [f64]) {
        (self.bc)(ya, yb, residual)
    }
}
