//! Generic solver for time-dependent Lagrangian systems subject to
//! velocity-level constraints, plus embeddings of the single-compartment
//! network classes into that form.
//!
//! A system is described by a scalar Lagrangian `L(t, q, v)`, a constraint
//! matrix `A(t, q, v)` whose rows pair with variations, a constraint offset
//! `B(t, q, v)` completing the kinematic conditions `A v + B = 0`, and an
//! applied force `F(t, q, v)`. Accelerations and multipliers solve the
//! force balance `d/dt (dL/dv) - dL/dq = A' lam + F` together with the time
//! derivative of the kinematic conditions.
//!
//! All derivatives of `L` are formed numerically with centered differences.
//! Each derivative is probed at two widely separated steps first; when the
//! two probes agree the wide value is kept, which is exact for directions in
//! which `L` is polynomial of low degree and keeps roundoff far below the
//! truncation floor of narrow steps. When the probes disagree the derivative
//! is recomputed from a pair of narrow steps combined by Richardson
//! extrapolation. This policy keeps the solver usable at the very different
//! magnitudes that appear in the thermodynamic embeddings, where `L` is of
//! order 1e5 while some mass entries are of order 1e-2.
//!
//! Degenerate Lagrangians are handled explicitly. Directions whose row of
//! the velocity Hessian vanishes carry no acceleration information, so their
//! force-balance rows are algebraic in the velocities. For such systems the
//! solver first finds the constrained velocities and multipliers with a
//! Newton iteration, then recovers the remaining accelerations from the
//! reduced mass block, and finally differentiates the algebraic system along
//! the flow to obtain the accelerations of the degenerate directions.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dynamics::{self, DynamicsError};
use crate::model::{NetworkModel, SystemClass};

/// Scalar-valued evaluator taking time, configuration, and velocity.
pub type ScalarField = Box<dyn Fn(f64, &DVector<f64>, &DVector<f64>) -> f64>;
/// Matrix-valued evaluator taking time, configuration, and velocity.
pub type MatrixField = Box<dyn Fn(f64, &DVector<f64>, &DVector<f64>) -> DMatrix<f64>>;
/// Vector-valued evaluator taking time, configuration, and velocity.
pub type VectorField = Box<dyn Fn(f64, &DVector<f64>, &DVector<f64>) -> DVector<f64>>;

/// A Lagrangian system with velocity-level constraints.
///
/// The constraint matrix has `m` rows and `n` columns. Row `r` both
/// restricts admissible variations and, paired with the offset, states the
/// kinematic condition `sum_i A[r][i] v[i] + B[r] = 0`.
pub struct LagrangianSystem {
    /// Dimension of the configuration space.
    pub n: usize,
    /// Number of constraint rows.
    pub m: usize,
    /// Lagrangian evaluator.
    pub lagrangian: ScalarField,
    /// Constraint matrix evaluator, shape `m x n`.
    pub constraint_matrix: MatrixField,
    /// Constraint offset evaluator, length `m`.
    pub constraint_offset: VectorField,
    /// Applied force evaluator, length `n`.
    pub external_force: VectorField,
}

/// Instantaneous state of an abstract system.
#[derive(Debug, Clone, PartialEq)]
pub struct AbstractState {
    /// Time.
    pub t: f64,
    /// Configuration, length `n`.
    pub q: DVector<f64>,
    /// Velocity, length `n`.
    pub v: DVector<f64>,
}

/// Options for [`integrate_abstract`].
#[derive(Debug, Clone, Copy)]
pub struct AbstractOptions {
    /// Fixed step size.
    pub h: f64,
    /// Relative bound on the constraint residual after each projection.
    pub projection_tolerance: f64,
}

impl Default for AbstractOptions {
    fn default() -> Self {
        Self {
            h: 1e-3,
            projection_tolerance: 1e-9,
        }
    }
}

/// Result of a fixed-step abstract integration.
///
/// All three vectors have one entry per accepted sample, including the
/// initial state. Multipliers are recomputed at each sample from the
/// acceleration solve.
#[derive(Debug, Clone)]
pub struct AbstractTrajectory {
    /// Sampled states.
    pub states: Vec<AbstractState>,
    /// Constraint multipliers at each sample.
    pub multipliers: Vec<DVector<f64>>,
    /// Energy `dL/dv . v - L` at each sample.
    pub energies: Vec<f64>,
}

/// Errors produced by the abstract solver.
#[derive(Debug, Error)]
pub enum NonholonomicError {
    /// An evaluator returned an object of unexpected size.
    #[error("evaluator output has the wrong shape: {what}")]
    Shape { what: String },
    /// An evaluator or derived quantity was not finite.
    #[error("{what} evaluated to a non-finite value")]
    NonFinite { what: String },
    /// The constraint matrix does not have full row rank.
    #[error(
        "constraint matrix is rank deficient: smallest singular value {sigma_min:e}, largest {sigma_max:e}"
    )]
    RankDeficient { sigma_min: f64, sigma_max: f64 },
    /// The acceleration system is singular even though the constraints have
    /// full row rank. The offending null directions are reported instead of
    /// being regularized away.
    #[error("acceleration system is singular with {} null direction(s)", null_directions.len())]
    SingularSaddle { null_directions: Vec<Vec<f64>> },
    /// The velocity-level Newton iteration failed to converge.
    #[error("velocity solve stopped after {iterations} iterations at residual {residual:e}")]
    NewtonDiverged { iterations: usize, residual: f64 },
    /// The mass block over the non-degenerate directions is singular.
    #[error("mass block over the inertial directions is singular")]
    MassBlockSingular,
    /// Velocity projection could not reach the requested residual.
    #[error("velocity projection stalled at constraint residual {residual:e}")]
    ProjectionStalled { residual: f64 },
    /// The network class has no abstract embedding.
    #[error("system class {class} has no abstract embedding")]
    UnsupportedClass { class: &'static str },
    /// A network evaluation inside an embedding failed.
    #[error("network evaluation failed: {0}")]
    Dynamics(#[from] DynamicsError),
    /// Invalid integration options.
    #[error("invalid integration setup: {what}")]
    Options { what: String },
}

const WIDE_FRACTION: f64 = 1.0 / 16.0;
const FIRST_AGREE_TOL: f64 = 1e-6;
const SECOND_AGREE_TOL: f64 = 1e-4;
// Degenerate rows of an exactly evaluated Hessian come out as bitwise
// zeros, so the classification margin only has to absorb finite-difference
// roundoff. It must stay far below the smallest genuine mass relative to
// the largest: a heavy piston over a light species coordinate reaches mass
// ratios near 1e-6, which a looser margin would misread as degenerate.
const DEGENERATE_ROW_TOL: f64 = 1e-9;
const RANK_TOL: f64 = 1e-8;
const NULL_TOL: f64 = 1e-10;
const SOLVE_TOL: f64 = 1e-10;
const NEWTON_ROW_TOL: f64 = 1e-9;
const STALL_ACCEPT: f64 = 100.0;
const MAX_ITER: usize = 50;
const PROJECTION_SWEEPS: usize = 20;

/// Adaptive centered first derivative of `f` at zero offset.
///
/// `scale` sets the probing width for the direction being differentiated.
fn central1(f: &dyn Fn(f64) -> f64, scale: f64) -> f64 {
    let s = scale.abs().max(1.0);
    let w = s * WIDE_FRACTION;
    let d_w = (f(w) - f(-w)) / (2.0 * w);
    let wm = w * WIDE_FRACTION;
    let d_m = (f(wm) - f(-wm)) / (2.0 * wm);
    if d_w.is_finite() && d_m.is_finite() {
        let ref_mag = d_w.abs().max(d_m.abs()).max(1.0);
        if (d_w - d_m).abs() <= FIRST_AGREE_TOL * ref_mag {
            return d_w;
        }
        let h = f64::EPSILON.powf(0.2) * s;
        let d_a = (f(h) - f(-h)) / (2.0 * h);
        let d_b = (f(16.0 * h) - f(-16.0 * h)) / (32.0 * h);
        if d_a.is_finite() && d_b.is_finite() {
            return (256.0 * d_a - d_b) / 255.0;
        }
        return d_m;
    }
    let h = f64::EPSILON.cbrt() * s;
    (f(h) - f(-h)) / (2.0 * h)
}

/// Adaptive centered second derivative of `f` along one direction.
fn second_diag(f: &dyn Fn(f64) -> f64, scale: f64) -> f64 {
    let s = scale.abs().max(1.0);
    let f0 = f(0.0);
    let probe = |d: f64| (f(d) - 2.0 * f0 + f(-d)) / (d * d);
    let w = s * WIDE_FRACTION;
    let s_w = probe(w);
    let s_m = probe(w * WIDE_FRACTION);
    if s_w.is_finite() && s_m.is_finite() {
        let ref_mag = s_w.abs().max(s_m.abs()).max(1.0);
        if (s_w - s_m).abs() <= SECOND_AGREE_TOL * ref_mag {
            return s_w;
        }
    }
    let h = f64::EPSILON.powf(0.25) * s;
    let s_1 = probe(h);
    let s_2 = probe(8.0 * h);
    if s_1.is_finite() && s_2.is_finite() {
        return (64.0 * s_1 - s_2) / 63.0;
    }
    if s_m.is_finite() {
        s_m
    } else {
        s_w
    }
}

/// Adaptive centered mixed second derivative of `f` along two directions.
fn second_cross(f: &dyn Fn(f64, f64) -> f64, scale_i: f64, scale_j: f64) -> f64 {
    let si = scale_i.abs().max(1.0);
    let sj = scale_j.abs().max(1.0);
    let probe = |di: f64, dj: f64| {
        (f(di, dj) - f(di, -dj) - f(-di, dj) + f(-di, -dj)) / (4.0 * di * dj)
    };
    let s_w = probe(si * WIDE_FRACTION, sj * WIDE_FRACTION);
    let s_m = probe(si * WIDE_FRACTION * WIDE_FRACTION, sj * WIDE_FRACTION * WIDE_FRACTION);
    if s_w.is_finite() && s_m.is_finite() {
        let ref_mag = s_w.abs().max(s_m.abs()).max(1.0);
        if (s_w - s_m).abs() <= SECOND_AGREE_TOL * ref_mag {
            return s_w;
        }
    }
    let hi = f64::EPSILON.powf(0.25) * si;
    let hj = f64::EPSILON.powf(0.25) * sj;
    let s_1 = probe(hi, hj);
    let s_2 = probe(8.0 * hi, 8.0 * hj);
    if s_1.is_finite() && s_2.is_finite() {
        return (64.0 * s_1 - s_2) / 63.0;
    }
    if s_m.is_finite() {
        s_m
    } else {
        s_w
    }
}

fn grad_v(sys: &LagrangianSystem, t: f64, q: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(sys.n, |i, _| momentum_component(sys, t, q, v, i))
}

fn momentum_component(
    sys: &LagrangianSystem,
    t: f64,
    q: &DVector<f64>,
    v: &DVector<f64>,
    i: usize,
) -> f64 {
    central1(
        &|d| {
            let mut vv = v.clone();
            vv[i] += d;
            (sys.lagrangian)(t, q, &vv)
        },
        v[i],
    )
}

fn grad_q(sys: &LagrangianSystem, t: f64, q: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(sys.n, |i, _| grad_q_component(sys, t, q, v, i))
}

fn grad_q_component(
    sys: &LagrangianSystem,
    t: f64,
    q: &DVector<f64>,
    v: &DVector<f64>,
    i: usize,
) -> f64 {
    central1(
        &|d| {
            let mut qq = q.clone();
            qq[i] += d;
            (sys.lagrangian)(t, &qq, v)
        },
        q[i],
    )
}

/// Velocity Hessian of the Lagrangian, filled symmetrically.
fn mass_matrix(sys: &LagrangianSystem, t: f64, q: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64> {
    let n = sys.n;
    let mut mass = DMatrix::zeros(n, n);
    for i in 0..n {
        mass[(i, i)] = second_diag(
            &|d| {
                let mut vv = v.clone();
                vv[i] += d;
                (sys.lagrangian)(t, q, &vv)
            },
            v[i],
        );
        for j in 0..i {
            let entry = second_cross(
                &|di, dj| {
                    let mut vv = v.clone();
                    vv[i] += di;
                    vv[j] += dj;
                    (sys.lagrangian)(t, q, &vv)
                },
                v[i],
                v[j],
            );
            mass[(i, j)] = entry;
            mass[(j, i)] = entry;
        }
    }
    mass
}

/// Rate of change of selected momentum components along the flow direction
/// `(1, qdot, 0)`, holding the velocity argument of the momentum fixed.
///
/// This is the acceleration-free part of `d/dt (dL/dv)`; the mass term is
/// added separately by the caller.
fn momentum_flow_rate(
    sys: &LagrangianSystem,
    t: f64,
    q: &DVector<f64>,
    v: &DVector<f64>,
    qdot: &DVector<f64>,
    rows: &[usize],
) -> Vec<f64> {
    rows.iter()
        .map(|&i| {
            central1(
                &|tau| {
                    let qt = q + qdot * tau;
                    momentum_component(sys, t + tau, &qt, v, i)
                },
                t,
            )
        })
        .collect()
}

fn finite_vec(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn finite_mat(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

fn infinity_norm_vec(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

fn infinity_norm_mat(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

fn check_shapes(
    sys: &LagrangianSystem,
    t: f64,
    q: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<(), NonholonomicError> {
    if q.len() != sys.n || v.len() != sys.n {
        return Err(NonholonomicError::Shape {
            what: format!(
                "state has lengths q = {}, v = {} but the system declares n = {}",
                q.len(),
                v.len(),
                sys.n
            ),
        });
    }
    if !finite_vec(q) || !finite_vec(v) {
        return Err(NonholonomicError::NonFinite {
            what: "state".to_string(),
        });
    }
    let a = (sys.constraint_matrix)(t, q, v);
    if a.nrows() != sys.m || a.ncols() != sys.n {
        return Err(NonholonomicError::Shape {
            what: format!(
                "constraint matrix is {}x{} but the system declares {}x{}",
                a.nrows(),
                a.ncols(),
                sys.m,
                sys.n
            ),
        });
    }
    let b = (sys.constraint_offset)(t, q, v);
    if b.len() != sys.m {
        return Err(NonholonomicError::Shape {
            what: format!(
                "constraint offset has length {} but the system declares m = {}",
                b.len(),
                sys.m
            ),
        });
    }
    let f = (sys.external_force)(t, q, v);
    if f.len() != sys.n {
        return Err(NonholonomicError::Shape {
            what: format!(
                "external force has length {} but the system declares n = {}",
                f.len(),
                sys.n
            ),
        });
    }
    Ok(())
}

/// Energy `dL/dv . v - L` of the abstract system.
pub fn energy(sys: &LagrangianSystem, t: f64, q: &DVector<f64>, v: &DVector<f64>) -> f64 {
    let p = grad_v(sys, t, q, v);
    p.dot(v) - (sys.lagrangian)(t, q, v)
}

/// Kinematic constraint residual `A v + B`.
pub fn constraint_residual(
    sys: &LagrangianSystem,
    t: f64,
    q: &DVector<f64>,
    v: &DVector<f64>,
) -> DVector<f64> {
    let a = (sys.constraint_matrix)(t, q, v);
    let b = (sys.constraint_offset)(t, q, v);
    &a * v + b
}

fn rank_check(a: &DMatrix<f64>) -> Result<(), NonholonomicError> {
    if a.nrows() == 0 {
        return Ok(());
    }
    let svd = a.clone().svd(false, false);
    let sigma_max = svd.singular_values.iter().fold(0.0_f64, |acc, s| acc.max(*s));
    let sigma_min = svd
        .singular_values
        .iter()
        .fold(f64::INFINITY, |acc, s| acc.min(*s));
    if sigma_min <= RANK_TOL * sigma_max.max(1.0) {
        return Err(NonholonomicError::RankDeficient {
            sigma_min,
            sigma_max,
        });
    }
    Ok(())
}

fn is_near_singular(mat: &DMatrix<f64>) -> bool {
    let svd = mat.clone().svd(false, false);
    let sigma_max = svd.singular_values.iter().fold(0.0_f64, |acc, s| acc.max(*s));
    let sigma_min = svd
        .singular_values
        .iter()
        .fold(f64::INFINITY, |acc, s| acc.min(*s));
    sigma_min <= NULL_TOL * sigma_max.max(1.0)
}

fn null_directions(mat: &DMatrix<f64>) -> Vec<Vec<f64>> {
    let svd = mat.clone().svd(false, true);
    let values = &svd.singular_values;
    let sigma_max = values.iter().fold(0.0_f64, |acc, s| acc.max(*s));
    let v_t = svd.v_t.expect("singular vectors were requested");
    let mut out = Vec::new();
    for i in 0..values.len() {
        if values[i] <= NULL_TOL * sigma_max.max(1.0) {
            out.push(v_t.row(i).iter().copied().collect());
        }
    }
    if out.is_empty() {
        // The factorization refused to solve even though no singular value
        // cleared the threshold; report the weakest direction.
        let mut weakest = 0;
        for i in 0..values.len() {
            if values[i] < values[weakest] {
                weakest = i;
            }
        }
        out.push(v_t.row(weakest).iter().copied().collect());
    }
    out
}

/// Time derivative of the kinematic conditions along the flow, excluding the
/// acceleration term: `d/dt (A v + B)` evaluated with `v` frozen.
fn constraint_flow_rate(
    sys: &LagrangianSystem,
    t: f64,
    q: &DVector<f64>,
    v: &DVector<f64>,
    qdot: &DVector<f64>,
) -> DVector<f64> {
    DVector::from_fn(sys.m, |r, _| {
        central1(
            &|tau| {
                let qt = q + qdot * tau;
                let a = (sys.constraint_matrix)(t + tau, &qt, v);
                let b = (sys.constraint_offset)(t + tau, &qt, v);
                (a.row(r) * v)[(0, 0)] + b[r]
            },
            t,
        )
    })
}

/// Velocity Jacobian of the kinematic conditions `A v + B`.
fn constraint_velocity_jacobian(
    sys: &LagrangianSystem,
    t: f64,
    q: &DVector<f64>,
    v: &DVector<f64>,
) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(sys.m, sys.n);
    for j in 0..sys.n {
        for r in 0..sys.m {
            let col = central1(
                &|d| {
                    let mut vv = v.clone();
                    vv[j] += d;
                    let a = (sys.constraint_matrix)(t, q, &vv);
                    let b = (sys.constraint_offset)(t, q, &vv);
                    (a.row(r) * &vv)[(0, 0)] + b[r]
                },
                v[j],
            );
            jac[(r, j)] = col;
        }
    }
    jac
}

/// Solve for the acceleration and constraint multipliers at one state.
///
/// The state is expected to satisfy the kinematic conditions; the solve
/// enforces their time derivative. The returned multiplier vector has one
/// entry per constraint row.
pub fn solve_accel(
    sys: &LagrangianSystem,
    t: f64,
    q: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>), NonholonomicError> {
    check_shapes(sys, t, q, v)?;
    let a = (sys.constraint_matrix)(t, q, v);
    if !finite_mat(&a) {
        return Err(NonholonomicError::NonFinite {
            what: "constraint matrix".to_string(),
        });
    }
    rank_check(&a)?;
    let mass = mass_matrix(sys, t, q, v);
    if !finite_mat(&mass) {
        return Err(NonholonomicError::NonFinite {
            what: "velocity Hessian".to_string(),
        });
    }
    let mass_scale = infinity_norm_mat(&mass).max(1.0);
    let degenerate: Vec<usize> = (0..sys.n)
        .filter(|&i| {
            let row_max = (0..sys.n).fold(0.0_f64, |acc, j| acc.max(mass[(i, j)].abs()));
            row_max <= DEGENERATE_ROW_TOL * mass_scale
        })
        .collect();
    if degenerate.is_empty() {
        solve_inertial(sys, t, q, v, &mass)
    } else {
        solve_degenerate(sys, t, q, v, &mass, &degenerate)
    }
}

/// Saddle solve for systems whose velocity Hessian has no vanishing row.
fn solve_inertial(
    sys: &LagrangianSystem,
    t: f64,
    q: &DVector<f64>,
    v: &DVector<f64>,
    mass: &DMatrix<f64>,
) -> Result<(DVector<f64>, DVector<f64>), NonholonomicError> {
    let n = sys.n;
    let m = sys.m;
    let a = (sys.constraint_matrix)(t, q, v);
    let f = (sys.external_force)(t, q, v);
    let gq = grad_q(sys, t, q, v);
    let all_rows: Vec<usize> = (0..n).collect();
    let pdot_drift = momentum_flow_rate(sys, t, q, v, v, &all_rows);
    let jac_v = constraint_velocity_jacobian(sys, t, q, v);
    let cdot_drift = constraint_flow_rate(sys, t, q, v, v);

    let dim = n + m;
    let mut lhs = DMatrix::zeros(dim, dim);
    lhs.view_mut((0, 0), (n, n)).copy_from(mass);
    if m > 0 {
        lhs.view_mut((0, n), (n, m)).copy_from(&(-a.transpose()));
        lhs.view_mut((n, 0), (m, n)).copy_from(&jac_v);
    }
    let mut rhs = DVector::zeros(dim);
    for i in 0..n {
        rhs[i] = f[i] + gq[i] - pdot_drift[i];
    }
    for r in 0..m {
        rhs[n + r] = -cdot_drift[r];
    }
    if !finite_mat(&lhs) || !finite_vec(&rhs) {
        return Err(NonholonomicError::NonFinite {
            what: "acceleration system".to_string(),
        });
    }
    if is_near_singular(&lhs) {
        return Err(NonholonomicError::SingularSaddle {
            null_directions: null_directions(&lhs),
        });
    }

    let lu = lhs.clone().full_piv_lu();
    if !lu.is_invertible() {
        return Err(NonholonomicError::SingularSaddle {
            null_directions: null_directions(&lhs),
        });
    }
    let mut sol = match lu.solve(&rhs) {
        Some(sol) => sol,
        None => {
            return Err(NonholonomicError::SingularSaddle {
                null_directions: null_directions(&lhs),
            })
        }
    };
    let tol = SOLVE_TOL * infinity_norm_vec(&rhs).max(1.0);
    let mut residual = infinity_norm_vec(&(&lhs * &sol - &rhs));
    let mut iterations = 0;
    while residual > tol && iterations < MAX_ITER {
        let defect = &lhs * &sol - &rhs;
        let correction = match lu.solve(&defect) {
            Some(c) => c,
            None => break,
        };
        let refined = &sol - &correction;
        let refined_residual = infinity_norm_vec(&(&lhs * &refined - &rhs));
        if refined_residual >= residual {
            break;
        }
        sol = refined;
        residual = refined_residual;
        iterations += 1;
    }
    if residual > tol {
        // A full-rank constraint block cannot rescue a Hessian whose null
        // space the constraints do not see; report those directions rather
        // than regularizing.
        if is_near_singular(&lhs) {
            return Err(NonholonomicError::SingularSaddle {
                null_directions: null_directions(&lhs),
            });
        }
        return Err(NonholonomicError::NewtonDiverged {
            iterations,
            residual,
        });
    }
    let accel = sol.rows(0, n).clone_owned();
    let lambda = sol.rows(n, m).clone_owned();
    Ok((accel, lambda))
}

/// Algebraic residual of the degenerate force-balance rows and the
/// kinematic conditions, as a function of the unknown degenerate
/// velocities and multipliers packed into `u`. The second vector collects
/// the magnitudes of the terms entering each row, which set the scale
/// against which that row can meaningfully be driven to zero.
fn degenerate_residual_scaled(
    sys: &LagrangianSystem,
    t: f64,
    q: &DVector<f64>,
    v_base: &DVector<f64>,
    degenerate: &[usize],
    u: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let nd = degenerate.len();
    let m = sys.m;
    let mut vf = v_base.clone();
    for (slot, &row) in degenerate.iter().enumerate() {
        vf[row] = u[slot];
    }
    let a = (sys.constraint_matrix)(t, q, &vf);
    let b = (sys.constraint_offset)(t, q, &vf);
    let f = (sys.external_force)(t, q, &vf);
    let pdot = momentum_flow_rate(sys, t, q, &vf, &vf, degenerate);
    let mut out = DVector::zeros(nd + m);
    let mut scales = DVector::from_element(nd + m, 1.0);
    for (slot, &row) in degenerate.iter().enumerate() {
        let mut coupling = 0.0;
        let mut coupling_mag = 0.0;
        for r in 0..m {
            coupling += u[nd + r] * a[(r, row)];
            coupling_mag += (u[nd + r] * a[(r, row)]).abs();
        }
        let gq_row = grad_q_component(sys, t, q, &vf, row);
        out[slot] = pdot[slot] - gq_row - coupling - f[row];
        scales[slot] += pdot[slot].abs() + gq_row.abs() + coupling_mag + f[row].abs();
    }
    for r in 0..m {
        let mut acc = 0.0;
        let mut mag = 0.0;
        for i in 0..sys.n {
            acc += a[(r, i)] * vf[i];
            mag += (a[(r, i)] * vf[i]).abs();
        }
        out[nd + r] = acc + b[r];
        scales[nd + r] += mag + b[r].abs();
    }
    (out, scales)
}

fn degenerate_residual(
    sys: &LagrangianSystem,
    t: f64,
    q: &DVector<f64>,
    v_base: &DVector<f64>,
    degenerate: &[usize],
    u: &DVector<f64>,
) -> DVector<f64> {
    degenerate_residual_scaled(sys, t, q, v_base, degenerate, u).0
}

fn degenerate_jacobian(
    sys: &LagrangianSystem,
    t: f64,
    q: &DVector<f64>,
    v_base: &DVector<f64>,
    degenerate: &[usize],
    u: &DVector<f64>,
) -> DMatrix<f64> {
    let dim = u.len();
    let mut jac = DMatrix::zeros(dim, dim);
    for j in 0..dim {
        let col = DVector::from_fn(dim, |r, _| {
            central1(
                &|d| {
                    let mut uu = u.clone();
                    uu[j] += d;
                    degenerate_residual(sys, t, q, v_base, degenerate, &uu)[r]
                },
                u[j],
            )
        });
        jac.set_column(j, &col);
    }
    jac
}

struct VelocitySolve {
    v_full: DVector<f64>,
    lambda: DVector<f64>,
    u: DVector<f64>,
    jacobian: DMatrix<f64>,
}

/// Largest residual entry measured against its per-row resolution limit.
///
/// Each row is compared against the magnitude of the terms that formed it,
/// floored by the roundoff that centered differences of the Lagrangian can
/// resolve at all. A value at or below one means every row is as converged
/// as its data allows.
fn scaled_defect(residual: &DVector<f64>, scales: &DVector<f64>, fd_floor: f64) -> f64 {
    let mut worst = 0.0_f64;
    for r in 0..residual.len() {
        let tol = (NEWTON_ROW_TOL * scales[r]).max(fd_floor);
        worst = worst.max(residual[r].abs() / tol);
    }
    worst
}

/// Newton iteration for the degenerate velocities and multipliers.
fn newton_velocity(
    sys: &LagrangianSystem,
    t: f64,
    q: &DVector<f64>,
    v_base: &DVector<f64>,
    degenerate: &[usize],
) -> Result<VelocitySolve, NonholonomicError> {
    let nd = degenerate.len();
    let m = sys.m;
    let dim = nd + m;
    let mut u = DVector::zeros(dim);
    for (slot, &row) in degenerate.iter().enumerate() {
        u[slot] = v_base[row];
    }
    for r in 0..m {
        u[nd + r] = 1.0;
    }
    let lag_mag = (sys.lagrangian)(t, q, v_base).abs();
    let fd_floor = 4.0 * lag_mag.max(1.0) * f64::EPSILON.powf(0.8);
    let (mut residual, mut scales) =
        degenerate_residual_scaled(sys, t, q, v_base, degenerate, &u);
    if !finite_vec(&residual) {
        return Err(NonholonomicError::NonFinite {
            what: "degenerate force balance".to_string(),
        });
    }
    let mut jac = degenerate_jacobian(sys, t, q, v_base, degenerate, &u);
    let mut lu = jac.clone().full_piv_lu();
    let mut refresh_next = false;
    let mut defect = scaled_defect(&residual, &scales, fd_floor);
    for iteration in 0..MAX_ITER {
        if defect <= 1.0 {
            return Ok(package_velocity_solve(v_base, degenerate, u, jac, m));
        }
        if refresh_next {
            jac = degenerate_jacobian(sys, t, q, v_base, degenerate, &u);
            lu = jac.clone().full_piv_lu();
            refresh_next = false;
        }
        if !lu.is_invertible() {
            return Err(NonholonomicError::SingularSaddle {
                null_directions: null_directions(&jac),
            });
        }
        let step = match lu.solve(&residual) {
            Some(s) => s,
            None => {
                return Err(NonholonomicError::SingularSaddle {
                    null_directions: null_directions(&jac),
                })
            }
        };
        let mut accepted = false;
        let mut alpha = 1.0;
        for _ in 0..5 {
            let candidate = &u - &step * alpha;
            let (cand_res, cand_scales) =
                degenerate_residual_scaled(sys, t, q, v_base, degenerate, &candidate);
            if finite_vec(&cand_res)
                && scaled_defect(&cand_res, &cand_scales, fd_floor) < defect
            {
                u = candidate;
                residual = cand_res;
                scales = cand_scales;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            // The frozen Jacobian stopped making progress; rebuild it once
            // at the current iterate and try again.
            jac = degenerate_jacobian(sys, t, q, v_base, degenerate, &u);
            lu = jac.clone().full_piv_lu();
            let retry = match lu.solve(&residual) {
                Some(s) => s,
                None => {
                    return Err(NonholonomicError::SingularSaddle {
                        null_directions: null_directions(&jac),
                    })
                }
            };
            let candidate = &u - &retry;
            let (cand_res, cand_scales) =
                degenerate_residual_scaled(sys, t, q, v_base, degenerate, &candidate);
            if finite_vec(&cand_res)
                && scaled_defect(&cand_res, &cand_scales, fd_floor) < defect
            {
                u = candidate;
                residual = cand_res;
                scales = cand_scales;
                defect = scaled_defect(&residual, &scales, fd_floor);
                continue;
            }
            // No direction improves the residual any further. Within the
            // stall band this is the roundoff floor of the centered
            // differences, which undershoots the a-priori floor estimate
            // when the Lagrangian sums large opposing terms; beyond the
            // band it is a genuine failure.
            if defect <= STALL_ACCEPT {
                return Ok(package_velocity_solve(v_base, degenerate, u, jac, m));
            }
            if is_near_singular(&jac) {
                return Err(NonholonomicError::SingularSaddle {
                    null_directions: null_directions(&jac),
                });
            }
            return Err(NonholonomicError::NewtonDiverged {
                iterations: iteration,
                residual: infinity_norm_vec(&residual),
            });
        }
        if alpha < 1.0 {
            refresh_next = true;
        }
        let new_defect = scaled_defect(&residual, &scales, fd_floor);
        if new_defect >= 0.9 * defect && new_defect <= STALL_ACCEPT {
            // Progress has slowed to a crawl inside the stall band; the
            // iterate is as converged as the evaluations allow.
            return Ok(package_velocity_solve(v_base, degenerate, u, jac, m));
        }
        defect = new_defect;
    }
    if defect <= STALL_ACCEPT {
        return Ok(package_velocity_solve(v_base, degenerate, u, jac, m));
    }
    Err(NonholonomicError::NewtonDiverged {
        iterations: MAX_ITER,
        residual: infinity_norm_vec(&residual),
    })
}

fn package_velocity_solve(
    v_base: &DVector<f64>,
    degenerate: &[usize],
    u: DVector<f64>,
    jacobian: DMatrix<f64>,
    m: usize,
) -> VelocitySolve {
    let nd = degenerate.len();
    let mut v_full = v_base.clone();
    for (slot, &row) in degenerate.iter().enumerate() {
        v_full[row] = u[slot];
    }
    let lambda = u.rows(nd, m).clone_owned();
    VelocitySolve {
        v_full,
        lambda,
        u,
        jacobian,
    }
}

/// Acceleration solve for systems with vanishing velocity-Hessian rows.
fn solve_degenerate(
    sys: &LagrangianSystem,
    t: f64,
    q: &DVector<f64>,
    v: &DVector<f64>,
    mass: &DMatrix<f64>,
    degenerate: &[usize],
) -> Result<(DVector<f64>, DVector<f64>), NonholonomicError> {
    let n = sys.n;
    let m = sys.m;
    let nd = degenerate.len();
    let inertial: Vec<usize> = (0..n).filter(|i| !degenerate.contains(i)).collect();

    let solve = newton_velocity(sys, t, q, v, degenerate)?;
    let v_full = solve.v_full;
    let lambda = solve.lambda;

    // Accelerations of the inertial directions from their force balance.
    let mut accel = DVector::zeros(n);
    let mut a_inertial = DVector::zeros(inertial.len());
    if !inertial.is_empty() {
        let a = (sys.constraint_matrix)(t, q, &v_full);
        let f = (sys.external_force)(t, q, &v_full);
        let pdot = momentum_flow_rate(sys, t, q, &v_full, &v_full, &inertial);
        let mut rhs = DVector::zeros(inertial.len());
        for (slot, &row) in inertial.iter().enumerate() {
            let mut coupling = 0.0;
            for r in 0..m {
                coupling += lambda[r] * a[(r, row)];
            }
            let gq_row = grad_q_component(sys, t, q, &v_full, row);
            rhs[slot] = f[row] + gq_row + coupling - pdot[slot];
        }
        let mut block = DMatrix::zeros(inertial.len(), inertial.len());
        for (si, &ri) in inertial.iter().enumerate() {
            for (sj, &rj) in inertial.iter().enumerate() {
                block[(si, sj)] = mass[(ri, rj)];
            }
        }
        let lu = block.full_piv_lu();
        if !lu.is_invertible() {
            return Err(NonholonomicError::MassBlockSingular);
        }
        a_inertial = match lu.solve(&rhs) {
            Some(sol) => sol,
            None => return Err(NonholonomicError::MassBlockSingular),
        };
        for (slot, &row) in inertial.iter().enumerate() {
            accel[row] = a_inertial[slot];
        }
    }

    // Accelerations of the degenerate directions by differentiating the
    // algebraic system along the flow: the residual stays zero, so the
    // unknown rates solve J du/dt = -(flow derivative at fixed u).
    let mut v_dir = DVector::zeros(n);
    for (slot, &row) in inertial.iter().enumerate() {
        v_dir[row] = a_inertial[slot];
    }
    let u_star = solve.u;
    let flow = DVector::from_fn(nd + m, |r, _| {
        central1(
            &|tau| {
                let qt = q + &v_full * tau;
                let vt = v + &v_dir * tau;
                degenerate_residual(sys, t + tau, &qt, &vt, degenerate, &u_star)[r]
            },
            t,
        )
    });
    if !finite_vec(&flow) {
        return Err(NonholonomicError::NonFinite {
            what: "flow derivative of the degenerate system".to_string(),
        });
    }
    let lu = solve.jacobian.clone().full_piv_lu();
    if !lu.is_invertible() {
        return Err(NonholonomicError::SingularSaddle {
            null_directions: null_directions(&solve.jacobian),
        });
    }
    let rates = match lu.solve(&(-flow)) {
        Some(r) => r,
        None => {
            return Err(NonholonomicError::SingularSaddle {
                null_directions: null_directions(&solve.jacobian),
            })
        }
    };
    for (slot, &row) in degenerate.iter().enumerate() {
        accel[row] = rates[slot];
    }
    Ok((accel, lambda))
}

/// Complete a velocity guess into one satisfying the algebraic rows.
///
/// For systems whose velocity Hessian has vanishing rows, the velocities of
/// those directions are determined by the state rather than carried as
/// independent data. This resolves them, together with the multipliers, from
/// the guess in `v`. For systems without vanishing rows the velocities are
/// already free data and are returned unchanged along with the multipliers
/// of the acceleration solve.
pub fn consistent_velocities(
    sys: &LagrangianSystem,
    t: f64,
    q: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>), NonholonomicError> {
    check_shapes(sys, t, q, v)?;
    let mass = mass_matrix(sys, t, q, v);
    if !finite_mat(&mass) {
        return Err(NonholonomicError::NonFinite {
            what: "velocity Hessian".to_string(),
        });
    }
    let mass_scale = infinity_norm_mat(&mass).max(1.0);
    let degenerate: Vec<usize> = (0..sys.n)
        .filter(|&i| {
            let row_max = (0..sys.n).fold(0.0_f64, |acc, j| acc.max(mass[(i, j)].abs()));
            row_max <= DEGENERATE_ROW_TOL * mass_scale
        })
        .collect();
    if degenerate.is_empty() {
        let (_, lambda) = solve_accel(sys, t, q, v)?;
        return Ok((v.clone(), lambda));
    }
    let solve = newton_velocity(sys, t, q, v, &degenerate)?;
    Ok((solve.v_full, solve.lambda))
}

/// Project a velocity onto the kinematic conditions by least-squares
/// corrections `v <- v + A' (A A')^(-1) (-B - A v)`, repeated because the
/// constraint data may itself depend on the velocity.
pub fn project_velocity(
    sys: &LagrangianSystem,
    t: f64,
    q: &DVector<f64>,
    v: &mut DVector<f64>,
    tolerance: f64,
) -> Result<f64, NonholonomicError> {
    if sys.m == 0 {
        return Ok(0.0);
    }
    let mut last_residual = f64::INFINITY;
    for _ in 0..PROJECTION_SWEEPS {
        let a = (sys.constraint_matrix)(t, q, v);
        let b = (sys.constraint_offset)(t, q, v);
        if !finite_mat(&a) || !finite_vec(&b) {
            return Err(NonholonomicError::NonFinite {
                what: "constraint data during projection".to_string(),
            });
        }
        let av = &a * &*v;
        let residual_vec = &av + &b;
        let scale = (0..sys.m)
            .map(|r| av[r].abs() + b[r].abs())
            .fold(1.0_f64, f64::max);
        last_residual = infinity_norm_vec(&residual_vec);
        if last_residual <= tolerance * scale {
            return Ok(last_residual);
        }
        let gram = &a * a.transpose();
        let lu = gram.full_piv_lu();
        if !lu.is_invertible() {
            return Err(NonholonomicError::RankDeficient {
                sigma_min: 0.0,
                sigma_max: infinity_norm_mat(&a),
            });
        }
        let correction = match lu.solve(&(-residual_vec)) {
            Some(c) => c,
            None => {
                return Err(NonholonomicError::ProjectionStalled {
                    residual: last_residual,
                })
            }
        };
        *v += a.transpose() * correction;
    }
    let final_residual = infinity_norm_vec(&constraint_residual(sys, t, q, v));
    if final_residual <= last_residual.max(tolerance) {
        Ok(final_residual)
    } else {
        Err(NonholonomicError::ProjectionStalled {
            residual: final_residual,
        })
    }
}

/// Integrate the abstract system with a fixed-step fourth-order Runge-Kutta
/// scheme, projecting the velocity back onto the kinematic conditions after
/// every step.
pub fn integrate_abstract(
    sys: &LagrangianSystem,
    state0: &AbstractState,
    t_final: f64,
    options: &AbstractOptions,
) -> Result<AbstractTrajectory, NonholonomicError> {
    if !(options.h > 0.0) || !options.h.is_finite() {
        return Err(NonholonomicError::Options {
            what: format!("step size {} must be positive and finite", options.h),
        });
    }
    if !(options.projection_tolerance > 0.0) {
        return Err(NonholonomicError::Options {
            what: "projection tolerance must be positive".to_string(),
        });
    }
    if !t_final.is_finite() || t_final < state0.t {
        return Err(NonholonomicError::Options {
            what: format!("final time {} precedes the initial time {}", t_final, state0.t),
        });
    }

    let mut state = state0.clone();
    project_velocity(
        sys,
        state.t,
        &state.q,
        &mut state.v,
        options.projection_tolerance,
    )?;

    let mut states = Vec::new();
    let mut multipliers = Vec::new();
    let mut energies = Vec::new();
    let time_slack = 1e-12 * t_final.abs().max(1.0);

    loop {
        let (a1, lambda) = solve_accel(sys, state.t, &state.q, &state.v)?;
        multipliers.push(lambda);
        energies.push(energy(sys, state.t, &state.q, &state.v));
        states.push(state.clone());

        if state.t >= t_final - time_slack {
            break;
        }
        let h = options.h.min(t_final - state.t);

        let k1q = state.v.clone();
        let q2 = &state.q + &k1q * (0.5 * h);
        let v2 = &state.v + &a1 * (0.5 * h);
        let (a2, _) = solve_accel(sys, state.t + 0.5 * h, &q2, &v2)?;
        let q3 = &state.q + &v2 * (0.5 * h);
        let v3 = &state.v + &a2 * (0.5 * h);
        let (a3, _) = solve_accel(sys, state.t + 0.5 * h, &q3, &v3)?;
        let q4 = &state.q + &v3 * h;
        let v4 = &state.v + &a3 * h;
        let (a4, _) = solve_accel(sys, state.t + h, &q4, &v4)?;

        let q_next = &state.q + (&k1q + &v2 * 2.0 + &v3 * 2.0 + &v4) * (h / 6.0);
        let mut v_next = &state.v + (&a1 + &a2 * 2.0 + &a3 * 2.0 + &a4) * (h / 6.0);
        if !finite_vec(&q_next) || !finite_vec(&v_next) {
            return Err(NonholonomicError::NonFinite {
                what: format!("state after the step ending at t = {}", state.t + h),
            });
        }
        let t_next = state.t + h;
        project_velocity(sys, t_next, &q_next, &mut v_next, options.projection_tolerance)?;
        state = AbstractState {
            t: t_next,
            q: q_next,
            v: v_next,
        };
    }

    Ok(AbstractTrajectory {
        states,
        multipliers,
        energies,
    })
}

/// Build the abstract form of a single-compartment network.
///
/// Supported classes are the closed-volume single compartment and the
/// piston-coupled compartment; the multi-compartment classes have no
/// abstract embedding here. The abstract configuration stacks the network
/// quantities in the order entropy, moles, then any mechanical coordinates,
/// then the bookkeeping slots for produced entropy and the two
/// thermodynamic displacements.
///
/// The single constraint row couples every variation that carries friction,
/// port exchange, or entropy production. Its offset equals minus the matter
/// power, so the port potential entering the offset is the molar chemical
/// potential shifted down by the kinetic energy of the stream.
pub fn embed_open_system(model: &NetworkModel) -> Result<LagrangianSystem, NonholonomicError> {
    match model.system_class {
        SystemClass::SimpleSingle => embed_single(model),
        SystemClass::SimpleMechanical => embed_mechanical(model),
        other => Err(NonholonomicError::UnsupportedClass {
            class: other.name(),
        }),
    }
}

fn embed_single(model: &NetworkModel) -> Result<LagrangianSystem, NonholonomicError> {
    if model.compartments.len() != 1 {
        return Err(NonholonomicError::Shape {
            what: format!(
                "single-compartment embedding got {} compartments",
                model.compartments.len()
            ),
        });
    }
    let vol = model.compartments[0].vol;
    let gas = model.gas;
    let lagrangian: ScalarField = Box::new(move |_t, z, zd| {
        let s = z[0];
        let n = z[1];
        let sigma = z[2];
        let gamma_dot = zd[3];
        let w_dot = zd[4];
        match gas.internal_energy_total(s, n, vol) {
            Ok(u) => -u + w_dot * n + (s - sigma) * gamma_dot,
            Err(_) => f64::NAN,
        }
    });

    let matrix_model = model.clone();
    let constraint_matrix: MatrixField = Box::new(move |t, z, _zd| {
        match single_port_sums(&matrix_model, t, z) {
            Ok((temp, j_sum, js_sum, _)) => {
                DMatrix::from_row_slice(1, 5, &[0.0, 0.0, temp, js_sum, j_sum])
            }
            Err(_) => DMatrix::from_element(1, 5, f64::NAN),
        }
    });

    let offset_model = model.clone();
    let constraint_offset: VectorField = Box::new(move |t, z, _zd| {
        match single_port_sums(&offset_model, t, z) {
            Ok((_, _, _, power)) => DVector::from_element(1, -power),
            Err(_) => DVector::from_element(1, f64::NAN),
        }
    });

    let external_force: VectorField = Box::new(move |_t, _z, _zd| DVector::zeros(5));

    Ok(LagrangianSystem {
        n: 5,
        m: 1,
        lagrangian,
        constraint_matrix,
        constraint_offset,
        external_force,
    })
}

/// Temperature, total mole flux, total entropy flux, and matter power of the
/// single-compartment network at a configuration given in embedding order.
fn single_port_sums(
    model: &NetworkModel,
    t: f64,
    z: &DVector<f64>,
) -> Result<(f64, f64, f64, f64), DynamicsError> {
    let y: Vec<f64> = z.iter().copied().collect();
    let views = dynamics::compartment_states(model, &y)?;
    let temp = views[0].t;
    let mut j_sum = 0.0;
    let mut js_sum = 0.0;
    let mut power = 0.0;
    for port in &model.ports {
        let r = dynamics::resolve_port(model, t, &y, port)?;
        j_sum += r.j;
        js_sum += r.j_s;
        power += r.j * r.mu_a + r.j_s * r.t_a;
    }
    Ok((temp, j_sum, js_sum, power))
}

fn embed_mechanical(model: &NetworkModel) -> Result<LagrangianSystem, NonholonomicError> {
    if model.compartments.len() != 1 {
        return Err(NonholonomicError::Shape {
            what: format!(
                "piston embedding got {} compartments",
                model.compartments.len()
            ),
        });
    }
    let mech = model
        .mechanics
        .clone()
        .ok_or(NonholonomicError::Dynamics(DynamicsError::MissingMechanics))?;
    let gas = model.gas;
    let piston_mass = mech.m;
    let section = mech.a_section;
    let molar_mass = gas.m0;

    let lagrangian: ScalarField = Box::new(move |_t, z, zd| {
        let s = z[0];
        let n = z[1];
        let q_pos = z[2];
        let sigma = z[4];
        let v_q = zd[2];
        let v_x = zd[3];
        let gamma_dot = zd[5];
        let w_dot = zd[6];
        let vol = section * q_pos;
        match gas.internal_energy_total(s, n, vol) {
            Ok(u) => {
                0.5 * piston_mass * v_q * v_q + 0.5 * molar_mass * n * v_x * v_x - u
                    + w_dot * n
                    + (s - sigma) * gamma_dot
            }
            Err(_) => f64::NAN,
        }
    });

    let matrix_model = model.clone();
    let constraint_matrix: MatrixField = Box::new(move |t, z, zd| {
        match mechanical_port_sums(&matrix_model, t, z, zd) {
            Ok(sums) => DMatrix::from_row_slice(
                1,
                7,
                &[
                    0.0,
                    0.0,
                    sums.friction_q,
                    sums.friction_x + sums.momentum_flux,
                    sums.temp,
                    sums.js_sum,
                    sums.j_sum,
                ],
            ),
            Err(_) => DMatrix::from_element(1, 7, f64::NAN),
        }
    });

    let offset_model = model.clone();
    let constraint_offset: VectorField = Box::new(move |t, z, zd| {
        match mechanical_port_sums(&offset_model, t, z, zd) {
            Ok(sums) => DVector::from_element(1, -sums.matter_power),
            Err(_) => DVector::from_element(1, f64::NAN),
        }
    });

    let f_ext_q = mech.f_ext_q.clone();
    let f_ext_x = mech.f_ext_x.clone();
    let external_force: VectorField = Box::new(move |t, _z, _zd| {
        let mut f = DVector::zeros(7);
        f[2] = f_ext_q.eval(t);
        f[3] = f_ext_x.eval(t);
        f
    });

    Ok(LagrangianSystem {
        n: 7,
        m: 1,
        lagrangian,
        constraint_matrix,
        constraint_offset,
        external_force,
    })
}

struct MechanicalSums {
    temp: f64,
    j_sum: f64,
    js_sum: f64,
    friction_q: f64,
    friction_x: f64,
    momentum_flux: f64,
    matter_power: f64,
}

/// Port sums and friction forces of the piston network at an abstract
/// configuration and velocity.
fn mechanical_port_sums(
    model: &NetworkModel,
    t: f64,
    z: &DVector<f64>,
    zd: &DVector<f64>,
) -> Result<MechanicalSums, DynamicsError> {
    let mech = model.mechanics.as_ref().ok_or(DynamicsError::MissingMechanics)?;
    let y = vec![z[0], z[1], z[2], zd[2], z[3], zd[3], z[4], z[5], z[6]];
    let views = dynamics::compartment_states(model, &y)?;
    let temp = views[0].t;
    let molar_mass = model.gas.m0;
    let relative = zd[2] - zd[3];
    let friction_q = -mech.lambda_fr * relative;
    let friction_x = mech.lambda_fr * relative;
    let mut j_sum = 0.0;
    let mut js_sum = 0.0;
    let mut momentum_flux = 0.0;
    let mut matter_power = 0.0;
    for port in &model.ports {
        let r = dynamics::resolve_port(model, t, &y, port)?;
        j_sum += r.j;
        js_sum += r.j_s;
        momentum_flux += molar_mass * r.j * r.v_a;
        matter_power += 0.5 * molar_mass * r.j * r.v_a * r.v_a + r.j * r.mu_a + r.j_s * r.t_a;
    }
    Ok(MechanicalSums {
        temp,
        j_sum,
        js_sum,
        friction_q,
        friction_x,
        momentum_flux,
        matter_power,
    })
}

/// Build an abstract state from a network state, filling the velocities
/// from the network equations of motion.
pub fn embed_initial_state(
    model: &NetworkModel,
    t0: f64,
    y0: &[f64],
) -> Result<AbstractState, NonholonomicError> {
    let dy = dynamics::rhs(model, t0, y0)?;
    let layout = model.layout();
    match model.system_class {
        SystemClass::SimpleSingle => Ok(AbstractState {
            t: t0,
            q: DVector::from_column_slice(y0),
            v: DVector::from_column_slice(&dy),
        }),
        SystemClass::SimpleMechanical => {
            let q = DVector::from_vec(vec![
                y0[layout.s()],
                y0[layout.n_k(0)],
                y0[layout.q()],
                y0[layout.x()],
                y0[layout.sigma()],
                y0[layout.gamma()],
                y0[layout.w_k(0)],
            ]);
            let v = DVector::from_vec(vec![
                dy[layout.s()],
                dy[layout.n_k(0)],
                y0[layout.qdot()],
                y0[layout.xdot()],
                dy[layout.sigma()],
                dy[layout.gamma()],
                dy[layout.w_k(0)],
            ]);
            Ok(AbstractState { t: t0, q, v })
        }
        other => Err(NonholonomicError::UnsupportedClass {
            class: other.name(),
        }),
    }
}

/// Map an abstract state back to the network state layout.
pub fn abstract_to_network_state(
    model: &NetworkModel,
    state: &AbstractState,
) -> Result<Vec<f64>, NonholonomicError> {
    match model.system_class {
        SystemClass::SimpleSingle => Ok(state.q.iter().copied().collect()),
        SystemClass::SimpleMechanical => Ok(vec![
            state.q[0],
            state.q[1],
            state.q[2],
            state.v[2],
            state.q[3],
            state.v[3],
            state.q[4],
            state.q[5],
            state.q[6],
        ]),
        other => Err(NonholonomicError::UnsupportedClass {
            class: other.name(),
        }),
    }
}
