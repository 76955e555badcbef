//! Explicit time integration for network trajectories.
//!
//! Two schemes are provided: the classical fixed-step fourth-order
//! Runge-Kutta method and an adaptive embedded 5(4) pair with
//! error-proportional step control. Both enforce positivity guards by
//! halving the step when a stage or result leaves the physical domain
//! (positive moles, positive temperature, positive piston position), down
//! to the minimum step, at which point the trajectory is truncated with a
//! guard report rather than an error.
//!
//! Diagnostics stored on samples are recomputed from the sampled state,
//! never integrated separately, so they cannot drift from the state that
//! produced them.

use thiserror::Error;

use crate::dynamics::{self, Diagnostics, DynamicsError};
use crate::model::{NetworkModel, SystemState};

/// Integration scheme selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Classical fixed-step fourth-order Runge-Kutta.
    Rk4,
    /// Adaptive embedded 5(4) pair with error control.
    Rk45,
}

/// Options controlling [`integrate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrationOptions {
    pub method: Method,
    /// Initial (and, for the fixed-step method, nominal) step size.
    pub h0: f64,
    /// Smallest step the guards and error control may reach.
    pub h_min: f64,
    /// Largest step the error control may reach.
    pub h_max: f64,
    /// Absolute tolerance for the adaptive error test.
    pub abs_tol: f64,
    /// Relative tolerance for the adaptive error test.
    pub rel_tol: f64,
    /// Output sampling interval; zero records every accepted step.
    pub sample_dt: f64,
}

impl Default for IntegrationOptions {
    fn default() -> Self {
        Self {
            method: Method::Rk4,
            h0: 1e-3,
            h_min: 1e-9,
            h_max: 0.1,
            abs_tol: 1e-9,
            rel_tol: 1e-9,
            sample_dt: 0.0,
        }
    }
}

impl IntegrationOptions {
    fn validate(&self) -> Result<(), IntegrateError> {
        let ok_steps = self.h_min > 0.0
            && self.h_min <= self.h0
            && self.h0 <= self.h_max
            && self.h_max.is_finite();
        if !ok_steps {
            return Err(IntegrateError::Options {
                what: format!(
                    "step sizes must satisfy 0 < h_min <= h0 <= h_max, got {} / {} / {}",
                    self.h_min, self.h0, self.h_max
                ),
            });
        }
        if !(self.abs_tol > 0.0) || !(self.rel_tol > 0.0) {
            return Err(IntegrateError::Options {
                what: format!(
                    "tolerances must be positive, got abs {} and rel {}",
                    self.abs_tol, self.rel_tol
                ),
            });
        }
        if self.sample_dt < 0.0 || !self.sample_dt.is_finite() {
            return Err(IntegrateError::Options {
                what: format!("sampling interval {} must be zero or positive", self.sample_dt),
            });
        }
        Ok(())
    }
}

/// How a trajectory ended.
#[derive(Debug, Clone, PartialEq)]
pub enum Termination {
    /// The final time was reached.
    Completed,
    /// A positivity guard kept failing at the minimum step; `t` is the last
    /// accepted time, before the guarded quantity crossed its bound.
    GuardStop { reason: String, t: f64 },
    /// The error control pushed the step below the minimum.
    StepUnderflow { t: f64 },
}

/// One recorded point of a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub state: SystemState,
    pub diagnostics: Diagnostics,
}

/// An integrated trajectory with its termination status.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Samples in strictly increasing time order.
    pub samples: Vec<Sample>,
    pub termination: Termination,
}

impl Trajectory {
    /// Whether the full horizon was covered.
    pub fn completed(&self) -> bool {
        self.termination == Termination::Completed
    }
}

/// Errors that abort an integration outright.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum IntegrateError {
    #[error("invalid integration options: {what}")]
    Options { what: String },
    #[error("state left the finite domain at t = {t}")]
    NonFinite { t: f64, state: Vec<f64> },
    #[error("network evaluation failed at t = {t}: {source}")]
    Dynamics {
        t: f64,
        #[source]
        source: DynamicsError,
    },
}

/// Why a single step attempt could not be completed.
enum StepFailure {
    /// A stage state left the physical domain; retry with a smaller step.
    Guard(String),
    /// A structural evaluation error; abort.
    Fatal(DynamicsError),
    /// Non-finite numbers appeared.
    NonFinite,
}

/// Splits evaluation errors into those caused by the state leaving the
/// physical domain (recoverable by shrinking the step) and structural
/// errors (never recoverable).
fn classify(err: DynamicsError) -> StepFailure {
    match &err {
        DynamicsError::Compartment { .. }
        | DynamicsError::SharedTemperature { .. }
        | DynamicsError::MolesExhausted { .. }
        | DynamicsError::Geometry { .. } => StepFailure::Guard(err.to_string()),
        _ => StepFailure::Fatal(err),
    }
}

type RhsFn<'a> = dyn Fn(f64, &[f64]) -> Result<Vec<f64>, StepFailure> + 'a;
type GuardFn<'a> = dyn Fn(f64, &[f64]) -> Option<String> + 'a;

fn finite(y: &[f64]) -> bool {
    y.iter().all(|v| v.is_finite())
}

fn axpy(y: &[f64], h: f64, stages: &[(&Vec<f64>, f64)]) -> Vec<f64> {
    let mut out = y.to_vec();
    for (k, w) in stages {
        for (o, ki) in out.iter_mut().zip(k.iter()) {
            *o += h * w * ki;
        }
    }
    out
}

/// One classical fourth-order step. Returns the end state.
fn rk4_step(rhs: &RhsFn, t: f64, y: &[f64], h: f64) -> Result<Vec<f64>, StepFailure> {
    let k1 = rhs(t, y)?;
    let k2 = rhs(t + 0.5 * h, &axpy(y, h, &[(&k1, 0.5)]))?;
    let k3 = rhs(t + 0.5 * h, &axpy(y, h, &[(&k2, 0.5)]))?;
    let k4 = rhs(t + h, &axpy(y, h, &[(&k3, 1.0)]))?;
    let out = axpy(
        y,
        h / 6.0,
        &[(&k1, 1.0), (&k2, 2.0), (&k3, 2.0), (&k4, 1.0)],
    );
    if finite(&out) {
        Ok(out)
    } else {
        Err(StepFailure::NonFinite)
    }
}

/// One embedded 5(4) step with the Dormand-Prince coefficients. Returns the
/// fifth-order end state and the scaled error norm against the tolerances.
fn rk45_step(
    rhs: &RhsFn,
    t: f64,
    y: &[f64],
    h: f64,
    abs_tol: f64,
    rel_tol: f64,
) -> Result<(Vec<f64>, f64), StepFailure> {
    let k1 = rhs(t, y)?;
    let k2 = rhs(t + h / 5.0, &axpy(y, h, &[(&k1, 1.0 / 5.0)]))?;
    let k3 = rhs(
        t + 3.0 * h / 10.0,
        &axpy(y, h, &[(&k1, 3.0 / 40.0), (&k2, 9.0 / 40.0)]),
    )?;
    let k4 = rhs(
        t + 4.0 * h / 5.0,
        &axpy(
            y,
            h,
            &[(&k1, 44.0 / 45.0), (&k2, -56.0 / 15.0), (&k3, 32.0 / 9.0)],
        ),
    )?;
    let k5 = rhs(
        t + 8.0 * h / 9.0,
        &axpy(
            y,
            h,
            &[
                (&k1, 19372.0 / 6561.0),
                (&k2, -25360.0 / 2187.0),
                (&k3, 64448.0 / 6561.0),
                (&k4, -212.0 / 729.0),
            ],
        ),
    )?;
    let k6 = rhs(
        t + h,
        &axpy(
            y,
            h,
            &[
                (&k1, 9017.0 / 3168.0),
                (&k2, -355.0 / 33.0),
                (&k3, 46732.0 / 5247.0),
                (&k4, 49.0 / 176.0),
                (&k5, -5103.0 / 18656.0),
            ],
        ),
    )?;
    let y5 = axpy(
        y,
        h,
        &[
            (&k1, 35.0 / 384.0),
            (&k3, 500.0 / 1113.0),
            (&k4, 125.0 / 192.0),
            (&k5, -2187.0 / 6784.0),
            (&k6, 11.0 / 84.0),
        ],
    );
    let k7 = rhs(t + h, &y5)?;
    let y4 = axpy(
        y,
        h,
        &[
            (&k1, 5179.0 / 57600.0),
            (&k3, 7571.0 / 16695.0),
            (&k4, 393.0 / 640.0),
            (&k5, -92097.0 / 339200.0),
            (&k6, 187.0 / 2100.0),
            (&k7, 1.0 / 40.0),
        ],
    );
    if !finite(&y5) || !finite(&y4) {
        return Err(StepFailure::NonFinite);
    }
    let mut err_norm = 0.0_f64;
    for i in 0..y.len() {
        let tol = abs_tol + rel_tol * y[i].abs().max(y5[i].abs());
        err_norm = err_norm.max((y5[i] - y4[i]).abs() / tol);
    }
    Ok((y5, err_norm))
}

/// Core driver over a pure right-hand side and a guard predicate.
fn run_core(
    rhs: &RhsFn,
    guard: &GuardFn,
    t0: f64,
    y0: &[f64],
    t_final: f64,
    options: &IntegrationOptions,
) -> Result<(Vec<(f64, Vec<f64>)>, Termination), IntegrateError> {
    options.validate()?;
    if !t_final.is_finite() || t_final < t0 {
        return Err(IntegrateError::Options {
            what: format!("final time {} precedes the initial time {}", t_final, t0),
        });
    }
    let slack = 1e-12 * t_final.abs().max(1.0);
    let record_all = options.sample_dt <= 0.0;
    let mut next_sample = if record_all {
        f64::INFINITY
    } else {
        t0 + options.sample_dt
    };
    let mut out: Vec<(f64, Vec<f64>)> = vec![(t0, y0.to_vec())];
    let mut t = t0;
    let mut y = y0.to_vec();
    let mut h_adaptive = options.h0;
    let mut recorded_last = true;

    while t < t_final - slack {
        let target = next_sample.min(t_final);
        let nominal = match options.method {
            Method::Rk4 => options.h0,
            Method::Rk45 => h_adaptive,
        };
        let mut h = nominal.min(options.h_max).max(options.h_min);
        let mut capped = false;
        if t + h >= target - slack {
            h = target - t;
            capped = true;
        }

        // Attempt the step, shrinking on guard hits or error-test failures.
        let (y_new, h_used, landed, err_norm) = loop {
            let attempt = match options.method {
                Method::Rk4 => rk4_step(rhs, t, &y, h).map(|y_new| (y_new, 0.0)),
                Method::Rk45 => {
                    rk45_step(rhs, t, &y, h, options.abs_tol, options.rel_tol)
                }
            };
            match attempt {
                Ok((y_new, err_norm)) => {
                    if options.method == Method::Rk45 && err_norm > 1.0 {
                        if h <= options.h_min {
                            // The error test cannot be satisfied at the
                            // minimum step.
                            let mut truncated = out;
                            if !recorded_last {
                                truncated.push((t, y.clone()));
                            }
                            return Ok((truncated, Termination::StepUnderflow { t }));
                        }
                        let factor = (0.9 * err_norm.powf(-0.2)).max(0.2);
                        h = (h * factor).max(options.h_min);
                        capped = false;
                        continue;
                    }
                    if let Some(reason) = guard(t + h, &y_new) {
                        if h * 0.5 < options.h_min {
                            let mut truncated = out;
                            if !recorded_last {
                                truncated.push((t, y.clone()));
                            }
                            return Ok((truncated, Termination::GuardStop { reason, t }));
                        }
                        h *= 0.5;
                        capped = false;
                        continue;
                    }
                    break (y_new, h, capped, err_norm);
                }
                Err(StepFailure::Guard(reason)) => {
                    if h * 0.5 < options.h_min {
                        let mut truncated = out;
                        if !recorded_last {
                            truncated.push((t, y.clone()));
                        }
                        return Ok((truncated, Termination::GuardStop { reason, t }));
                    }
                    h *= 0.5;
                    capped = false;
                }
                Err(StepFailure::NonFinite) => {
                    return Err(IntegrateError::NonFinite {
                        t,
                        state: y.clone(),
                    });
                }
                Err(StepFailure::Fatal(source)) => {
                    return Err(IntegrateError::Dynamics { t, source });
                }
            }
        };

        t = if landed { target } else { t + h_used };
        y = y_new;
        if options.method == Method::Rk45 {
            let factor = if err_norm > 0.0 {
                (0.9 * err_norm.powf(-0.2)).clamp(0.2, 5.0)
            } else {
                5.0
            };
            h_adaptive = (h_used * factor).clamp(options.h_min, options.h_max);
        }

        recorded_last = false;
        if record_all {
            out.push((t, y.clone()));
            recorded_last = true;
        } else if (t - next_sample).abs() <= slack {
            out.push((t, y.clone()));
            recorded_last = true;
            next_sample += options.sample_dt;
        }
    }
    if !recorded_last {
        out.push((t, y.clone()));
    }
    Ok((out, Termination::Completed))
}

/// Positivity guard for network states: moles, temperature, and piston
/// position must stay positive.
fn network_guard(model: &NetworkModel, y: &[f64]) -> Option<String> {
    let layout = model.layout();
    for (k, comp) in model.compartments.iter().enumerate() {
        let n = y[layout.n_k(k)];
        if !(n > 0.0) {
            return Some(format!("moles in compartment {} reached {n}", comp.id));
        }
    }
    if model.mechanics.is_some() {
        let q = y[layout.q()];
        if !(q > 0.0) {
            return Some(format!("piston position reached {q}"));
        }
    }
    match dynamics::compartment_states(model, y) {
        Ok(views) => {
            for (view, comp) in views.iter().zip(&model.compartments) {
                if !(view.t > 0.0) {
                    return Some(format!(
                        "temperature in compartment {} reached {}",
                        comp.id, view.t
                    ));
                }
            }
            None
        }
        Err(err) => match classify(err) {
            StepFailure::Guard(reason) => Some(reason),
            // Structural errors surface through the stage evaluations.
            _ => None,
        },
    }
}

/// Integrate a network model from `state0.t` to `t_final`.
///
/// Guard violations and error-control underflow truncate the trajectory
/// with the corresponding termination status; structural evaluation errors
/// and non-finite states abort with an error carrying the last state.
pub fn integrate(
    model: &NetworkModel,
    state0: &SystemState,
    t_final: f64,
    options: &IntegrationOptions,
) -> Result<Trajectory, IntegrateError> {
    options.validate()?;
    let layout = model.layout();
    if state0.y.len() != layout.len() {
        return Err(IntegrateError::Options {
            what: format!(
                "state length {} does not match the {} layout ({} slots)",
                state0.y.len(),
                model.system_class.name(),
                layout.len()
            ),
        });
    }
    // An invalid initial state is a caller error, not a guard event.
    dynamics::rhs(model, state0.t, &state0.y).map_err(|source| IntegrateError::Dynamics {
        t: state0.t,
        source,
    })?;

    let rhs = |t: f64, y: &[f64]| dynamics::rhs(model, t, y).map_err(classify);
    let guard = |_t: f64, y: &[f64]| network_guard(model, y);
    let (points, termination) = run_core(&rhs, &guard, state0.t, &state0.y, t_final, options)?;

    let mut samples = Vec::with_capacity(points.len());
    for (t, y) in points {
        let diagnostics =
            dynamics::power_channels(model, t, &y).map_err(|source| IntegrateError::Dynamics {
                t,
                source,
            })?;
        samples.push(Sample {
            state: SystemState {
                t,
                y,
                layout: layout.clone(),
            },
            diagnostics,
        });
    }
    Ok(Trajectory {
        samples,
        termination,
    })
}

/// Diagnostics of a stored state, recomputed from scratch.
pub fn sample_diagnostics(
    model: &NetworkModel,
    state: &SystemState,
) -> Result<Diagnostics, DynamicsError> {
    dynamics::power_channels(model, state.t, &state.y)
}
