//! Trajectory audits: numerical pass/fail checks of the balance laws.
//!
//! Each audit is a pure function of a model and a trajectory (or, for the
//! audits that integrate internally, of a model alone). Diagnostics are
//! always recomputed from the sampled states rather than read from the
//! trajectory, so stale or tampered stored values cannot mask a defect.
//!
//! The checks: energy rate against the three power channels, nonnegative
//! entropy production with a non-decreasing production accumulator, total
//! entropy bookkeeping against production plus boundary flows, mole balance
//! against quadrature of the port fluxes, invariance of observables under
//! reference and accumulator shifts, relaxation of isolated networks toward
//! equal intensives, and agreement between the specialized equations and
//! the variational solver.

use thiserror::Error;

use crate::dynamics::{self, Diagnostics, DynamicsError};
use crate::integrate::{self, IntegrateError, IntegrationOptions, Method, Trajectory};
use crate::model::{CouplingKind, ModelError, NetworkModel, SystemClass, TimeFunction};
use crate::nonholonomic::{self, AbstractOptions, LagrangianSystem, NonholonomicError};

/// Outcome of one check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
}

/// One audited invariant with its worst observed violation.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    /// Largest scaled violation found over the trajectory.
    pub max_violation: f64,
    /// Time of the worst violation.
    pub location_t: f64,
    pub tolerance: f64,
    pub verdict: Verdict,
    /// Context that does not fit the verdict, such as a missing relaxation
    /// channel.
    pub note: Option<String>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }

    fn from_violation(
        name: &'static str,
        max_violation: f64,
        location_t: f64,
        tolerance: f64,
    ) -> Self {
        let verdict = if max_violation <= tolerance {
            Verdict::Pass
        } else {
            Verdict::Fail
        };
        Self {
            name,
            max_violation,
            location_t,
            tolerance,
            verdict,
            note: None,
        }
    }
}

/// All checks run against one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub checks: Vec<CheckResult>,
}

impl AuditReport {
    /// The report passes exactly when every check passes.
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }
}

/// Tolerances and rerun parameters for the audits.
#[derive(Debug, Clone, Copy)]
pub struct AuditOptions {
    /// Relative tolerance for discretization-limited law residuals.
    pub law_tol: f64,
    /// Scaled tolerance for algebraic identities.
    pub algebra_tol: f64,
    /// Relative tolerance for observables under gauge shifts.
    pub gauge_tol: f64,
    /// Final spread as a fraction of the initial spread.
    pub equilibrium_tol: f64,
    /// Relative state discrepancy between the two solvers.
    pub cross_tol: f64,
    /// Horizon for the audits that integrate internally.
    pub horizon: f64,
    /// Step size for the audits that integrate internally.
    pub step: f64,
}

impl Default for AuditOptions {
    fn default() -> Self {
        Self {
            law_tol: 1e-6,
            algebra_tol: 1e-10,
            gauge_tol: 1e-9,
            equilibrium_tol: 1e-6,
            cross_tol: 1e-5,
            horizon: 1.0,
            step: 1e-3,
        }
    }
}

/// Errors raised before a verdict can be formed.
#[derive(Debug, Error)]
pub enum AuditError {
    #[error("audit needs at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("audit requires an isolated model: {what}")]
    NotIsolated { what: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Integrate(#[from] IntegrateError),
    #[error(transparent)]
    Abstract(#[from] NonholonomicError),
}

/// Diagnostics recomputed from every sampled state.
fn recompute(model: &NetworkModel, traj: &Trajectory) -> Result<Vec<Diagnostics>, AuditError> {
    traj.samples
        .iter()
        .map(|sample| {
            dynamics::power_channels(model, sample.state.t, &sample.state.y).map_err(AuditError::from)
        })
        .collect()
}

fn n_total(model: &NetworkModel, y: &[f64]) -> f64 {
    let layout = model.layout();
    (0..model.compartments.len()).map(|k| y[layout.n_k(k)]).sum()
}

fn s_total(model: &NetworkModel, y: &[f64]) -> f64 {
    let layout = model.layout();
    match model.system_class {
        SystemClass::NonSimple => {
            (0..model.compartments.len()).map(|k| y[layout.s_k(k)]).sum()
        }
        _ => y[layout.s()],
    }
}

fn sigma_total(model: &NetworkModel, y: &[f64]) -> f64 {
    let layout = model.layout();
    match model.system_class {
        SystemClass::NonSimple => {
            (0..model.compartments.len()).map(|k| y[layout.sigma_k(k)]).sum()
        }
        _ => y[layout.sigma()],
    }
}

/// Indices of the accumulator slots that carry no physics: production,
/// thermal displacement, and chemical displacement.
fn accumulator_slots(model: &NetworkModel) -> Vec<usize> {
    let layout = model.layout();
    let k_count = model.compartments.len();
    match model.system_class {
        SystemClass::SimpleSingle | SystemClass::SimpleMechanical => {
            vec![layout.sigma(), layout.gamma(), layout.w_k(0)]
        }
        SystemClass::SimpleDiffusion => {
            let mut slots = vec![layout.sigma(), layout.gamma()];
            slots.extend((0..k_count).map(|k| layout.w_k(k)));
            slots
        }
        SystemClass::NonSimple => {
            let mut slots: Vec<usize> = (0..k_count).map(|k| layout.sigma_k(k)).collect();
            slots.extend((0..k_count).map(|k| layout.gamma_k(k)));
            slots.extend((0..k_count).map(|k| layout.w_k(k)));
            slots
        }
    }
}

/// Why a model is not isolated, if it is not.
fn isolation_defect(model: &NetworkModel) -> Option<String> {
    if let Some(port) = model.ports.first() {
        return Some(format!("port {} exchanges matter", port.id));
    }
    if let Some(source) = model.sources.first() {
        return Some(format!("heat source {} exchanges entropy", source.id));
    }
    if let Some(mech) = &model.mechanics {
        let zero = TimeFunction::Constant(0.0);
        if mech.f_ext_q != zero || mech.f_ext_x != zero {
            return Some("external piston forces are applied".to_string());
        }
    }
    None
}

fn fixed_step_options(step: f64) -> IntegrationOptions {
    IntegrationOptions {
        method: Method::Rk4,
        h0: step,
        h_min: step * 1e-6,
        h_max: step.max(0.1),
        sample_dt: 0.0,
        ..IntegrationOptions::default()
    }
}

fn rel_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Derivative estimate at the middle of three samples, exact for quadratics
/// at any spacing. Adaptive trajectories have unequal neighboring intervals,
/// most visibly at the clipped final step, where a plain centered quotient
/// degrades to first order.
fn three_point_slope(t0: f64, t1: f64, t2: f64, f0: f64, f1: f64, f2: f64) -> f64 {
    let h_minus = t1 - t0;
    let h_plus = t2 - t1;
    (h_minus * h_minus * f2 - h_plus * h_plus * f0
        + (h_plus * h_plus - h_minus * h_minus) * f1)
        / (h_plus * h_minus * (h_plus + h_minus))
}

/// Centered-difference energy rate against the summed power channels.
pub fn first_law_audit(
    model: &NetworkModel,
    traj: &Trajectory,
    options: &AuditOptions,
) -> Result<CheckResult, AuditError> {
    let samples = &traj.samples;
    if samples.len() < 3 {
        return Err(AuditError::TooFewSamples {
            needed: 3,
            got: samples.len(),
        });
    }
    let diags = recompute(model, traj)?;
    let mut worst = 0.0_f64;
    let mut at = samples[0].state.t;
    for i in 1..samples.len() - 1 {
        let e_dot = three_point_slope(
            samples[i - 1].state.t,
            samples[i].state.t,
            samples[i + 1].state.t,
            diags[i - 1].e,
            diags[i].e,
            diags[i + 1].e,
        );
        let power = diags[i].p_w + diags[i].p_h + diags[i].p_m;
        let violation = (e_dot - power).abs() / e_dot.abs().max(1.0);
        if violation > worst {
            worst = violation;
            at = samples[i].state.t;
        }
    }
    Ok(CheckResult::from_violation(
        "first_law",
        worst,
        at,
        options.law_tol,
    ))
}

/// Nonnegative entropy production and a non-decreasing accumulator.
pub fn second_law_audit(
    model: &NetworkModel,
    traj: &Trajectory,
    options: &AuditOptions,
) -> Result<CheckResult, AuditError> {
    let samples = &traj.samples;
    if samples.is_empty() {
        return Err(AuditError::TooFewSamples {
            needed: 1,
            got: 0,
        });
    }
    let diags = recompute(model, traj)?;
    let scale = diags
        .iter()
        .map(|d| d.i.abs())
        .fold(1.0_f64, f64::max);
    let mut worst = 0.0_f64;
    let mut at = samples[0].state.t;
    for (sample, diag) in samples.iter().zip(&diags) {
        let negativity = (-diag.i).max(0.0) / scale;
        if negativity > worst {
            worst = negativity;
            at = sample.state.t;
        }
    }
    for i in 0..samples.len() - 1 {
        let drop = sigma_total(model, &samples[i].state.y)
            - sigma_total(model, &samples[i + 1].state.y);
        let violation = drop.max(0.0) / scale;
        if violation > worst {
            worst = violation;
            at = samples[i + 1].state.t;
        }
    }
    Ok(CheckResult::from_violation(
        "second_law",
        worst,
        at,
        options.algebra_tol,
    ))
}

/// Total entropy rate against production plus boundary entropy flows.
pub fn entropy_bookkeeping_audit(
    model: &NetworkModel,
    traj: &Trajectory,
    options: &AuditOptions,
) -> Result<CheckResult, AuditError> {
    let samples = &traj.samples;
    if samples.len() < 3 {
        return Err(AuditError::TooFewSamples {
            needed: 3,
            got: samples.len(),
        });
    }
    let diags = recompute(model, traj)?;
    let mut flows = Vec::with_capacity(samples.len());
    for sample in samples.iter() {
        let t = sample.state.t;
        let mut flow = 0.0;
        for port in &model.ports {
            flow += dynamics::resolve_port(model, t, &sample.state.y, port)?.j_s;
        }
        for source in &model.sources {
            flow += source.j_s.eval(t);
        }
        flows.push(flow);
    }
    let mut worst = 0.0_f64;
    let mut at = samples[0].state.t;
    for i in 1..samples.len() - 1 {
        let s_dot = three_point_slope(
            samples[i - 1].state.t,
            samples[i].state.t,
            samples[i + 1].state.t,
            s_total(model, &samples[i - 1].state.y),
            s_total(model, &samples[i].state.y),
            s_total(model, &samples[i + 1].state.y),
        );
        let claimed = diags[i].i + flows[i];
        let violation = (s_dot - claimed).abs() / s_dot.abs().max(1.0);
        if violation > worst {
            worst = violation;
            at = samples[i].state.t;
        }
    }
    Ok(CheckResult::from_violation(
        "entropy_bookkeeping",
        worst,
        at,
        options.law_tol,
    ))
}

/// Total moles against trapezoid quadrature of the port fluxes.
pub fn mole_balance_audit(
    model: &NetworkModel,
    traj: &Trajectory,
    options: &AuditOptions,
) -> Result<CheckResult, AuditError> {
    let samples = &traj.samples;
    if samples.len() < 2 {
        return Err(AuditError::TooFewSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    let inflow: Vec<f64> = samples
        .iter()
        .map(|sample| {
            model
                .ports
                .iter()
                .map(|port| port.j.eval(sample.state.t))
                .sum::<f64>()
        })
        .collect();
    let n0 = n_total(model, &samples[0].state.y);
    let scale = n0.abs().max(1.0);
    let mut quadrature = 0.0_f64;
    let mut worst = 0.0_f64;
    let mut at = samples[0].state.t;
    for i in 1..samples.len() {
        let dt = samples[i].state.t - samples[i - 1].state.t;
        quadrature += 0.5 * (inflow[i - 1] + inflow[i]) * dt;
        let delta = n_total(model, &samples[i].state.y) - n0;
        let violation = (delta - quadrature).abs() / scale;
        if violation > worst {
            worst = violation;
            at = samples[i].state.t;
        }
    }
    Ok(CheckResult::from_violation(
        "mole_balance",
        worst,
        at,
        options.law_tol,
    ))
}

/// Worst relative observable discrepancy between two runs of equal grids.
///
/// Observables are per-compartment temperature, pressure, and moles, the
/// entropy production rate, and total energy, the latter compared after
/// removing `e_shift_per_mole` times the mole count from the second run.
fn compare_runs(
    model_a: &NetworkModel,
    traj_a: &Trajectory,
    model_b: &NetworkModel,
    traj_b: &Trajectory,
    e_shift_per_mole: f64,
) -> Result<(f64, f64), AuditError> {
    let mut worst = 0.0_f64;
    let mut at = traj_a
        .samples
        .first()
        .map(|s| s.state.t)
        .unwrap_or_default();
    let layout = model_a.layout();
    for (sa, sb) in traj_a.samples.iter().zip(&traj_b.samples) {
        let t = sa.state.t;
        let views_a = dynamics::compartment_states(model_a, &sa.state.y)?;
        let views_b = dynamics::compartment_states(model_b, &sb.state.y)?;
        let diag_a = dynamics::power_channels(model_a, t, &sa.state.y)?;
        let diag_b = dynamics::power_channels(model_b, sb.state.t, &sb.state.y)?;
        let mut gaps = vec![rel_gap(t, sb.state.t), rel_gap(diag_a.i, diag_b.i)];
        for (va, vb) in views_a.iter().zip(&views_b) {
            gaps.push(rel_gap(va.t, vb.t));
            gaps.push(rel_gap(va.p, vb.p));
            gaps.push(rel_gap(va.n, vb.n));
        }
        let e_expected = diag_a.e + e_shift_per_mole * n_total(model_a, &sa.state.y);
        gaps.push((diag_b.e - e_expected).abs() / diag_a.e.abs().max(1.0));
        if model_a.mechanics.is_some() {
            for idx in [layout.q(), layout.qdot(), layout.x(), layout.xdot()] {
                gaps.push(rel_gap(sa.state.y[idx], sb.state.y[idx]));
            }
        }
        for gap in gaps {
            if gap > worst {
                worst = gap;
                at = t;
            }
        }
    }
    Ok((worst, at))
}

/// Reruns the model with shifted accumulators and shifted gas references
/// and requires the physical observables to be unchanged.
pub fn gauge_invariance_audit(
    model: &NetworkModel,
    options: &AuditOptions,
) -> Result<CheckResult, AuditError> {
    let run_opts = fixed_step_options(options.step);
    let state0 = model.initial_state()?;
    let t_final = state0.t + options.horizon;
    let base = integrate::integrate(model, &state0, t_final, &run_opts)?;

    // Shifted production and displacement accumulators.
    let mut shifted0 = state0.clone();
    for (offset, idx) in accumulator_slots(model).into_iter().enumerate() {
        shifted0.y[idx] += 25.0 + 10.0 * offset as f64;
    }
    let shifted = integrate::integrate(model, &shifted0, t_final, &run_opts)?;
    let (mut worst, mut at) = compare_runs(model, &base, model, &shifted, 0.0)?;

    // Shifted molar entropy reference with the same physical start: the
    // stored compartment entropies move along with the reference.
    let ds = 25.0;
    let mut entropy_shifted = model.clone();
    entropy_shifted.gas.s_ref += ds;
    entropy_shifted.gas.mu_ref =
        entropy_shifted.gas.h_ref - entropy_shifted.gas.t_ref * entropy_shifted.gas.s_ref;
    for comp in &mut entropy_shifted.compartments {
        comp.s0 += comp.n0 * ds;
    }
    let state0_s = entropy_shifted.initial_state()?;
    let traj_s = integrate::integrate(&entropy_shifted, &state0_s, t_final, &run_opts)?;
    let (v_s, t_s) = compare_runs(model, &base, &entropy_shifted, &traj_s, 0.0)?;
    if v_s > worst {
        worst = v_s;
        at = t_s;
    }

    // Shifted molar energy reference: energy moves by the shift times the
    // mole count, everything else is unchanged.
    let du = 500.0;
    let mut energy_shifted = model.clone();
    energy_shifted.gas.u_ref += du;
    energy_shifted.gas.h_ref += du;
    energy_shifted.gas.mu_ref =
        energy_shifted.gas.h_ref - energy_shifted.gas.t_ref * energy_shifted.gas.s_ref;
    // The matter force mu/T picks up du/T under this shift, a multiple of
    // the thermal force, so heat-matter coupling entries are tied to the
    // energy reference. The congruent matrix below produces identical
    // fluxes and entropy rates at every state.
    for coupling in &mut energy_shifted.couplings {
        if let CouplingKind::Onsager2x2 { l_hh, l_hm, l_mh, l_mm } = &mut coupling.kind {
            *l_hh += du * (*l_hm + *l_mh) + du * du * *l_mm;
            *l_hm += du * *l_mm;
            *l_mh += du * *l_mm;
        }
    }
    let state0_u = energy_shifted.initial_state()?;
    let traj_u = integrate::integrate(&energy_shifted, &state0_u, t_final, &run_opts)?;
    let (v_u, t_u) = compare_runs(model, &base, &energy_shifted, &traj_u, du)?;
    if v_u > worst {
        worst = v_u;
        at = t_u;
    }

    Ok(CheckResult::from_violation(
        "gauge_invariance",
        worst,
        at,
        options.gauge_tol,
    ))
}

fn intensive_spreads(model: &NetworkModel, y: &[f64]) -> Result<(f64, f64), AuditError> {
    let views = dynamics::compartment_states(model, y)?;
    let mut t_lo = f64::INFINITY;
    let mut t_hi = f64::NEG_INFINITY;
    let mut mu_lo = f64::INFINITY;
    let mut mu_hi = f64::NEG_INFINITY;
    for view in &views {
        t_lo = t_lo.min(view.t);
        t_hi = t_hi.max(view.t);
        mu_lo = mu_lo.min(view.mu);
        mu_hi = mu_hi.max(view.mu);
    }
    Ok((t_hi - t_lo, mu_hi - mu_lo))
}

/// Relaxation of an isolated network: intensive spreads must collapse and
/// total entropy must not decrease.
pub fn equilibrium_audit(
    model: &NetworkModel,
    traj: &Trajectory,
    options: &AuditOptions,
) -> Result<CheckResult, AuditError> {
    if let Some(what) = isolation_defect(model) {
        return Err(AuditError::NotIsolated { what });
    }
    let samples = &traj.samples;
    if samples.len() < 2 {
        return Err(AuditError::TooFewSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    let first = &samples[0].state;
    let last = samples.last().unwrap().state.clone();

    // Total entropy must be non-decreasing throughout.
    let mut monotone_violation = 0.0_f64;
    let mut monotone_at = first.t;
    let s_scale = s_total(model, &last.y).abs().max(1.0);
    for pair in samples.windows(2) {
        let drop = s_total(model, &pair[0].state.y) - s_total(model, &pair[1].state.y);
        let violation = drop.max(0.0) / s_scale;
        if violation > monotone_violation {
            monotone_violation = violation;
            monotone_at = pair[1].state.t;
        }
    }
    if monotone_violation > options.algebra_tol {
        let mut result = CheckResult::from_violation(
            "equilibrium",
            monotone_violation,
            monotone_at,
            options.algebra_tol,
        );
        result.verdict = Verdict::Fail;
        result.note = Some("total entropy decreased".to_string());
        return Ok(result);
    }

    if model.couplings.is_empty() && model.compartments.len() > 1 {
        let mut result =
            CheckResult::from_violation("equilibrium", 0.0, last.t, options.equilibrium_tol);
        result.note = Some("no relaxation channel".to_string());
        return Ok(result);
    }

    let (t_spread0, mu_spread0) = intensive_spreads(model, &first.y)?;
    let (t_spread1, mu_spread1) = intensive_spreads(model, &last.y)?;
    let views0 = dynamics::compartment_states(model, &first.y)?;
    let t_scale = views0.iter().map(|v| v.t.abs()).fold(1.0_f64, f64::max);
    let mu_scale = views0.iter().map(|v| v.mu.abs()).fold(1.0_f64, f64::max);
    let t_violation = t_spread1 / t_spread0.max(1e-9 * t_scale);
    let mu_violation = mu_spread1 / mu_spread0.max(1e-9 * mu_scale);
    let (worst, label) = if t_violation >= mu_violation {
        (t_violation, "temperature")
    } else {
        (mu_violation, "chemical potential")
    };
    let mut result =
        CheckResult::from_violation("equilibrium", worst, last.t, options.equilibrium_tol);
    if result.verdict == Verdict::Fail {
        result.note = Some(format!("{label} spread did not relax"));
    }
    Ok(result)
}

/// Integrates the specialized equations and the variational embedding on
/// the same grid and compares the states.
pub fn cross_validation_audit(
    model: &NetworkModel,
    options: &AuditOptions,
) -> Result<CheckResult, AuditError> {
    let sys = nonholonomic::embed_open_system(model)?;
    cross_compare(model, &sys, options)
}

fn cross_compare(
    model: &NetworkModel,
    sys: &LagrangianSystem,
    options: &AuditOptions,
) -> Result<CheckResult, AuditError> {
    let state0 = model.initial_state()?;
    let t_final = state0.t + options.horizon;
    let network = integrate::integrate(model, &state0, t_final, &fixed_step_options(options.step))?;
    let a0 = nonholonomic::embed_initial_state(model, state0.t, &state0.y)?;
    let abstract_traj = nonholonomic::integrate_abstract(
        sys,
        &a0,
        t_final,
        &AbstractOptions {
            h: options.step,
            ..AbstractOptions::default()
        },
    )?;
    let mut worst = 0.0_f64;
    let mut at = state0.t;
    let count = network.samples.len().min(abstract_traj.states.len());
    for i in 0..count {
        let net = &network.samples[i].state;
        let mapped = nonholonomic::abstract_to_network_state(model, &abstract_traj.states[i])?;
        for (a, b) in mapped.iter().zip(&net.y) {
            let gap = (a - b).abs() / b.abs().max(1.0);
            if gap > worst {
                worst = gap;
                at = net.t;
            }
        }
    }
    let mut result = CheckResult::from_violation("cross_validation", worst, at, options.cross_tol);
    if !network.completed() || count < abstract_traj.states.len() {
        result.verdict = Verdict::Fail;
        result.note = Some("solvers did not cover the same horizon".to_string());
    }
    Ok(result)
}

/// Runs every applicable audit and aggregates the verdicts.
///
/// Trajectory-based audits always run; the equilibrium audit runs only for
/// isolated models and the cross-validation audit only for the classes the
/// variational embedding supports.
pub fn audit_all(
    model: &NetworkModel,
    traj: &Trajectory,
    options: &AuditOptions,
) -> Result<AuditReport, AuditError> {
    let mut checks = vec![
        first_law_audit(model, traj, options)?,
        second_law_audit(model, traj, options)?,
        entropy_bookkeeping_audit(model, traj, options)?,
        mole_balance_audit(model, traj, options)?,
    ];
    if isolation_defect(model).is_none() {
        checks.push(equilibrium_audit(model, traj, options)?);
    }
    checks.push(gauge_invariance_audit(model, options)?);
    if matches!(
        model.system_class,
        SystemClass::SimpleSingle | SystemClass::SimpleMechanical
    ) {
        checks.push(cross_validation_audit(model, options)?);
    }
    Ok(AuditReport { checks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gas::GasSpec;
    use crate::model::{
        CompartmentSpec, CouplingKind, CouplingSpec, HeatSourceSpec, PortSpec, SystemState,
    };

    fn gas() -> GasSpec {
        GasSpec::nitrogen_like()
    }

    fn tank_model(j: f64, t_in: f64, p_in: f64) -> NetworkModel {
        let gas = gas();
        let s0 = gas.entropy_total(300.0, 2.0, 0.05).unwrap();
        NetworkModel {
            gas,
            system_class: SystemClass::SimpleSingle,
            compartments: vec![CompartmentSpec {
                id: "tank".to_string(),
                vol: 0.05,
                s0,
                n0: 2.0,
            }],
            ports: vec![PortSpec {
                id: "feed".to_string(),
                compartment: "tank".to_string(),
                j: TimeFunction::Constant(j),
                t_in: TimeFunction::Constant(t_in),
                p_in: TimeFunction::Constant(p_in),
            }],
            sources: Vec::new(),
            couplings: Vec::new(),
            mechanics: None,
        }
    }

    /// Isolated two-compartment heat-matter network with distinct starting
    /// temperatures.
    fn relaxing_pair(l_hh: f64, l_mm: f64, cross: f64) -> NetworkModel {
        let gas = gas();
        let vol = 0.02;
        NetworkModel {
            gas,
            system_class: SystemClass::NonSimple,
            compartments: vec![
                CompartmentSpec {
                    id: "left".to_string(),
                    vol,
                    s0: gas.entropy_total(320.0, 0.5, vol).unwrap(),
                    n0: 0.5,
                },
                CompartmentSpec {
                    id: "right".to_string(),
                    vol,
                    s0: gas.entropy_total(300.0, 0.5, vol).unwrap(),
                    n0: 0.5,
                },
            ],
            ports: Vec::new(),
            sources: Vec::new(),
            couplings: vec![CouplingSpec {
                pair: ("left".to_string(), "right".to_string()),
                kind: CouplingKind::Onsager2x2 {
                    l_hh,
                    l_hm: cross,
                    l_mh: cross,
                    l_mm,
                },
            }],
            mechanics: None,
        }
    }

    fn run(model: &NetworkModel, t_final: f64, h: f64) -> Trajectory {
        let state0 = model.initial_state().unwrap();
        integrate::integrate(model, &state0, t_final, &fixed_step_options(h)).unwrap()
    }

    /// Integration that bypasses model validation, for deliberately
    /// corrupted closures whose start state comes from a valid twin.
    fn run_from(model: &NetworkModel, state0: &SystemState, t_final: f64, h: f64) -> Trajectory {
        integrate::integrate(model, state0, t_final, &fixed_step_options(h)).unwrap()
    }

    #[test]
    fn tank_trajectory_satisfies_the_balance_audits() {
        let model = tank_model(0.01, 320.0, 1.5e5);
        let traj = run(&model, 0.5, 1e-3);
        let opts = AuditOptions::default();
        for check in [
            first_law_audit(&model, &traj, &opts).unwrap(),
            second_law_audit(&model, &traj, &opts).unwrap(),
            entropy_bookkeeping_audit(&model, &traj, &opts).unwrap(),
            mole_balance_audit(&model, &traj, &opts).unwrap(),
        ] {
            assert!(
                check.passed(),
                "{} failed with violation {} over tolerance {}",
                check.name,
                check.max_violation,
                check.tolerance
            );
        }
    }

    #[test]
    fn short_trajectories_are_rejected() {
        let model = tank_model(0.01, 320.0, 1.5e5);
        let mut traj = run(&model, 0.5, 1e-3);
        traj.samples.truncate(2);
        let opts = AuditOptions::default();
        assert!(matches!(
            first_law_audit(&model, &traj, &opts),
            Err(AuditError::TooFewSamples { needed: 3, got: 2 })
        ));
        traj.samples.truncate(1);
        assert!(matches!(
            mole_balance_audit(&model, &traj, &opts),
            Err(AuditError::TooFewSamples { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn constant_inflow_matches_the_quadrature() {
        let model = tank_model(0.1, 320.0, 1.5e5);
        let traj = run(&model, 10.0, 1e-2);
        let opts = AuditOptions::default();
        let check = mole_balance_audit(&model, &traj, &opts).unwrap();
        assert!(check.passed(), "violation {}", check.max_violation);
        let first = &traj.samples[0].state;
        let last = &traj.samples.last().unwrap().state;
        let delta = n_total(&model, &last.y) - n_total(&model, &first.y);
        assert!(
            (delta - 1.0).abs() <= 1e-9,
            "ten seconds at a tenth mole per second must add one mole, got {delta}"
        );
    }

    #[test]
    fn closed_diffusion_chain_conserves_total_moles() {
        let gas = gas();
        let vol = 0.02;
        let ids = ["a", "b", "c"];
        let moles = [0.8, 0.5, 0.3];
        let compartments = ids
            .iter()
            .zip(moles)
            .map(|(id, n0)| CompartmentSpec {
                id: id.to_string(),
                vol,
                s0: gas.entropy_total(300.0, n0, vol).unwrap(),
                n0,
            })
            .collect();
        let model = NetworkModel {
            gas,
            system_class: SystemClass::SimpleDiffusion,
            compartments,
            ports: Vec::new(),
            sources: Vec::new(),
            couplings: vec![
                CouplingSpec {
                    pair: ("a".to_string(), "b".to_string()),
                    kind: CouplingKind::DiffusionG { g: 2e-4 },
                },
                CouplingSpec {
                    pair: ("b".to_string(), "c".to_string()),
                    kind: CouplingKind::DiffusionG { g: 2e-4 },
                },
            ],
            mechanics: None,
        };
        let traj = run(&model, 1.0, 1e-3);
        let opts = AuditOptions::default();
        let check = mole_balance_audit(&model, &traj, &opts).unwrap();
        assert!(check.passed());
        assert!(
            check.max_violation <= 1e-12,
            "closed chain drifted by {}",
            check.max_violation
        );
    }

    #[test]
    fn underpressure_inflow_violates_the_second_law() {
        // Interior pressure is near 1.0e5; feeding against it from 0.5e5
        // destroys entropy in the books, which the audit must flag.
        let model = tank_model(0.01, 300.0, 5e4);
        let traj = run(&model, 0.1, 1e-3);
        let opts = AuditOptions::default();
        let diag = integrate::sample_diagnostics(&model, &traj.samples[0].state).unwrap();
        assert!(diag.i < 0.0, "crafted feed should produce negative I, got {}", diag.i);
        let check = second_law_audit(&model, &traj, &opts).unwrap();
        assert_eq!(check.verdict, Verdict::Fail);
        assert!(check.max_violation > 1e-6);
    }

    #[test]
    fn indefinite_coupling_matrix_fails_the_second_law() {
        // A symmetric coupling matrix with a dominant cross term has a
        // negative eigenvalue. Scan compositions until the thermodynamic
        // forces land in its negative cone, then audit from there.
        let mut model = relaxing_pair(1e4, 0.03, 0.0);
        model.couplings[0].kind = CouplingKind::Onsager2x2 {
            l_hh: 1e4,
            l_hm: 600.0,
            l_mh: 600.0,
            l_mm: 0.03,
        };
        let gas = gas();
        let vol = 0.02;
        let layout = model.layout();
        let mut state0 = None;
        for step in 0..60 {
            let n2 = 0.1 + 0.025 * step as f64;
            let mut y = vec![0.0; layout.len()];
            y[layout.s_k(0)] = gas.entropy_total(320.0, 0.5, vol).unwrap();
            y[layout.n_k(0)] = 0.5;
            y[layout.s_k(1)] = gas.entropy_total(300.0, n2, vol).unwrap();
            y[layout.n_k(1)] = n2;
            let diag = dynamics::power_channels(&model, 0.0, &y).unwrap();
            if diag.i < -1e-3 {
                state0 = Some(SystemState {
                    t: 0.0,
                    y,
                    layout: layout.clone(),
                });
                break;
            }
        }
        let state0 = state0.expect("no composition reached the negative cone");
        let traj = run_from(&model, &state0, 0.01, 1e-3);
        let opts = AuditOptions::default();
        let check = second_law_audit(&model, &traj, &opts).unwrap();
        assert_eq!(check.verdict, Verdict::Fail);
    }

    #[test]
    fn closed_compartment_bookkeeping_is_exact() {
        let mut model = tank_model(0.0, 320.0, 1.5e5);
        model.ports.clear();
        let traj = run(&model, 0.5, 1e-3);
        let opts = AuditOptions::default();
        let check = entropy_bookkeeping_audit(&model, &traj, &opts).unwrap();
        assert!(check.passed());
        assert!(
            check.max_violation <= 1e-9,
            "closed adiabatic bookkeeping residual {}",
            check.max_violation
        );
    }

    #[test]
    fn heat_source_bookkeeping_balances() {
        let mut model = relaxing_pair(2e4, 0.01, 0.0);
        model.sources.push(HeatSourceSpec {
            id: "burner".to_string(),
            compartment: "left".to_string(),
            j_s: TimeFunction::Constant(0.05),
            t_h: TimeFunction::Constant(340.0),
        });
        let traj = run(&model, 0.5, 1e-3);
        let opts = AuditOptions::default();
        let check = entropy_bookkeeping_audit(&model, &traj, &opts).unwrap();
        assert!(
            check.passed(),
            "bookkeeping with a heat source failed: {}",
            check.max_violation
        );
        let first = first_law_audit(&model, &traj, &opts).unwrap();
        assert!(first.passed(), "first law with a heat source failed");
    }

    #[test]
    fn gauge_invariance_holds_for_the_tank() {
        let model = tank_model(0.01, 320.0, 1.5e5);
        let opts = AuditOptions {
            horizon: 0.3,
            ..AuditOptions::default()
        };
        let check = gauge_invariance_audit(&model, &opts).unwrap();
        assert!(
            check.passed(),
            "gauge shifts changed observables by {}",
            check.max_violation
        );
    }

    #[test]
    fn equilibrium_relaxation_closes_the_spreads() {
        let model = relaxing_pair(2e6, 0.05, 0.1 * (2e6 * 0.05_f64).sqrt());
        let state0 = model.initial_state().unwrap();
        let options = IntegrationOptions {
            method: Method::Rk45,
            h0: 1e-3,
            abs_tol: 1e-11,
            rel_tol: 1e-11,
            ..IntegrationOptions::default()
        };
        let traj = integrate::integrate(&model, &state0, 20.0, &options).unwrap();
        assert!(traj.completed());
        let opts = AuditOptions::default();
        let check = equilibrium_audit(&model, &traj, &opts).unwrap();
        assert!(
            check.passed(),
            "spreads failed to relax: {} ({:?})",
            check.max_violation,
            check.note
        );
    }

    #[test]
    fn missing_relaxation_channel_is_reported() {
        let mut model = relaxing_pair(2e4, 0.01, 0.0);
        model.couplings.clear();
        let traj = run(&model, 0.5, 1e-3);
        let opts = AuditOptions::default();
        let check = equilibrium_audit(&model, &traj, &opts).unwrap();
        assert!(check.passed());
        assert_eq!(check.note.as_deref(), Some("no relaxation channel"));
    }

    #[test]
    fn ported_models_are_rejected_by_the_equilibrium_audit() {
        let model = tank_model(0.01, 320.0, 1.5e5);
        let traj = run(&model, 0.1, 1e-3);
        let opts = AuditOptions::default();
        assert!(matches!(
            equilibrium_audit(&model, &traj, &opts),
            Err(AuditError::NotIsolated { .. })
        ));
    }

    #[test]
    fn cross_validation_accepts_the_tank() {
        let model = tank_model(0.01, 320.0, 1.5e5);
        let opts = AuditOptions {
            horizon: 0.3,
            ..AuditOptions::default()
        };
        let check = cross_validation_audit(&model, &opts).unwrap();
        assert!(
            check.passed(),
            "solvers disagree by {}",
            check.max_violation
        );
    }

    #[test]
    fn unsupported_classes_cannot_cross_validate() {
        let model = relaxing_pair(2e4, 0.01, 0.0);
        let opts = AuditOptions::default();
        assert!(matches!(
            cross_validation_audit(&model, &opts),
            Err(AuditError::Abstract(NonholonomicError::UnsupportedClass { .. }))
        ));
    }

    #[test]
    fn audit_all_aggregates_every_applicable_check() {
        let model = tank_model(0.01, 320.0, 1.5e5);
        let traj = run(&model, 0.3, 1e-3);
        let opts = AuditOptions {
            horizon: 0.3,
            ..AuditOptions::default()
        };
        let report = audit_all(&model, &traj, &opts).unwrap();
        let names: Vec<&str> = report.checks.iter().map(|c| c.name).collect();
        assert_eq!(
            names,
            vec![
                "first_law",
                "second_law",
                "entropy_bookkeeping",
                "mole_balance",
                "gauge_invariance",
                "cross_validation"
            ]
        );
        assert!(report.passed(), "report: {:?}", report);
    }

    #[test]
    fn flipped_port_flux_fails_the_flow_audits() {
        // Sign flip on the port flux term of the evolution: states drain
        // while the audited model claims they fill.
        let model = tank_model(0.01, 320.0, 1.5e5);
        let mut mutated = model.clone();
        mutated.ports[0].j = TimeFunction::Constant(-0.01);
        let state0 = model.initial_state().unwrap();
        let traj = run_from(&mutated, &state0, 0.5, 1e-3);
        let opts = AuditOptions::default();
        let first = first_law_audit(&model, &traj, &opts).unwrap();
        assert_eq!(first.verdict, Verdict::Fail, "first law missed the flipped flux");
        let moles = mole_balance_audit(&model, &traj, &opts).unwrap();
        assert_eq!(moles.verdict, Verdict::Fail, "mole balance missed the flipped flux");
    }

    #[test]
    fn negated_production_accumulator_fails_the_second_law() {
        // Sign flip on the production rate: the accumulator runs downhill.
        let model = tank_model(0.01, 320.0, 1.5e5);
        let mut traj = run(&model, 0.5, 1e-3);
        let layout = model.layout();
        for sample in &mut traj.samples {
            sample.state.y[layout.sigma()] = -sample.state.y[layout.sigma()];
        }
        let opts = AuditOptions::default();
        let check = second_law_audit(&model, &traj, &opts).unwrap();
        assert_eq!(check.verdict, Verdict::Fail);
    }

    #[test]
    fn flipped_source_flow_fails_the_bookkeeping() {
        // Sign flip on the source entropy flow term of the evolution.
        let mut model = relaxing_pair(2e4, 0.01, 0.0);
        model.sources.push(HeatSourceSpec {
            id: "burner".to_string(),
            compartment: "left".to_string(),
            j_s: TimeFunction::Constant(0.05),
            t_h: TimeFunction::Constant(340.0),
        });
        let mut mutated = model.clone();
        mutated.sources[0].j_s = TimeFunction::Constant(-0.05);
        let state0 = model.initial_state().unwrap();
        let traj = run_from(&mutated, &state0, 0.5, 1e-3);
        let opts = AuditOptions::default();
        let check = entropy_bookkeeping_audit(&model, &traj, &opts).unwrap();
        assert_eq!(check.verdict, Verdict::Fail);
    }

    #[test]
    fn uncompensated_reference_shift_is_detected() {
        // Sign flip on the stored-entropy compensation that should
        // accompany a reference shift: the start state is now physically
        // different and the comparison must say so.
        let model = tank_model(0.01, 320.0, 1.5e5);
        let opts = AuditOptions {
            horizon: 0.3,
            ..AuditOptions::default()
        };
        let run_opts = fixed_step_options(opts.step);
        let state0 = model.initial_state().unwrap();
        let base = integrate::integrate(&model, &state0, 0.3, &run_opts).unwrap();
        let ds = 25.0;
        let mut mutated = model.clone();
        mutated.gas.s_ref += ds;
        mutated.gas.mu_ref = mutated.gas.h_ref - mutated.gas.t_ref * mutated.gas.s_ref;
        for comp in &mut mutated.compartments {
            comp.s0 -= comp.n0 * ds;
        }
        let state0_m = mutated.initial_state().unwrap();
        let bad = integrate::integrate(&mutated, &state0_m, 0.3, &run_opts).unwrap();
        let (violation, _) = compare_runs(&model, &base, &mutated, &bad, 0.0).unwrap();
        assert!(
            violation > opts.gauge_tol,
            "wrong-sign compensation went unnoticed: {violation}"
        );
    }

    #[test]
    fn anti_relaxation_coupling_fails_the_equilibrium_audit() {
        // Sign flip on the heat conductance: the spread grows instead of
        // decaying.
        let model = relaxing_pair(2e4, 0.001, 0.0);
        let mut mutated = model.clone();
        mutated.couplings[0].kind = CouplingKind::Onsager2x2 {
            l_hh: -2e4,
            l_hm: 0.0,
            l_mh: 0.0,
            l_mm: 0.001,
        };
        let state0 = model.initial_state().unwrap();
        let traj = run_from(&mutated, &state0, 5.0, 1e-3);
        let opts = AuditOptions::default();
        let check = equilibrium_audit(&mutated, &traj, &opts).unwrap();
        assert_eq!(check.verdict, Verdict::Fail);
    }

    #[test]
    fn flipped_embedding_offset_fails_cross_validation() {
        // Sign flip on the affine part of the variational constraint.
        let model = tank_model(0.01, 320.0, 1.5e5);
        let mut sys = nonholonomic::embed_open_system(&model).unwrap();
        let original = std::mem::replace(
            &mut sys.constraint_offset,
            Box::new(|_, _, _| nalgebra::DVector::zeros(1)),
        );
        sys.constraint_offset = Box::new(move |t, q, v| -original(t, q, v));
        let opts = AuditOptions {
            horizon: 0.05,
            ..AuditOptions::default()
        };
        let check = cross_compare(&model, &sys, &opts).unwrap();
        assert_eq!(check.verdict, Verdict::Fail);
    }
}
