//! Evolution equations for the four network classes.
//!
//! Each class assembles the time derivative of its state vector together
//! with a [`Diagnostics`] record carrying the total energy, the internal
//! entropy production rate, and the external power channels. One sign
//! convention holds throughout:
//!
//! * Port flows are positive into the attached compartment. A positive flow
//!   carries the prescribed injection state, a non-positive flow carries the
//!   compartment's own intensive state, so outflow is non-dissipative.
//! * For a coupling between compartments `k` and `l`, `Q_kl` is the
//!   heat-channel power leaving `k` toward `l` and `Jm_kl` the molar flux
//!   from `k` to `l`. A positive semi-definite coefficient matrix then sends
//!   heat from hot to cold and matter down the chemical potential gradient,
//!   and the pair's entropy production is a nonnegative quadratic form.
//!
//! Assembly is pure in `(model, t, y)`: no caches, no interior mutability.

use crate::gas::GasError;
use crate::model::{CouplingKind, NetworkModel, PortSpec, StateLayout, SystemClass};
use thiserror::Error;

/// Failure while evaluating the evolution equations at one state.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    /// A prescribed injection state at a port left the gas domain.
    #[error("port {id}: {source}")]
    Port { id: String, source: GasError },
    /// A compartment's extensive state left the gas domain.
    #[error("compartment {id}: {source}")]
    Compartment { id: String, source: GasError },
    /// The shared-entropy temperature inversion left the gas domain.
    #[error("shared temperature: {source}")]
    SharedTemperature { source: GasError },
    /// A compartment ran out of matter.
    #[error("compartment {id}: moles exhausted, N = {n}")]
    MolesExhausted { id: String, n: f64 },
    /// The piston position no longer encloses a positive volume.
    #[error("piston geometry invalid, q = {q}")]
    Geometry { q: f64 },
    /// A class-specific entry point was called on a different class.
    #[error("operation needs class {expected}, model is {got}")]
    WrongClass { expected: &'static str, got: &'static str },
    /// The state vector does not match the model layout.
    #[error("state has {got} slots, layout needs {expected}")]
    StateLength { expected: usize, got: usize },
    /// A port, source, or coupling names a compartment the model lacks.
    #[error("{referrer} targets unknown compartment {compartment:?}")]
    UnknownCompartment { referrer: String, compartment: String },
    /// The mechanical class model carries no mechanics block.
    #[error("mechanical class model carries no mechanics block")]
    MissingMechanics,
    /// An inflow port of the mechanical class has no prescribed velocity.
    #[error("port {port}: no prescribed matter velocity")]
    MissingPortVelocity { port: String },
    /// A coupling kind is not admissible in the model's class.
    #[error("coupling {pair}: kind not admissible in class {class}")]
    UnsupportedCoupling { pair: String, class: &'static str },
    /// A heat source appears outside the per-compartment-entropy class.
    #[error("source {id}: heat sources need class non_simple, model is {class}")]
    UnsupportedSource { id: String, class: &'static str },
}

/// Resolved flow state at one port at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PortResolution {
    /// Molar flow rate (mol/s), positive into the compartment.
    pub j: f64,
    /// Entropy flow rate (J/(K·s)); always `s_a · j`.
    pub j_s: f64,
    /// Temperature carried by the flow (K).
    pub t_a: f64,
    /// Pressure carried by the flow (Pa).
    pub p_a: f64,
    /// Chemical potential carried by the flow (J/mol), thermal part only.
    pub mu_a: f64,
    /// Molar entropy carried by the flow (J/(K·mol)).
    pub s_a: f64,
    /// Molar enthalpy carried by the flow (J/mol).
    pub h_a: f64,
    /// Matter velocity at the port (m/s); zero outside the mechanical class.
    pub v_a: f64,
}

/// One coupling's fluxes, indexed by the joined compartments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairFlux {
    /// Index of the first joined compartment.
    pub k: usize,
    /// Index of the second joined compartment.
    pub l: usize,
    /// Heat-channel power leaving `k` toward `l` (W).
    pub q_kl: f64,
    /// Molar flux from `k` to `l` (mol/s).
    pub jm_kl: f64,
}

/// Internal fluxes of one state: coupling fluxes and friction forces.
#[derive(Debug, Clone, PartialEq)]
pub struct FluxSet {
    /// One entry per declared coupling, in declaration order.
    pub pairs: Vec<PairFlux>,
    /// Friction force on the piston coordinate (N); zero without mechanics.
    pub friction_q: f64,
    /// Friction force on the species bulk coordinate (N).
    pub friction_x: f64,
}

/// Energy, entropy, and power bookkeeping of one assembled state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Diagnostics {
    /// Total energy (J), kinetic terms included.
    pub e: f64,
    /// Total entropy (J/K).
    pub s_total: f64,
    /// Internal entropy production rate (W/K).
    pub i: f64,
    /// External mechanical power (W).
    pub p_w: f64,
    /// External heating power (W).
    pub p_h: f64,
    /// External matter-transfer power (W).
    pub p_m: f64,
    /// Chain-rule energy rate minus the power channel sum (W).
    pub first_law_residual: f64,
}

/// Intensive and molar view of one compartment at one state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompartmentView {
    /// Moles (mol).
    pub n: f64,
    /// Occupied volume (m³); slaved to the piston position when mechanical.
    pub vol: f64,
    /// Temperature (K).
    pub t: f64,
    /// Pressure (Pa).
    pub p: f64,
    /// Chemical potential (J/mol).
    pub mu: f64,
    /// Molar entropy (J/(K·mol)).
    pub s: f64,
    /// Molar enthalpy (J/mol).
    pub h: f64,
    /// Molar internal energy (J/mol).
    pub u: f64,
}

struct Assembly {
    dy: Vec<f64>,
    diag: Diagnostics,
}

fn check_length(layout: &StateLayout, y: &[f64]) -> Result<(), DynamicsError> {
    if y.len() == layout.len() {
        Ok(())
    } else {
        Err(DynamicsError::StateLength { expected: layout.len(), got: y.len() })
    }
}

fn compartment_of(
    model: &NetworkModel,
    referrer: &str,
    id: &str,
) -> Result<usize, DynamicsError> {
    model.compartment_index(id).ok_or_else(|| DynamicsError::UnknownCompartment {
        referrer: referrer.to_string(),
        compartment: id.to_string(),
    })
}

/// The single temperature at which the compartments of a shared-entropy
/// network jointly carry total entropy `s_shared`. Each compartment's molar
/// entropy at its own pressure is linear in ln T with slope c_v, so the
/// inversion is closed-form.
fn shared_temperature(
    gas: &crate::gas::GasSpec,
    s_shared: f64,
    ns: &[f64],
    vols: &[f64],
) -> Result<f64, GasError> {
    let n_tot: f64 = ns.iter().sum();
    let mut offset = 0.0;
    for (&n, &vol) in ns.iter().zip(vols) {
        let c0 = gas.s_ref
            - gas.c_p * gas.t_ref.ln()
            - gas.r * (n * gas.r / (vol * gas.p_ref)).ln();
        offset += n * c0;
    }
    let t = ((s_shared - offset) / (gas.c_v * n_tot)).exp();
    if t > 0.0 && t.is_finite() {
        Ok(t)
    } else {
        Err(GasError::NonPositive { field: "T", value: t })
    }
}

/// Intensive view of every compartment at state `y`, in declaration order.
pub fn compartment_states(
    model: &NetworkModel,
    y: &[f64],
) -> Result<Vec<CompartmentView>, DynamicsError> {
    let layout = model.layout();
    check_length(&layout, y)?;
    let view_of = |id: &str, s_total: f64, n: f64, vol: f64| {
        if !(n > 0.0) {
            return Err(DynamicsError::MolesExhausted { id: id.to_string(), n });
        }
        let ms = model
            .gas
            .intensive_from_extensive(s_total, n, vol)
            .map_err(|source| DynamicsError::Compartment { id: id.to_string(), source })?;
        Ok(CompartmentView {
            n,
            vol,
            t: ms.t,
            p: ms.p,
            mu: ms.mu,
            s: ms.s,
            h: ms.h,
            u: ms.u,
        })
    };
    match model.system_class {
        SystemClass::SimpleSingle => {
            let comp = &model.compartments[0];
            Ok(vec![view_of(&comp.id, y[layout.s()], y[layout.n_k(0)], comp.vol)?])
        }
        SystemClass::SimpleMechanical => {
            let mech = model.mechanics.as_ref().ok_or(DynamicsError::MissingMechanics)?;
            let q = y[layout.q()];
            if !(q > 0.0) {
                return Err(DynamicsError::Geometry { q });
            }
            let comp = &model.compartments[0];
            Ok(vec![view_of(&comp.id, y[layout.s()], y[layout.n_k(0)], mech.a_section * q)?])
        }
        SystemClass::SimpleDiffusion => {
            let kk = model.compartments.len();
            let ns: Vec<f64> = (0..kk).map(|k| y[layout.n_k(k)]).collect();
            for (comp, &n) in model.compartments.iter().zip(&ns) {
                if !(n > 0.0) {
                    return Err(DynamicsError::MolesExhausted { id: comp.id.clone(), n });
                }
            }
            let vols: Vec<f64> = model.compartments.iter().map(|c| c.vol).collect();
            let t = shared_temperature(&model.gas, y[layout.s()], &ns, &vols)
                .map_err(|source| DynamicsError::SharedTemperature { source })?;
            model
                .compartments
                .iter()
                .enumerate()
                .map(|(k, comp)| {
                    let p = ns[k] * model.gas.r * t / comp.vol;
                    let ms = model.gas.molar_state(t, p).map_err(|source| {
                        DynamicsError::Compartment { id: comp.id.clone(), source }
                    })?;
                    Ok(CompartmentView {
                        n: ns[k],
                        vol: comp.vol,
                        t,
                        p,
                        mu: ms.mu,
                        s: ms.s,
                        h: ms.h,
                        u: ms.u,
                    })
                })
                .collect()
        }
        SystemClass::NonSimple => model
            .compartments
            .iter()
            .enumerate()
            .map(|(k, comp)| view_of(&comp.id, y[layout.s_k(k)], y[layout.n_k(k)], comp.vol))
            .collect(),
    }
}

/// Flow state of `port` at time `t`: prescribed injection state for inflow,
/// the attached compartment's own state for outflow.
pub fn resolve_port(
    model: &NetworkModel,
    t: f64,
    y: &[f64],
    port: &PortSpec,
) -> Result<PortResolution, DynamicsError> {
    let views = compartment_states(model, y)?;
    let k = compartment_of(model, &format!("port {}", port.id), &port.compartment)?;
    let xdot = if model.system_class == SystemClass::SimpleMechanical {
        Some(y[model.layout().xdot()])
    } else {
        None
    };
    resolve_port_view(model, t, port, &views[k], xdot)
}

fn resolve_port_view(
    model: &NetworkModel,
    t: f64,
    port: &PortSpec,
    view: &CompartmentView,
    xdot: Option<f64>,
) -> Result<PortResolution, DynamicsError> {
    let j = port.j.eval(t);
    let inflow = j > 0.0;
    let (t_a, p_a, mu_a, s_a, h_a) = if inflow {
        let ms = model
            .gas
            .molar_state(port.t_in.eval(t), port.p_in.eval(t))
            .map_err(|source| DynamicsError::Port { id: port.id.clone(), source })?;
        (ms.t, ms.p, ms.mu, ms.s, ms.h)
    } else {
        (view.t, view.p, view.mu, view.s, view.h)
    };
    let v_a = match xdot {
        None => 0.0,
        Some(xd) => {
            if inflow {
                let mech = model.mechanics.as_ref().ok_or(DynamicsError::MissingMechanics)?;
                mech.port_velocities
                    .iter()
                    .find(|(id, _)| id == &port.id)
                    .ok_or_else(|| DynamicsError::MissingPortVelocity { port: port.id.clone() })?
                    .1
                    .eval(t)
            } else {
                xd
            }
        }
    };
    Ok(PortResolution { j, j_s: s_a * j, t_a, p_a, mu_a, s_a, h_a, v_a })
}

/// Coupling fluxes from the intensive states of the joined compartments.
///
/// Returns `(Q_kl, Jm_kl)`: heat-channel power leaving `k` toward `l` and
/// molar flux from `k` to `l`. The heat-matter matrix acts on the forces
/// `(1/T_l - 1/T_k, mu_k/T_k - mu_l/T_l)`, so the pair's entropy production
/// `Q_kl·f_H + Jm_kl·f_M` is the matrix's quadratic form and nonnegative
/// whenever the matrix is positive semi-definite. Temperatures must be
/// positive.
pub fn onsager_fluxes(
    kind: &CouplingKind,
    t_k: f64,
    t_l: f64,
    mu_k: f64,
    mu_l: f64,
) -> (f64, f64) {
    match *kind {
        CouplingKind::DiffusionG { g } => (0.0, g * (mu_k - mu_l)),
        CouplingKind::Onsager2x2 { l_hh, l_hm, l_mh, l_mm } => {
            let f_h = 1.0 / t_l - 1.0 / t_k;
            let f_m = mu_k / t_k - mu_l / t_l;
            (l_hh * f_h + l_hm * f_m, l_mh * f_h + l_mm * f_m)
        }
    }
}

/// Coupling fluxes and friction forces of the whole network at state `y`.
pub fn internal_fluxes(model: &NetworkModel, y: &[f64]) -> Result<FluxSet, DynamicsError> {
    let views = compartment_states(model, y)?;
    let mut pairs = Vec::with_capacity(model.couplings.len());
    for coupling in &model.couplings {
        let label = format!("coupling {}-{}", coupling.pair.0, coupling.pair.1);
        let k = compartment_of(model, &label, &coupling.pair.0)?;
        let l = compartment_of(model, &label, &coupling.pair.1)?;
        check_coupling_kind(model, coupling)?;
        let (q_kl, jm_kl) =
            onsager_fluxes(&coupling.kind, views[k].t, views[l].t, views[k].mu, views[l].mu);
        pairs.push(PairFlux { k, l, q_kl, jm_kl });
    }
    let (friction_q, friction_x) = match (&model.mechanics, model.system_class) {
        (Some(mech), SystemClass::SimpleMechanical) => {
            let layout = model.layout();
            let f = -mech.lambda_fr * (y[layout.qdot()] - y[layout.xdot()]);
            (f, -f)
        }
        _ => (0.0, 0.0),
    };
    Ok(FluxSet { pairs, friction_q, friction_x })
}

fn check_coupling_kind(
    model: &NetworkModel,
    coupling: &crate::model::CouplingSpec,
) -> Result<(), DynamicsError> {
    let admissible = match coupling.kind {
        CouplingKind::DiffusionG { .. } => model.system_class == SystemClass::SimpleDiffusion,
        CouplingKind::Onsager2x2 { .. } => model.system_class == SystemClass::NonSimple,
    };
    if admissible {
        Ok(())
    } else {
        Err(DynamicsError::UnsupportedCoupling {
            pair: format!("{}-{}", coupling.pair.0, coupling.pair.1),
            class: model.system_class.name(),
        })
    }
}

fn check_no_sources(model: &NetworkModel) -> Result<(), DynamicsError> {
    match model.sources.first() {
        None => Ok(()),
        Some(source) => Err(DynamicsError::UnsupportedSource {
            id: source.id.clone(),
            class: model.system_class.name(),
        }),
    }
}

/// State derivative at `(t, y)` for any class.
pub fn rhs(model: &NetworkModel, t: f64, y: &[f64]) -> Result<Vec<f64>, DynamicsError> {
    Ok(assemble(model, t, y)?.dy)
}

/// State derivative plus diagnostics in a single assembly pass.
pub fn rhs_with_diagnostics(
    model: &NetworkModel,
    t: f64,
    y: &[f64],
) -> Result<(Vec<f64>, Diagnostics), DynamicsError> {
    let a = assemble(model, t, y)?;
    Ok((a.dy, a.diag))
}

/// Energy, entropy production, and power channels at `(t, y)`.
pub fn power_channels(
    model: &NetworkModel,
    t: f64,
    y: &[f64],
) -> Result<Diagnostics, DynamicsError> {
    Ok(assemble(model, t, y)?.diag)
}

fn expect_class(
    model: &NetworkModel,
    expected: SystemClass,
) -> Result<(), DynamicsError> {
    if model.system_class == expected {
        Ok(())
    } else {
        Err(DynamicsError::WrongClass {
            expected: expected.name(),
            got: model.system_class.name(),
        })
    }
}

/// State derivative for the single-compartment class.
pub fn rhs_simple_single(
    model: &NetworkModel,
    t: f64,
    y: &[f64],
) -> Result<Vec<f64>, DynamicsError> {
    expect_class(model, SystemClass::SimpleSingle)?;
    rhs(model, t, y)
}

/// State derivative for the piston class.
pub fn rhs_mechanical(
    model: &NetworkModel,
    t: f64,
    y: &[f64],
) -> Result<Vec<f64>, DynamicsError> {
    expect_class(model, SystemClass::SimpleMechanical)?;
    rhs(model, t, y)
}

/// State derivative for the shared-entropy diffusion class.
pub fn rhs_simple_diffusion(
    model: &NetworkModel,
    t: f64,
    y: &[f64],
) -> Result<Vec<f64>, DynamicsError> {
    expect_class(model, SystemClass::SimpleDiffusion)?;
    rhs(model, t, y)
}

/// State derivative for the per-compartment-entropy class.
pub fn rhs_non_simple(
    model: &NetworkModel,
    t: f64,
    y: &[f64],
) -> Result<Vec<f64>, DynamicsError> {
    expect_class(model, SystemClass::NonSimple)?;
    rhs(model, t, y)
}

fn assemble(model: &NetworkModel, t: f64, y: &[f64]) -> Result<Assembly, DynamicsError> {
    match model.system_class {
        SystemClass::SimpleSingle => assemble_simple_single(model, t, y),
        SystemClass::SimpleMechanical => assemble_mechanical(model, t, y),
        SystemClass::SimpleDiffusion => assemble_simple_diffusion(model, t, y),
        SystemClass::NonSimple => assemble_non_simple(model, t, y),
    }
}

fn assemble_simple_single(
    model: &NetworkModel,
    t: f64,
    y: &[f64],
) -> Result<Assembly, DynamicsError> {
    let layout = model.layout();
    let views = compartment_states(model, y)?;
    check_no_sources(model)?;
    if let Some(coupling) = model.couplings.first() {
        check_coupling_kind(model, coupling)?;
    }
    let view = &views[0];
    let mut n_dot = 0.0;
    let mut advected = 0.0;
    let mut i_rate = 0.0;
    let mut p_m = 0.0;
    for port in &model.ports {
        let pr = resolve_port_view(model, t, port, view, None)?;
        n_dot += pr.j;
        advected += pr.j_s;
        i_rate += pr.j * (pr.h_a - view.t * pr.s_a - view.mu) / view.t;
        p_m += pr.j * pr.mu_a + pr.j_s * pr.t_a;
    }
    let s_dot = i_rate + advected;
    let mut dy = vec![0.0; layout.len()];
    dy[layout.s()] = s_dot;
    dy[layout.n_k(0)] = n_dot;
    dy[layout.sigma()] = i_rate;
    dy[layout.gamma()] = view.t;
    dy[layout.w_k(0)] = view.mu;
    let e_dot = view.t * s_dot + view.mu * n_dot;
    Ok(Assembly {
        dy,
        diag: Diagnostics {
            e: view.n * view.u,
            s_total: y[layout.s()],
            i: i_rate,
            p_w: 0.0,
            p_h: 0.0,
            p_m,
            first_law_residual: e_dot - p_m,
        },
    })
}

fn assemble_mechanical(
    model: &NetworkModel,
    t: f64,
    y: &[f64],
) -> Result<Assembly, DynamicsError> {
    let layout = model.layout();
    let views = compartment_states(model, y)?;
    check_no_sources(model)?;
    if let Some(coupling) = model.couplings.first() {
        check_coupling_kind(model, coupling)?;
    }
    let mech = model.mechanics.as_ref().ok_or(DynamicsError::MissingMechanics)?;
    let view = &views[0];
    let m0 = model.gas.m0;
    let qdot = y[layout.qdot()];
    let xdot = y[layout.xdot()];
    let f_q_fr = -mech.lambda_fr * (qdot - xdot);
    let f_x_fr = -f_q_fr;
    let f_ext_q = mech.f_ext_q.eval(t);
    let f_ext_x = mech.f_ext_x.eval(t);
    let mut n_dot = 0.0;
    let mut advected = 0.0;
    let mut momentum_in = 0.0;
    let mut mixing = 0.0;
    let mut p_m = 0.0;
    for port in &model.ports {
        let pr = resolve_port_view(model, t, port, view, Some(xdot))?;
        n_dot += pr.j;
        advected += pr.j_s;
        momentum_in += m0 * pr.j * pr.v_a;
        mixing +=
            pr.j * (0.5 * m0 * (pr.v_a - xdot).powi(2) + pr.h_a - view.t * pr.s_a - view.mu);
        p_m += pr.j * (0.5 * m0 * pr.v_a * pr.v_a + pr.h_a);
    }
    let qdd = (view.p * mech.a_section + f_q_fr + f_ext_q) / mech.m;
    let xdd = (f_x_fr + momentum_in + f_ext_x - m0 * n_dot * xdot) / (m0 * view.n);
    let ts_dot = -f_q_fr * qdot - f_x_fr * xdot + mixing + view.t * advected;
    let s_dot = ts_dot / view.t;
    let i_rate = s_dot - advected;
    let mut dy = vec![0.0; layout.len()];
    dy[layout.s()] = s_dot;
    dy[layout.n_k(0)] = n_dot;
    dy[layout.q()] = qdot;
    dy[layout.qdot()] = qdd;
    dy[layout.x()] = xdot;
    dy[layout.xdot()] = xdd;
    dy[layout.sigma()] = i_rate;
    dy[layout.gamma()] = view.t;
    dy[layout.w_k(0)] = view.mu - 0.5 * m0 * xdot * xdot;
    let e = 0.5 * mech.m * qdot * qdot + 0.5 * m0 * view.n * xdot * xdot + view.n * view.u;
    let p_w = f_ext_q * qdot + f_ext_x * xdot;
    let e_dot = mech.m * qdot * qdd
        + m0 * view.n * xdot * xdd
        + 0.5 * m0 * xdot * xdot * n_dot
        + ts_dot
        + view.mu * n_dot
        - view.p * mech.a_section * qdot;
    Ok(Assembly {
        dy,
        diag: Diagnostics {
            e,
            s_total: y[layout.s()],
            i: i_rate,
            p_w,
            p_h: 0.0,
            p_m,
            first_law_residual: e_dot - (p_w + p_m),
        },
    })
}

fn assemble_simple_diffusion(
    model: &NetworkModel,
    t: f64,
    y: &[f64],
) -> Result<Assembly, DynamicsError> {
    let layout = model.layout();
    let views = compartment_states(model, y)?;
    check_no_sources(model)?;
    let kk = views.len();
    let t_sh = views[0].t;
    let mut n_dot = vec![0.0; kk];
    let mut exchange = 0.0;
    let mut advected = 0.0;
    let mut i_rate = 0.0;
    let mut p_m = 0.0;
    for coupling in &model.couplings {
        let label = format!("coupling {}-{}", coupling.pair.0, coupling.pair.1);
        let k = compartment_of(model, &label, &coupling.pair.0)?;
        let l = compartment_of(model, &label, &coupling.pair.1)?;
        check_coupling_kind(model, coupling)?;
        let (_, jm) =
            onsager_fluxes(&coupling.kind, t_sh, t_sh, views[k].mu, views[l].mu);
        n_dot[k] -= jm;
        n_dot[l] += jm;
        exchange += jm * (views[k].mu - views[l].mu);
    }
    i_rate += exchange / t_sh;
    let mut port_mix = 0.0;
    for port in &model.ports {
        let k = compartment_of(model, &format!("port {}", port.id), &port.compartment)?;
        let view = &views[k];
        let pr = resolve_port_view(model, t, port, view, None)?;
        n_dot[k] += pr.j;
        advected += pr.j_s;
        port_mix += pr.j * (pr.h_a - t_sh * pr.s_a - view.mu);
        p_m += pr.j * pr.mu_a + pr.j_s * pr.t_a;
    }
    i_rate += port_mix / t_sh;
    let s_dot = (exchange + port_mix + t_sh * advected) / t_sh;
    let mut dy = vec![0.0; layout.len()];
    dy[layout.s()] = s_dot;
    dy[layout.sigma()] = i_rate;
    dy[layout.gamma()] = t_sh;
    let mut e = 0.0;
    let mut e_dot = t_sh * s_dot;
    for k in 0..kk {
        dy[layout.n_k(k)] = n_dot[k];
        dy[layout.w_k(k)] = views[k].mu;
        e += views[k].n * views[k].u;
        e_dot += views[k].mu * n_dot[k];
    }
    Ok(Assembly {
        dy,
        diag: Diagnostics {
            e,
            s_total: y[layout.s()],
            i: i_rate,
            p_w: 0.0,
            p_h: 0.0,
            p_m,
            first_law_residual: e_dot - p_m,
        },
    })
}

fn assemble_non_simple(
    model: &NetworkModel,
    t: f64,
    y: &[f64],
) -> Result<Assembly, DynamicsError> {
    let layout = model.layout();
    let views = compartment_states(model, y)?;
    let kk = views.len();
    let mut ts_dot = vec![0.0; kk];
    let mut n_dot = vec![0.0; kk];
    let mut entropy_in = vec![0.0; kk];
    let mut i_rate = 0.0;
    let mut p_h = 0.0;
    let mut p_m = 0.0;
    for coupling in &model.couplings {
        let label = format!("coupling {}-{}", coupling.pair.0, coupling.pair.1);
        let k = compartment_of(model, &label, &coupling.pair.0)?;
        let l = compartment_of(model, &label, &coupling.pair.1)?;
        check_coupling_kind(model, coupling)?;
        let (vk, vl) = (&views[k], &views[l]);
        let (q_kl, jm_kl) = onsager_fluxes(&coupling.kind, vk.t, vl.t, vk.mu, vl.mu);
        ts_dot[k] += -q_kl + jm_kl * vk.mu;
        ts_dot[l] += q_kl - jm_kl * vl.mu;
        n_dot[k] -= jm_kl;
        n_dot[l] += jm_kl;
        let f_h = 1.0 / vl.t - 1.0 / vk.t;
        let f_m = vk.mu / vk.t - vl.mu / vl.t;
        i_rate += q_kl * f_h + jm_kl * f_m;
    }
    for port in &model.ports {
        let k = compartment_of(model, &format!("port {}", port.id), &port.compartment)?;
        let view = &views[k];
        let pr = resolve_port_view(model, t, port, view, None)?;
        let mix = pr.j * (pr.h_a - view.t * pr.s_a - view.mu);
        n_dot[k] += pr.j;
        ts_dot[k] += mix + view.t * pr.j_s;
        entropy_in[k] += pr.j_s;
        i_rate += mix / view.t;
        p_m += pr.j * pr.mu_a + pr.j_s * pr.t_a;
    }
    for source in &model.sources {
        let k = compartment_of(model, &format!("source {}", source.id), &source.compartment)?;
        let j_s = source.j_s.eval(t);
        let t_h = source.t_h.eval(t);
        ts_dot[k] += j_s * t_h;
        entropy_in[k] += j_s;
        i_rate += j_s * (t_h - views[k].t) / views[k].t;
        p_h += j_s * t_h;
    }
    let mut dy = vec![0.0; layout.len()];
    let mut e = 0.0;
    let mut e_dot = 0.0;
    let mut s_total = 0.0;
    for k in 0..kk {
        let view = &views[k];
        let s_dot = ts_dot[k] / view.t;
        dy[layout.s_k(k)] = s_dot;
        dy[layout.n_k(k)] = n_dot[k];
        dy[layout.sigma_k(k)] = s_dot - entropy_in[k];
        dy[layout.gamma_k(k)] = view.t;
        dy[layout.w_k(k)] = view.mu;
        e += view.n * view.u;
        e_dot += ts_dot[k] + view.mu * n_dot[k];
        s_total += y[layout.s_k(k)];
    }
    Ok(Assembly {
        dy,
        diag: Diagnostics {
            e,
            s_total,
            i: i_rate,
            p_w: 0.0,
            p_h,
            p_m,
            first_law_residual: e_dot - (p_h + p_m),
        },
    })
}
