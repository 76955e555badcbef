//! End-to-end acceptance checks for the shipped engine.
//!
//! Each test exercises one contracted behavior through the public API only:
//! conservation and entropy accounting on the demo catalog, algebraic
//! identities on random states, agreement between the specialized and the
//! variational solvers, step-halving convergence, parser totality, and the
//! sensitivity of every audit to a matched sign flip in the dynamics.

use std::time::Instant;

use approx::{assert_abs_diff_eq, assert_relative_eq};
use nalgebra::DVector;
use thermonet::audit::{
    cross_validation_audit, entropy_bookkeeping_audit, equilibrium_audit, first_law_audit,
    gauge_invariance_audit, mole_balance_audit, second_law_audit, AuditOptions,
};
use thermonet::dynamics::{
    compartment_states, internal_fluxes, onsager_fluxes, power_channels, resolve_port, rhs,
};
use thermonet::gas::GasSpec;
use thermonet::integrate::{integrate, IntegrationOptions, Method, Trajectory};
use thermonet::model::{
    CompartmentSpec, CouplingKind, CouplingSpec, HeatSourceSpec, MechanicsSpec, NetworkModel,
    PortSpec, SystemClass, TimeFunction,
};
use thermonet::nonholonomic::{
    abstract_to_network_state, embed_initial_state, embed_open_system, integrate_abstract,
    AbstractOptions,
};
use thermonet::scenario::{demo, parse_scenario, DEMO_NAMES};

fn gas() -> GasSpec {
    GasSpec::nitrogen_like()
}

fn lcg(seed: u64) -> impl FnMut() -> f64 {
    let mut state = seed;
    move || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64
    }
}

fn lcg_bytes(seed: u64) -> impl FnMut(usize) -> Vec<u8> {
    let mut state = seed;
    move |len| {
        let mut bytes = Vec::with_capacity(len);
        while bytes.len() < len {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            bytes.extend_from_slice(&state.to_le_bytes());
        }
        bytes.truncate(len);
        bytes
    }
}

fn demo_model(name: &str) -> NetworkModel {
    demo(name).unwrap_or_else(|| panic!("demo {name} is declared")).model
}

/// High-accuracy adaptive options used for the demo balance runs.
fn precise_options() -> IntegrationOptions {
    IntegrationOptions {
        method: Method::Rk45,
        h0: 1e-3,
        h_min: 1e-9,
        h_max: 0.01,
        abs_tol: 1e-9,
        rel_tol: 1e-9,
        sample_dt: 0.0,
    }
}

fn fixed_step(h: f64) -> IntegrationOptions {
    IntegrationOptions {
        method: Method::Rk4,
        h0: h,
        h_min: h * 1e-6,
        h_max: h.max(0.1),
        sample_dt: 0.0,
        ..IntegrationOptions::default()
    }
}

fn run_demo(name: &str, t_final: f64) -> (NetworkModel, Trajectory, f64) {
    let model = demo_model(name);
    let state0 = model.initial_state().unwrap();
    let start = Instant::now();
    let traj = integrate(&model, &state0, t_final, &precise_options()).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    assert!(
        traj.completed(),
        "demo {name} must cover the full horizon, stopped with {:?}",
        traj.termination
    );
    (model, traj, elapsed)
}

fn tank_with_ports(ports: Vec<PortSpec>) -> NetworkModel {
    let gas = gas();
    NetworkModel {
        gas,
        system_class: SystemClass::SimpleSingle,
        compartments: vec![CompartmentSpec {
            id: "tank".into(),
            vol: 0.05,
            s0: gas.entropy_total(300.0, 2.0, 0.05).unwrap(),
            n0: 2.0,
        }],
        ports,
        sources: Vec::new(),
        couplings: Vec::new(),
        mechanics: None,
    }
}

fn port(id: &str, j: f64, t_in: f64, p_in: f64) -> PortSpec {
    PortSpec {
        id: id.into(),
        compartment: "tank".into(),
        j: TimeFunction::Constant(j),
        t_in: TimeFunction::Constant(t_in),
        p_in: TimeFunction::Constant(p_in),
    }
}

fn tank_state(model: &NetworkModel, t0: f64, n: f64) -> Vec<f64> {
    let layout = model.layout();
    let mut y = vec![0.0; layout.len()];
    y[layout.s()] = model.gas.entropy_total(t0, n, model.compartments[0].vol).unwrap();
    y[layout.n_k(0)] = n;
    y
}

/// Isolated two-compartment heat-matter network at 320 K / 300 K.
fn relaxing_pair(l_hh: f64, l_mm: f64, cross: f64) -> NetworkModel {
    let gas = gas();
    let vol = 0.02;
    NetworkModel {
        gas,
        system_class: SystemClass::NonSimple,
        compartments: vec![
            CompartmentSpec {
                id: "left".into(),
                vol,
                s0: gas.entropy_total(320.0, 0.5, vol).unwrap(),
                n0: 0.5,
            },
            CompartmentSpec {
                id: "right".into(),
                vol,
                s0: gas.entropy_total(300.0, 0.5, vol).unwrap(),
                n0: 0.5,
            },
        ],
        ports: Vec::new(),
        sources: Vec::new(),
        couplings: vec![CouplingSpec {
            pair: ("left".into(), "right".into()),
            kind: CouplingKind::Onsager2x2 { l_hh, l_hm: cross, l_mh: cross, l_mm },
        }],
        mechanics: None,
    }
}

/// Isolated two-compartment diffusion network sharing one entropy.
fn diffusion_pair(g: f64) -> NetworkModel {
    let gas = gas();
    let (v1, v2) = (0.02, 0.03);
    let (n1, n2) = (0.8, 0.4);
    let s0 = gas.entropy_total(300.0, n1, v1).unwrap() + gas.entropy_total(300.0, n2, v2).unwrap();
    NetworkModel {
        gas,
        system_class: SystemClass::SimpleDiffusion,
        compartments: vec![
            CompartmentSpec { id: "a".into(), vol: v1, s0, n0: n1 },
            CompartmentSpec { id: "b".into(), vol: v2, s0: 0.0, n0: n2 },
        ],
        ports: Vec::new(),
        sources: Vec::new(),
        couplings: vec![CouplingSpec {
            pair: ("a".into(), "b".into()),
            kind: CouplingKind::DiffusionG { g },
        }],
        mechanics: None,
    }
}

#[test]
fn every_demo_balances_energy_at_tight_tolerance() {
    let opts = AuditOptions::default();
    for name in DEMO_NAMES {
        let (model, traj, elapsed) = run_demo(name, 10.0);
        let check = first_law_audit(&model, &traj, &opts).unwrap();
        assert!(
            check.passed(),
            "first law violated on demo {name}: residual {:.3e} at t = {} against tolerance {:.0e}",
            check.max_violation,
            check.location_t,
            check.tolerance
        );
        assert!(
            elapsed < 5.0,
            "demo {name} took {elapsed:.2} s to integrate, the budget is 5 s"
        );
    }
}

#[test]
fn entropy_production_stays_nonnegative_and_underpressure_feeds_are_flagged() {
    let opts = AuditOptions::default();
    for name in DEMO_NAMES {
        let (model, traj, _) = run_demo(name, 10.0);
        let check = second_law_audit(&model, &traj, &opts).unwrap();
        assert!(
            check.passed(),
            "second law violated on demo {name}: {:.3e} at t = {}",
            check.max_violation,
            check.location_t
        );
    }

    // A feed below the tank pressure mixes irreversibly in the wrong
    // direction and must be caught.
    let model = tank_with_ports(vec![port("feed", 0.01, 300.0, 5e4)]);
    let state0 = model.initial_state().unwrap();
    let traj = integrate(&model, &state0, 1.0, &fixed_step(1e-3)).unwrap();
    let check = second_law_audit(&model, &traj, &opts).unwrap();
    assert!(
        !check.passed(),
        "an underpressure feed produces negative entropy and must fail, got violation {:.3e}",
        check.max_violation
    );
}

#[test]
fn entropy_production_formulas_agree_on_random_states() {
    let mut next = lcg(0x5eed_ac01);
    for _ in 0..1000 {
        let t0 = 250.0 + 200.0 * next();
        let n = 0.5 + 3.0 * next();
        let model = tank_with_ports(vec![
            port("in", 0.001 + 0.05 * next(), 250.0 + 300.0 * next(), 5e4 + 3e5 * next()),
            port("out", -0.04 * next(), 300.0, 1e5),
        ]);
        let y = tank_state(&model, t0, n);
        let diag = power_channels(&model, 0.0, &y).unwrap();
        let view = compartment_states(&model, &y).unwrap()[0];
        let mut by_force = 0.0;
        let mut by_molar_balance = 0.0;
        let mut by_enthalpy_gap = 0.0;
        for p in &model.ports {
            let pr = resolve_port(&model, 0.0, &y, p).unwrap();
            by_force += (pr.j_s * (pr.t_a - view.t) + pr.j * (pr.mu_a - view.mu)) / view.t;
            let port_u = model.gas.c_v * (pr.t_a - model.gas.t_ref) + model.gas.u_ref;
            let port_molar_vol = model.gas.r * pr.t_a / pr.p_a;
            by_molar_balance += pr.j
                * (view.t * (view.s - pr.s_a) - (view.u - port_u)
                    - (view.p * view.vol / view.n - pr.p_a * port_molar_vol))
                / view.t;
            by_enthalpy_gap += pr.j * ((pr.h_a - view.h) - view.t * (pr.s_a - view.s)) / view.t;
        }
        assert_relative_eq!(diag.i, by_force, max_relative = 1e-10, epsilon = 1e-12);
        assert_relative_eq!(diag.i, by_molar_balance, max_relative = 1e-10, epsilon = 1e-12);
        assert_relative_eq!(diag.i, by_enthalpy_gap, max_relative = 1e-10, epsilon = 1e-12);
    }
}

#[test]
fn state_function_derivatives_match_their_conjugate_intensives() {
    let g = gas();
    let mut next = lcg(0x5eed_1d);
    for _ in 0..100 {
        let t = 220.0 + 330.0 * next();
        let p = 4e4 + 2.6e5 * next();
        let n = 0.3 + 2.7 * next();
        let vol = n * g.r * t / p;
        let s = g.entropy_total(t, n, vol).unwrap();
        let st = g.intensive_from_extensive(s, n, vol).unwrap();

        let u_at = |s_total: f64, moles: f64, volume: f64| {
            g.internal_energy_total(s_total, moles, volume).unwrap()
        };
        let ds = 3e-6 * (1.0 + s.abs());
        let dn = 1e-6 * n;
        let dv = 1e-6 * vol;
        let du_ds = (u_at(s + ds, n, vol) - u_at(s - ds, n, vol)) / (2.0 * ds);
        let du_dn = (u_at(s, n + dn, vol) - u_at(s, n - dn, vol)) / (2.0 * dn);
        let du_dv = (u_at(s, n, vol + dv) - u_at(s, n, vol - dv)) / (2.0 * dv);

        let bound = |x: f64| 1e-6 * x.abs().max(1.0);
        assert!(
            (du_ds - st.t).abs() <= bound(st.t),
            "dU/dS = {du_ds} disagrees with T = {}",
            st.t
        );
        assert!(
            (du_dn - st.mu).abs() <= bound(st.mu),
            "dU/dN = {du_dn} disagrees with mu = {}",
            st.mu
        );
        assert!(
            (-du_dv - st.p).abs() <= bound(st.p),
            "-dU/dV = {} disagrees with p = {}",
            -du_dv,
            st.p
        );

        // Molar identities of the same state.
        let scale = |x: f64| 1e-10 * x.abs().max(1.0);
        assert!(
            (st.mu - (st.h - st.t * st.s)).abs() <= scale(st.mu),
            "mu must equal h - T s"
        );
        assert!(
            (st.h - (st.u + st.p * st.v)).abs() <= scale(st.h),
            "h must equal u + p v"
        );
    }
}

#[test]
fn specialized_and_variational_solvers_agree_on_tank_and_piston() {
    let opts = AuditOptions::default();
    let start = Instant::now();
    for name in ["tank", "piston"] {
        let model = demo_model(name);
        let check = cross_validation_audit(&model, &opts).unwrap();
        assert!(
            check.passed(),
            "solver disagreement on demo {name}: gap {:.3e} over tolerance {:.0e}",
            check.max_violation,
            check.tolerance
        );
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 30.0, "cross-validation took {elapsed:.1} s, the budget is 30 s");
}

#[test]
fn piston_dissipation_splits_into_three_nonnegative_terms() {
    let mut next = lcg(0x5eed_9157);
    for _ in 0..300 {
        let lambda = 0.5 + 2.5 * next();
        let t0 = 260.0 + 180.0 * next();
        let n = 0.5 + 2.5 * next();
        let q = 0.3 + 0.9 * next();
        let qdot = -0.5 + next();
        let xdot = -0.5 + next();
        let a_section = 0.1;
        let p_gas = n * gas().r * t0 / (a_section * q);
        let t_a = 260.0 + 200.0 * next();
        let p_a = p_gas * (1.0 + 1.5 * next());
        let j = 0.005 + 0.045 * next();
        let v_a = -2.0 + 4.0 * next();

        let g = gas();
        let model = NetworkModel {
            gas: g,
            system_class: SystemClass::SimpleMechanical,
            compartments: vec![CompartmentSpec {
                id: "cyl".into(),
                vol: a_section * q,
                s0: 0.0,
                n0: n,
            }],
            ports: vec![PortSpec {
                id: "in".into(),
                compartment: "cyl".into(),
                j: TimeFunction::Constant(j),
                t_in: TimeFunction::Constant(t_a),
                p_in: TimeFunction::Constant(p_a),
            }],
            sources: Vec::new(),
            couplings: Vec::new(),
            mechanics: Some(MechanicsSpec {
                m: 5.0,
                a_section,
                lambda_fr: lambda,
                f_ext_q: TimeFunction::Constant(0.0),
                f_ext_x: TimeFunction::Constant(0.0),
                q0: q,
                qdot0: qdot,
                x0: 0.0,
                xdot0: xdot,
                port_velocities: vec![("in".into(), TimeFunction::Constant(v_a))],
            }),
        };
        let layout = model.layout();
        let mut y = vec![0.0; layout.len()];
        y[layout.s()] = model.gas.entropy_total(t0, n, a_section * q).unwrap();
        y[layout.n_k(0)] = n;
        y[layout.q()] = q;
        y[layout.qdot()] = qdot;
        y[layout.xdot()] = xdot;

        let diag = power_channels(&model, 0.0, &y).unwrap();
        let view = compartment_states(&model, &y).unwrap()[0];
        let pr = resolve_port(&model, 0.0, &y, &model.ports[0]).unwrap();
        let friction = lambda * (qdot - xdot) * (qdot - xdot) / view.t;
        let kinetic = pr.j * 0.5 * model.gas.m0 * (pr.v_a - xdot) * (pr.v_a - xdot) / view.t;
        let mixing = pr.j * (pr.h_a - view.t * pr.s_a - view.mu) / view.t;
        assert!(friction >= 0.0, "friction dissipation is a square over T");
        assert!(kinetic >= 0.0, "kinetic mixing is a square over T");
        assert!(
            mixing >= -1e-12,
            "pressurized inflow mixing must not consume entropy, got {mixing}"
        );
        assert_relative_eq!(
            diag.i,
            friction + kinetic + mixing,
            max_relative = 1e-9,
            epsilon = 1e-12
        );
    }
}

#[test]
fn isolated_networks_conserve_energy_and_moles() {
    let cross = 0.1 * (2e5 * 0.05_f64).sqrt();
    let cases: [(&str, NetworkModel); 2] = [
        ("diffusion pair", diffusion_pair(2e-4)),
        ("heat-matter pair", relaxing_pair(2e5, 0.05, cross)),
    ];
    for (label, model) in &cases {
        let state0 = model.initial_state().unwrap();
        let traj = integrate(model, &state0, 10.0, &fixed_step(1e-3)).unwrap();
        assert!(traj.completed(), "{label} must finish its horizon");
        assert!(
            traj.samples.len() > 10_000,
            "{label} must take at least ten thousand steps, got {}",
            traj.samples.len()
        );
        let layout = model.layout();
        let e0 = traj.samples[0].diagnostics.e;
        let n0: f64 = (0..model.compartments.len())
            .map(|k| traj.samples[0].state.y[layout.n_k(k)])
            .sum();
        for sample in &traj.samples {
            let e = sample.diagnostics.e;
            let n: f64 = (0..model.compartments.len())
                .map(|k| sample.state.y[layout.n_k(k)])
                .sum();
            assert!(
                (e - e0).abs() <= 1e-8 * e0.abs().max(1.0),
                "{label} energy drifted by {:.3e} at t = {}",
                e - e0,
                sample.state.t
            );
            assert!(
                (n - n0).abs() <= 1e-8 * n0.abs().max(1.0),
                "{label} moles drifted by {:.3e} at t = {}",
                n - n0,
                sample.state.t
            );
        }
    }

    // The pairwise matter fluxes cancel bitwise in the vector field.
    let mut next = lcg(0x5eed_77);
    for (label, model) in &cases {
        let layout = model.layout();
        for _ in 0..50 {
            let t1 = 260.0 + 180.0 * next();
            let t2 = 260.0 + 180.0 * next();
            let n1 = 0.2 + 2.0 * next();
            let n2 = 0.2 + 2.0 * next();
            let mut y = vec![0.0; layout.len()];
            match model.system_class {
                SystemClass::SimpleDiffusion => {
                    let s1 = model.gas.entropy_total(t1, n1, model.compartments[0].vol).unwrap();
                    let s2 = model.gas.entropy_total(t1, n2, model.compartments[1].vol).unwrap();
                    y[layout.s()] = s1 + s2;
                }
                SystemClass::NonSimple => {
                    y[layout.s_k(0)] =
                        model.gas.entropy_total(t1, n1, model.compartments[0].vol).unwrap();
                    y[layout.s_k(1)] =
                        model.gas.entropy_total(t2, n2, model.compartments[1].vol).unwrap();
                }
                _ => unreachable!("both cases are two-compartment classes"),
            }
            y[layout.n_k(0)] = n1;
            y[layout.n_k(1)] = n2;
            let dy = rhs(model, 0.0, &y).unwrap();
            assert_eq!(
                dy[layout.n_k(0)] + dy[layout.n_k(1)],
                0.0,
                "{label} matter fluxes must cancel exactly"
            );
        }
    }
}

#[test]
fn isolated_pair_relaxes_to_a_uniform_state() {
    let model = relaxing_pair(2e6, 0.05, 0.1 * (2e6 * 0.05_f64).sqrt());
    let state0 = model.initial_state().unwrap();
    let options = IntegrationOptions {
        method: Method::Rk45,
        h0: 1e-3,
        abs_tol: 1e-11,
        rel_tol: 1e-11,
        ..IntegrationOptions::default()
    };
    let traj = integrate(&model, &state0, 20.0, &options).unwrap();
    assert!(traj.completed());
    let check = equilibrium_audit(&model, &traj, &AuditOptions::default()).unwrap();
    assert!(
        check.passed(),
        "intensive spreads failed to close: {:.3e} ({:?})",
        check.max_violation,
        check.note
    );
    for pair in traj.samples.windows(2) {
        let (a, b) = (pair[0].diagnostics.s_total, pair[1].diagnostics.s_total);
        assert!(
            b >= a - 1e-10 * a.abs().max(1.0),
            "total entropy decreased from {a} to {b} at t = {}",
            pair[1].state.t
        );
    }
}

#[test]
fn cross_coupling_moves_matter_on_a_pure_temperature_gradient() {
    // Direct flux map: matched potential ratios kill the matter force, so
    // any molar flux comes from the cross coefficient alone.
    let (t_k, t_l) = (380.0, 320.0);
    let (mu_k, mu_l) = (10.0 * t_k, 10.0 * t_l);
    let with_cross = CouplingKind::Onsager2x2 { l_hh: 3e4, l_hm: 0.5, l_mh: 0.5, l_mm: 1e-6 };
    let (_, jm) = onsager_fluxes(&with_cross, t_k, t_l, mu_k, mu_l);
    assert!(jm.abs() > 1e-6, "cross coefficient must move matter, got {jm}");
    let no_cross = CouplingKind::Onsager2x2 { l_hh: 3e4, l_hm: 0.0, l_mh: 0.0, l_mm: 1e-6 };
    let (_, jm0) = onsager_fluxes(&no_cross, t_k, t_l, mu_k, mu_l);
    assert_eq!(jm0, 0.0, "without cross terms a zero matter force moves no matter");

    // Full-model version: pick moles so that mu_1/T_1 = mu_2/T_2 and check
    // the resolved coupling flux.
    let g = gas();
    let t1 = 380.0;
    let t2 = 320.0;
    let p1 = 2.0 * g.r * t1 / 0.05;
    let target = g.molar_state(t1, p1).unwrap().mu * t2 / t1;
    let mut lo = 1e-3;
    let mut hi = 50.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let p2 = mid * g.r * t2 / 0.08;
        if g.molar_state(t2, p2).unwrap().mu < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let n2 = 0.5 * (lo + hi);
    let model = NetworkModel {
        gas: g,
        system_class: SystemClass::NonSimple,
        compartments: vec![
            CompartmentSpec { id: "hot".into(), vol: 0.05, s0: 0.0, n0: 2.0 },
            CompartmentSpec { id: "cold".into(), vol: 0.08, s0: 0.0, n0: n2 },
        ],
        ports: Vec::new(),
        sources: Vec::new(),
        couplings: vec![CouplingSpec {
            pair: ("hot".into(), "cold".into()),
            kind: CouplingKind::Onsager2x2 { l_hh: 3e4, l_hm: 0.02, l_mh: 0.02, l_mm: 1e-6 },
        }],
        mechanics: None,
    };
    let layout = model.layout();
    let mut y = vec![0.0; layout.len()];
    y[layout.s_k(0)] = g.entropy_total(t1, 2.0, 0.05).unwrap();
    y[layout.s_k(1)] = g.entropy_total(t2, n2, 0.08).unwrap();
    y[layout.n_k(0)] = 2.0;
    y[layout.n_k(1)] = n2;
    let views = compartment_states(&model, &y).unwrap();
    let f_m = views[0].mu / views[0].t - views[1].mu / views[1].t;
    assert_abs_diff_eq!(f_m, 0.0, epsilon = 1e-8);
    let fluxes = internal_fluxes(&model, &y).unwrap();
    assert!(
        fluxes.pairs[0].jm_kl.abs() > 1e-9,
        "thermal diffusion must move matter, got {}",
        fluxes.pairs[0].jm_kl
    );
    let diag = power_channels(&model, 0.0, &y).unwrap();
    assert!(diag.i >= 0.0, "admissible coupling keeps production nonnegative, got {}", diag.i);

    // Any symmetric positive semi-definite matrix dissipates.
    let mut next = lcg(0x5eed_04);
    for _ in 0..1000 {
        let (a, b) = (2.0 * next() - 1.0, 2.0 * next() - 1.0);
        let (c, d) = (2.0 * next() - 1.0, 2.0 * next() - 1.0);
        let s_h = 1e4 * (0.1 + next());
        let s_m = 1e-2 * (0.1 + next());
        let kind = CouplingKind::Onsager2x2 {
            l_hh: s_h * s_h * (a * a + b * b),
            l_hm: s_h * s_m * (a * c + b * d),
            l_mh: s_h * s_m * (a * c + b * d),
            l_mm: s_m * s_m * (c * c + d * d),
        };
        let t_k = 260.0 + 200.0 * next();
        let t_l = 260.0 + 200.0 * next();
        let mu_k = -5e3 + 1.3e4 * next();
        let mu_l = -5e3 + 1.3e4 * next();
        let (q, jm) = onsager_fluxes(&kind, t_k, t_l, mu_k, mu_l);
        let f_h = 1.0 / t_l - 1.0 / t_k;
        let f_m = mu_k / t_k - mu_l / t_l;
        let production = q * f_h + jm * f_m;
        let scale = (q * f_h).abs() + (jm * f_m).abs();
        assert!(
            production >= -1e-12 * scale,
            "force-flux product went negative: {production} at scale {scale}"
        );
    }
}

#[test]
fn rk4_error_falls_sixteenfold_when_the_step_halves() {
    for name in ["two-compartment", "serial-membrane"] {
        let model = demo_model(name);
        let state0 = model.initial_state().unwrap();
        let final_state = |h: f64| {
            let traj = integrate(&model, &state0, 1.0, &fixed_step(h)).unwrap();
            assert!(traj.completed());
            let last = traj.samples.last().unwrap();
            assert_abs_diff_eq!(last.state.t, 1.0, epsilon = 1e-12);
            last.state.y.clone()
        };
        let reference = final_state(0.00625);
        let error = |h: f64| {
            final_state(h)
                .iter()
                .zip(&reference)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0_f64, f64::max)
        };
        let e_coarse = error(0.05);
        let e_fine = error(0.025);
        assert!(
            e_fine > 1e-14,
            "demo {name} is too smooth to measure order at these steps, error {e_coarse:.3e}"
        );
        let ratio = e_coarse / e_fine;
        assert!(
            (12.0..=20.0).contains(&ratio),
            "demo {name} error ratio {ratio:.2} is outside the fourth-order band \
             (coarse {e_coarse:.3e}, fine {e_fine:.3e})"
        );
    }
}

#[test]
fn parser_survives_random_byte_strings() {
    let mut bytes_of = lcg_bytes(0x5eed_f022);
    let mut next = lcg(0x5eed_f023);
    let mut parsed_ok = 0_u32;
    for _ in 0..100_000 {
        let len = (next() * 200.0) as usize;
        let raw = bytes_of(len);
        let text = String::from_utf8_lossy(&raw);
        if parse_scenario(&text).is_ok() {
            parsed_ok += 1;
        }
    }
    // Random bytes almost never form a valid document; the point is that
    // every outcome is a value, not a crash.
    assert!(parsed_ok <= 1, "random byte strings parsed as valid documents {parsed_ok} times");
}

#[test]
fn every_audit_fails_under_a_matched_sign_flip() {
    let opts = AuditOptions::default();

    // Flipping a feed's direction breaks the energy and mole ledgers.
    let good = demo_model("tank");
    let mut bad = good.clone();
    bad.ports[0].j = TimeFunction::Constant(-0.01);
    let state0 = good.initial_state().unwrap();
    let traj = integrate(&bad, &state0, 1.0, &fixed_step(1e-3)).unwrap();
    let first = first_law_audit(&good, &traj, &opts).unwrap();
    assert!(!first.passed(), "a reversed feed must break the first-law audit");
    let moles = mole_balance_audit(&good, &traj, &opts).unwrap();
    assert!(!moles.passed(), "a reversed feed must break the mole-balance audit");

    // Flipping the heat conductance pumps heat against the gradient. The
    // matter channel stays off so nothing else produces entropy.
    let source0 = relaxing_pair(2e4, 0.0, 0.0).initial_state().unwrap();
    let anti = relaxing_pair(-2e4, 0.0, 0.0);
    let traj = integrate(&anti, &source0, 2.0, &fixed_step(1e-3)).unwrap();
    let second = second_law_audit(&anti, &traj, &opts).unwrap();
    assert!(!second.passed(), "anti-relaxation must break the second-law audit");
    let equilibrium = equilibrium_audit(&anti, &traj, &opts).unwrap();
    assert!(!equilibrium.passed(), "a growing spread must break the equilibrium audit");

    // Flipping a heat source's entropy flow corrupts the production ledger.
    let mut heated = relaxing_pair(2e4, 0.01, 0.0);
    heated.sources.push(HeatSourceSpec {
        id: "heater".into(),
        compartment: "left".into(),
        j_s: TimeFunction::Constant(0.05),
        t_h: TimeFunction::Constant(340.0),
    });
    let mut chilled = heated.clone();
    chilled.sources[0].j_s = TimeFunction::Constant(-0.05);
    let state0 = heated.initial_state().unwrap();
    let traj = integrate(&chilled, &state0, 1.0, &fixed_step(1e-3)).unwrap();
    let bookkeeping = entropy_bookkeeping_audit(&heated, &traj, &opts).unwrap();
    assert!(!bookkeeping.passed(), "a reversed source must break the entropy bookkeeping audit");

    // The gauge audit passes because its reference shifts are compensated
    // in the start state; an uncompensated shift visibly moves observables.
    let reference = demo_model("tank");
    let gauge = gauge_invariance_audit(&reference, &opts).unwrap();
    assert!(gauge.passed(), "compensated reference shifts must leave observables fixed");
    let mut shifted = reference.clone();
    shifted.gas = GasSpec::new(
        shifted.gas.r,
        shifted.gas.c_v,
        shifted.gas.t_ref,
        shifted.gas.p_ref,
        shifted.gas.u_ref,
        shifted.gas.s_ref + 25.0,
        shifted.gas.m0,
    )
    .unwrap();
    let state0 = reference.initial_state().unwrap();
    let base = integrate(&reference, &state0, 0.3, &fixed_step(1e-3)).unwrap();
    let moved = integrate(&shifted, &state0, 0.3, &fixed_step(1e-3)).unwrap();
    let mut t_gap = 0.0_f64;
    for (a, b) in base.samples.iter().zip(&moved.samples) {
        let t_a = compartment_states(&reference, &a.state.y).unwrap()[0].t;
        let t_b = compartment_states(&shifted, &b.state.y).unwrap()[0].t;
        t_gap = t_gap.max((t_a - t_b).abs());
    }
    assert!(
        t_gap > 1.0,
        "an uncompensated reference shift must move the temperature, gap {t_gap:.3e}"
    );

    // Negating the constraint offsets drives the variational solver off the
    // network trajectory.
    let model = demo_model("tank");
    let state0 = model.initial_state().unwrap();
    let network = integrate(&model, &state0, 0.2, &fixed_step(1e-3)).unwrap();
    let mut sys = embed_open_system(&model).unwrap();
    let original = std::mem::replace(
        &mut sys.constraint_offset,
        Box::new(|_, _, _| DVector::<f64>::zeros(0)),
    );
    sys.constraint_offset = Box::new(move |t, q, v| -original(t, q, v));
    let a0 = embed_initial_state(&model, state0.t, &state0.y).unwrap();
    let abstract_traj = integrate_abstract(
        &sys,
        &a0,
        state0.t + 0.2,
        &AbstractOptions { h: 1e-3, projection_tolerance: 1e-9 },
    )
    .unwrap();
    let mapped = abstract_to_network_state(&model, abstract_traj.states.last().unwrap()).unwrap();
    let reference = &network.samples.last().unwrap().state.y;
    let gap = mapped
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1.0))
        .fold(0.0_f64, f64::max);
    assert!(
        gap > 1e-5,
        "negated constraint offsets must separate the solvers, relative gap {gap:.3e}"
    );
}
