//! Declarative description of an open thermodynamic network.
//!
//! A [`NetworkModel`] lists compartments, matter ports, heat sources,
//! inter-compartment couplings, and optional piston mechanics, together with
//! the gas definition and the system class that selects which evolution
//! equations apply. Validation is a pure function returning a list of
//! violations; the flat state vector layout is a deterministic function of
//! the class and the declaration order.

use crate::gas::GasSpec;
use thiserror::Error;

/// Piecewise-defined scalar function of time.
#[derive(Debug, Clone, PartialEq)]
pub enum TimeFunction {
    /// Constant value.
    Constant(f64),
    /// Linear ramp from `x0` at `t0` to `x1` at `t1`, clamped outside.
    Ramp { x0: f64, x1: f64, t0: f64, t1: f64 },
    /// Sampled (time, value) pairs, linearly interpolated, clamped outside.
    Table(Vec<(f64, f64)>),
}

impl TimeFunction {
    /// Evaluates the function at time `t`.
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            TimeFunction::Constant(x) => *x,
            TimeFunction::Ramp { x0, x1, t0, t1 } => {
                if t <= *t0 {
                    *x0
                } else if t >= *t1 {
                    *x1
                } else {
                    x0 + (x1 - x0) * (t - t0) / (t1 - t0)
                }
            }
            TimeFunction::Table(points) => {
                let first = points.first().expect("validated tables are nonempty");
                let last = points.last().expect("validated tables are nonempty");
                if t <= first.0 {
                    return first.1;
                }
                if t >= last.0 {
                    return last.1;
                }
                let i = points.partition_point(|(ti, _)| *ti <= t);
                let (t0, x0) = points[i - 1];
                let (t1, x1) = points[i];
                x0 + (x1 - x0) * (t - t0) / (t1 - t0)
            }
        }
    }

    fn well_formed(&self) -> Result<(), String> {
        match self {
            TimeFunction::Constant(x) => {
                if !x.is_finite() {
                    return Err(format!("constant value {x} is not finite"));
                }
            }
            TimeFunction::Ramp { x0, x1, t0, t1 } => {
                if ![*x0, *x1, *t0, *t1].iter().all(|v| v.is_finite()) {
                    return Err("ramp parameters must be finite".into());
                }
                if t1 <= t0 {
                    return Err(format!("ramp needs t0 < t1, got t0 = {t0}, t1 = {t1}"));
                }
            }
            TimeFunction::Table(points) => {
                if points.is_empty() {
                    return Err("table needs at least one (time, value) pair".into());
                }
                for pair in points.windows(2) {
                    if pair[1].0 <= pair[0].0 {
                        return Err(format!(
                            "table times must be strictly increasing, got {} then {}",
                            pair[0].0, pair[1].0
                        ));
                    }
                }
                if points.iter().any(|(t, x)| !t.is_finite() || !x.is_finite()) {
                    return Err("table entries must be finite".into());
                }
            }
        }
        Ok(())
    }
}

/// One gas compartment of fixed volume.
#[derive(Debug, Clone, PartialEq)]
pub struct CompartmentSpec {
    /// Unique name.
    pub id: String,
    /// Fixed volume (m³). For the piston class the volume is slaved to the
    /// piston position and this value fixes the initial geometry.
    pub vol: f64,
    /// Initial entropy (J/K). Shared-entropy classes sum these over
    /// compartments to seed the single network entropy.
    pub s0: f64,
    /// Initial moles (mol).
    pub n0: f64,
}

/// A matter port attached to one compartment.
///
/// `j` is signed: positive means flow into the network. The inflow state
/// (`t_in`, `p_in`) is consulted only while `j(t) > 0`; during outflow the
/// port carries the compartment's own intensive state.
#[derive(Debug, Clone, PartialEq)]
pub struct PortSpec {
    pub id: String,
    pub compartment: String,
    pub j: TimeFunction,
    pub t_in: TimeFunction,
    pub p_in: TimeFunction,
}

/// An external heat source attached to one compartment, prescribed by its
/// entropy flow rate and source temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatSourceSpec {
    pub id: String,
    pub compartment: String,
    pub j_s: TimeFunction,
    pub t_h: TimeFunction,
}

/// Closure for one inter-compartment exchange channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CouplingKind {
    /// Pure matter diffusion with conductance `g` ≥ 0 (mol²·K/(J·s)).
    DiffusionG { g: f64 },
    /// Linear 2×2 coupling of heat and matter fluxes to their conjugate
    /// forces; must be symmetric and positive semi-definite.
    Onsager2x2 { l_hh: f64, l_hm: f64, l_mh: f64, l_mm: f64 },
}

/// An exchange channel between two distinct compartments.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingSpec {
    /// Unordered compartment pair.
    pub pair: (String, String),
    pub kind: CouplingKind,
}

/// Piston mechanics for the mechanical class.
#[derive(Debug, Clone, PartialEq)]
pub struct MechanicsSpec {
    /// Piston mass (kg).
    pub m: f64,
    /// Cylinder cross-sectional area (m²).
    pub a_section: f64,
    /// Friction coefficient between piston and gas motion (N·s/m), ≥ 0.
    pub lambda_fr: f64,
    /// External force on the piston coordinate (N).
    pub f_ext_q: TimeFunction,
    /// External force on the species bulk coordinate (N).
    pub f_ext_x: TimeFunction,
    /// Initial piston position (m); must satisfy `a_section · q0 = vol`.
    pub q0: f64,
    /// Initial piston velocity (m/s).
    pub qdot0: f64,
    /// Initial species bulk position (m).
    pub x0: f64,
    /// Initial species bulk velocity (m/s).
    pub xdot0: f64,
    /// Prescribed matter velocity at each port, keyed by port id.
    pub port_velocities: Vec<(String, TimeFunction)>,
}

/// Which family of evolution equations the network obeys.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SystemClass {
    /// One compartment, fixed volume, matter ports only.
    SimpleSingle,
    /// One compartment closed by a moving piston.
    SimpleMechanical,
    /// Several compartments sharing one entropy (a single temperature),
    /// exchanging matter internally.
    SimpleDiffusion,
    /// Several compartments, each with its own entropy and temperature,
    /// exchanging heat and matter internally and with heat sources.
    NonSimple,
}

impl SystemClass {
    /// Short lower-case name used in scenario files and messages.
    pub fn name(self) -> &'static str {
        match self {
            SystemClass::SimpleSingle => "simple_single",
            SystemClass::SimpleMechanical => "simple_mechanical",
            SystemClass::SimpleDiffusion => "simple_diffusion",
            SystemClass::NonSimple => "non_simple",
        }
    }
}

/// Full declaration of an open thermodynamic network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    pub gas: GasSpec,
    pub system_class: SystemClass,
    pub compartments: Vec<CompartmentSpec>,
    pub ports: Vec<PortSpec>,
    pub sources: Vec<HeatSourceSpec>,
    pub couplings: Vec<CouplingSpec>,
    pub mechanics: Option<MechanicsSpec>,
}

/// One broken validation rule, naming the entity it was found on.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub entity: String,
    pub rule: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.entity, self.rule)
    }
}

/// Structural failure when building or reshaping state vectors.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("model validation failed: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error("state vector length {got} does not match layout length {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("unknown state label {0:?}")]
    UnknownLabel(String),
}

/// Ordered mapping between state-vector slots and named variables.
///
/// The layout is determined by the system class and the compartment order:
/// entropies first, then moles, then mechanical coordinates, then the
/// diagnostic displacements.
#[derive(Debug, Clone, PartialEq)]
pub struct StateLayout {
    pub class: SystemClass,
    /// Number of compartments K.
    pub n_comp: usize,
    labels: Vec<String>,
}

impl StateLayout {
    /// Builds the layout for `class` with `n_comp` compartments.
    pub fn new(class: SystemClass, n_comp: usize) -> Self {
        let mut labels = Vec::new();
        match class {
            SystemClass::SimpleSingle => {
                labels.extend(["S", "N", "Σ", "Γ", "W"].map(str::to_owned));
            }
            SystemClass::SimpleMechanical => {
                labels.extend(
                    ["S", "N", "q", "qdot", "x", "xdot", "Σ", "Γ", "W"].map(str::to_owned),
                );
            }
            SystemClass::SimpleDiffusion => {
                labels.push("S".to_owned());
                labels.extend((1..=n_comp).map(|k| format!("N^{k}")));
                labels.push("Σ".to_owned());
                labels.push("Γ".to_owned());
                labels.extend((1..=n_comp).map(|k| format!("W_{k}")));
            }
            SystemClass::NonSimple => {
                labels.extend((1..=n_comp).map(|k| format!("S_{k}")));
                labels.extend((1..=n_comp).map(|k| format!("N^{k}")));
                labels.extend((1..=n_comp).map(|k| format!("Σ_{k}")));
                labels.extend((1..=n_comp).map(|k| format!("Γ^{k}")));
                labels.extend((1..=n_comp).map(|k| format!("W_{k}")));
            }
        }
        StateLayout { class, n_comp, labels }
    }

    /// Slot labels in vector order.
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// State vector length.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    /// True when the layout is empty (never the case for valid classes).
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Slot index of a label, if present.
    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Shared entropy slot (simple classes only).
    pub fn s(&self) -> usize {
        debug_assert!(self.class != SystemClass::NonSimple);
        0
    }

    /// Per-compartment entropy slot, `k` zero-based (non-simple class).
    pub fn s_k(&self, k: usize) -> usize {
        debug_assert!(self.class == SystemClass::NonSimple);
        k
    }

    /// Moles slot of compartment `k` (zero-based).
    pub fn n_k(&self, k: usize) -> usize {
        match self.class {
            SystemClass::SimpleSingle | SystemClass::SimpleMechanical => 1,
            SystemClass::SimpleDiffusion => 1 + k,
            SystemClass::NonSimple => self.n_comp + k,
        }
    }

    /// Piston position slot (mechanical class).
    pub fn q(&self) -> usize {
        2
    }

    /// Piston velocity slot (mechanical class).
    pub fn qdot(&self) -> usize {
        3
    }

    /// Species bulk position slot (mechanical class).
    pub fn x(&self) -> usize {
        4
    }

    /// Species bulk velocity slot (mechanical class).
    pub fn xdot(&self) -> usize {
        5
    }

    /// Internal-entropy slot (simple classes).
    pub fn sigma(&self) -> usize {
        match self.class {
            SystemClass::SimpleSingle => 2,
            SystemClass::SimpleMechanical => 6,
            SystemClass::SimpleDiffusion => 1 + self.n_comp,
            SystemClass::NonSimple => unreachable!("per-compartment Σ in the non-simple class"),
        }
    }

    /// Per-compartment internal-entropy slot (non-simple class).
    pub fn sigma_k(&self, k: usize) -> usize {
        debug_assert!(self.class == SystemClass::NonSimple);
        2 * self.n_comp + k
    }

    /// Thermal displacement slot (simple classes).
    pub fn gamma(&self) -> usize {
        self.sigma() + 1
    }

    /// Per-compartment thermal displacement slot (non-simple class).
    pub fn gamma_k(&self, k: usize) -> usize {
        debug_assert!(self.class == SystemClass::NonSimple);
        3 * self.n_comp + k
    }

    /// Molar displacement slot of compartment `k` (zero-based).
    pub fn w_k(&self, k: usize) -> usize {
        match self.class {
            SystemClass::SimpleSingle => 4,
            SystemClass::SimpleMechanical => 8,
            SystemClass::SimpleDiffusion => 2 + self.n_comp + 1 + k,
            SystemClass::NonSimple => 4 * self.n_comp + k,
        }
    }
}

/// Instantaneous state of a network: time plus the flat state vector, with
/// the layout that names each slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub t: f64,
    pub y: Vec<f64>,
    pub layout: StateLayout,
}

impl SystemState {
    /// Labeled view of the vector, in slot order.
    pub fn unpack(&self) -> Result<Vec<(String, f64)>, ModelError> {
        if self.y.len() != self.layout.len() {
            return Err(ModelError::LengthMismatch {
                expected: self.layout.len(),
                got: self.y.len(),
            });
        }
        Ok(self
            .layout
            .labels()
            .iter()
            .cloned()
            .zip(self.y.iter().copied())
            .collect())
    }

    /// Rebuilds a state from a labeled view produced by [`unpack`](Self::unpack).
    pub fn pack(
        t: f64,
        layout: StateLayout,
        labeled: &[(String, f64)],
    ) -> Result<SystemState, ModelError> {
        if labeled.len() != layout.len() {
            return Err(ModelError::LengthMismatch {
                expected: layout.len(),
                got: labeled.len(),
            });
        }
        let mut y = vec![0.0; layout.len()];
        for (label, value) in labeled {
            let slot = layout
                .index_of(label)
                .ok_or_else(|| ModelError::UnknownLabel(label.clone()))?;
            y[slot] = *value;
        }
        Ok(SystemState { t, y, layout })
    }

    /// Value of a labeled slot, if the label exists.
    pub fn get(&self, label: &str) -> Option<f64> {
        self.layout.index_of(label).map(|i| self.y[i])
    }
}

impl NetworkModel {
    /// Index of a compartment id, if declared.
    pub fn compartment_index(&self, id: &str) -> Option<usize> {
        self.compartments.iter().position(|c| c.id == id)
    }

    /// The state layout implied by class and compartment count.
    pub fn layout(&self) -> StateLayout {
        StateLayout::new(self.system_class, self.compartments.len())
    }

    /// Checks every declaration rule; returns all violations found.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut push = |entity: &str, rule: String| {
            out.push(Violation { entity: entity.to_owned(), rule });
        };

        if let Err(e) = self.gas.check() {
            push("gas", e.to_string());
        }

        let k = self.compartments.len();
        match self.system_class {
            SystemClass::SimpleSingle | SystemClass::SimpleMechanical => {
                if k != 1 {
                    push(
                        "model",
                        format!(
                            "class {} needs exactly one compartment, found {k}",
                            self.system_class.name()
                        ),
                    );
                }
            }
            SystemClass::SimpleDiffusion | SystemClass::NonSimple => {
                if k == 0 {
                    push(
                        "model",
                        format!("class {} needs at least one compartment", self.system_class.name()),
                    );
                }
            }
        }

        let mut seen_ids: Vec<&str> = Vec::new();
        for comp in &self.compartments {
            if seen_ids.contains(&comp.id.as_str()) {
                push(&comp.id, "duplicate compartment id".into());
            }
            seen_ids.push(&comp.id);
            if !(comp.vol > 0.0) {
                push(&comp.id, format!("volume must be positive, got {}", comp.vol));
            }
            if !(comp.n0 > 0.0) {
                push(&comp.id, format!("initial moles must be positive, got {}", comp.n0));
            }
        }

        let mut port_ids: Vec<&str> = Vec::new();
        for port in &self.ports {
            if port_ids.contains(&port.id.as_str()) {
                push(&port.id, "duplicate port id".into());
            }
            port_ids.push(&port.id);
            if self.compartment_index(&port.compartment).is_none() {
                push(&port.id, format!("unknown compartment {:?}", port.compartment));
            }
            for (name, tf) in [("J", &port.j), ("T_in", &port.t_in), ("p_in", &port.p_in)] {
                if let Err(e) = tf.well_formed() {
                    push(&port.id, format!("{name}: {e}"));
                }
            }
        }

        let mut source_ids: Vec<&str> = Vec::new();
        for source in &self.sources {
            if source_ids.contains(&source.id.as_str()) {
                push(&source.id, "duplicate heat source id".into());
            }
            source_ids.push(&source.id);
            if self.system_class != SystemClass::NonSimple {
                push(
                    &source.id,
                    format!("heat sources are not allowed in class {}", self.system_class.name()),
                );
            }
            if self.compartment_index(&source.compartment).is_none() {
                push(&source.id, format!("unknown compartment {:?}", source.compartment));
            }
            for (name, tf) in [("J_S", &source.j_s), ("T_H", &source.t_h)] {
                if let Err(e) = tf.well_formed() {
                    push(&source.id, format!("{name}: {e}"));
                }
            }
        }

        let mut seen_pairs: Vec<(usize, usize)> = Vec::new();
        for coupling in &self.couplings {
            let label = format!("coupling {}-{}", coupling.pair.0, coupling.pair.1);
            let ka = self.compartment_index(&coupling.pair.0);
            let kb = self.compartment_index(&coupling.pair.1);
            if ka.is_none() {
                push(&label, format!("unknown compartment {:?}", coupling.pair.0));
            }
            if kb.is_none() {
                push(&label, format!("unknown compartment {:?}", coupling.pair.1));
            }
            if let (Some(a), Some(b)) = (ka, kb) {
                if a == b {
                    push(&label, "coupling must join two distinct compartments".into());
                } else {
                    let key = (a.min(b), a.max(b));
                    if seen_pairs.contains(&key) {
                        push(&label, "at most one coupling per compartment pair".into());
                    }
                    seen_pairs.push(key);
                }
            }
            match coupling.kind {
                CouplingKind::DiffusionG { g } => {
                    if self.system_class != SystemClass::SimpleDiffusion {
                        // A bare conductance drives matter down the chemical
                        // potential gradient regardless of temperature. With
                        // unequal compartment temperatures that flux can run
                        // against the entropic force and produce I < 0, so
                        // this closure is only admitted where temperatures are
                        // shared by construction.
                        push(
                            &label,
                            format!(
                                "plain diffusion conductances are only allowed in class {}, \
                                 use a heat-matter coupling matrix here",
                                SystemClass::SimpleDiffusion.name()
                            ),
                        );
                    }
                    if !(g >= 0.0) {
                        push(&label, format!("conductance must be nonnegative, got {g}"));
                    }
                }
                CouplingKind::Onsager2x2 { l_hh, l_hm, l_mh, l_mm } => {
                    if self.system_class != SystemClass::NonSimple {
                        push(
                            &label,
                            format!(
                                "heat-matter coupling matrices are not allowed in class {}",
                                self.system_class.name()
                            ),
                        );
                    }
                    let norm = l_hh.abs().max(l_hm.abs()).max(l_mh.abs()).max(l_mm.abs());
                    if (l_hm - l_mh).abs() > 1e-12 * norm.max(1.0) {
                        push(
                            &label,
                            format!("Onsager symmetry requires L_HM = L_MH, got {l_hm} vs {l_mh}"),
                        );
                    }
                    // Eigenvalues of the symmetric part of a 2×2 matrix.
                    let sym_off = 0.5 * (l_hm + l_mh);
                    let tr = l_hh + l_mm;
                    let det = l_hh * l_mm - sym_off * sym_off;
                    let disc = (0.25 * tr * tr - det).max(0.0).sqrt();
                    let eig_min = 0.5 * tr - disc;
                    if eig_min < -1e-12 * norm.max(1.0) {
                        push(
                            &label,
                            format!(
                                "coupling matrix must be positive semi-definite, \
                                 smallest eigenvalue {eig_min}"
                            ),
                        );
                    }
                }
            }
        }

        match (&self.mechanics, self.system_class) {
            (Some(mech), SystemClass::SimpleMechanical) => {
                if !(mech.m > 0.0) {
                    push("mechanics", format!("piston mass must be positive, got {}", mech.m));
                }
                if !(mech.a_section > 0.0) {
                    push(
                        "mechanics",
                        format!("cross-section must be positive, got {}", mech.a_section),
                    );
                }
                if !(mech.lambda_fr >= 0.0) {
                    push(
                        "mechanics",
                        format!("friction coefficient must be nonnegative, got {}", mech.lambda_fr),
                    );
                }
                if let Some(comp) = self.compartments.first() {
                    let v_q = mech.a_section * mech.q0;
                    if (v_q - comp.vol).abs() > 1e-9 * comp.vol.max(1e-300) {
                        push(
                            "mechanics",
                            format!(
                                "initial position q0 must satisfy A·q0 = V: \
                                 A·q0 = {v_q}, V = {}",
                                comp.vol
                            ),
                        );
                    }
                }
                for (name, tf) in [("F_ext_q", &mech.f_ext_q), ("F_ext_x", &mech.f_ext_x)] {
                    if let Err(e) = tf.well_formed() {
                        push("mechanics", format!("{name}: {e}"));
                    }
                }
                let mut covered: Vec<&str> = Vec::new();
                for (port_id, tf) in &mech.port_velocities {
                    if covered.contains(&port_id.as_str()) {
                        push("mechanics", format!("duplicate port velocity for {port_id:?}"));
                    }
                    covered.push(port_id);
                    if !self.ports.iter().any(|p| &p.id == port_id) {
                        push("mechanics", format!("port velocity names unknown port {port_id:?}"));
                    }
                    if let Err(e) = tf.well_formed() {
                        push("mechanics", format!("v^a for {port_id}: {e}"));
                    }
                }
                for port in &self.ports {
                    if !covered.contains(&port.id.as_str()) {
                        push(
                            "mechanics",
                            format!("port {:?} needs a prescribed matter velocity", port.id),
                        );
                    }
                }
            }
            (Some(_), class) => {
                push("mechanics", format!("mechanics are not allowed in class {}", class.name()));
            }
            (None, SystemClass::SimpleMechanical) => {
                push("model", "class simple_mechanical needs a mechanics section".into());
            }
            (None, _) => {}
        }

        out
    }

    /// Builds the t = 0 state from the declared initial values. Diagnostic
    /// displacements start at zero; only their rates carry physics.
    pub fn initial_state(&self) -> Result<SystemState, ModelError> {
        let violations = self.validate();
        if !violations.is_empty() {
            return Err(ModelError::Invalid(violations));
        }
        let layout = self.layout();
        let mut y = vec![0.0; layout.len()];
        match self.system_class {
            SystemClass::SimpleSingle => {
                y[layout.s()] = self.compartments[0].s0;
                y[layout.n_k(0)] = self.compartments[0].n0;
            }
            SystemClass::SimpleMechanical => {
                let mech = self.mechanics.as_ref().expect("validated above");
                y[layout.s()] = self.compartments[0].s0;
                y[layout.n_k(0)] = self.compartments[0].n0;
                y[layout.q()] = mech.q0;
                y[layout.qdot()] = mech.qdot0;
                y[layout.x()] = mech.x0;
                y[layout.xdot()] = mech.xdot0;
            }
            SystemClass::SimpleDiffusion => {
                y[layout.s()] = self.compartments.iter().map(|c| c.s0).sum();
                for (k, comp) in self.compartments.iter().enumerate() {
                    y[layout.n_k(k)] = comp.n0;
                }
            }
            SystemClass::NonSimple => {
                for (k, comp) in self.compartments.iter().enumerate() {
                    y[layout.s_k(k)] = comp.s0;
                    y[layout.n_k(k)] = comp.n0;
                }
            }
        }
        Ok(SystemState { t: 0.0, y, layout })
    }
}
