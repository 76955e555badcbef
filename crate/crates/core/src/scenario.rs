//! Scenario files, trajectory serialization, and the bundled demos.
//!
//! A scenario is a line-oriented text document. `[kind name]` opens a
//! section, where the kind is one of `gas`, `compartment`, `port`,
//! `source`, `coupling`, `mechanics`, or `run` and the name is required for
//! the sections that declare an id. `key = value` lines fill the current
//! section; values are numbers, bare words, or time functions written as
//! `const <x>`, `ramp <x0> <x1> <t0> <t1>`, or `table <path>`, with table
//! paths resolved against the scenario file's directory. `#` starts a
//! comment. Every parse failure carries the line it happened on.
//!
//! Compartments state their start either as a stored entropy `s0` or as a
//! temperature `t0` that is converted through the gas model. The system
//! class can be given in the run section or left to inference: mechanics
//! implies the piston class, heat sources or coupling matrices imply
//! per-compartment entropies, several compartments imply shared-entropy
//! diffusion, and a single compartment is the plain open tank.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::dynamics::{self, DynamicsError};
use crate::gas::GasSpec;
use crate::integrate::{IntegrationOptions, Method, Trajectory};
use crate::model::{
    CompartmentSpec, CouplingKind, CouplingSpec, HeatSourceSpec, MechanicsSpec, NetworkModel,
    PortSpec, SystemClass, TimeFunction,
};

/// A parsed scenario: the model plus how to run it.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub model: NetworkModel,
    pub options: IntegrationOptions,
    /// Simulation horizon in seconds.
    pub t_final: f64,
}

/// Failures while reading, parsing, or writing scenarios and trajectories.
#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("scenario is invalid: {}", .0.join("; "))]
    Semantic(Vec<String>),
    #[error("table file {path}: {message}")]
    Table { path: String, message: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

const SECTION_KINDS: [&str; 7] = [
    "gas",
    "compartment",
    "port",
    "source",
    "coupling",
    "mechanics",
    "run",
];

#[derive(Debug, Clone)]
struct Entry {
    key: String,
    value: String,
    line: usize,
    column: usize,
}

#[derive(Debug, Clone)]
struct Section {
    kind: String,
    name: String,
    line: usize,
    entries: Vec<Entry>,
}

fn syntax(line: usize, column: usize, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Syntax {
        line,
        column,
        message: message.into(),
    }
}

/// Splits the text into sections without interpreting any values.
fn split_sections(text: &str) -> Result<Vec<Section>, ScenarioError> {
    let mut sections: Vec<Section> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let uncommented = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let trimmed = uncommented.trim();
        if trimmed.is_empty() {
            continue;
        }
        let indent = uncommented.len() - uncommented.trim_start().len();
        let column = indent + 1;
        if let Some(inner) = trimmed.strip_prefix('[') {
            let inner = inner.strip_suffix(']').ok_or_else(|| {
                syntax(line_no, column, "section header must end with ']'")
            })?;
            let mut words = inner.split_whitespace();
            let kind = words
                .next()
                .ok_or_else(|| syntax(line_no, column, "section header needs a kind"))?;
            if !SECTION_KINDS.contains(&kind) {
                return Err(syntax(
                    line_no,
                    column,
                    format!(
                        "unknown section kind {kind:?}, expected one of {}",
                        SECTION_KINDS.join(", ")
                    ),
                ));
            }
            let name = words.next().unwrap_or("").to_string();
            if words.next().is_some() {
                return Err(syntax(
                    line_no,
                    column,
                    "section header takes a kind and at most one name",
                ));
            }
            sections.push(Section {
                kind: kind.to_string(),
                name,
                line: line_no,
                entries: Vec::new(),
            });
        } else if let Some(eq) = trimmed.find('=') {
            let key = trimmed[..eq].trim();
            let value = trimmed[eq + 1..].trim();
            if key.is_empty() || key.split_whitespace().count() != 1 {
                return Err(syntax(line_no, column, "expected a single key before '='"));
            }
            if value.is_empty() {
                return Err(syntax(line_no, column, format!("key {key} has no value")));
            }
            let section = sections.last_mut().ok_or_else(|| {
                syntax(line_no, column, "key-value pair before any section header")
            })?;
            section.entries.push(Entry {
                key: key.to_string(),
                value: value.to_string(),
                line: line_no,
                column,
            });
        } else {
            return Err(syntax(
                line_no,
                column,
                "expected a '[kind name]' header or a 'key = value' pair",
            ));
        }
    }
    Ok(sections)
}

fn parse_number(entry: &Entry) -> Result<f64, ScenarioError> {
    let value: f64 = entry.value.parse().map_err(|_| {
        syntax(
            entry.line,
            entry.column,
            format!("key {} expects a number, got {:?}", entry.key, entry.value),
        )
    })?;
    if !value.is_finite() {
        return Err(syntax(
            entry.line,
            entry.column,
            format!("key {} must be finite, got {}", entry.key, value),
        ));
    }
    Ok(value)
}

fn parse_word(entry: &Entry) -> Result<&str, ScenarioError> {
    if entry.value.split_whitespace().count() != 1 {
        return Err(syntax(
            entry.line,
            entry.column,
            format!("key {} expects a single word", entry.key),
        ));
    }
    Ok(entry.value.as_str())
}

fn parse_time_function(
    entry: &Entry,
    base: Option<&Path>,
) -> Result<TimeFunction, ScenarioError> {
    let tokens: Vec<&str> = entry.value.split_whitespace().collect();
    let bad_arity = |expected: &str| {
        syntax(
            entry.line,
            entry.column,
            format!(
                "key {}: {expected}, got {:?}",
                entry.key, entry.value
            ),
        )
    };
    let number = |token: &str| -> Result<f64, ScenarioError> {
        token.parse::<f64>().map_err(|_| {
            syntax(
                entry.line,
                entry.column,
                format!("key {}: {token:?} is not a number", entry.key),
            )
        })
    };
    match tokens.first().copied() {
        Some("const") => {
            if tokens.len() != 2 {
                return Err(bad_arity("const takes one value"));
            }
            Ok(TimeFunction::Constant(number(tokens[1])?))
        }
        Some("ramp") => {
            if tokens.len() != 5 {
                return Err(bad_arity("ramp takes x0 x1 t0 t1"));
            }
            Ok(TimeFunction::Ramp {
                x0: number(tokens[1])?,
                x1: number(tokens[2])?,
                t0: number(tokens[3])?,
                t1: number(tokens[4])?,
            })
        }
        Some("table") => {
            if tokens.len() != 2 {
                return Err(bad_arity("table takes one path"));
            }
            load_table(tokens[1], base)
        }
        _ => Err(syntax(
            entry.line,
            entry.column,
            format!(
                "key {} expects a time function starting with const, ramp, or table",
                entry.key
            ),
        )),
    }
}

/// Reads a two-column table file: one `t,value` pair per line, comma or
/// whitespace separated, with `#` comments.
fn load_table(path_str: &str, base: Option<&Path>) -> Result<TimeFunction, ScenarioError> {
    let resolved: PathBuf = match base {
        Some(dir) => dir.join(path_str),
        None => PathBuf::from(path_str),
    };
    let text = std::fs::read_to_string(&resolved).map_err(|e| ScenarioError::Table {
        path: resolved.display().to_string(),
        message: e.to_string(),
    })?;
    let mut points = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let uncommented = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let trimmed = uncommented.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .collect();
        let pair: Option<(f64, f64)> = match fields.as_slice() {
            [a, b] => a.parse().ok().zip(b.parse().ok()),
            _ => None,
        };
        let (t, value) = pair.ok_or_else(|| ScenarioError::Table {
            path: resolved.display().to_string(),
            message: format!("line {}: expected 't,value', got {raw:?}", idx + 1),
        })?;
        points.push((t, value));
    }
    Ok(TimeFunction::Table(points))
}

/// Tracks which keys a section used, rejecting duplicates and leftovers.
struct KeyReader<'a> {
    section: &'a Section,
    used: Vec<bool>,
}

impl<'a> KeyReader<'a> {
    fn new(section: &'a Section) -> Result<Self, ScenarioError> {
        for (i, entry) in section.entries.iter().enumerate() {
            if section.entries[..i].iter().any(|e| e.key == entry.key) {
                return Err(syntax(
                    entry.line,
                    entry.column,
                    format!("duplicate key {} in section [{}]", entry.key, section.kind),
                ));
            }
        }
        Ok(Self {
            used: vec![false; section.entries.len()],
            section,
        })
    }

    fn take(&mut self, key: &str) -> Option<&'a Entry> {
        for (i, entry) in self.section.entries.iter().enumerate() {
            if entry.key == key {
                self.used[i] = true;
                return Some(entry);
            }
        }
        None
    }

    fn require(&mut self, key: &str) -> Result<&'a Entry, ScenarioError> {
        self.take(key).ok_or_else(|| {
            syntax(
                self.section.line,
                1,
                format!(
                    "section [{} {}] is missing key {key}",
                    self.section.kind, self.section.name
                ),
            )
        })
    }

    fn finish(self) -> Result<(), ScenarioError> {
        for (entry, used) in self.section.entries.iter().zip(&self.used) {
            if !used {
                return Err(syntax(
                    entry.line,
                    entry.column,
                    format!(
                        "unknown key {} in section [{}]",
                        entry.key, self.section.kind
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// How a compartment section stated its thermal start.
enum ThermalStart {
    Entropy(f64),
    Temperature(f64),
}

/// Parses a scenario document; table paths resolve against `base`.
pub fn parse_scenario_in(text: &str, base: Option<&Path>) -> Result<Scenario, ScenarioError> {
    let sections = split_sections(text)?;

    let mut gas_section: Option<&Section> = None;
    let mut mechanics_section: Option<&Section> = None;
    let mut run_section: Option<&Section> = None;
    let mut compartment_sections: Vec<&Section> = Vec::new();
    let mut port_sections: Vec<&Section> = Vec::new();
    let mut source_sections: Vec<&Section> = Vec::new();
    let mut coupling_sections: Vec<&Section> = Vec::new();
    for section in &sections {
        let slot = match section.kind.as_str() {
            "gas" => Some(&mut gas_section),
            "mechanics" => Some(&mut mechanics_section),
            "run" => Some(&mut run_section),
            _ => None,
        };
        if let Some(slot) = slot {
            if slot.is_some() {
                return Err(syntax(
                    section.line,
                    1,
                    format!("section [{}] appears twice", section.kind),
                ));
            }
            *slot = Some(section);
            continue;
        }
        match section.kind.as_str() {
            "compartment" => compartment_sections.push(section),
            "port" => port_sections.push(section),
            "source" => source_sections.push(section),
            "coupling" => coupling_sections.push(section),
            _ => unreachable!("section kinds are validated while splitting"),
        }
        if section.name.is_empty() {
            return Err(syntax(
                section.line,
                1,
                format!("section [{}] needs a name", section.kind),
            ));
        }
    }

    let defaults = GasSpec::nitrogen_like();
    let gas = match gas_section {
        Some(section) => {
            let mut keys = KeyReader::new(section)?;
            let field = |keys: &mut KeyReader, key: &str, fallback: f64| -> Result<f64, ScenarioError> {
                keys.take(key).map(parse_number).transpose().map(|v| v.unwrap_or(fallback))
            };
            let r = field(&mut keys, "r", defaults.r)?;
            let c_v = field(&mut keys, "c_v", defaults.c_v)?;
            let t_ref = field(&mut keys, "t_ref", defaults.t_ref)?;
            let p_ref = field(&mut keys, "p_ref", defaults.p_ref)?;
            let u_ref = field(&mut keys, "u_ref", defaults.u_ref)?;
            let s_ref = field(&mut keys, "s_ref", defaults.s_ref)?;
            let m0 = field(&mut keys, "m0", defaults.m0)?;
            keys.finish()?;
            GasSpec::new(r, c_v, t_ref, p_ref, u_ref, s_ref, m0)
                .map_err(|e| ScenarioError::Semantic(vec![format!("gas: {e}")]))?
        }
        None => defaults,
    };

    let mut compartments = Vec::new();
    let mut starts = Vec::new();
    for section in &compartment_sections {
        let mut keys = KeyReader::new(section)?;
        let vol = parse_number(keys.require("vol")?)?;
        let n0 = parse_number(keys.require("n0")?)?;
        let s0_entry = keys.take("s0").map(parse_number).transpose()?;
        let t0_entry = keys.take("t0").map(parse_number).transpose()?;
        keys.finish()?;
        let start = match (s0_entry, t0_entry) {
            (Some(s0), None) => ThermalStart::Entropy(s0),
            (None, Some(t0)) => ThermalStart::Temperature(t0),
            (Some(_), Some(_)) => {
                return Err(syntax(
                    section.line,
                    1,
                    format!("compartment {} sets both s0 and t0", section.name),
                ))
            }
            (None, None) => {
                return Err(syntax(
                    section.line,
                    1,
                    format!("compartment {} needs either s0 or t0", section.name),
                ))
            }
        };
        starts.push(start);
        compartments.push(CompartmentSpec {
            id: section.name.clone(),
            vol,
            s0: 0.0,
            n0,
        });
    }

    let mut ports = Vec::new();
    let mut port_velocities: Vec<(String, TimeFunction)> = Vec::new();
    for section in &port_sections {
        let mut keys = KeyReader::new(section)?;
        let compartment = parse_word(keys.require("compartment")?)?.to_string();
        let j = parse_time_function(keys.require("j")?, base)?;
        let t_in = parse_time_function(keys.require("t_in")?, base)?;
        let p_in = parse_time_function(keys.require("p_in")?, base)?;
        if let Some(entry) = keys.take("velocity") {
            port_velocities.push((section.name.clone(), parse_time_function(entry, base)?));
        }
        keys.finish()?;
        ports.push(PortSpec {
            id: section.name.clone(),
            compartment,
            j,
            t_in,
            p_in,
        });
    }

    let mut sources = Vec::new();
    for section in &source_sections {
        let mut keys = KeyReader::new(section)?;
        let compartment = parse_word(keys.require("compartment")?)?.to_string();
        let j_s = parse_time_function(keys.require("j_s")?, base)?;
        let t_h = parse_time_function(keys.require("t_h")?, base)?;
        keys.finish()?;
        sources.push(HeatSourceSpec {
            id: section.name.clone(),
            compartment,
            j_s,
            t_h,
        });
    }

    let mut couplings = Vec::new();
    let mut any_matrix = false;
    for section in &coupling_sections {
        let mut keys = KeyReader::new(section)?;
        let a = parse_word(keys.require("a")?)?.to_string();
        let b = parse_word(keys.require("b")?)?.to_string();
        let g = keys.take("g").map(parse_number).transpose()?;
        let l_hh = keys.take("l_hh").map(parse_number).transpose()?;
        let l_hm = keys.take("l_hm").map(parse_number).transpose()?;
        let l_mh = keys.take("l_mh").map(parse_number).transpose()?;
        let l_mm = keys.take("l_mm").map(parse_number).transpose()?;
        keys.finish()?;
        let matrix = [l_hh, l_hm, l_mh, l_mm];
        let kind = match (g, matrix.iter().any(Option::is_some)) {
            (Some(g), false) => CouplingKind::DiffusionG { g },
            (None, true) => {
                any_matrix = true;
                CouplingKind::Onsager2x2 {
                    l_hh: l_hh.unwrap_or(0.0),
                    l_hm: l_hm.unwrap_or(0.0),
                    l_mh: l_mh.unwrap_or(0.0),
                    l_mm: l_mm.unwrap_or(0.0),
                }
            }
            (Some(_), true) => {
                return Err(syntax(
                    section.line,
                    1,
                    format!(
                        "coupling {} mixes a conductance g with matrix entries",
                        section.name
                    ),
                ))
            }
            (None, false) => {
                return Err(syntax(
                    section.line,
                    1,
                    format!(
                        "coupling {} needs either g or matrix entries l_hh, l_hm, l_mh, l_mm",
                        section.name
                    ),
                ))
            }
        };
        couplings.push(CouplingSpec {
            pair: (a, b),
            kind,
        });
    }

    let mechanics = match mechanics_section {
        Some(section) => {
            let mut keys = KeyReader::new(section)?;
            let m = parse_number(keys.require("m")?)?;
            let a_section = parse_number(keys.require("section")?)?;
            let lambda_fr = keys.take("lambda").map(parse_number).transpose()?.unwrap_or(0.0);
            let f_ext_q = keys
                .take("f_q")
                .map(|e| parse_time_function(e, base))
                .transpose()?
                .unwrap_or(TimeFunction::Constant(0.0));
            let f_ext_x = keys
                .take("f_x")
                .map(|e| parse_time_function(e, base))
                .transpose()?
                .unwrap_or(TimeFunction::Constant(0.0));
            let q0 = parse_number(keys.require("q0")?)?;
            let qdot0 = keys.take("qdot0").map(parse_number).transpose()?.unwrap_or(0.0);
            let x0 = keys.take("x0").map(parse_number).transpose()?.unwrap_or(0.0);
            let xdot0 = keys.take("xdot0").map(parse_number).transpose()?.unwrap_or(0.0);
            keys.finish()?;
            Some(MechanicsSpec {
                m,
                a_section,
                lambda_fr,
                f_ext_q,
                f_ext_x,
                q0,
                qdot0,
                x0,
                xdot0,
                port_velocities: port_velocities.clone(),
            })
        }
        None => {
            if let Some((port, _)) = port_velocities.first() {
                return Err(ScenarioError::Semantic(vec![format!(
                    "port {port} sets a velocity but there is no mechanics section"
                )]));
            }
            None
        }
    };

    let mut options = IntegrationOptions::default();
    let mut t_final = 1.0;
    let mut explicit_class = None;
    if let Some(section) = run_section {
        let mut keys = KeyReader::new(section)?;
        if let Some(entry) = keys.take("class") {
            let word = parse_word(entry)?;
            explicit_class = Some(match word {
                "simple_single" => SystemClass::SimpleSingle,
                "simple_mechanical" => SystemClass::SimpleMechanical,
                "simple_diffusion" => SystemClass::SimpleDiffusion,
                "non_simple" => SystemClass::NonSimple,
                _ => {
                    return Err(syntax(
                        entry.line,
                        entry.column,
                        format!("unknown system class {word:?}"),
                    ))
                }
            });
        }
        if let Some(entry) = keys.take("method") {
            options.method = match parse_word(entry)? {
                "rk4" => Method::Rk4,
                "rk45" => Method::Rk45,
                other => {
                    return Err(syntax(
                        entry.line,
                        entry.column,
                        format!("unknown method {other:?}, expected rk4 or rk45"),
                    ))
                }
            };
        }
        if let Some(entry) = keys.take("tf") {
            t_final = parse_number(entry)?;
        }
        for (key, slot) in [
            ("h0", &mut options.h0),
            ("h_min", &mut options.h_min),
            ("h_max", &mut options.h_max),
            ("abs_tol", &mut options.abs_tol),
            ("rel_tol", &mut options.rel_tol),
            ("sample_dt", &mut options.sample_dt),
        ] {
            if let Some(entry) = keys.take(key) {
                *slot = parse_number(entry)?;
            }
        }
        keys.finish()?;
    }

    let system_class = explicit_class.unwrap_or_else(|| {
        if mechanics.is_some() {
            SystemClass::SimpleMechanical
        } else if !sources.is_empty() || any_matrix {
            SystemClass::NonSimple
        } else if compartments.len() > 1 {
            SystemClass::SimpleDiffusion
        } else {
            SystemClass::SimpleSingle
        }
    });

    let mut model = NetworkModel {
        gas,
        system_class,
        compartments,
        ports,
        sources,
        couplings,
        mechanics,
    };

    let mut semantic = Vec::new();
    for (comp, start) in model.compartments.iter_mut().zip(starts) {
        match start {
            ThermalStart::Entropy(s0) => comp.s0 = s0,
            ThermalStart::Temperature(t0) => {
                match model.gas.entropy_total(t0, comp.n0, comp.vol) {
                    Ok(s0) => comp.s0 = s0,
                    Err(e) => semantic.push(format!("compartment {}: {e}", comp.id)),
                }
            }
        }
    }
    semantic.extend(model.validate().iter().map(|v| v.to_string()));
    if !semantic.is_empty() {
        return Err(ScenarioError::Semantic(semantic));
    }
    Ok(Scenario {
        model,
        options,
        t_final,
    })
}

/// Parses a scenario document; table paths resolve against the working
/// directory.
pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    parse_scenario_in(text, None)
}

/// Reads and parses a scenario file; table paths resolve against the
/// file's directory.
pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_scenario_in(&text, path.parent())
}

/// Serialized scenario text plus any sidecar table files it references.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioText {
    pub text: String,
    /// Table files as (file name, content) pairs.
    pub tables: Vec<(String, String)>,
}

fn format_time_function(
    label: &str,
    tf: &TimeFunction,
    tables: &mut Vec<(String, String)>,
) -> String {
    match tf {
        TimeFunction::Constant(x) => format!("const {x}"),
        TimeFunction::Ramp { x0, x1, t0, t1 } => format!("ramp {x0} {x1} {t0} {t1}"),
        TimeFunction::Table(points) => {
            let name = format!("{label}.csv");
            let mut content = String::new();
            for (t, value) in points {
                content.push_str(&format!("{t},{value}\n"));
            }
            tables.push((name.clone(), content));
            format!("table {name}")
        }
    }
}

/// Renders a scenario back to its text form. Table-valued time functions
/// become sidecar files named after their section and key.
pub fn serialize_scenario(scenario: &Scenario) -> ScenarioText {
    let mut out = String::new();
    let mut tables = Vec::new();
    let model = &scenario.model;
    let gas = &model.gas;
    out.push_str("[gas]\n");
    for (key, value) in [
        ("r", gas.r),
        ("c_v", gas.c_v),
        ("t_ref", gas.t_ref),
        ("p_ref", gas.p_ref),
        ("u_ref", gas.u_ref),
        ("s_ref", gas.s_ref),
        ("m0", gas.m0),
    ] {
        out.push_str(&format!("{key} = {value}\n"));
    }
    for comp in &model.compartments {
        out.push_str(&format!("\n[compartment {}]\n", comp.id));
        out.push_str(&format!("vol = {}\n", comp.vol));
        out.push_str(&format!("n0 = {}\n", comp.n0));
        out.push_str(&format!("s0 = {}\n", comp.s0));
    }
    let velocity_of = |port: &str| -> Option<&TimeFunction> {
        model
            .mechanics
            .as_ref()?
            .port_velocities
            .iter()
            .find(|(id, _)| id == port)
            .map(|(_, tf)| tf)
    };
    for port in &model.ports {
        out.push_str(&format!("\n[port {}]\n", port.id));
        out.push_str(&format!("compartment = {}\n", port.compartment));
        for (key, tf) in [("j", &port.j), ("t_in", &port.t_in), ("p_in", &port.p_in)] {
            let label = format!("port_{}_{key}", port.id);
            out.push_str(&format!(
                "{key} = {}\n",
                format_time_function(&label, tf, &mut tables)
            ));
        }
        if let Some(tf) = velocity_of(&port.id) {
            let label = format!("port_{}_velocity", port.id);
            out.push_str(&format!(
                "velocity = {}\n",
                format_time_function(&label, tf, &mut tables)
            ));
        }
    }
    for source in &model.sources {
        out.push_str(&format!("\n[source {}]\n", source.id));
        out.push_str(&format!("compartment = {}\n", source.compartment));
        for (key, tf) in [("j_s", &source.j_s), ("t_h", &source.t_h)] {
            let label = format!("source_{}_{key}", source.id);
            out.push_str(&format!(
                "{key} = {}\n",
                format_time_function(&label, tf, &mut tables)
            ));
        }
    }
    for (i, coupling) in model.couplings.iter().enumerate() {
        out.push_str(&format!("\n[coupling c{i}]\n"));
        out.push_str(&format!("a = {}\n", coupling.pair.0));
        out.push_str(&format!("b = {}\n", coupling.pair.1));
        match coupling.kind {
            CouplingKind::DiffusionG { g } => out.push_str(&format!("g = {g}\n")),
            CouplingKind::Onsager2x2 {
                l_hh,
                l_hm,
                l_mh,
                l_mm,
            } => {
                out.push_str(&format!("l_hh = {l_hh}\n"));
                out.push_str(&format!("l_hm = {l_hm}\n"));
                out.push_str(&format!("l_mh = {l_mh}\n"));
                out.push_str(&format!("l_mm = {l_mm}\n"));
            }
        }
    }
    if let Some(mech) = &model.mechanics {
        out.push_str("\n[mechanics]\n");
        out.push_str(&format!("m = {}\n", mech.m));
        out.push_str(&format!("section = {}\n", mech.a_section));
        out.push_str(&format!("lambda = {}\n", mech.lambda_fr));
        for (key, tf) in [("f_q", &mech.f_ext_q), ("f_x", &mech.f_ext_x)] {
            let label = format!("mechanics_{key}");
            out.push_str(&format!(
                "{key} = {}\n",
                format_time_function(&label, tf, &mut tables)
            ));
        }
        out.push_str(&format!("q0 = {}\n", mech.q0));
        out.push_str(&format!("qdot0 = {}\n", mech.qdot0));
        out.push_str(&format!("x0 = {}\n", mech.x0));
        out.push_str(&format!("xdot0 = {}\n", mech.xdot0));
    }
    out.push_str("\n[run]\n");
    out.push_str(&format!("class = {}\n", model.system_class.name()));
    out.push_str(&format!("tf = {}\n", scenario.t_final));
    let method = match scenario.options.method {
        Method::Rk4 => "rk4",
        Method::Rk45 => "rk45",
    };
    out.push_str(&format!("method = {method}\n"));
    for (key, value) in [
        ("h0", scenario.options.h0),
        ("h_min", scenario.options.h_min),
        ("h_max", scenario.options.h_max),
        ("abs_tol", scenario.options.abs_tol),
        ("rel_tol", scenario.options.rel_tol),
        ("sample_dt", scenario.options.sample_dt),
    ] {
        out.push_str(&format!("{key} = {value}\n"));
    }
    ScenarioText { text: out, tables }
}

/// Writes a scenario and its sidecar tables into `dir` as `<stem>.scenario`.
pub fn write_scenario(
    dir: &Path,
    stem: &str,
    scenario: &Scenario,
) -> Result<PathBuf, ScenarioError> {
    let rendered = serialize_scenario(scenario);
    let io_err = |path: &Path, e: std::io::Error| ScenarioError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    for (name, content) in &rendered.tables {
        let table_path = dir.join(name);
        std::fs::write(&table_path, content).map_err(|e| io_err(&table_path, e))?;
    }
    let path = dir.join(format!("{stem}.scenario"));
    std::fs::write(&path, &rendered.text).map_err(|e| io_err(&path, e))?;
    Ok(path)
}

/// Renders a trajectory as CSV.
///
/// Columns: `t`, then per compartment `S[k], N[k], T[k], p[k], mu[k]` with
/// `k` counted from 1 in declaration order, then `q, qdot, x, xdot` when
/// mechanics are present, then `Sigma, I, E, P_W, P_H, P_M,
/// firstlaw_residual`. Numbers use the shortest decimal form that parses
/// back to the same value; rows end with a line feed, including the last.
pub fn trajectory_csv(model: &NetworkModel, traj: &Trajectory) -> Result<String, ScenarioError> {
    let layout = model.layout();
    let k_count = model.compartments.len();
    let mut out = String::new();
    out.push('t');
    for k in 1..=k_count {
        out.push_str(&format!(",S[{k}],N[{k}],T[{k}],p[{k}],mu[{k}]"));
    }
    if model.mechanics.is_some() {
        out.push_str(",q,qdot,x,xdot");
    }
    out.push_str(",Sigma,I,E,P_W,P_H,P_M,firstlaw_residual\n");
    for sample in &traj.samples {
        let state = &sample.state;
        let views = dynamics::compartment_states(model, &state.y)?;
        let diag = dynamics::power_channels(model, state.t, &state.y)?;
        out.push_str(&format!("{}", state.t));
        for view in &views {
            out.push_str(&format!(
                ",{},{},{},{},{}",
                view.n * view.s,
                view.n,
                view.t,
                view.p,
                view.mu
            ));
        }
        if model.mechanics.is_some() {
            out.push_str(&format!(
                ",{},{},{},{}",
                state.y[layout.q()],
                state.y[layout.qdot()],
                state.y[layout.x()],
                state.y[layout.xdot()]
            ));
        }
        let sigma = match model.system_class {
            SystemClass::NonSimple => {
                (0..k_count).map(|k| state.y[layout.sigma_k(k)]).sum::<f64>()
            }
            _ => state.y[layout.sigma()],
        };
        out.push_str(&format!(
            ",{},{},{},{},{},{},{}\n",
            sigma, diag.i, diag.e, diag.p_w, diag.p_h, diag.p_m, diag.first_law_residual
        ));
    }
    Ok(out)
}

/// Writes the trajectory CSV to a file, reporting failures with the path.
pub fn write_trajectory_file(
    model: &NetworkModel,
    traj: &Trajectory,
    path: &Path,
) -> Result<(), ScenarioError> {
    let csv = trajectory_csv(model, traj)?;
    std::fs::write(path, csv).map_err(|e| ScenarioError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Names of the bundled demos, in presentation order.
pub const DEMO_NAMES: [&str; 7] = [
    "tank",
    "piston",
    "two-compartment",
    "serial-membrane",
    "parallel-membrane",
    "heat-matter",
    "parallel-heat-membrane",
];

fn const_fn(x: f64) -> TimeFunction {
    TimeFunction::Constant(x)
}

fn compartment(id: &str, gas: &GasSpec, vol: f64, t0: f64, n0: f64) -> CompartmentSpec {
    CompartmentSpec {
        id: id.to_string(),
        vol,
        s0: gas
            .entropy_total(t0, n0, vol)
            .expect("demo start states are in the gas domain"),
        n0,
    }
}

fn inflow(id: &str, compartment: &str, j: f64, t_in: f64, p_in: f64) -> PortSpec {
    PortSpec {
        id: id.to_string(),
        compartment: compartment.to_string(),
        j: const_fn(j),
        t_in: const_fn(t_in),
        p_in: const_fn(p_in),
    }
}

/// Single 50 L tank at 300 K holding 2 mol, fed 0.01 mol/s of warm gas at
/// 320 K and 1.5 bar. All numbers are engineering defaults chosen to keep
/// the feed pressure above the interior pressure.
fn demo_tank() -> Scenario {
    let gas = GasSpec::nitrogen_like();
    Scenario {
        model: NetworkModel {
            gas,
            system_class: SystemClass::SimpleSingle,
            compartments: vec![compartment("tank", &gas, 0.05, 300.0, 2.0)],
            ports: vec![inflow("feed", "tank", 0.01, 320.0, 1.5e5)],
            sources: Vec::new(),
            couplings: Vec::new(),
            mechanics: None,
        },
        options: IntegrationOptions::default(),
        t_final: 1.0,
    }
}

/// Gas chamber closed by a heavy 20 t ram of 0.1 m^2 section, held by a
/// constant counterweight that balances the starting gas force, fed
/// 0.005 mol/s arriving at 1 m/s with friction between the ram and the
/// moving gas column. The ram starts at its force balance already moving
/// at the quasi-static rate the feed imposes, so the trajectory stays on
/// the slow manifold instead of ringing at the gas-spring frequency.
/// Engineering defaults.
fn demo_piston() -> Scenario {
    let gas = GasSpec::nitrogen_like();
    let q0 = 0.5;
    let a_section = 0.1;
    let n0 = 2.0;
    let t0 = 300.0;
    let j = 0.005;
    let counterweight = -n0 * gas.r * t0 / q0;
    let qdot0 = j * q0 / n0;
    Scenario {
        model: NetworkModel {
            gas,
            system_class: SystemClass::SimpleMechanical,
            compartments: vec![compartment("chamber", &gas, q0 * a_section, t0, n0)],
            ports: vec![inflow("feed", "chamber", j, 320.0, 1.4e5)],
            sources: Vec::new(),
            couplings: Vec::new(),
            mechanics: Some(MechanicsSpec {
                m: 2e4,
                a_section,
                lambda_fr: 1.0,
                f_ext_q: const_fn(counterweight),
                f_ext_x: const_fn(0.0),
                q0,
                qdot0,
                x0: 0.0,
                xdot0: 0.0,
                port_velocities: vec![("feed".to_string(), const_fn(1.0))],
            }),
        },
        options: IntegrationOptions::default(),
        t_final: 1.0,
    }
}

/// Two 20 L compartments at a shared 300 K with unequal fill, joined by a
/// membrane conductance giving a relaxation time near two seconds, fed on
/// the fuller side and drained on the other. Engineering defaults.
fn demo_two_compartment() -> Scenario {
    let gas = GasSpec::nitrogen_like();
    Scenario {
        model: NetworkModel {
            gas,
            system_class: SystemClass::SimpleDiffusion,
            compartments: vec![
                compartment("left", &gas, 0.02, 300.0, 0.8),
                compartment("right", &gas, 0.02, 300.0, 0.4),
            ],
            ports: vec![
                inflow("a1", "left", 0.01, 320.0, 1.5e5),
                inflow("a2", "right", -0.01, 300.0, 1.0e5),
            ],
            sources: Vec::new(),
            couplings: vec![CouplingSpec {
                pair: ("left".to_string(), "right".to_string()),
                kind: CouplingKind::DiffusionG { g: 5e-5 },
            }],
            mechanics: None,
        },
        options: IntegrationOptions::default(),
        t_final: 1.0,
    }
}

/// Two reservoirs bridged by two membrane elements in series, ported on
/// both ends. Engineering defaults.
fn demo_serial_membrane() -> Scenario {
    let gas = GasSpec::nitrogen_like();
    let chain = [
        ("left", 0.02, 0.9),
        ("m1", 0.005, 0.15),
        ("m2", 0.005, 0.12),
        ("right", 0.02, 0.5),
    ];
    let compartments = chain
        .iter()
        .map(|(id, vol, n0)| compartment(id, &gas, *vol, 300.0, *n0))
        .collect();
    let couplings = chain
        .windows(2)
        .map(|pair| CouplingSpec {
            pair: (pair[0].0.to_string(), pair[1].0.to_string()),
            kind: CouplingKind::DiffusionG { g: 1.5e-5 },
        })
        .collect();
    Scenario {
        model: NetworkModel {
            gas,
            system_class: SystemClass::SimpleDiffusion,
            compartments,
            ports: vec![
                inflow("a1", "left", 0.008, 320.0, 1.6e5),
                inflow("a2", "right", -0.008, 300.0, 1.0e5),
            ],
            sources: Vec::new(),
            couplings,
            mechanics: None,
        },
        options: IntegrationOptions::default(),
        t_final: 1.0,
    }
}

/// Two reservoirs bridged by two membrane elements in parallel with
/// different conductances, ported on both ends. Engineering defaults.
fn demo_parallel_membrane() -> Scenario {
    let gas = GasSpec::nitrogen_like();
    let compartments = vec![
        compartment("left", &gas, 0.02, 300.0, 0.9),
        compartment("right", &gas, 0.02, 300.0, 0.5),
        compartment("m1", &gas, 0.004, 300.0, 0.1),
        compartment("m2", &gas, 0.004, 300.0, 0.1),
    ];
    let couplings = [
        ("left", "m1", 1e-5),
        ("m1", "right", 1e-5),
        ("left", "m2", 2e-5),
        ("m2", "right", 2e-5),
    ]
    .iter()
    .map(|(a, b, g)| CouplingSpec {
        pair: (a.to_string(), b.to_string()),
        kind: CouplingKind::DiffusionG { g: *g },
    })
    .collect();
    Scenario {
        model: NetworkModel {
            gas,
            system_class: SystemClass::SimpleDiffusion,
            compartments,
            ports: vec![
                inflow("a1", "left", 0.008, 320.0, 1.6e5),
                inflow("a2", "right", -0.008, 300.0, 1.0e5),
            ],
            sources: Vec::new(),
            couplings,
            mechanics: None,
        },
        options: IntegrationOptions::default(),
        t_final: 1.0,
    }
}

/// Two compartments at different temperatures exchanging heat and matter
/// through a coupling matrix with cross-effects, each with a port and a
/// heat source held well above any temperature the compartments reach, so
/// the sources keep producing entropy along the whole run. Engineering
/// defaults; the cross coefficient is a quarter of the geometric mean of
/// the diagonal, keeping the matrix positive definite.
fn demo_heat_matter() -> Scenario {
    let gas = GasSpec::nitrogen_like();
    let l_hh = 3e4_f64;
    let l_mm = 5e-3_f64;
    let cross = 0.25 * (l_hh * l_mm).sqrt();
    Scenario {
        model: NetworkModel {
            gas,
            system_class: SystemClass::NonSimple,
            compartments: vec![
                compartment("left", &gas, 0.02, 320.0, 0.6),
                compartment("right", &gas, 0.02, 300.0, 0.4),
            ],
            ports: vec![
                inflow("a1", "left", 0.005, 330.0, 1.6e5),
                inflow("a2", "right", -0.005, 300.0, 1.0e5),
            ],
            sources: vec![
                HeatSourceSpec {
                    id: "b1".to_string(),
                    compartment: "left".to_string(),
                    j_s: const_fn(0.02),
                    t_h: const_fn(360.0),
                },
                HeatSourceSpec {
                    id: "b2".to_string(),
                    compartment: "right".to_string(),
                    j_s: const_fn(0.01),
                    t_h: const_fn(360.0),
                },
            ],
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
        },
        options: IntegrationOptions::default(),
        t_final: 1.0,
    }
}

/// Two ported reservoirs at different temperatures bridged by two membrane
/// elements in parallel, every junction carrying a heat-matter coupling
/// matrix. No external heating. Engineering defaults.
fn demo_parallel_heat_membrane() -> Scenario {
    let gas = GasSpec::nitrogen_like();
    let l_hh = 2e4_f64;
    let l_mm = 3e-3_f64;
    let cross = 0.2 * (l_hh * l_mm).sqrt();
    let compartments = vec![
        compartment("left", &gas, 0.02, 325.0, 0.7),
        compartment("right", &gas, 0.02, 300.0, 0.5),
        compartment("m1", &gas, 0.004, 310.0, 0.1),
        compartment("m2", &gas, 0.004, 315.0, 0.12),
    ];
    let couplings = [("left", "m1"), ("m1", "right"), ("left", "m2"), ("m2", "right")]
        .iter()
        .map(|(a, b)| CouplingSpec {
            pair: (a.to_string(), b.to_string()),
            kind: CouplingKind::Onsager2x2 {
                l_hh,
                l_hm: cross,
                l_mh: cross,
                l_mm,
            },
        })
        .collect();
    Scenario {
        model: NetworkModel {
            gas,
            system_class: SystemClass::NonSimple,
            compartments,
            ports: vec![
                inflow("a1", "left", 0.004, 330.0, 1.6e5),
                inflow("a2", "right", 0.004, 300.0, 1.5e5),
            ],
            sources: Vec::new(),
            couplings,
            mechanics: None,
        },
        options: IntegrationOptions::default(),
        t_final: 1.0,
    }
}

/// Builds a bundled demo by name. See [`DEMO_NAMES`] for the catalog.
pub fn demo(name: &str) -> Option<Scenario> {
    match name {
        "tank" => Some(demo_tank()),
        "piston" => Some(demo_piston()),
        "two-compartment" => Some(demo_two_compartment()),
        "serial-membrane" => Some(demo_serial_membrane()),
        "parallel-membrane" => Some(demo_parallel_membrane()),
        "heat-matter" => Some(demo_heat_matter()),
        "parallel-heat-membrane" => Some(demo_parallel_heat_membrane()),
        _ => None,
    }
}
