//! Command-line front end for the network simulation engine.
//!
//! Four subcommands: `simulate` runs a scenario and writes the trajectory
//! as CSV, `audit` runs a scenario and checks the trajectory against the
//! balance laws, `demo` materializes a bundled example and runs both, and
//! `derive` cross-checks a scenario against the variational reference
//! solver. Exit codes: 0 on success, 1 when an audit check fails, 2 for
//! usage and scenario errors, 3 for runtime failures such as guard stops
//! or non-finite states.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use thermonet::audit::{self, AuditError, AuditOptions, AuditReport};
use thermonet::integrate::{self, IntegrateError, Method, Termination, Trajectory};
use thermonet::model::NetworkModel;
use thermonet::nonholonomic::NonholonomicError;
use thermonet::scenario::{self, Scenario, ScenarioError, DEMO_NAMES};

const EXIT_AUDIT_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(
    name = "thermonet",
    version,
    about = "Simulate and audit compartmental gas networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write the trajectory as CSV.
    Simulate {
        /// Scenario file path.
        scenario: PathBuf,
        /// Output CSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the simulation horizon in seconds.
        #[arg(long)]
        tf: Option<f64>,
        /// Override the sampling interval in seconds.
        #[arg(long)]
        dt: Option<f64>,
        /// Override the integration method.
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
    },
    /// Run a scenario and audit the trajectory against the balance laws.
    Audit {
        /// Scenario file path.
        scenario: PathBuf,
        /// Emit the report as JSON instead of one line per check.
        #[arg(long)]
        json: bool,
    },
    /// Write a bundled demo scenario, simulate it, and audit the result.
    ///
    /// Names: tank, piston, two-compartment, serial-membrane,
    /// parallel-membrane, heat-matter, parallel-heat-membrane. Files are
    /// written into the working directory.
    Demo {
        /// Demo name.
        name: String,
    },
    /// Cross-check a scenario against the variational reference solver.
    Derive {
        /// Scenario file path.
        scenario: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Rk4,
    Rk45,
}

impl From<MethodArg> for Method {
    fn from(arg: MethodArg) -> Self {
        match arg {
            MethodArg::Rk4 => Method::Rk4,
            MethodArg::Rk45 => Method::Rk45,
        }
    }
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        Failure::usage(e.to_string())
    }
}

impl From<IntegrateError> for Failure {
    fn from(e: IntegrateError) -> Self {
        Failure::runtime(e.to_string())
    }
}

impl From<AuditError> for Failure {
    fn from(e: AuditError) -> Self {
        Failure::runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(EXIT_USAGE);
            }
            // Help and version output goes to stdout with a zero exit.
            e.exit();
        }
    };
    let outcome = match cli.command {
        Command::Simulate {
            scenario,
            out,
            tf,
            dt,
            method,
        } => simulate(&scenario, out.as_deref(), tf, dt, method),
        Command::Audit { scenario, json } => audit_command(&scenario, json),
        Command::Demo { name } => demo_command(&name),
        Command::Derive { scenario } => derive_command(&scenario),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}

/// Describes why a run ended before its horizon.
fn stop_description(termination: &Termination) -> Option<String> {
    match termination {
        Termination::Completed => None,
        Termination::GuardStop { reason, t } => {
            Some(format!("run stopped by a state guard at t = {t}: {reason}"))
        }
        Termination::StepUnderflow { t } => Some(format!(
            "run stopped at t = {t}: step size underflow below the configured minimum"
        )),
    }
}

fn run_scenario(scenario: &Scenario) -> Result<Trajectory, Failure> {
    let state0 = scenario
        .model
        .initial_state()
        .map_err(|e| Failure::usage(e.to_string()))?;
    Ok(integrate::integrate(
        &scenario.model,
        &state0,
        scenario.t_final,
        &scenario.options,
    )?)
}

fn write_csv(model: &NetworkModel, traj: &Trajectory, out: Option<&Path>) -> Result<(), Failure> {
    match out {
        Some(path) => scenario::write_trajectory_file(model, traj, path)
            .map_err(|e| Failure::runtime(e.to_string())),
        None => {
            let csv = scenario::trajectory_csv(model, traj)
                .map_err(|e| Failure::runtime(e.to_string()))?;
            print!("{csv}");
            Ok(())
        }
    }
}

fn simulate(
    path: &Path,
    out: Option<&Path>,
    tf: Option<f64>,
    dt: Option<f64>,
    method: Option<MethodArg>,
) -> Result<u8, Failure> {
    let mut scenario = scenario::load_scenario(path)?;
    if let Some(tf) = tf {
        scenario.t_final = tf;
    }
    if let Some(dt) = dt {
        scenario.options.sample_dt = dt;
    }
    if let Some(method) = method {
        scenario.options.method = method.into();
    }
    let traj = run_scenario(&scenario)?;
    write_csv(&scenario.model, &traj, out)?;
    if let Some(stop) = stop_description(&traj.termination) {
        return Err(Failure::runtime(stop));
    }
    Ok(0)
}

fn print_report(report: &AuditReport) {
    for check in &report.checks {
        let verdict = if check.passed() { "pass" } else { "FAIL" };
        let note = check
            .note
            .as_deref()
            .map(|n| format!("  note: {n}"))
            .unwrap_or_default();
        println!(
            "{:<22} {}  max {:.3e} at t = {:<10} tol {:.0e}{}",
            check.name, verdict, check.max_violation, check.location_t, check.tolerance, note
        );
    }
    let failed = report.checks.iter().filter(|c| !c.passed()).count();
    if failed == 0 {
        println!("{} checks, all passed", report.checks.len());
    } else {
        println!("{failed} of {} checks FAILED", report.checks.len());
    }
}

fn print_report_json(report: &AuditReport) {
    let entries: Vec<serde_json::Value> = report
        .checks
        .iter()
        .map(|check| {
            serde_json::json!({
                "check": check.name,
                "max_violation": check.max_violation,
                "t": check.location_t,
                "tolerance": check.tolerance,
                "verdict": if check.passed() { "pass" } else { "fail" },
            })
        })
        .collect();
    let report = serde_json::Value::Array(entries);
    println!("{}", serde_json::to_string_pretty(&report).expect("plain JSON tree"));
}

fn audit_trajectory(
    scenario: &Scenario,
    traj: &Trajectory,
    json: bool,
) -> Result<u8, Failure> {
    let report = audit::audit_all(&scenario.model, traj, &AuditOptions::default())?;
    if json {
        print_report_json(&report);
    } else {
        print_report(&report);
    }
    Ok(if report.passed() { 0 } else { EXIT_AUDIT_FAILED })
}

fn audit_command(path: &Path, json: bool) -> Result<u8, Failure> {
    let scenario = scenario::load_scenario(path)?;
    let traj = run_scenario(&scenario)?;
    if let Some(stop) = stop_description(&traj.termination) {
        return Err(Failure::runtime(format!(
            "audit needs the full horizon; {stop}"
        )));
    }
    audit_trajectory(&scenario, &traj, json)
}

fn demo_command(name: &str) -> Result<u8, Failure> {
    let Some(scenario) = scenario::demo(name) else {
        return Err(Failure::usage(format!(
            "unknown demo {name:?}; available: {}",
            DEMO_NAMES.join(", ")
        )));
    };
    let dir = std::env::current_dir()
        .map_err(|e| Failure::runtime(format!("working directory: {e}")))?;
    let scenario_path = scenario::write_scenario(&dir, name, &scenario)
        .map_err(|e| Failure::runtime(e.to_string()))?;
    println!("wrote {}", scenario_path.display());
    let traj = run_scenario(&scenario)?;
    let csv_path = dir.join(format!("{name}.csv"));
    write_csv(&scenario.model, &traj, Some(&csv_path))?;
    println!("wrote {} ({} samples)", csv_path.display(), traj.samples.len());
    if let Some(stop) = stop_description(&traj.termination) {
        return Err(Failure::runtime(stop));
    }
    audit_trajectory(&scenario, &traj, false)
}

fn derive_command(path: &Path) -> Result<u8, Failure> {
    let scenario = scenario::load_scenario(path)?;
    let check = match audit::cross_validation_audit(&scenario.model, &AuditOptions::default()) {
        Ok(check) => check,
        Err(AuditError::Abstract(NonholonomicError::UnsupportedClass { class })) => {
            return Err(Failure::usage(format!(
                "derive needs a single-compartment scenario; this one is {class}"
            )));
        }
        Err(e) => return Err(e.into()),
    };
    let report = AuditReport {
        checks: vec![check],
    };
    print_report(&report);
    Ok(if report.passed() { 0 } else { EXIT_AUDIT_FAILED })
}
