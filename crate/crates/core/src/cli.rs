//! Command-line driver: subcommands, output files and exit codes.
//!
//! Exit codes: 0 success, 1 configuration error, 2 numerical failure,
//! 3 acceptance gate failed (only with `--assert`).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use crate::config::{parse_config, ConfigError, Purpose, RunConfig};
use crate::error::Error;
use crate::experiments::{horizon_study, run_ensemble, strong_study, weak_study, Coupling, ErrorTable};
use crate::monitors::{decay_check, exp_moment_estimate, moment_growth, MonitorRecord, MONITOR_COLUMNS};
use crate::stepper::RecordSchedule;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_GATE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "sns", version, about = "Damped stochastic NLS: splitting Crank-Nicolson solver and convergence studies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Exit with status 3 when the subcommand's acceptance gate fails.
    #[arg(long, global = true)]
    assert: bool,
    /// Output directory, overriding `output_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// One trajectory; writes monitors.csv.
    Simulate,
    /// Charge decay bound along every step of every sample.
    DecayCheck,
    /// Strong error table and fitted order.
    StrongOrder,
    /// Weak error table and fitted order.
    WeakOrder,
    /// Final-time strong error against the time horizon.
    Horizon,
    /// Exponential moment of the energy along an ensemble.
    ExpMoment,
}

impl Command {
    fn purpose(self) -> Purpose {
        match self {
            Command::Simulate => Purpose::Simulate,
            Command::DecayCheck => Purpose::DecayCheck,
            Command::StrongOrder => Purpose::StrongOrder,
            Command::WeakOrder => Purpose::WeakOrder,
            Command::Horizon => Purpose::Horizon,
            Command::ExpMoment => Purpose::ExpMoment,
        }
    }
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Numerical(String),
    Io(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Config(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(true) => EXIT_OK,
        Ok(false) => {
            if cli.assert {
                EXIT_GATE
            } else {
                EXIT_OK
            }
        }
        Err(Failure::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            EXIT_CONFIG
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            EXIT_NUMERICAL
        }
        Err(Failure::Io(msg)) => {
            eprintln!("i/o error: {msg}");
            EXIT_CONFIG
        }
    }
}

fn execute(cli: &Cli) -> Result<bool, Failure> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Failure::Config("--config <path> is required".into()))?;
    let config = parse_config(path, cli.command.purpose())?;
    let out = cli
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&config.raw.output_dir));
    fs::create_dir_all(&out)?;
    write_manifest(&out, &config)?;

    let body = || dispatch(cli.command, &config, &out);
    match cli.workers {
        Some(0) => Err(Failure::Config("--workers must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Failure::Config(format!("cannot start worker pool: {e}")))?
            .install(body),
        None => body(),
    }
}

/// Runs the subcommand; `Ok(passed)` reports the acceptance gate.
fn dispatch(cmd: Command, c: &RunConfig, out: &Path) -> Result<bool, Failure> {
    match cmd {
        Command::Simulate => simulate(c, out),
        Command::DecayCheck => decay(c, out),
        Command::StrongOrder => {
            let reference = c.reference.expect("validated");
            let table = strong_study(&c.problem, &c.raw.experiment.tau_list, reference, c.raw.experiment.samples)?;
            order_outputs(c, out, &table)
        }
        Command::WeakOrder => {
            let reference = c.reference.expect("validated");
            let table = weak_study(
                &c.problem,
                c.phi,
                &c.raw.experiment.tau_list,
                reference,
                c.raw.experiment.samples,
                Coupling::Common,
            )?;
            order_outputs(c, out, &table)
        }
        Command::Horizon => horizon(c, out),
        Command::ExpMoment => exp_moment(c, out),
    }
}

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> std::io::Result<()> {
    let mut buf = String::new();
    buf.push_str(&header.join(","));
    buf.push('\n');
    for row in rows {
        buf.push_str(&row.join(","));
        buf.push('\n');
    }
    fs::write(path, buf)
}

fn write_json(path: &Path, value: &Value) -> std::io::Result<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")
}

fn write_monitors(path: &Path, records: &[MonitorRecord]) -> std::io::Result<()> {
    write_csv(
        path,
        &MONITOR_COLUMNS,
        records.iter().map(|r| r.fields().iter().map(|&x| fmt_f64(x)).collect()),
    )
}

fn write_manifest(out: &Path, c: &RunConfig) -> std::io::Result<()> {
    let p = &c.problem;
    let manifest = json!({
        "program": "sns",
        "version": env!("CARGO_PKG_VERSION"),
        "subcommand": c.purpose.name(),
        "config_sha256": c.config_sha256,
        "master_seed": c.raw.master_seed,
        "config": c.raw,
        "derived": {
            "tau": c.tau,
            "steps": c.steps,
            "final_time": p.final_time,
            "damping_margin": c.margin(),
            "alpha": p.damping.alpha(),
            "fq": p.noise.fq(),
            "eigenvalues": p.noise.eigenvalues(),
        },
    });
    write_json(&out.join("manifest.json"), &manifest)
}

fn simulate(c: &RunConfig, out: &Path) -> Result<bool, Failure> {
    let e = &c.raw.experiment;
    let schedule = RecordSchedule::new(e.record_every, e.beta);
    let runs = run_ensemble(&c.problem, c.tau, 1, &schedule)?;
    let traj = &runs[0];
    write_monitors(&out.join("monitors.csv"), &traj.records)?;
    Ok(true)
}

fn decay(c: &RunConfig, out: &Path) -> Result<bool, Failure> {
    let e = &c.raw.experiment;
    let schedule = RecordSchedule::new(1, e.beta);
    let runs = run_ensemble(&c.problem, c.tau, e.samples, &schedule)?;
    let a = c.margin();
    let tol = c.decay_tolerance();
    let mut worst = (f64::NEG_INFINITY, 0usize, 0.0);
    let mut passed = true;
    for (s, traj) in runs.iter().enumerate() {
        let v = decay_check(&traj.records, a, tol)?;
        passed &= v.passed;
        if v.worst_ratio > worst.0 {
            worst = (v.worst_ratio, s, traj.records[v.worst_index].t);
        }
    }
    write_monitors(&out.join("monitors.csv"), &runs[0].records)?;
    write_json(
        &out.join("verdict.json"),
        &json!({
            "passed": passed,
            "margin": a,
            "tolerance": tol,
            "samples": e.samples,
            "worst_ratio": worst.0,
            "worst_sample": worst.1,
            "worst_t": worst.2,
        }),
    )?;
    Ok(passed)
}

fn order_outputs(c: &RunConfig, out: &Path, table: &ErrorTable) -> Result<bool, Failure> {
    write_csv(
        &out.join("errors.csv"),
        &["tau", "error", "ci_half_width", "used_in_fit"],
        table.rows.iter().map(|r| {
            vec![
                fmt_f64(r.tau),
                fmt_f64(r.error),
                fmt_f64(r.half_width),
                r.used_in_fit.to_string(),
            ]
        }),
    )?;
    let (lo, hi) = c.slope_window();
    let slope = table.slope();
    let passed = slope.is_some_and(|s| s >= lo && s <= hi);
    write_json(
        &out.join("fit.json"),
        &json!({
            "slope": slope,
            "intercept": table.fit.map(|f| f.intercept),
            "sample_count": table.sample_count,
            "reference": table.reference,
            "reference_tau": table.reference_tau,
            "excluded_rows": table.excluded_rows(),
            "config_sha256": c.config_sha256,
            "master_seed": c.raw.master_seed,
        }),
    )?;
    write_json(
        &out.join("verdict.json"),
        &json!({
            "passed": passed,
            "slope": slope,
            "slope_min": lo,
            "slope_max": if hi.is_finite() { Some(hi) } else { None },
        }),
    )?;
    Ok(passed)
}

fn horizon(c: &RunConfig, out: &Path) -> Result<bool, Failure> {
    let e = &c.raw.experiment;
    let rows = horizon_study(&c.problem, c.tau, c.reference.expect("validated"), &e.horizons, e.samples)?;
    write_csv(
        &out.join("horizon.csv"),
        &["T", "error", "ci_half_width"],
        rows.iter()
            .map(|r| vec![fmt_f64(r.horizon), fmt_f64(r.error), fmt_f64(r.half_width)]),
    )?;
    let first = rows.first().expect("validated nonempty").error;
    let last = rows.last().expect("validated nonempty").error;
    let ratio = last / first;
    let damped = c.problem.damping.is_damped();
    // Undamped runs are reported but not gated.
    let passed = !damped || ratio <= e.max_horizon_ratio;
    write_json(
        &out.join("verdict.json"),
        &json!({
            "passed": passed,
            "gated": damped,
            "ratio": ratio,
            "max_ratio": e.max_horizon_ratio,
            "margin": c.margin(),
        }),
    )?;
    Ok(passed)
}

fn exp_moment(c: &RunConfig, out: &Path) -> Result<bool, Failure> {
    let e = &c.raw.experiment;
    let schedule = RecordSchedule::new(e.record_every, e.beta);
    let runs = run_ensemble(&c.problem, c.tau, e.samples, &schedule)?;
    let records: Vec<Vec<MonitorRecord>> = runs.into_iter().map(|t| t.records).collect();
    let points = exp_moment_estimate(&records, e.beta)?;
    write_csv(
        &out.join("exp_moment.csv"),
        &["t", "estimate", "running_max"],
        points
            .iter()
            .map(|p| vec![fmt_f64(p.t), fmt_f64(p.estimate), fmt_f64(p.running_max)]),
    )?;
    let growth = moment_growth(&points)?;
    let passed = growth.bounded(e.moment_growth_tol);
    write_json(
        &out.join("verdict.json"),
        &json!({
            "passed": passed,
            "finite": points.iter().all(|p| p.estimate.is_finite()),
            "first_quarter_max": growth.first_quarter_max,
            "last_quarter_max": growth.last_quarter_max,
            "tolerance": e.moment_growth_tol,
            "beta": e.beta,
        }),
    )?;
    Ok(passed)
}
