mod scenario;

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use carnot::net_sim::{run, SimError, Trace, TraceError};
use carnot::verifier::{metrics, verify, Checks, Metrics, Report, Verdict};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;
use thiserror::Error;
use toml::Value;

use scenario::{apply_override, from_table, load_table, parse_override, Scenario};

#[derive(Parser)]
#[command(name = "carnot", version, about = "Simulate and verify Carnot executions")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate one scenario, verify the trace, and write trace, verdict and metrics files.
    Run(Common),
    /// Run a scenario once per grid point and write one aggregated CSV row per point.
    Sweep(SweepArgs),
    /// Re-run the verifier on a stored trace.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    horizon: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// KEY=VALUE; bare keys refer to [sim]. May be repeated, or given several values at once.
    #[arg(long = "override", value_name = "KEY=VALUE", num_args = 1.., action = clap::ArgAction::Append)]
    overrides: Vec<String>,
    /// Comma-separated checks to run (consistency, liveness, latency, replay, all).
    #[arg(long)]
    checks: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// KEY=V1,V2,...; several grids form their cartesian product.
    #[arg(long, value_name = "KEY=V1,V2,...")]
    grid: Vec<String>,
    /// One explicit point, e.g. "f=2 n=9". Combined with every grid combination.
    #[arg(long, value_name = "\"K=V K=V\"")]
    point: Vec<String>,
}

#[derive(Args)]
struct VerifyArgs {
    trace: PathBuf,
    #[arg(long)]
    checks: Option<String>,
    /// Also write verdict.json here.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Malformed(#[from] TraceError),
    #[error(transparent)]
    Model(SimError),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Model(_) => 3,
            CliError::Io(_) => 1,
            _ => 2,
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::ModelViolation { .. } => CliError::Model(e),
            other => CliError::Config(other.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Serialize)]
struct VerdictFile<'a> {
    passed: bool,
    verdicts: &'a [Verdict],
}

fn verdict_json(report: &Report) -> String {
    let mut s = serde_json::to_string_pretty(&VerdictFile { passed: report.passed(), verdicts: &report.verdicts })
        .expect("verdicts serialise");
    s.push('\n');
    s
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CARNOT_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run(c) => cmd_run(&c),
        Cmd::Sweep(s) => cmd_sweep(&s),
        Cmd::Verify(v) => cmd_verify(&v),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// Loads the scenario and applies `extra` overrides after the command-line ones.
fn load(c: &Common, extra: &[(String, Value)]) -> Result<Scenario, CliError> {
    let mut table = load_table(&c.scenario).map_err(CliError::Config)?;
    let mut overrides = Vec::new();
    for o in &c.overrides {
        for part in o.split_whitespace() {
            overrides.push(parse_override(part).map_err(CliError::Usage)?);
        }
    }
    if let Some(seed) = c.seed {
        overrides.push(("seed".into(), Value::Integer(seed as i64)));
    }
    if let Some(h) = c.horizon {
        overrides.push(("horizon".into(), Value::Integer(h as i64)));
    }
    for (k, v) in overrides.into_iter().chain(extra.iter().cloned()) {
        apply_override(&mut table, &k, v).map_err(CliError::Usage)?;
    }
    let mut s = from_table(table).map_err(CliError::Config)?;
    if let Some(list) = &c.checks {
        s.checks = Checks::parse_list(list).map_err(CliError::Usage)?;
    }
    if let Some(dir) = &c.out_dir {
        s.output.dir = dir.clone();
    }
    Ok(s)
}

fn simulate(s: &Scenario) -> Result<(Trace, Report, Metrics), CliError> {
    let mut adversary = s.adversary.build(&s.sim)?;
    info!("running {:?} n={} f={} seed={} against {}", s.sim.variant, s.sim.n, s.sim.f, s.sim.seed, s.adversary.name());
    let trace = run(&s.sim, &mut *adversary)?;
    let report = verify(&trace, &s.checks);
    let m = metrics(&trace);
    Ok((trace, report, m))
}

fn cmd_run(c: &Common) -> Result<u8, CliError> {
    let s = load(c, &[])?;
    let (trace, report, m) = simulate(&s)?;
    let out = &s.output;
    fs::create_dir_all(&out.dir).map_err(io_err(&out.dir))?;

    let path = out.dir.join(&out.trace);
    let mut w = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
    trace.write_ndjson(&mut w).and_then(|_| w.flush()).map_err(io_err(&path))?;

    let verdict = verdict_json(&report);
    let path = out.dir.join(&out.verdict);
    fs::write(&path, &verdict).map_err(io_err(&path))?;

    let path = out.dir.join(&out.metrics_json);
    let mut json = serde_json::to_string_pretty(&m).expect("metrics serialise");
    json.push('\n');
    fs::write(&path, json).map_err(io_err(&path))?;

    let path = out.dir.join(&out.metrics_csv);
    let file = File::create(&path).map_err(io_err(&path))?;
    m.write_csv(file).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;

    print!("{verdict}");
    Ok(if report.passed() { 0 } else { 1 })
}

fn cmd_verify(v: &VerifyArgs) -> Result<u8, CliError> {
    let checks = match &v.checks {
        Some(list) => Checks::parse_list(list).map_err(CliError::Usage)?,
        None => Checks::default(),
    };
    let file = File::open(&v.trace).map_err(|e| CliError::Usage(format!("{}: {e}", v.trace.display())))?;
    let trace = Trace::read_ndjson(BufReader::new(file))?;
    let report = verify(&trace, &checks);
    let verdict = verdict_json(&report);
    if let Some(dir) = &v.out_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join("verdict.json");
        fs::write(&path, &verdict).map_err(io_err(&path))?;
    }
    print!("{verdict}");
    Ok(if report.passed() { 0 } else { 1 })
}

/// Expands `--grid` and `--point` into a deterministic list of override sets.
fn grid_points(grid: &[String], points: &[String]) -> Result<Vec<Vec<(String, Value)>>, CliError> {
    if grid.is_empty() && points.is_empty() {
        return Err(CliError::Usage("sweep needs at least one --grid or --point".into()));
    }
    let mut combos: Vec<Vec<(String, Value)>> = vec![Vec::new()];
    for g in grid {
        let (key, values) = g.split_once('=').ok_or_else(|| CliError::Usage(format!("grid {g:?} is not KEY=V1,V2")))?;
        let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(CliError::Usage(format!("grid {key:?} has no values")));
        }
        let mut next = Vec::with_capacity(combos.len() * values.len());
        for combo in &combos {
            for v in &values {
                let kv = parse_override(&format!("{key}={v}")).map_err(CliError::Usage)?;
                let mut c = combo.clone();
                c.push(kv);
                next.push(c);
            }
        }
        combos = next;
    }
    if points.is_empty() {
        return Ok(combos);
    }
    let mut out = Vec::new();
    for p in points {
        let base: Vec<(String, Value)> =
            p.split_whitespace().map(parse_override).collect::<Result<_, _>>().map_err(CliError::Usage)?;
        if base.is_empty() {
            return Err(CliError::Usage("empty --point".into()));
        }
        for combo in &combos {
            out.push(base.iter().cloned().chain(combo.iter().cloned()).collect());
        }
    }
    Ok(out)
}

fn describe(point: &[(String, Value)]) -> String {
    point.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ")
}

const SWEEP_HEADER: [&str; 10] =
    ["point", "status", "views", "k", "beta", "leader_bytes", "rate", "max_finalisation_latency", "recovery_frags", "error"];

fn sweep_row(point: &str, outcome: Result<(Report, Metrics), CliError>) -> ([String; 10], bool) {
    let (report, m) = match outcome {
        Ok(x) => x,
        Err(e) => {
            let status = match e {
                CliError::Model(_) => "model_violation",
                _ => "config_error",
            };
            let mut row: [String; 10] = Default::default();
            row[0] = point.to_string();
            row[1] = status.into();
            row[9] = e.to_string();
            return (row, false);
        }
    };
    let beta: u64 = m.views.iter().map(|v| v.beta).sum();
    let sent: u64 = m.views.iter().map(|v| v.leader_bytes).sum();
    let failed: Vec<&str> = report.verdicts.iter().filter(|v| v.status == carnot::verifier::Status::Fail).map(|v| v.check.as_str()).collect();
    let row = [
        point.to_string(),
        if failed.is_empty() { "pass".into() } else { "fail".into() },
        m.views.len().to_string(),
        m.views.first().map(|v| v.k.to_string()).unwrap_or_default(),
        beta.to_string(),
        sent.to_string(),
        if beta > 0 { format!("{:.6}", sent as f64 / beta as f64) } else { String::new() },
        m.views.iter().filter_map(|v| v.finalisation_latency).max().map(|l| l.to_string()).unwrap_or_default(),
        m.views.iter().map(|v| v.recovery_frags).sum::<u64>().to_string(),
        if failed.is_empty() { String::new() } else { format!("failed: {}", failed.join(",")) },
    ];
    (row, failed.is_empty())
}

fn cmd_sweep(a: &SweepArgs) -> Result<u8, CliError> {
    let points = grid_points(&a.grid, &a.point)?;
    // The base scenario must load on its own so that a broken file fails the whole sweep.
    let base = load(&a.common, &[])?;
    let dir = base.output.dir.clone();
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let path = dir.join("sweep.csv");
    let file = File::create(&path).map_err(io_err(&path))?;
    let mut w = csv::Writer::from_writer(file);
    let csv_err = |e: csv::Error| CliError::Io(format!("{}: {e}", path.display()));
    w.write_record(SWEEP_HEADER).map_err(csv_err)?;
    let mut all_ok = true;
    for point in &points {
        let label = describe(point);
        let outcome = load(&a.common, point).and_then(|s| simulate(&s)).map(|(_, r, m)| (r, m));
        if let Err(e) = &outcome {
            warn!("point {label}: {e}");
        }
        let (row, ok) = sweep_row(&label, outcome);
        all_ok &= ok;
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    println!("{}", path.display());
    Ok(if all_ok { 0 } else { 1 })
}
