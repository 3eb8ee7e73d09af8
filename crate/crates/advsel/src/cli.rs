//! Command-line front end. `run` is the whole program minus process exit, so it can be
//! driven from tests with captured output.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::asymptotics::{
    build_limit_profile, classify, dirac_residual, exponential_tail_fit, score_against_prediction,
    stationarity_residual, Outcome, RegimePrediction, Rule, Verdict,
};
use crate::carrying::build_compartments;
use crate::config::{self, ConfigError, Format};
use crate::dynamics::{
    carrying_tables, integrate_compartments, simulate_particles, CarryingTable, DensityEvaluator, RhoTrajectory,
};
use crate::model::{validate, ProblemSpec, RawProblem};
use crate::par;

pub mod exit {
    pub const OK: i32 = 0;
    pub const IO: i32 = 2;
    pub const INVALID: i32 = 3;
    pub const NO_PROFILE: i32 = 4;
    pub const CONFIG: i32 = 5;
    pub const NUMERICS: i32 = 6;
    pub const SCORE_FAIL: i32 = 7;
    pub const INCONCLUSIVE: i32 = 8;
    pub const USAGE: i32 = 64;
}

#[derive(Debug, Parser)]
#[command(name = "advsel", version, about = "Simulate and classify 1D advection-selection dynamics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a problem file and report roots, compartments and warnings.
    Validate {
        config: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Run the particle and/or compartment simulation and write CSV outputs.
    Simulate(SimulateArgs),
    /// Predict the long-time regime.
    Classify {
        config: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Sample the explicit limit profile of a profile verdict.
    Limit {
        config: PathBuf,
        /// Points per side of the anchor.
        #[arg(long, default_value_t = 257)]
        grid: usize,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Classify, simulate with particles, and score the run against the prediction.
    Verify {
        config: PathBuf,
        #[arg(long = "T")]
        horizon: Option<f64>,
        #[arg(long = "N")]
        particles: Option<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Classify a family of problems obtained by substituting `{name}` placeholders.
    Sweep {
        config: PathBuf,
        /// `name=lo:hi:step`; repeat for a Cartesian product.
        #[arg(long = "param", required = true)]
        params: Vec<ParamRange>,
        /// Worker threads (0: all cores).
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Route {
    Particles,
    Compartments,
    Both,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    config: PathBuf,
    #[arg(long = "T")]
    horizon: Option<f64>,
    #[arg(long = "N")]
    particles: Option<usize>,
    #[arg(long, value_enum, default_value_t = Route::Particles)]
    route: Route,
    #[arg(long, default_value = "advsel-out")]
    out: PathBuf,
    /// Density snapshot times, comma separated (default: the horizon).
    #[arg(long, value_delimiter = ',')]
    snap: Vec<f64>,
    /// Points of the uniform snapshot grid over the domain.
    #[arg(long, default_value_t = 1001)]
    grid: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamRange {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl std::str::FromStr for ParamRange {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let (name, range) = s.split_once('=').ok_or_else(|| format!("expected name=lo:hi:step, got `{s}`"))?;
        let name = name.trim();
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(format!("bad parameter name `{name}`"));
        }
        let parts: Vec<&str> = range.split(':').collect();
        let [lo, hi, step] = parts[..] else {
            return Err(format!("expected lo:hi:step, got `{range}`"));
        };
        let num = |t: &str| t.trim().parse::<f64>().map_err(|e| format!("`{t}`: {e}"));
        let (lo, hi, step) = (num(lo)?, num(hi)?, num(step)?);
        if !(step > 0.0) || !lo.is_finite() || !hi.is_finite() || !step.is_finite() {
            return Err("bounds must be finite and the step positive".into());
        }
        Ok(ParamRange { name: name.to_string(), lo, hi, step })
    }
}

impl ParamRange {
    /// `lo + k*step` for every `k` with the value not past `hi`; empty when `hi < lo`.
    pub fn values(&self) -> Vec<f64> {
        if self.hi < self.lo {
            return Vec::new();
        }
        let n = ((self.hi - self.lo) / self.step + 1e-9).floor() as usize + 1;
        // Rounding to 12 significant digits keeps `0.1 + 6*0.1` printing as 0.7.
        (0..n)
            .map(|k| {
                let v = self.lo + self.step * k as f64;
                format!("{v:.11e}").parse().unwrap_or(v)
            })
            .collect()
    }
}

/// An error with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Failure { code, message: message.into() }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        let code = match e {
            ConfigError::Io { .. } => exit::IO,
            _ => exit::CONFIG,
        };
        Failure::new(code, e.to_string())
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::new(exit::IO, format!("cannot write {}: {e}", path.display()))
}

fn numerics_failure(e: impl std::fmt::Display) -> Failure {
    Failure::new(exit::NUMERICS, e.to_string())
}

struct Ctx<'a> {
    env: Vec<(String, String)>,
    argv: Vec<String>,
    out: &'a mut dyn Write,
    err: &'a mut dyn Write,
}

impl Ctx<'_> {
    fn say(&mut self, text: &str) -> Result<(), Failure> {
        self.out.write_all(text.as_bytes()).map_err(|e| Failure::new(exit::IO, format!("stdout: {e}")))
    }

    fn note(&mut self, text: &str) {
        let _ = self.err.write_all(text.as_bytes());
    }

    fn load(&self, path: &Path) -> Result<(RawProblem, ProblemSpec), Failure> {
        let raw = config::load_problem(path, self.env.clone())?;
        let spec = validate(&raw).map_err(|e| {
            let mut msg = format!("{} is invalid:", path.display());
            for v in &e.violations {
                let _ = write!(msg, "\n  - {v}");
            }
            Failure::new(exit::INVALID, msg)
        })?;
        Ok((raw, spec))
    }
}

/// Run the program on `args` (including the program name) and return the exit code.
pub fn run<I, S>(args: I, env: Vec<(String, String)>, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let argv: Vec<std::ffi::OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return code;
        }
    };
    let argv = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut ctx = Ctx { env, argv, out, err };
    let result = match cli.command {
        Command::Validate { config, json } => cmd_validate(&mut ctx, &config, json),
        Command::Simulate(args) => cmd_simulate(&mut ctx, &args),
        Command::Classify { config, json } => cmd_classify(&mut ctx, &config, json),
        Command::Limit { config, grid, out } => cmd_limit(&mut ctx, &config, grid, out.as_deref()),
        Command::Verify { config, horizon, particles, json } => cmd_verify(&mut ctx, &config, horizon, particles, json),
        Command::Sweep { config, params, jobs, out } => cmd_sweep(&mut ctx, &config, &params, jobs, out.as_deref()),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            ctx.note(&format!("error: {}\n", f.message));
            f.code
        }
    }
}

/// Shortest round-trip form; scientific notation for very small or large magnitudes.
pub fn num(x: f64) -> String {
    let a = x.abs();
    if a != 0.0 && !(1e-5..1e16).contains(&a) {
        format!("{x:e}")
    } else {
        format!("{x}")
    }
}

fn csv_row(values: &[f64]) -> String {
    values.iter().map(|&v| num(v)).collect::<Vec<_>>().join(",")
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn write_file(path: &Path, content: &str) -> Result<(), Failure> {
    std::fs::write(path, content).map_err(|e| io_failure(path, e))
}

fn cmd_validate(ctx: &mut Ctx, path: &Path, json: bool) -> Result<i32, Failure> {
    let (_, spec) = ctx.load(path)?;
    let comps = build_compartments(&spec);
    if json {
        let doc = json!({
            "valid": true,
            "support": [spec.support.lo, spec.support.hi],
            "equilibria": spec.equilibria,
            "compartments": comps,
            "warnings": spec.warnings,
            "initial_mass": spec.initial_mass(),
        });
        ctx.say(&format!("{}\n", serde_json::to_string_pretty(&doc).expect("json")))?;
        return Ok(exit::OK);
    }
    let mut s = String::new();
    let _ = writeln!(s, "{}: valid", path.display());
    let _ = writeln!(s, "support of n0: [{}, {}], mass {}", num(spec.support.lo), num(spec.support.hi), num(spec.initial_mass()));
    for e in &spec.equilibria {
        match e.plateau {
            Some(p) => {
                let _ = writeln!(s, "plateau [{}, {}]", p.lo, p.hi);
            }
            None => {
                let _ = writeln!(s, "root {} ({:?}, f' = {})", e.location, e.kind, e.slope);
            }
        }
    }
    for c in &comps {
        let _ = writeln!(s, "compartment {}: ({}, {}), mass {}", c.index, c.interval.lo, c.interval.hi, c.initial_mass);
    }
    for w in &spec.warnings {
        let _ = writeln!(s, "warning: {}", serde_json::to_string(w).expect("json"));
    }
    ctx.say(&s)?;
    Ok(exit::OK)
}

fn trajectory_csv(traj: &RhoTrajectory) -> String {
    let mut s = String::from("t,rho");
    for i in 0..traj.compartments() {
        let _ = write!(s, ",rho_{i}");
    }
    s.push('\n');
    for k in 0..traj.len() {
        let mut row = vec![traj.times[k], traj.rho[k]];
        row.extend_from_slice(&traj.parts[k]);
        s.push_str(&csv_row(&row));
        s.push('\n');
    }
    s
}

fn carrying_csv(tables: &[CarryingTable]) -> String {
    let mut s = String::from("compartment,t,ln_S,R\n");
    for (i, tab) in tables.iter().enumerate() {
        for p in &tab.samples {
            let _ = writeln!(s, "{i},{}", csv_row(&[p.t, p.ln_s, p.r]));
        }
    }
    s
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a [String],
    problem: &'a RawProblem,
    horizon: f64,
    particles: usize,
    route: Route,
    snapshots: &'a [f64],
    outputs: &'a [String],
    wall_clock_seconds: f64,
    versions: Value,
}

fn versions() -> Value {
    json!({ "advsel": env!("CARGO_PKG_VERSION"), "output_format": 1 })
}

fn cmd_simulate(ctx: &mut Ctx, args: &SimulateArgs) -> Result<i32, Failure> {
    let started = Instant::now();
    let (raw, spec) = ctx.load(&args.config)?;
    let horizon = args.horizon.unwrap_or(spec.numerics.t_horizon);
    let count = args.particles.unwrap_or(spec.numerics.particles);
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(Failure::new(exit::USAGE, format!("--T must be finite and non-negative, got {horizon}")));
    }
    let snaps: Vec<f64> = if args.snap.is_empty() { vec![horizon] } else { args.snap.clone() };
    if let Some(&t) = snaps.iter().find(|&&t| !(t >= 0.0 && t <= horizon)) {
        return Err(Failure::new(exit::USAGE, format!("snapshot time {t} lies outside [0, {horizon}]")));
    }
    std::fs::create_dir_all(&args.out).map_err(|e| io_failure(&args.out, e))?;
    let mut outputs = Vec::new();
    let mut summary = String::new();
    let emit = |name: String, content: String, outputs: &mut Vec<String>| -> Result<(), Failure> {
        write_file(&args.out.join(&name), &content)?;
        outputs.push(name);
        Ok(())
    };

    let mut particle_traj = None;
    if matches!(args.route, Route::Particles | Route::Both) {
        let run = simulate_particles(&spec, horizon, count).map_err(numerics_failure)?;
        let ens = &run.ensemble;
        let mut s = String::from("x,mass\n");
        for (x, m) in ens.positions.iter().zip(&ens.masses) {
            let _ = writeln!(s, "{}", csv_row(&[*x, *m]));
        }
        emit("particles.csv".into(), s, &mut outputs)?;
        emit("trajectory_particles.csv".into(), trajectory_csv(&run.trajectory), &mut outputs)?;
        let _ = writeln!(summary, "particles: rho({horizon}) = {}", run.trajectory.final_rho());
        particle_traj = Some(run.trajectory);
    }
    let mut compartment_traj = None;
    if matches!(args.route, Route::Compartments | Route::Both) {
        let comps = build_compartments(&spec);
        let tables = carrying_tables(&spec, &comps, horizon).map_err(numerics_failure)?;
        let traj = integrate_compartments(&spec, &tables, horizon).map_err(numerics_failure)?;
        emit("carrying.csv".into(), carrying_csv(&tables), &mut outputs)?;
        emit("trajectory_compartments.csv".into(), trajectory_csv(&traj), &mut outputs)?;
        let _ = writeln!(summary, "compartments: rho({horizon}) = {}", traj.final_rho());
        compartment_traj = Some(traj);
    }
    if let (Some(p), Some(c)) = (&particle_traj, &compartment_traj) {
        let worst = route_gap(p, c).map_err(numerics_failure)?;
        let _ = writeln!(summary, "route agreement: max |rho_p - rho_c| / rho_c = {worst:e}");
    }

    let traj = particle_traj.as_ref().or(compartment_traj.as_ref()).expect("at least one route ran");
    let dens = DensityEvaluator::new(&spec, traj);
    let n = args.grid.max(2);
    let d = spec.domain;
    let xs: Vec<f64> =
        (0..n).map(|i| if i == n - 1 { d.hi } else { d.lo + d.width() * i as f64 / (n - 1) as f64 }).collect();
    for &t in &snaps {
        let values = par::map(&xs, |&x| dens.eval(t, x));
        let mut s = String::from("x,n\n");
        for (x, v) in xs.iter().zip(values) {
            let v = v.map_err(numerics_failure)?;
            let _ = writeln!(s, "{}", csv_row(&[*x, v]));
        }
        emit(format!("density_t{}.csv", num(t)), s, &mut outputs)?;
    }

    outputs.push("manifest.json".into());
    let manifest = RunManifest {
        command: &ctx.argv,
        problem: &raw,
        horizon,
        particles: count,
        route: args.route,
        snapshots: &snaps,
        outputs: &outputs,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        versions: versions(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("json") + "\n";
    write_file(&args.out.join("manifest.json"), &text)?;
    let _ = writeln!(summary, "wrote {} files to {}", outputs.len(), args.out.display());
    ctx.say(&summary)?;
    Ok(exit::OK)
}

/// Largest `|rho_a - rho_b| / rho_b` over the recorded times of `a`.
pub fn route_gap(a: &RhoTrajectory, b: &RhoTrajectory) -> Result<f64, crate::dynamics::DynamicsError> {
    let mut worst: f64 = 0.0;
    for (&t, &ra) in a.times.iter().zip(&a.rho) {
        let rb = b.rho_at(t.min(b.end()))?;
        worst = worst.max((ra - rb).abs() / rb.abs());
    }
    Ok(worst)
}

/// Verdict document: verdict fields, provenance, tolerances.
pub fn verdict_json(spec: &ProblemSpec, pred: &RegimePrediction) -> Value {
    let mut doc = match serde_json::to_value(&pred.verdict).expect("json") {
        Value::Object(map) => map,
        _ => unreachable!(),
    };
    if let Verdict::Profile { interval, .. } = &pred.verdict {
        doc.insert("interval".into(), json!([interval.lo, interval.hi]));
    }
    if let Some(Value::String(reason)) = doc.remove("reason") {
        doc.insert("degenerate_reason".into(), Value::String(reason));
    }
    doc.insert(
        "provenance".into(),
        json!({
            "rule": pred.rule,
            "summary": pred.provenance(),
            "dominant_compartment": pred.dominant,
            "contributors": pred.contributors,
        }),
    );
    doc.insert("limits".into(), serde_json::to_value(&pred.candidates).expect("json"));
    let n = &spec.numerics;
    doc.insert(
        "tolerances".into(),
        json!({
            "tie_tol": n.tie_tol,
            "tol_hyperbolic": n.tol_hyperbolic,
            "tol_fit": n.tol_fit,
            "dirac_radius": n.dirac_radius,
        }),
    );
    Value::Object(doc)
}

fn verdict_line(pred: &RegimePrediction) -> String {
    match &pred.verdict {
        Verdict::Dirac { location, mass } => format!("dirac mass {mass} at x = {location}"),
        Verdict::Profile { interval, anchor, alpha, rho_inf, .. } => format!(
            "L1 profile on ({}, {}) anchored at {anchor} with alpha = {alpha}, rho -> {rho_inf}",
            interval.lo, interval.hi
        ),
        Verdict::Extinction => "extinction: rho -> 0".into(),
        Verdict::Degenerate { reason } => format!("degenerate: {reason}"),
    }
}

fn verdict_name(v: &Verdict) -> &'static str {
    match v {
        Verdict::Dirac { .. } => "dirac",
        Verdict::Profile { .. } => "profile",
        Verdict::Extinction => "extinction",
        Verdict::Degenerate { .. } => "degenerate",
    }
}

fn cmd_classify(ctx: &mut Ctx, path: &Path, json: bool) -> Result<i32, Failure> {
    let (_, spec) = ctx.load(path)?;
    let pred = classify(&spec);
    if json {
        let text = serde_json::to_string_pretty(&verdict_json(&spec, &pred)).expect("json");
        ctx.say(&format!("{text}\n"))?;
        return Ok(exit::OK);
    }
    let mut s = format!("verdict: {}\nprovenance: {}\n", verdict_line(&pred), pred.provenance());
    for c in &pred.candidates {
        let (lo, hi) = (c.interval.lo, c.interval.hi);
        match (c.value, &c.error) {
            (Some(v), _) => {
                let _ = writeln!(s, "  compartment {} ({lo}, {hi}): lim R = {v} = {} [{}]", c.compartment, c.formula, c.case_tag);
            }
            (None, Some(e)) => {
                let _ = writeln!(s, "  compartment {} ({lo}, {hi}): {e}", c.compartment);
            }
            (None, None) => {}
        }
    }
    ctx.say(&s)?;
    Ok(exit::OK)
}

fn no_profile(pred: &RegimePrediction) -> Failure {
    let name = match pred.verdict {
        Verdict::Dirac { .. } => "Dirac",
        Verdict::Extinction => "Extinction",
        Verdict::Degenerate { .. } => "Degenerate",
        Verdict::Profile { .. } => "Profile",
    };
    Failure::new(exit::NO_PROFILE, format!("no L¹ limit profile; verdict is {name}"))
}

fn cmd_limit(ctx: &mut Ctx, path: &Path, grid: usize, out: Option<&Path>) -> Result<i32, Failure> {
    let (_, spec) = ctx.load(path)?;
    let pred = classify(&spec);
    if !matches!(pred.verdict, Verdict::Profile { .. }) {
        return Err(no_profile(&pred));
    }
    let profile = build_limit_profile(&spec, &pred, grid).map_err(numerics_failure)?;
    let mut csv = String::from("x,n_bar\n");
    for (x, v) in profile.grid.iter().zip(&profile.values) {
        let _ = writeln!(csv, "{}", csv_row(&[*x, *v]));
    }
    match out {
        Some(p) => {
            write_file(p, &csv)?;
            let mass = profile.mass().map_err(numerics_failure)?;
            let residual = stationarity_residual(&spec, &profile, spec.numerics.test_functions);
            let mut s = format!("verdict: {}\nmass: {mass}\nweak residual: {residual:e}\n", verdict_line(&pred));
            for e in profile.endpoint_slopes() {
                let _ = writeln!(s, "log-slope at {}: {} (predicted {})", e.location, e.measured, e.expected);
            }
            let _ = writeln!(s, "wrote {}", p.display());
            ctx.say(&s)?;
        }
        None => {
            ctx.note(&format!("verdict: {}\n", verdict_line(&pred)));
            ctx.say(&csv)?;
        }
    }
    Ok(exit::OK)
}

fn cmd_verify(
    ctx: &mut Ctx,
    path: &Path,
    horizon: Option<f64>,
    particles: Option<usize>,
    json: bool,
) -> Result<i32, Failure> {
    let (_, spec) = ctx.load(path)?;
    let horizon = horizon.unwrap_or(spec.numerics.t_horizon);
    let count = particles.unwrap_or(spec.numerics.particles);
    let pred = classify(&spec);
    if pred.is_degenerate() {
        ctx.say(&format!("verdict: {}\nnothing to verify\n", verdict_line(&pred)))?;
        return Ok(exit::OK);
    }
    let run = simulate_particles(&spec, horizon, count).map_err(numerics_failure)?;
    let report = score_against_prediction(&spec, &pred, &run).map_err(numerics_failure)?;
    let count_fns = spec.numerics.test_functions;
    let residual = match &pred.verdict {
        Verdict::Dirac { location, mass } => Some(dirac_residual(&spec, *location, *mass, count_fns)),
        Verdict::Profile { .. } => {
            let profile = build_limit_profile(&spec, &pred, 65).map_err(numerics_failure)?;
            Some(stationarity_residual(&spec, &profile, count_fns))
        }
        _ => None,
    };
    let exponential = is_exponential(&pred);
    let limit = match &pred.verdict {
        Verdict::Dirac { mass, .. } => Some(*mass),
        Verdict::Profile { rho_inf, .. } => Some(*rho_inf),
        _ => None,
    };
    let tail = if exponential { limit.and_then(|l| exponential_tail_fit(&run.trajectory, l)) } else { None };
    let code = match report.outcome {
        Outcome::Pass => exit::OK,
        Outcome::Fail => exit::SCORE_FAIL,
        Outcome::Inconclusive => exit::INCONCLUSIVE,
    };
    if json {
        let doc = json!({
            "verdict": verdict_name(&pred.verdict),
            "prediction": verdict_json(&spec, &pred),
            "score": report,
            "weak_residual": residual,
            "tail_fit": tail,
        });
        ctx.say(&format!("{}\n", serde_json::to_string_pretty(&doc).expect("json")))?;
        return Ok(code);
    }
    let mut s = format!("verdict: {}\n", verdict_line(&pred));
    let _ = writeln!(s, "rho({}) = {}, drift over last 10% = {:e}", report.horizon, report.rho_final, report.drift);
    for c in &report.checks {
        let cmp = if c.name == "share_within_radius" { ">=" } else { "<=" };
        let mark = if c.pass { "ok" } else { "FAIL" };
        let _ = writeln!(s, "  {}: {} {cmp} {} {mark}", c.name, num(c.value), num(c.tolerance));
    }
    if let Some(r) = residual {
        let _ = writeln!(s, "weak residual: {r:e}");
    }
    if let Some(t) = tail {
        let _ = writeln!(s, "tail fit: slope {} with R^2 {} over {} points", t.slope, t.r_squared, t.points);
    }
    if let Some(note) = &report.note {
        let _ = writeln!(s, "note: {note}");
    }
    let _ = writeln!(s, "outcome: {}", serde_json::to_value(report.outcome).expect("json").as_str().unwrap_or(""));
    ctx.say(&s)?;
    Ok(code)
}

/// Root-anchored verdicts converge at an exponential rate; plateau and extinction verdicts need not.
pub fn is_exponential(pred: &RegimePrediction) -> bool {
    matches!(pred.rule, Rule::StableRoot | Rule::UnstableRoot)
}

struct SweepRow {
    verdict: String,
    fields: [Option<f64>; 7],
    rule: String,
    limits: String,
    detail: String,
}

fn sweep_one(template: &str, format: Format, names: &[&str], values: &[f64], env: &[(String, String)]) -> SweepRow {
    let invalid = |detail: String| SweepRow {
        verdict: "invalid".into(),
        fields: [None; 7],
        rule: String::new(),
        limits: String::new(),
        detail,
    };
    let mut text = template.to_string();
    for (name, v) in names.iter().zip(values) {
        text = text.replace(&format!("{{{name}}}"), &num(*v));
    }
    let mut raw = match config::parse_problem(&text, format) {
        Ok(raw) => raw,
        Err(e) => return invalid(e),
    };
    if let Err(e) = config::apply_env_overrides(&mut raw.numerics, env.to_vec()) {
        return invalid(e.to_string());
    }
    let spec = match validate(&raw) {
        Ok(s) => s,
        Err(e) => return invalid(e.to_string()),
    };
    let pred = classify(&spec);
    let mut fields = [None; 7];
    let mut detail = String::new();
    match &pred.verdict {
        Verdict::Dirac { location, mass } => {
            fields[0] = Some(*location);
            fields[1] = Some(*mass);
        }
        Verdict::Profile { interval, anchor, alpha, rho_inf, .. } => {
            fields[2] = Some(interval.lo);
            fields[3] = Some(interval.hi);
            fields[4] = Some(*anchor);
            fields[5] = Some(*alpha);
            fields[1] = Some(*rho_inf);
        }
        Verdict::Extinction => fields[1] = Some(0.0),
        Verdict::Degenerate { reason } => detail = reason.clone(),
    }
    let values: Vec<f64> = pred.candidates.iter().filter_map(|c| c.value).collect();
    fields[6] = values.iter().copied().fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
    let limits = pred
        .candidates
        .iter()
        .map(|c| c.value.map_or_else(|| "nan".to_string(), num))
        .collect::<Vec<_>>()
        .join(";");
    let rule = serde_json::to_value(pred.rule).expect("json").as_str().unwrap_or("").to_string();
    SweepRow { verdict: verdict_name(&pred.verdict).into(), fields, rule, limits, detail }
}

fn cmd_sweep(ctx: &mut Ctx, path: &Path, params: &[ParamRange], jobs: usize, out: Option<&Path>) -> Result<i32, Failure> {
    let template = config::read_text(path)?;
    let format = Format::of(path);
    let names: Vec<&str> = params.iter().map(|p| p.name.as_str()).collect();
    for name in &names {
        if !template.contains(&format!("{{{name}}}")) {
            return Err(Failure::new(exit::CONFIG, format!("{} has no placeholder {{{name}}}", path.display())));
        }
    }
    // Cartesian product, last parameter varying fastest.
    let mut combos: Vec<Vec<f64>> = vec![Vec::new()];
    for p in params {
        let vals = p.values();
        combos = combos
            .iter()
            .flat_map(|prefix| {
                vals.iter().map(move |&v| {
                    let mut c = prefix.clone();
                    c.push(v);
                    c
                })
            })
            .collect();
    }
    let env = ctx.env.clone();
    let rows = par::with_threads(jobs, || par::map(&combos, |vals| sweep_one(&template, format, &names, vals, &env)));

    let mut csv = String::new();
    for name in &names {
        let _ = write!(csv, "{},", csv_field(name));
    }
    csv.push_str("verdict,location,mass,interval_lo,interval_hi,anchor,alpha,max_limit,rule,limits,detail\n");
    for (vals, row) in combos.iter().zip(&rows) {
        for v in vals {
            let _ = write!(csv, "{},", num(*v));
        }
        let cell = |x: Option<f64>| x.map_or_else(String::new, num);
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{}",
            row.verdict,
            cell(row.fields[0]),
            cell(row.fields[1]),
            cell(row.fields[2]),
            cell(row.fields[3]),
            cell(row.fields[4]),
            cell(row.fields[5]),
            cell(row.fields[6]),
            row.rule,
            csv_field(&row.limits),
            csv_field(&row.detail),
        );
    }
    match out {
        Some(p) => {
            write_file(p, &csv)?;
            ctx.say(&format!("{} rows written to {}\n", rows.len(), p.display()))?;
        }
        None => ctx.say(&csv)?,
    }
    Ok(exit::OK)
}
