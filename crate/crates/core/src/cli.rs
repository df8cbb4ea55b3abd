//! Command-line front end. The `mfpo` binary forwards to [`run`].
//!
//! Exit codes: 0 pass, 1 check or assumption failure (and solver faults),
//! 2 usage or parse errors.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::Serialize;
use serde_json::{json, Value};

use crate::checks::{run_check, CheckOptions, CHECK_NAMES};
use crate::error::{Error, Result};
use crate::lq::{build_feedback_law, cost_json, evaluate_cost, optimal_value};
use crate::mfsim::{simulate_ensemble, write_binary, write_csv, ControlLaw, SimConfig};
use crate::model::{
    load_scenario, load_scenario_str, scenario_hash, validate_assumptions, ConfigFormat, Scenario, TimeGrid,
    SMOKE_SCENARIO_TOML,
};
use crate::riccati::{solve, summarize, write_gains_csv, write_riccati_csv, Normalization};

/// Default output directory when `--out` is absent.
pub const OUT_ENV: &str = "MFPO_OUT";

/// Below this many particles `simulate` warns about Monte Carlo variance.
pub const FEW_PARTICLES: usize = 1_000;

#[derive(Debug, Parser)]
#[command(name = "mfpo", version, about = "Partially observed mean-field LQ control")]
pub struct Cli {
    /// Scenario file (TOML or JSON). Defaults to the built-in smoke scenario.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, global = true)]
    pub particles: Option<usize>,
    /// Overrides the scenario's step count.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Output directory. Defaults to $MFPO_OUT, then `mfpo-out`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for particle loops. Defaults to all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NormArg {
    Unit,
    Doubled,
}

impl From<NormArg> for Normalization {
    fn from(a: NormArg) -> Self {
        match a {
            NormArg::Unit => Normalization::Unit,
            NormArg::Doubled => Normalization::Doubled,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DumpFormat {
    Csv,
    Bin,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the standing assumptions and write validate.json.
    Validate,
    /// Solve the Riccati pair and write riccati.csv, gains.csv, solve.json.
    Solve {
        #[arg(long, value_enum, default_value_t = NormArg::Unit)]
        normalization: NormArg,
    },
    /// Simulate a control law and write cost.json.
    Simulate {
        /// `feedback`, `zero` or `openloop:<csv>`.
        #[arg(long, default_value = "feedback")]
        law: String,
        #[arg(long, value_enum)]
        dump: Option<DumpFormat>,
        /// Keep every n-th particle in the CSV dump.
        #[arg(long, default_value_t = 1)]
        stride: usize,
    },
    /// Run a named check and write check_<name>.json.
    Check {
        /// smp, gradient, scaling, coercivity, convexity, bayes, value or local.
        name: String,
        /// Moment order for `scaling`.
        #[arg(long)]
        gamma: Option<f64>,
        /// Laws for `coercivity`, perturbations for `local`.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Validate, solve and collect existing check verdicts into report.json.
    Report,
}

#[derive(Debug, Clone, Serialize)]
pub struct GridInfo {
    pub horizon: f64,
    pub n_steps: usize,
    pub dt: f64,
}

impl From<&TimeGrid> for GridInfo {
    fn from(g: &TimeGrid) -> Self {
        Self {
            horizon: g.horizon(),
            n_steps: g.n_steps(),
            dt: g.dt(),
        }
    }
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub scenario_hash: String,
    pub command: String,
    pub seed: u64,
    pub grid: GridInfo,
    pub particles: Option<usize>,
    pub version: String,
    pub wall_clock_seconds: f64,
    pub outputs: Vec<String>,
}

/// Outcome of a command body before the manifest is written.
struct Outcome {
    passed: bool,
    outputs: Vec<String>,
    particles: Option<usize>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite { .. } | Error::NotPositiveDefinite { .. } | Error::Io(_) => 1,
        _ => 2,
    }
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("mfpo-out"))
}

fn load(cli: &Cli) -> Result<Scenario> {
    let mut s = match &cli.config {
        Some(p) => load_scenario(p)?,
        None => load_scenario_str(SMOKE_SCENARIO_TOML, ConfigFormat::Toml)?,
    };
    if let Some(n) = cli.steps {
        s.grid_with_steps(n)?;
        s.n_steps = n;
    }
    Ok(s)
}

/// Returns `Ok(true)` when the command passed.
pub fn execute(cli: &Cli) -> Result<bool> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Error::InvalidConfig("--threads must be positive".into()));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        return pool.install(|| execute_inner(cli));
    }
    execute_inner(cli)
}

fn execute_inner(cli: &Cli) -> Result<bool> {
    let start = Instant::now();
    let s = load(cli)?;
    let out = out_dir(cli);
    std::fs::create_dir_all(&out)?;
    let (name, res) = match &cli.command {
        Command::Validate => ("validate".to_string(), cmd_validate(&s, &out)),
        Command::Solve { normalization } => ("solve".to_string(), cmd_solve(&s, &out, (*normalization).into())),
        Command::Simulate { law, dump, stride } => {
            ("simulate".to_string(), cmd_simulate(cli, &s, &out, law, *dump, *stride))
        }
        Command::Check { name, gamma, count } => {
            let o = CheckOptions {
                seed: cli.seed,
                particles: cli.particles,
                steps: cli.steps,
                gamma: *gamma,
                count: *count,
            };
            (format!("check {name}"), cmd_check(&s, &out, name, &o))
        }
        Command::Report => ("report".to_string(), cmd_report(&s, &out)),
    };
    let mut outcome = res?;
    outcome.outputs.push("manifest.json".into());
    let manifest = RunManifest {
        scenario_hash: scenario_hash(&s),
        command: name,
        seed: cli.seed,
        grid: (&s.grid()).into(),
        particles: outcome.particles,
        version: env!("CARGO_PKG_VERSION").to_string(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        outputs: outcome.outputs,
    };
    write_json(&out.join("manifest.json"), &serde_json::to_value(&manifest).expect("serializable"))?;
    Ok(outcome.passed)
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v).expect("serializable");
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn require_valid(s: &Scenario) -> Result<bool> {
    let r = validate_assumptions(s, &s.grid());
    for f in r.failures() {
        eprintln!("assumption `{}` fails: {}", f.name, f.clause);
    }
    Ok(r.all_passed())
}

fn cmd_validate(s: &Scenario, out: &Path) -> Result<Outcome> {
    let r = validate_assumptions(s, &s.grid());
    let mut v = serde_json::to_value(&r).expect("serializable");
    v["scenario_hash"] = json!(scenario_hash(s));
    v["passed"] = json!(r.all_passed());
    write_json(&out.join("validate.json"), &v)?;
    for f in r.failures() {
        eprintln!("assumption `{}` fails: {}", f.name, f.clause);
    }
    Ok(Outcome {
        passed: r.all_passed(),
        outputs: vec!["validate.json".into()],
        particles: None,
    })
}

fn cmd_solve(s: &Scenario, out: &Path, norm: Normalization) -> Result<Outcome> {
    if !require_valid(s)? {
        return Ok(Outcome {
            passed: false,
            outputs: vec![],
            particles: None,
        });
    }
    let sol = solve(s, &s.grid(), norm)?;
    write_riccati_csv(&sol, &out.join("riccati.csv"))?;
    write_gains_csv(&sol, &out.join("gains.csv"))?;
    let mut v = serde_json::to_value(summarize(&sol, s)?).expect("serializable");
    v["scenario_hash"] = json!(scenario_hash(s));
    write_json(&out.join("solve.json"), &v)?;
    Ok(Outcome {
        passed: true,
        outputs: vec!["riccati.csv".into(), "gains.csv".into(), "solve.json".into()],
        particles: None,
    })
}

/// Reads an open-loop control from CSV: a header row, then either one row
/// (held constant) or one row per step with `k` columns.
pub fn read_open_loop(path: &Path, k: usize, g: &TimeGrid) -> Result<ControlLaw> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| Error::Parse(e.to_string()))?;
    let mut rows = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
        if rec.len() != k {
            return Err(Error::DimensionMismatch {
                name: format!("control row {line}"),
                expected: k.to_string(),
                found: rec.len().to_string(),
            });
        }
        let vals = rec
            .iter()
            .map(|f| f.trim().parse::<f64>().map_err(|e| Error::Parse(format!("control row {line}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(DVector::from_vec(vals));
    }
    let n = g.n_steps();
    match rows.len() {
        1 => Ok(ControlLaw::constant(rows.remove(0), g)),
        l if l == n || l == n + 1 => {
            if l == n {
                rows.push(rows[n - 1].clone());
            }
            Ok(ControlLaw::OpenLoop { u: rows })
        }
        l => Err(Error::DimensionMismatch {
            name: "control rows".into(),
            expected: format!("1, {n} or {}", n + 1),
            found: l.to_string(),
        }),
    }
}

fn cmd_simulate(
    cli: &Cli,
    s: &Scenario,
    out: &Path,
    law: &str,
    dump: Option<DumpFormat>,
    stride: usize,
) -> Result<Outcome> {
    if !require_valid(s)? {
        return Ok(Outcome {
            passed: false,
            outputs: vec![],
            particles: None,
        });
    }
    let g = s.grid();
    let particles = cli.particles.unwrap_or(10_000);
    if particles < FEW_PARTICLES {
        eprintln!("warning: {particles} particles; Monte Carlo estimates will have large variance");
    }
    let mut extra = json!({});
    let control = match law {
        "feedback" => {
            let sol = solve(s, &g, Normalization::Unit)?;
            extra["optimal_value"] = json!(optimal_value(&sol, s.x0.as_slice()));
            build_feedback_law(&sol)
        }
        "zero" => ControlLaw::zero(s.k, &g),
        other => match other.strip_prefix("openloop:") {
            Some(p) => read_open_loop(Path::new(p), s.k, &g)?,
            None => return Err(Error::InvalidConfig(format!("unknown law `{other}`"))),
        },
    };
    let e = simulate_ensemble(s, &control, &SimConfig::new(particles, cli.seed, g))?;
    let c = evaluate_cost(&e, s)?;
    let mut v = cost_json(&c, s);
    v["law"] = json!(law);
    v["particles"] = json!(particles);
    v["seed"] = json!(cli.seed);
    if let Some(val) = extra.get("optimal_value") {
        v["optimal_value"] = val.clone();
    }
    write_json(&out.join("cost.json"), &v)?;
    let mut outputs = vec!["cost.json".to_string()];
    match dump {
        Some(DumpFormat::Csv) => {
            write_csv(&e, &out.join("ensemble.csv"), stride)?;
            outputs.push("ensemble.csv".into());
        }
        Some(DumpFormat::Bin) => {
            write_binary(&e, &out.join("ensemble.bin"))?;
            outputs.push("ensemble.bin".into());
        }
        None => {}
    }
    Ok(Outcome {
        passed: true,
        outputs,
        particles: Some(particles),
    })
}

fn cmd_check(s: &Scenario, out: &Path, name: &str, o: &CheckOptions) -> Result<Outcome> {
    if !CHECK_NAMES.contains(&name) {
        return Err(Error::InvalidConfig(format!(
            "unknown check `{name}`; expected one of {}",
            CHECK_NAMES.join(", ")
        )));
    }
    if !require_valid(s)? {
        return Ok(Outcome {
            passed: false,
            outputs: vec![],
            particles: None,
        });
    }
    let v = run_check(name, s, o)?;
    let file = format!("check_{name}.json");
    write_json(&out.join(&file), &serde_json::to_value(&v).expect("serializable"))?;
    println!("{name}: {}", if v.passed { "pass" } else { "FAIL" });
    Ok(Outcome {
        passed: v.passed,
        outputs: vec![file],
        particles: o.particles.or(Some(crate::checks::default_particles(name))).filter(|&m| m > 0),
    })
}

fn cmd_report(s: &Scenario, out: &Path) -> Result<Outcome> {
    let hash = scenario_hash(s);
    let assumptions = validate_assumptions(s, &s.grid());
    let mut passed = assumptions.all_passed();
    let solve_summary = if passed {
        Some(serde_json::to_value(summarize(&solve(s, &s.grid(), Normalization::Unit)?, s)?).expect("serializable"))
    } else {
        None
    };
    let mut checks = serde_json::Map::new();
    for name in CHECK_NAMES {
        let p = out.join(format!("check_{name}.json"));
        if !p.exists() {
            continue;
        }
        let text = std::fs::read_to_string(&p)?;
        let v: Value = serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", p.display())))?;
        if v["scenario_hash"] != json!(hash) {
            eprintln!("skipping {}: produced for a different scenario", p.display());
            continue;
        }
        let ok = v["passed"].as_bool().unwrap_or(false);
        passed &= ok;
        checks.insert(name.to_string(), json!({ "passed": ok, "measured": v["measured"] }));
    }
    let v = json!({
        "scenario_hash": hash,
        "passed": passed,
        "assumptions_passed": assumptions.all_passed(),
        "assumption_failures": assumptions.failures().map(|f| f.name.clone()).collect::<Vec<_>>(),
        "solve": solve_summary,
        "checks": checks,
    });
    write_json(&out.join("report.json"), &v)?;
    Ok(Outcome {
        passed,
        outputs: vec!["report.json".into()],
        particles: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_subcommand_is_usage_error() {
        assert_eq!(run(["mfpo", "frobnicate"]), 2);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(run(["mfpo", "--help"]), 0);
    }

    #[test]
    fn open_loop_file_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let g = TimeGrid::new(1.0, 4).unwrap();
        let p = dir.path().join("u.csv");
        std::fs::write(&p, "u0\n0.5\n").unwrap();
        assert_eq!(
            read_open_loop(&p, 1, &g).unwrap(),
            ControlLaw::constant(DVector::from_element(1, 0.5), &g)
        );
        std::fs::write(&p, "u0\n1\n2\n3\n4\n").unwrap();
        match read_open_loop(&p, 1, &g).unwrap() {
            ControlLaw::OpenLoop { u } => assert_eq!(u.len(), 5),
            _ => unreachable!(),
        }
        std::fs::write(&p, "u0\n1\n2\n").unwrap();
        assert!(matches!(read_open_loop(&p, 1, &g), Err(Error::DimensionMismatch { .. })));
        std::fs::write(&p, "u0,u1\n1,2\n").unwrap();
        assert!(matches!(read_open_loop(&p, 1, &g), Err(Error::DimensionMismatch { .. })));
    }
}
