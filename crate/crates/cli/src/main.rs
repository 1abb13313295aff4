//! `smolux`: certify, simulate and validate spatial coagulation scenarios.
//!
//! Exit codes: 0 pass, 1 certification or check failure, 2 usage or config error,
//! 3 Picard non-convergence.

mod certify;
mod report;
mod scenario;
mod simulate;
mod validate;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use smolux_core::Error;

use crate::report::Manifest;
use crate::scenario::{Built, Scenario};

#[derive(Parser)]
#[command(name = "smolux", version, about = "Spatial Smoluchowski coagulation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every certification the scenario relies on.
    Certify(Common),
    /// Solve the scenario and check the runtime bound certificate.
    Simulate(Common),
    /// Run a validation suite.
    Validate {
        #[command(flatten)]
        common: Common,
        /// Suite to run; defaults to the scenario's `validation` block.
        #[arg(long)]
        suite: Option<String>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Comma-separated checks to waive (added to the scenario's list).
    #[arg(long, value_delimiter = ',')]
    waive: Vec<String>,
}

enum Failure {
    Check(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonConvergence { .. } => 3,
        Error::Config(_) | Error::Shape(_) | Error::Misuse(_) | Error::Unsupported(_) | Error::Precondition(_) | Error::Io(_) => 2,
        _ => 1,
    }
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("SMOLUX_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("SMOLUX_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| format!("thread pool: {e}"))
}

struct Loaded {
    scenario: Scenario,
    text: String,
    built: Built,
    waive: Vec<String>,
}

fn load(c: &Common) -> Result<Loaded, Error> {
    let (scenario, text) = Scenario::load(&c.config)?;
    let mut waive = scenario.waive.clone();
    for w in &c.waive {
        if !waive.contains(w) {
            waive.push(w.clone());
        }
    }
    certify::validate_waivers(&waive)?;
    let seed = c.seed.unwrap_or(scenario.seed);
    let built = scenario::build(&scenario, seed)?;
    Ok(Loaded { scenario, text, built, waive })
}

/// Runs the hypothesis sheet, prints it and marks the model when the divergence floor is certified.
fn preflight(l: &mut Loaded, out: &std::path::Path) -> Result<bool, Error> {
    let checks = certify::run_checks(&l.built, &l.waive)?;
    print!("{}", certify::table(&checks));
    report::write(out, "certify.csv", &certify::csv(&checks))?;
    l.built.model.divergence_certified = checks
        .iter()
        .any(|c| c.name == "divergence_floor" && c.status == certify::Status::Pass);
    Ok(certify::all_pass(&checks))
}

fn cmd_certify(c: &Common) -> Result<(), Failure> {
    let mut l = load(c)?;
    let ok = preflight(&mut l, &c.out)?;
    let m = Manifest {
        command: "certify",
        config_text: &l.text,
        seed: l.built.seed,
        dt: l.built.cfg.mc.dt,
        dt_quad: l.built.cfg.dt_quad,
        n_paths: l.built.cfg.mc.n_paths,
        extra: json!({ "pass": ok, "waived": l.waive }),
    };
    report::write(&c.out, "manifest.json", &m.to_json())?;
    if ok {
        println!("certification: PASS");
        Ok(())
    } else {
        Err(Failure::Check("certification: FAIL".into()))
    }
}

fn cmd_simulate(c: &Common) -> Result<(), Failure> {
    let mut l = load(c)?;
    if !preflight(&mut l, &c.out)? {
        return Err(Failure::Check("certification: FAIL; solver not run".into()));
    }
    let outcome = simulate::run(&l.scenario, &l.built, &l.text, &c.out)?;
    print!("{}", outcome.summary);
    if outcome.pass {
        Ok(())
    } else {
        Err(Failure::Check("simulate: runtime certificate FAIL".into()))
    }
}

fn cmd_validate(c: &Common, suite: Option<&str>) -> Result<(), Failure> {
    let mut l = load(c)?;
    let spec = match (suite, &l.scenario.validation) {
        (None, Some(v)) => v.clone(),
        (Some(name), Some(v)) if validate::suite_name(v) == name => v.clone(),
        (Some(name), _) => validate::default_spec(name)?,
        (None, None) => return Err(Error::Config("no validation block in scenario; pass --suite".into()).into()),
    };
    // certifications are reported but do not gate oracles, which may violate them on purpose
    preflight(&mut l, &c.out)?;
    let r = validate::run(&spec, &l.scenario, &l.built)?;
    report::write(&c.out, &format!("validate_{}.csv", r.suite), &r.csv)?;
    let m = Manifest {
        command: "validate",
        config_text: &l.text,
        seed: l.built.seed,
        dt: l.built.cfg.mc.dt,
        dt_quad: l.built.cfg.dt_quad,
        n_paths: l.built.cfg.mc.n_paths,
        extra: json!({ "suite": r.suite, "pass": r.pass, "details": r.details }),
    };
    report::write(&c.out, "manifest.json", &m.to_json())?;
    println!("{}: {} {}", r.suite, if r.pass { "PASS" } else { "FAIL" }, r.details);
    if r.pass {
        Ok(())
    } else {
        Err(Failure::Check(format!("validate {}: FAIL", r.suite)))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let result = match &cli.command {
        Command::Certify(c) => cmd_certify(c),
        Command::Simulate(c) => cmd_simulate(c),
        Command::Validate { common, suite } => cmd_validate(common, suite.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
