//! `nilspin`: verify the matrix, plan, certify and sweep from a TOML config.
//!
//! Exit codes: 0 pass, 2 invalid input, 3 certification failure, 4 internal
//! error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nilspin::pipeline::{self, PipelineConfig, PipelineError, Verdict};
use serde_json::Value;

const EXIT_PASS: u8 = 0;
const EXIT_INVALID: u8 = 2;
const EXIT_FAIL: u8 = 3;
const EXIT_INTERNAL: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "nilspin", version, about = "Certify a partially hyperbolic deformation of a nilmanifold automorphism")]
struct Cli {
    /// TOML configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output.dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for the perturbation trials (overrides `certify.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Rotation-angle grid size (overrides `certify.theta_grid`).
    #[arg(long, global = true)]
    grid: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Certify the integer matrix and its eigenvalue chain.
    VerifyMatrix,
    /// Plan the rotation that moves a center eigenvalue past one.
    Plan,
    /// Run the full pipeline and write report.json and curves/*.csv.
    Certify,
    /// Measure the splitting distance on K over a ladder of support radii.
    SweepSupport {
        /// Comma-separated radii (overrides `sweep.radii`).
        #[arg(long, value_delimiter = ',')]
        radii: Option<Vec<f64>>,
    },
    /// Summarize a report written by `certify`.
    Report {
        path: PathBuf,
        /// Print the full JSON instead of the summary.
        #[arg(long)]
        json: bool,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.certify.seed = seed;
    }
    if let Some(grid) = cli.grid {
        cfg.certify.theta_grid = grid;
    }
    if let Some(out) = &cli.out {
        cfg.output.dir = out.to_string_lossy().into_owned();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn to_pretty<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn run(cli: Cli) -> Result<u8, PipelineError> {
    if let Command::Report { path, json } = &cli.command {
        return report(path, *json);
    }
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::VerifyMatrix => {
            let (stage, _) = pipeline::verify_matrix(&cfg);
            println!("{}", to_pretty(&stage));
            if stage.pass {
                Ok(EXIT_PASS)
            } else {
                eprintln!("matrix does not conform: {}", stage.diagnostics.join("; "));
                Ok(EXIT_INVALID)
            }
        }
        Command::Plan => {
            let (_, plan) = pipeline::plan_only(&cfg)?;
            println!("{}", to_pretty(&plan));
            if let Some(e) = &plan.error {
                eprintln!("planner rejected: {e}");
            }
            Ok(if plan.pass { EXIT_PASS } else { EXIT_FAIL })
        }
        Command::Certify => {
            let report = pipeline::certify(&cfg)?;
            let path = pipeline::write_outputs(&report, Path::new(&cfg.output.dir))?;
            println!("verdict: {:?}", report.verdict);
            for s in &report.failed_stages {
                println!("failed stage: {s}");
            }
            if let Some(sweep) = &report.sweep {
                sweep.warnings.iter().for_each(|w| eprintln!("warning: {w}"));
            }
            println!("report: {}", path.display());
            Ok(if report.verdict == Verdict::Pass { EXIT_PASS } else { EXIT_FAIL })
        }
        Command::SweepSupport { radii } => {
            let mut cfg = cfg;
            if let Some(r) = radii {
                cfg.sweep.radii = r;
                cfg.validate()?;
            }
            let sweep = pipeline::sweep_only(&cfg)?;
            sweep.warnings.iter().for_each(|w| eprintln!("warning: {w}"));
            let dir = Path::new(&cfg.output.dir).join("curves");
            fs::create_dir_all(&dir).map_err(|e| PipelineError::Internal(e.to_string()))?;
            let path = dir.join("support_sweep.csv");
            pipeline::write_sweep_csv(&path, &sweep)?;
            println!("radius,max_distance");
            println!("0,{:e}", sweep.control_distance);
            for p in &sweep.points {
                println!("{:e},{:e}", p.radius, p.distance);
            }
            println!(
                "strictly decreasing: {}, final {:e}, pass: {}",
                sweep.strictly_decreasing, sweep.final_distance, sweep.pass
            );
            Ok(if sweep.pass { EXIT_PASS } else { EXIT_FAIL })
        }
        Command::Report { .. } => unreachable!("handled above"),
    }
}

fn report(path: &Path, json: bool) -> Result<u8, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::InvalidInput(format!("{}: {e}", path.display())))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| PipelineError::InvalidInput(format!("report: {e}")))?;
    if json {
        println!("{}", to_pretty(&v));
        return Ok(EXIT_PASS);
    }
    let get = |p: &str| v.pointer(p).cloned().unwrap_or(Value::Null);
    println!("schema {}  tool {}  at {}", get("/schema_version"), get("/tool_version"), get("/timestamp"));
    println!("verdict {}", get("/verdict"));
    if let Some(failed) = v["failed_stages"].as_array().filter(|a| !a.is_empty()) {
        println!("failed stages: {}", failed.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(", "));
    }
    println!("eigenvalues {}", get("/matrix/eigenvalues"));
    println!("rotation angle {}  pair {}", get("/plan/plan/angle"), get("/plan/plan/pair"));
    println!("domination exponent n = {}", get("/cones/n"));
    if let Some(splits) = v.pointer("/cones/splittings").and_then(Value::as_array) {
        for s in splits {
            println!(
                "  {}: margin {}  delta {}  trial failures {}",
                s["spec"]["name"], s["witness"]["margin"], s["robustness"]["delta"], s["robustness"]["failures"]
            );
        }
    }
    println!(
        "bunching: max(nu, nu_hat) vs gamma gamma_hat margin {}  bullets hold {}",
        get("/bunching/deformed/bunching_margin"),
        get("/bunching/deformed/all_bullets_hold")
    );
    if let Some(points) = v.pointer("/sweep/points").and_then(Value::as_array) {
        for p in points {
            println!("  sweep radius {}  distance {}", p["radius"], p["distance"]);
        }
    }
    Ok(EXIT_PASS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(code)) => ExitCode::from(code),
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
        Err(_) => ExitCode::from(EXIT_INTERNAL),
    }
}
