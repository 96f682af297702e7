//! Command-line front end: solve, classify, verify-green, manufacture.
//!
//! Exit codes: 0 success, 1 input or configuration error, 2 solvability
//! failure (the orthogonality condition is violated), 3 numerical failure.

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use singbvp::error::Error;
use singbvp::grammar::{Term, TermSum};
use singbvp::green;
use singbvp::kernels::{build_pipeline, Pipeline};
use singbvp::lattice::classify_solution;
use singbvp::linalg::{Mat, Vec64};
use singbvp::problem::{self, SolverConfig};
use singbvp::report::{solution_to_csv, solution_to_json, RunReport};
use singbvp::solver;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "singbvp",
    about = "Boundary value problems on the half-line for linear ODE systems with a first-order pole at the origin"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// problem file (JSON)
    #[arg(long)]
    problem: PathBuf,
    /// anchor point separating the two regions ("auto" or a positive number)
    #[arg(long, default_value = "auto")]
    x0: String,
    /// truncation point standing in for infinity ("auto" or a number)
    #[arg(long, default_value = "auto")]
    xinf: String,
    /// quadrature / ODE tolerance
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// forcing-profile exponential weight (defaults above the dichotomy rate)
    #[arg(long)]
    kappa: Option<f64>,
    /// forcing-profile power weight (defaults against the residue spectrum)
    #[arg(long)]
    beta: Option<f64>,
    /// eigenvalue / rank decision tolerance
    #[arg(long, default_value_t = 1e-8)]
    split_tol: f64,
    /// escalate quality warnings to errors
    #[arg(long)]
    strict: bool,
    /// seeded re-choice of the free lattice complements
    #[arg(long)]
    shuffle_seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the main boundary value problem and write the solution grid
    Solve {
        #[command(flatten)]
        common: CommonOpts,
        /// solution-kernel coefficient (comma-separated)
        #[arg(long)]
        v1: Option<String>,
        /// finite-limit family coefficient (comma-separated)
        #[arg(long)]
        v2: Option<String>,
        /// output file (.csv or .json)
        #[arg(long)]
        out: Option<PathBuf>,
        /// output format override
        #[arg(long)]
        format: Option<String>,
    },
    /// Report the six-part dimensions, the index, and per-direction types
    Classify {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Verify the defining properties of the generalized kernel
    VerifyGreen {
        #[command(flatten)]
        common: CommonOpts,
        /// number of probe pairs for the differential identity
        #[arg(long, default_value_t = 9)]
        probes: usize,
    },
    /// Build a problem file whose main problem has a prescribed solution
    Manufacture {
        /// input file with fields n, A, B, ystar
        #[arg(long)]
        ystar: PathBuf,
        /// output problem file; reference grid lands next to it
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Unsolvable { .. } => 2,
        Error::Parse(_) | Error::Dimension(_) | Error::Domain(_) | Error::Io(_) => 1,
        _ => 3,
    }
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code(&err)
        }
    };
    std::process::exit(code);
}

fn parse_auto(text: &str, what: &str) -> Result<Option<f64>, Error> {
    if text.eq_ignore_ascii_case("auto") {
        return Ok(None);
    }
    text.parse::<f64>()
        .map(Some)
        .map_err(|_| Error::Parse(format!("{what}: expected 'auto' or a number, got '{text}'")))
}

fn config_from(common: &CommonOpts) -> Result<SolverConfig, Error> {
    let cfg = SolverConfig {
        x0: parse_auto(&common.x0, "--x0")?,
        x_inf: parse_auto(&common.xinf, "--xinf")?,
        tol: common.tol,
        kappa: common.kappa,
        beta: common.beta,
        split_tol: common.split_tol,
        strict: common.strict,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_pipeline(common: &CommonOpts) -> Result<(Pipeline, SolverConfig), Error> {
    let text = std::fs::read_to_string(&common.problem)?;
    let spec = problem::parse_problem(&text)?;
    let cfg = config_from(common)?;
    let pipe = build_pipeline(&spec, &cfg, common.shuffle_seed)?;
    Ok((pipe, cfg))
}

fn parse_vector(text: &Option<String>, n: usize, what: &str) -> Result<Vec64, Error> {
    match text {
        None => Ok(Vec64::zeros(n)),
        Some(t) => {
            let vals: Result<Vec<f64>, _> = t.split(',').map(|p| p.trim().parse::<f64>()).collect();
            let vals =
                vals.map_err(|_| Error::Parse(format!("{what}: expected comma-separated numbers")))?;
            if vals.len() != n {
                return Err(Error::Parse(format!(
                    "{what}: expected {n} components, got {}",
                    vals.len()
                )));
            }
            Ok(Vec64::from_column_slice(&vals))
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Solve { common, v1, v2, out, format } => cmd_solve(common, v1, v2, out, format),
        Command::Classify { common } => cmd_classify(common),
        Command::VerifyGreen { common, probes } => cmd_verify_green(common, probes),
        Command::Manufacture { ystar, out } => cmd_manufacture(&ystar, &out),
    }
}

fn cmd_solve(
    common: CommonOpts,
    v1: Option<String>,
    v2: Option<String>,
    out: Option<PathBuf>,
    format: Option<String>,
) -> Result<(), Error> {
    let started = Instant::now();
    let (pipe, cfg) = load_pipeline(&common)?;
    let v1 = parse_vector(&v1, pipe.n(), "--v1")?;
    let v2 = parse_vector(&v2, pipe.n(), "--v2")?;
    let mut report = RunReport::new("solve", &cfg).with_pipeline(&pipe);

    match solver::solve_main(&pipe, &v1, &v2) {
        Ok(sol) => {
            report = report.with_solution(&sol);
            if let Some(path) = &out {
                let fmt = format
                    .clone()
                    .unwrap_or_else(|| match path.extension().and_then(|e| e.to_str()) {
                        Some("csv") => "csv".into(),
                        _ => "json".into(),
                    });
                let body = match fmt.as_str() {
                    "csv" => solution_to_csv(&sol),
                    "json" => solution_to_json(&sol, &report),
                    other => {
                        return Err(Error::Parse(format!(
                            "--format: expected csv or json, got '{other}'"
                        )))
                    }
                };
                std::fs::write(path, body)?;
                report.outputs.push(path.display().to_string());
            }
            report.wall_time_ms = Some(started.elapsed().as_millis());
            println!("{}", report.to_json());
            Ok(())
        }
        Err(err @ Error::Unsolvable { .. }) => {
            report.warnings.push(err.to_string());
            report.wall_time_ms = Some(started.elapsed().as_millis());
            println!("{}", report.to_json());
            Err(err)
        }
        Err(err) => Err(err),
    }
}

fn cmd_classify(common: CommonOpts) -> Result<(), Error> {
    let started = Instant::now();
    let (pipe, cfg) = load_pipeline(&common)?;
    let mut report = RunReport::new("classify", &cfg).with_pipeline(&pipe);

    #[derive(serde::Serialize)]
    struct Entry {
        part: usize,
        basis_index: usize,
        classification: singbvp::lattice::Classification,
    }
    let mut entries = Vec::new();
    for part in 1..=6 {
        let basis = &pipe.lattice.parts[part - 1];
        for j in 0..basis.dim() {
            let y0 = basis.columns.column(j).into_owned();
            let eval = |x: f64| pipe.homogeneous(x, &y0).unwrap_or_else(|_| Vec64::zeros(pipe.n()));
            let c = classify_solution(&y0, &pipe.lattice, pipe.x0, pipe.x_inf, &eval);
            entries.push(Entry { part, basis_index: j, classification: c });
        }
    }
    report.wall_time_ms = Some(started.elapsed().as_millis());

    #[derive(serde::Serialize)]
    struct ClassifyReport {
        #[serde(flatten)]
        report: RunReport,
        directions: Vec<Entry>,
    }
    let full = ClassifyReport { report, directions: entries };
    println!("{}", serde_json::to_string_pretty(&full).expect("report serialization"));
    Ok(())
}

fn cmd_verify_green(common: CommonOpts, probes: usize) -> Result<(), Error> {
    let started = Instant::now();
    let strict = common.strict;
    let (pipe, cfg) = load_pipeline(&common)?;
    let assembly = green::build_green(&pipe)?;
    let checks = assembly.verify(probes)?;
    let mut report = RunReport::new("verify-green", &cfg).with_pipeline(&pipe);
    report.kappa = Some(assembly.kappa);
    report.beta = Some(assembly.beta);
    let failed = checks.iter().filter(|c| !c.passed()).count();
    report.green_checks = Some(checks);
    report.wall_time_ms = Some(started.elapsed().as_millis());
    println!("{}", report.to_json());
    if strict && failed > 0 {
        return Err(Error::Accuracy(format!("{failed} kernel checks failed")));
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct YstarFile {
    n: usize,
    #[serde(rename = "A")]
    a_mat: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<Vec<Term>>>,
    ystar: Vec<Vec<Term>>,
}

fn cmd_manufacture(ystar_path: &Path, out: &Path) -> Result<(), Error> {
    let text = std::fs::read_to_string(ystar_path)?;
    let file: YstarFile =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("ystar file: {e}")))?;
    let n = file.n;
    if file.a_mat.len() != n || file.b.len() != n || file.ystar.len() != n {
        return Err(Error::Parse("ystar file: inconsistent dimensions".into()));
    }
    let a = Mat::from_fn(n, n, |i, j| file.a_mat[i][j]);
    let b: Vec<Vec<TermSum>> = file
        .b
        .into_iter()
        .map(|row| row.into_iter().map(TermSum::from_terms).collect())
        .collect();
    let ystar: Vec<TermSum> = file.ystar.into_iter().map(TermSum::from_terms).collect();
    let (spec, zeta) = problem::manufacture(&a, &b, &ystar)?;
    std::fs::write(out, problem::serialize_problem(&spec))?;

    // reference solution grid next to the problem file
    let mut ref_path = out.to_path_buf();
    let stem = ref_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("problem")
        .to_string();
    ref_path.set_file_name(format!("{stem}_reference.csv"));
    let mut body = String::from("x");
    for i in 1..=n {
        body.push_str(&format!(",y{i}"));
    }
    body.push('\n');
    let mut x = 0.0;
    while x <= 10.0 + 1e-12 {
        body.push_str(&format!("{x:.16e}"));
        for ts in &ystar {
            body.push_str(&format!(",{:.16e}", ts.eval(x)));
        }
        body.push('\n');
        x += 0.05;
    }
    std::fs::write(&ref_path, body)?;

    #[derive(serde::Serialize)]
    struct ManufactureReport {
        schema: u32,
        command: String,
        problem_file: String,
        reference_file: String,
        boundary_kernel_component: Vec<f64>,
    }
    let rep = ManufactureReport {
        schema: singbvp::report::SCHEMA_VERSION,
        command: "manufacture".into(),
        problem_file: out.display().to_string(),
        reference_file: ref_path.display().to_string(),
        boundary_kernel_component: zeta.iter().copied().collect(),
    };
    println!("{}", serde_json::to_string_pretty(&rep).expect("report serialization"));
    Ok(())
}
