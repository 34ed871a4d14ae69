//! `gridphase` command-line front end.
//!
//! Exit codes: 0 success, 1 input or I/O error, 2 power flow did not
//! converge, 64 usage error. Log verbosity is read from `GRIDPHASE_LOG`.

use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gridphase::certify::{certify, CertificateReport};
use gridphase::jacobian::classical_blocks;
use gridphase::linalg::{subvector, wrap_angle};
use gridphase::netmodel::{load_case, Network};
use gridphase::powerflow::{injections, nr_solve, solve_operating_point, JacobianMode, NrOptions, StateVector};
use gridphase::retrieval::{retrieve_ls, write_retrieval_csv};
use gridphase::rng;
use gridphase::sensitivity::{estimate_from_window, model_plus_noise, synthesize_window, write_window_csv};
use gridphase::simkit::{
    noise_sweep, run_sequential_retrieval, simulate_snapshot, write_load_csv, write_sweep_point_csv, NoiseSpec,
    ScenarioFile,
};
use gridphase::Error;
use serde_json::json;

const EXIT_INPUT: u8 = 1;
const EXIT_NONCONVERGENCE: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(name = "gridphase", version, about = "Phase-angle retrieval and Jacobian certificates for AC power flow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the power flow of a case.
    Pf(PfArgs),
    /// Recover PQ-bus angles from a simulated snapshot.
    Retrieve(RetrieveArgs),
    /// Evaluate the recovery certificates at the solved operating point.
    Certify(CertifyArgs),
    /// Run a time-series scenario and optional noise sweep.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Classical,
    Phaseless,
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq)]
enum Sensitivities {
    Model,
    Estimated,
}

#[derive(Args)]
struct OutputArgs {
    /// Output directory; results go to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
}

#[derive(Args)]
struct PfArgs {
    /// MATPOWER case file.
    #[arg(long)]
    case: PathBuf,
    #[arg(long, value_enum, default_value = "classical")]
    mode: Mode,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 30)]
    max_iter: usize,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    case: PathBuf,
    /// Standard deviation of injection noise (p.u.).
    #[arg(long, default_value_t = 0.0)]
    sigma_meas: f64,
    /// Standard deviation of sensitivity-matrix noise.
    #[arg(long, default_value_t = 0.0)]
    sigma_jac: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long, value_enum, default_value = "model")]
    sensitivities: Sensitivities,
    /// Samples in the estimation window (default: twice the PQ count).
    #[arg(long)]
    window: Option<usize>,
    /// Noise on the window's injection changes.
    #[arg(long, default_value_t = 1e-4)]
    window_noise: f64,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct CertifyArgs {
    /// One or more MATPOWER case files.
    #[arg(long, required = true, num_args = 1..)]
    case: Vec<PathBuf>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario file (.json or .toml).
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonConvergence { .. } | Error::SingularJacobian { .. } => EXIT_NONCONVERGENCE,
            _ => EXIT_INPUT,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure {
            code: EXIT_INPUT,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GRIDPHASE_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Pf(a) => cmd_pf(a),
        Command::Retrieve(a) => cmd_retrieve(a),
        Command::Certify(a) => cmd_certify(a),
        Command::Simulate(a) => cmd_simulate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn create_file(dir: &Path, name: &str) -> std::result::Result<File, Failure> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    File::create(&path).map_err(|e| Error::Io { path, source: e }.into())
}

fn write_json(value: &serde_json::Value, out: Option<&Path>, name: &str) -> CmdResult {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)? + "\n";
    match out {
        Some(dir) => create_file(dir, name)?.write_all(text.as_bytes())?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn cmd_pf(a: PfArgs) -> CmdResult {
    let network = load_case(&a.case)?;
    let opts = NrOptions {
        tol: a.tol,
        max_iter: a.max_iter,
        mode: match a.mode {
            Mode::Classical => JacobianMode::Classical,
            Mode::Phaseless => JacobianMode::Phaseless,
        },
        record_iterates: false,
    };
    let sol = nr_solve(&network, &StateVector::flat_start(&network), &opts)?;
    let bus_ids: Vec<usize> = network.buses.iter().map(|b| b.id).collect();
    let out = a.output.out.as_deref();
    if a.output.format == Format::Csv {
        let writer: Box<dyn Write> = match out {
            Some(dir) => Box::new(create_file(dir, "solution.csv")?),
            None => Box::new(io::stdout()),
        };
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["bus", "theta", "v"]).map_err(Error::from)?;
        for (i, id) in bus_ids.iter().enumerate() {
            w.write_record([id.to_string(), sol.state.theta[i].to_string(), sol.state.v[i].to_string()])
                .map_err(Error::from)?;
        }
        w.flush()?;
    } else {
        write_json(&json!({ "case": network.name, "bus_ids": bus_ids, "solution": sol }), out, "solution.json")?;
    }
    if let Some(dir) = out {
        create_file(dir, "network.json")?.write_all(network.to_json()?.as_bytes())?;
        if sol.converged {
            classical_blocks(&network, &sol.state, &network.pq_indices())?.write_csv(&dir.join("jacobian"))?;
        }
    }
    eprintln!(
        "{}: {} after {} iterations, mismatch {:.3e}",
        network.name,
        if sol.converged { "converged" } else { "did not converge" },
        sol.iterations,
        sol.final_mismatch
    );
    if !sol.converged {
        return Err(Error::NonConvergence {
            iterations: sol.iterations,
            mismatch: sol.final_mismatch,
        }
        .into());
    }
    Ok(())
}

fn cmd_retrieve(a: RetrieveArgs) -> CmdResult {
    if matches!(a.window, Some(0)) {
        return Err(usage("--window must be positive"));
    }
    let network = load_case(&a.case)?;
    let state = solve_operating_point(&network)?;
    let noise = NoiseSpec::new(a.sigma_meas, a.sigma_jac, a.seed)?;
    let sim = simulate_snapshot(&network, &state, &noise)?;
    let out = a.output.out.as_deref();
    let (dp_dv, dq_dv) = match a.sensitivities {
        Sensitivities::Model => {
            let est = model_plus_noise(&sim.jacobian, a.sigma_jac, rng::split(a.seed, 1))?;
            (est.dp_dv, est.dq_dv)
        }
        Sensitivities::Estimated => {
            let window = a.window.unwrap_or(2 * sim.n());
            let samples = synthesize_window(&sim.jacobian, window, 1e-3, a.window_noise, rng::split(a.seed, 2))?;
            if let Some(dir) = out {
                write_window_csv(create_file(dir, "window.csv")?, &sim.bus_ids, &samples)?;
            }
            let est = estimate_from_window(sim.bus_ids.clone(), &samples, 0.0)?;
            if let Some(dir) = out {
                est.write_csv(dir)?;
            }
            (est.dp_dv, est.dq_dv)
        }
    };
    let res = retrieve_ls(&sim.snapshot, &dp_dv, &dq_dv, &sim.perturbation())?;
    let truth = sim.theta_true();
    let errors: Vec<f64> = (0..sim.n()).map(|i| wrap_angle(res.delta_theta[i] - truth[i]).abs()).collect();
    let max_err = errors.iter().copied().fold(0.0, f64::max);
    match a.output.format {
        Format::Csv => {
            let writer: Box<dyn Write> = match out {
                Some(dir) => Box::new(create_file(dir, "retrieval.csv")?),
                None => Box::new(io::stdout()),
            };
            write_retrieval_csv(writer, &sim.bus_ids, Some(&truth), &res.delta_theta)?;
        }
        Format::Json => {
            let rows: Vec<_> = (0..sim.n())
                .map(|i| {
                    json!({
                        "bus": sim.bus_ids[i],
                        "theta_true": truth[i],
                        "theta_hat": res.delta_theta[i],
                        "abs_error": errors[i],
                    })
                })
                .collect();
            let doc = json!({
                "case": network.name,
                "sigma_meas": a.sigma_meas,
                "sigma_jac": a.sigma_jac,
                "seed": a.seed,
                "residual": res.residual,
                "rank_deficient": res.rank_deficient,
                "max_abs_error": max_err,
                "buses": rows,
            });
            write_json(&doc, out, "retrieval.json")?;
        }
    }
    eprintln!("{}: max abs angle error {max_err:.3e} rad over {} PQ buses", network.name, sim.n());
    Ok(())
}

fn certify_case(path: &Path) -> std::result::Result<CertificateReport, Failure> {
    let network = load_case(path)?;
    let state = solve_operating_point(&network)?;
    let pq = network.pq_indices();
    let blocks = classical_blocks(&network, &state, &pq)?;
    let (p, q) = injections(&network.admittance, &state);
    Ok(certify(
        &network.name,
        blocks.bus_ids.clone(),
        &subvector(&state.v, &pq),
        &subvector(&p, &pq),
        &subvector(&q, &pq),
        &blocks.dp_dv,
        &blocks.dq_dv,
    )?)
}

fn cmd_certify(a: CertifyArgs) -> CmdResult {
    let reports = a.case.iter().map(|c| certify_case(c)).collect::<std::result::Result<Vec<_>, _>>()?;
    let out = a.output.out.as_deref();
    let table = std::iter::once(CertificateReport::table_header().to_string())
        .chain(reports.iter().map(|r| r.to_string()))
        .collect::<Vec<_>>()
        .join("\n")
        + "\n";
    match (a.output.format, out) {
        (Format::Json, _) => write_json(&serde_json::to_value(&reports).map_err(Error::from)?, out, "certificate.json")?,
        (Format::Csv, Some(dir)) => create_file(dir, "certificate.csv")?.write_all(table.as_bytes())?,
        (Format::Csv, None) => {}
    }
    if a.output.format == Format::Csv && out.is_none() || a.output.format == Format::Json && out.is_some() {
        io::stdout().write_all(table.as_bytes())?;
    }
    Ok(())
}

fn cmd_simulate(a: SimulateArgs) -> CmdResult {
    let scenario = ScenarioFile::load(&a.scenario)?;
    let network: Network = load_case(&scenario.case)?;
    let loads = scenario.loads(&network)?;
    write_load_csv(create_file(&a.out, "load_series.csv")?, &loads)?;
    let report = run_sequential_retrieval(&network, &loads, &scenario.series)?;
    report.write_csv(create_file(&a.out, "trajectory.csv")?)?;
    let mut summary = json!({
        "case": network.name,
        "scenario": scenario.series,
        "report": report,
    });
    eprintln!(
        "{}: {} steps, max abs error {:.3e} rad, aggregate relative error {:.3}%",
        network.name,
        report.timestamps.len(),
        report.max_abs_error,
        report.aggregate_rel_error_pct
    );
    if let Some(sweep) = &scenario.sweep {
        let state = solve_operating_point(&network)?;
        let points = noise_sweep(&network, &state, sweep, scenario.series.noise.seed)?;
        let dir = a.out.join("sweep");
        for p in &points {
            let name = format!("sm_{}_sj_{}.csv", p.sigma_meas, p.sigma_jac);
            write_sweep_point_csv(create_file(&dir, &name)?, p)?;
        }
        summary["sweep"] = serde_json::to_value(&points).map_err(Error::from)?;
    }
    write_json(&summary, Some(&a.out), "summary.json")?;
    Ok(())
}
