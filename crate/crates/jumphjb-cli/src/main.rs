//! `jumphjb` — scenario harness for the jump-diffusion control toolkit.
//!
//! Every run command takes `--scenario <name-or-file>` and `--out <dir>`
//! and writes `results.csv`, `report.json`, and `manifest.json` into the
//! output directory. Exit codes: 0 success, 2 scenario/schema problems,
//! 3 numerical failures, 4 refused enumeration budgets. Failures print
//! a single-line JSON error object to stdout.

mod commands;
mod output;
mod scenario;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use commands::{schema_err, CliError, RunContext};

#[derive(Parser)]
#[command(name = "jumphjb", version, about = "Controlled jump-diffusion experiment harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Built-in scenario name or path of a scenario JSON file.
    #[arg(long)]
    scenario: String,
    /// Output directory; created if absent.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads (fallback: JUMPHJB_THREADS, then all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Override the scenario's master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Forward paths, moment diagnostics, and the flow identity check.
    Simulate(RunArgs),
    /// Backward recursive-cost solve with martingale residuals.
    SolveBsde(RunArgs),
    /// Policy-family value by open-loop enumeration and feedback recursion.
    Value(RunArgs),
    /// Dynamic-programming residual on the scenario grid and its coarsening.
    DppCheck(RunArgs),
    /// Deterministic-coefficient grid solve plus a comparison check.
    SolvePde(RunArgs),
    /// Grid value against the probabilistic value at the initial state.
    CrossCheck(RunArgs),
    /// Smoothing-error table and bounding envelopes per mollification level.
    MollifyReport(RunArgs),
    /// Weight absorption rates, closed-form diffusion ratios, penalty checks.
    LyapunovReport(RunArgs),
    /// Regression residuals of coarse noise projections.
    ProjectReport(RunArgs),
    /// Print the built-in scenarios and the registry hash.
    ListScenarios,
}

fn resolve_scenario(arg: &str) -> Result<scenario::Scenario, CliError> {
    if let Some(s) = scenario::builtin(arg) {
        return Ok(s);
    }
    let text = std::fs::read_to_string(arg).map_err(|e| {
        schema_err(format!("`{}` is neither a built-in scenario nor a readable file: {}", arg, e))
    })?;
    let s: scenario::Scenario = serde_json::from_str(&text)
        .map_err(|e| schema_err(format!("scenario file `{}` does not parse: {}", arg, e)))?;
    s.validate().map_err(|e| schema_err(format!("scenario file `{}`: {}", arg, e)))?;
    Ok(s)
}

fn configure_threads(requested: Option<usize>) -> usize {
    let requested = requested.or_else(|| {
        std::env::var("JUMPHJB_THREADS").ok().and_then(|v| v.parse().ok())
    });
    if let Some(t) = requested {
        // A failure here means a global pool already exists; the run
        // proceeds on that pool and the manifest records its width.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t.max(1)).build_global();
    }
    rayon::current_num_threads()
}

fn context(args: &RunArgs) -> Result<RunContext, CliError> {
    let mut scenario = resolve_scenario(&args.scenario)?;
    if let Some(seed) = args.seed {
        scenario.master_seed = seed;
    }
    let threads = configure_threads(args.threads);
    Ok(RunContext { scenario, out_dir: args.out.clone(), threads })
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(a) => commands::simulate_cmd(&context(&a)?),
        Command::SolveBsde(a) => commands::solve_bsde_cmd(&context(&a)?),
        Command::Value(a) => commands::value_cmd(&context(&a)?),
        Command::DppCheck(a) => commands::dpp_check_cmd(&context(&a)?),
        Command::SolvePde(a) => commands::solve_pde_cmd(&context(&a)?),
        Command::CrossCheck(a) => commands::cross_check_cmd(&context(&a)?),
        Command::MollifyReport(a) => commands::mollify_report_cmd(&context(&a)?),
        Command::LyapunovReport(a) => commands::lyapunov_report_cmd(&context(&a)?),
        Command::ProjectReport(a) => commands::project_report_cmd(&context(&a)?),
        Command::ListScenarios => {
            for s in scenario::registry() {
                println!("{:<18} {}", s.name, s.description);
            }
            println!("registry-sha256: {}", scenario::registry_hash());
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            let body = serde_json::json!({
                "error": { "exit_code": e.exit_code, "kind": e.kind, "message": e.message }
            });
            println!("{}", body);
            std::process::exit(e.exit_code);
        }
    }
}
