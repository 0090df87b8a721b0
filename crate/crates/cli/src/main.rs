use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hamcheck::app::{self, Outcome};
use hamcheck::config::RunConfig;
use hamcheck::pipeline::Command;

#[derive(Parser)]
#[command(name = "hamcheck", version, about = "Certify strong local optimality of Pontryagin extremals")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Full sufficiency pipeline for the chosen problem.
    Verify(Args),
    /// Minimum-time test with competitor corroboration.
    Mintime(Args),
    /// Build the flow sheet and report its invertibility.
    Flow(Args),
    /// Integrate the reference extremal and check the maximum principle.
    Extremal(Args),
}

#[derive(clap::Args)]
struct Args {
    /// Builtin problem name.
    #[arg(long)]
    problem: Option<String>,
    /// Problem parameters `k=v[,v...]`; repeatable.
    #[arg(long = "param", allow_hyphen_values = true)]
    params: Vec<String>,
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for both the perturbation family and the competitor sweep.
    #[arg(long)]
    seed: Option<u64>,
}

/// The resolved config, or the partially resolved one with the failing
/// operation and message.
type Resolved = Result<RunConfig, Box<(RunConfig, &'static str, String)>>;

fn resolve(args: &Args) -> Resolved {
    let mut config = RunConfig::default();
    let mut failure = None;
    if let Some(path) = &args.config {
        match RunConfig::load(path) {
            Ok(c) => config = c,
            Err(e) => failure = Some(("load_config", e.to_string())),
        }
    }
    if let Some(name) = &args.problem {
        if config.problem.name != *name {
            config.problem.name = name.clone();
            config.problem.params = Default::default();
        }
    }
    if let Some(out) = &args.out {
        config.outputs.dir = out.clone();
    }
    if let Some(seed) = args.seed {
        config.perturbation.seed = seed;
        config.competitors.seed = seed;
    }
    if failure.is_none() {
        if let Err(e) = config.merge_params(&args.params) {
            failure = Some(("merge_params", e.to_string()));
        }
    }
    match failure {
        None => Ok(config),
        Some((op, msg)) => Err(Box::new((config, op, msg))),
    }
}

fn init_threads() {
    let Ok(v) = std::env::var("HAMCHECK_THREADS") else {
        return;
    };
    match v.trim().parse::<usize>() {
        Ok(n) if n > 0 => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                eprintln!("hamcheck: cannot size thread pool: {e}");
            }
        }
        _ => eprintln!("hamcheck: ignoring HAMCHECK_THREADS={v:?}"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_threads();
    let (command, args) = match &cli.command {
        Cmd::Verify(a) => (Command::Verify, a),
        Cmd::Mintime(a) => (Command::Mintime, a),
        Cmd::Flow(a) => (Command::Flow, a),
        Cmd::Extremal(a) => (Command::Extremal, a),
    };
    let outcome = match resolve(args) {
        Ok(config) => app::execute(command, &config),
        Err(failure) => {
            let (config, op, msg) = *failure;
            app::config_failure(command, &config, op, msg)
        }
    };
    print_summary(command, &outcome);
    ExitCode::from(outcome.exit_code as u8)
}

/// Best effort: a closed stdout (e.g. piped into `head`) must not change
/// the exit code.
fn print_summary(command: Command, o: &Outcome) {
    let r = &o.report;
    let mut out = std::io::stdout().lock();
    let _ = match (&r.error, &r.verdict) {
        (Some(e), _) => writeln!(std::io::stderr(), "hamcheck {}: error in {e}", command.name()),
        (None, Some(v)) => writeln!(
            out,
            "hamcheck {} {}: {}",
            command.name(),
            r.problem,
            serde_json::to_string(v).unwrap_or_default()
        ),
        (None, None) => writeln!(out, "hamcheck {} {}: {}", command.name(), r.problem, r.status),
    };
    for f in &o.files {
        if writeln!(out, "  wrote {}", f.display()).is_err() {
            break;
        }
    }
}
