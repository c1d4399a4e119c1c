//! `tokscope`: seeded experiment runner over the tokscope library.
//!
//! Every experiment subcommand writes `config.json`, `result.json`, CSV
//! tables and `meta.json` into `--out`. Only `meta.json` carries timestamps.
//! Exit codes: 0 success, 1 numerical failure, 2 bad configuration or input,
//! 3 failed invariant.

mod commands;
mod report;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::Map;

use commands::*;
use run::{read_config, CliResult, Failure, Run};

#[derive(Debug, Parser)]
#[command(
    name = "tokscope",
    version,
    about = "Directed-information experiments on toy token models"
)]
struct Cli {
    /// JSON file of parameters for the subcommand; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed. Falls back to the config file, then TOKSCOPE_SEED, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the machine's parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a random teacher and write teacher.json.
    GenTeacher(GenTeacherArgs),
    /// Train a student transformer against a teacher.
    Train(TrainArgs),
    /// Semantic information flow of one path plus martingale checks.
    Flow(FlowArgs),
    /// Exact directed information.
    Di(DiArgs),
    /// Rate-distortion sweep over lambda.
    RdSweep(SweepArgs),
    /// Rate-reward sweep over lambda.
    RrSweep(SweepArgs),
    /// Semantic capacity over a prompt family.
    Capacity(CapacityArgs),
    /// ELBO against exact log-likelihood of the latent-position model.
    Elbo(ElboArgs),
    /// Generalization bound over resampled training sets.
    Bound(BoundArgs),
    /// Fisher information on a parameter subset.
    Fisher(FisherArgs),
    /// Johnson-Lindenstrauss projection trials.
    Jl(JlArgs),
    /// Gromov-Wasserstein distance between two spaces.
    Gw(GwArgs),
    /// Exhaustive embedding search against the CPC bound.
    EmbedOpt(EmbedArgs),
    /// Render SVG plots and a summary table for a finished run.
    Report {
        /// Directory holding result.json.
        run: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenTeacher(_) => "gen-teacher",
            Command::Train(_) => "train",
            Command::Flow(_) => "flow",
            Command::Di(_) => "di",
            Command::RdSweep(_) => "rd-sweep",
            Command::RrSweep(_) => "rr-sweep",
            Command::Capacity(_) => "capacity",
            Command::Elbo(_) => "elbo",
            Command::Bound(_) => "bound",
            Command::Fisher(_) => "fisher",
            Command::Jl(_) => "jl",
            Command::Gw(_) => "gw",
            Command::EmbedOpt(_) => "embed-opt",
            Command::Report { .. } => "report",
        }
    }
}

fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var("TOKSCOPE_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::config(format!("TOKSCOPE_SEED={v:?} is not an unsigned 64-bit integer"))),
        Err(_) => Ok(None),
    }
}

fn execute(cli: Cli) -> CliResult<()> {
    if let Command::Report { run } = &cli.command {
        let out = cli.out.clone().unwrap_or_else(|| run.clone());
        let summary = report::report(run, &out)?;
        println!("{summary}");
        return Ok(());
    }
    let (file, file_seed) = match &cli.config {
        Some(p) => read_config(p)?,
        None => (Map::new(), None),
    };
    let seed = match cli.seed.or(file_seed) {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Failure::config("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Failure::config(format!("thread pool: {e}")))?;
    }
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("tokscope-out"));
    let run = Run::new(cli.command.name(), out, seed, rayon::current_num_threads());
    let outcome = match &cli.command {
        Command::GenTeacher(a) => gen_teacher(&run, &file, a),
        Command::Train(a) => train_cmd(&run, &file, a),
        Command::Flow(a) => flow(&run, &file, a),
        Command::Di(a) => di(&run, &file, a),
        Command::RdSweep(a) => rd_sweep_cmd(&run, &file, a),
        Command::RrSweep(a) => rr_sweep_cmd(&run, &file, a),
        Command::Capacity(a) => capacity(&run, &file, a),
        Command::Elbo(a) => elbo(&run, &file, a),
        Command::Bound(a) => bound(&run, &file, a),
        Command::Fisher(a) => fisher(&run, &file, a),
        Command::Jl(a) => jl(&run, &file, a),
        Command::Gw(a) => gw(&run, &file, a),
        Command::EmbedOpt(a) => embed_opt(&run, &file, a),
        Command::Report { .. } => unreachable!("handled above"),
    }?;
    run.finish(outcome)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let f = Failure::config(e.to_string().trim().to_string());
            eprintln!("{}", f.to_json());
            return ExitCode::from(2);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.to_json());
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
