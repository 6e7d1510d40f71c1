//! `red-forge`: generate data, train, evaluate and inspect retrieval and
//! deformation from the command line.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;

use config::ConfigArgs;

#[derive(Parser, Debug)]
#[command(name = "red-forge", version, about = "Residual-guided shape retrieval and part deformation for partial point clouds")]
struct Cli {
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true, env = "RED_FORGE_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a source database of part-segmented shapes.
    GenDb(GenDbArgs),
    /// Generate training and test targets with occluded observations.
    GenData(GenDataArgs),
    /// Train the joint retrieval and deformation model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on held-out targets.
    Eval(EvalArgs),
    /// Retrieve sources for one partial target.
    Retrieve(RetrieveArgs),
    /// Deform one source toward a target.
    Deform(DeformArgs),
    /// Evaluate a checkpoint at several occlusion ratios.
    AblateOcclusion(AblateArgs),
    /// Run the finite-difference gradient checks.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug)]
struct GenDbArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Shapes per category.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    per_category: Option<u64>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Source database directory.
    #[arg(long)]
    db: PathBuf,
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    /// Run directory for the log and checkpoints.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    db: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Report file (JSON).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    /// Also score occluded copies of every database shape and report recall.
    #[arg(long)]
    planted: bool,
    /// Also report the rigid and direct-fit oracle baselines.
    #[arg(long)]
    baselines: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct RetrieveArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    db: PathBuf,
    /// Partial target cloud (PCF1 binary or "x y z" text).
    #[arg(long)]
    target: PathBuf,
    /// Known target category; restricts the search when set.
    #[arg(long)]
    category: Option<String>,
    /// Result file (JSON).
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("method").required(true).args(["checkpoint", "direct"]))]
struct DeformArgs {
    #[arg(long)]
    db: PathBuf,
    /// Source shape id.
    #[arg(long)]
    source: String,
    /// Target cloud (PCF1 binary or "x y z" text).
    #[arg(long)]
    target: PathBuf,
    /// Deform with a trained model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Deform by direct gradient fitting.
    #[arg(long)]
    direct: bool,
    /// Parameter file (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Also write the deformed cloud (PCF1).
    #[arg(long)]
    cloud_out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75")]
    ratios: Vec<f64>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    db: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Report file (JSON).
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModuleArg {
    All,
    Autodiff,
    Losses,
    Nets,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[arg(long, value_enum, default_value = "all")]
    module: ModuleArg,
    /// Maximum relative error.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Scale the backward pass of one op (negative control).
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::GenDb(a) => commands::gen_db(a),
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Retrieve(a) => commands::retrieve(a),
        Command::Deform(a) => commands::deform(a),
        Command::AblateOcclusion(a) => commands::ablate(a),
        Command::GradCheck(a) => commands::grad_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
