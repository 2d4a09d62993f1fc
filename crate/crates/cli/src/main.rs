use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod diagnose;
mod output;

use output::Failure;

#[derive(Parser, Debug)]
#[command(name = "tabrel", version, about = "Relevance-gated question answering over tables")]
struct Cli {
    /// Root directory that every relative path is resolved against.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,

    /// Default seed for commands that take one.
    #[arg(long, global = true, env = "TABREL_SEED", default_value_t = 0)]
    default_seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic QA dataset as JSON lines.
    Generate(GenerateArgs),
    /// Train a model from a flat TOML config.
    Train(TrainArgs),
    /// Evaluate a checkpoint, optionally under perturbations.
    Eval(EvalArgs),
    /// Apply one perturbation to every example of a dataset.
    Perturb(PerturbArgs),
    /// Run a loss or fusion ablation grid.
    Ablate(AblateArgs),
    /// Histograms and 2-D projections from relevance score dumps.
    Diagnose(DiagnoseArgs),
    /// Dump statement, highlighted strings and matched cells per example.
    HighlightAudit(AuditArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 2)]
    pub min_rows: usize,
    #[arg(long, default_value_t = 70)]
    pub max_rows: usize,
    #[arg(long, default_value_t = 3)]
    pub min_cols: usize,
    #[arg(long, default_value_t = 7)]
    pub max_cols: usize,
    #[arg(long, default_value_t = 0.2)]
    pub distractor_fraction: f64,
    #[arg(long, default_value = "data.jsonl")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out set used for periodic evaluation.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "model.json")]
    pub out: PathBuf,
    #[arg(long, default_value = "metrics.jsonl")]
    pub metrics: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Ra,
    Rp,
    Cp,
    Cr,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Perturbations to evaluate in addition to the clean set.
    #[arg(long, value_delimiter = ',')]
    pub perturb: Vec<KindArg>,
    #[arg(long)]
    pub perturb_seed: Option<u64>,
    /// Donor tables for row addition and cell replacement; defaults to the data.
    #[arg(long)]
    pub donors: Option<PathBuf>,
    /// Read cell-replacement percentages literally.
    #[arg(long)]
    pub literal_fraction: bool,
    #[arg(long, default_value = "report.json")]
    pub out: PathBuf,
    /// Also write a per-example relevance score dump.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Include latent vectors in the score dump.
    #[arg(long)]
    pub latents: bool,
}

#[derive(Args, Debug)]
pub struct PerturbArgs {
    #[arg(long, value_enum)]
    pub kind: KindArg,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub donors: Option<PathBuf>,
    #[arg(long)]
    pub literal_fraction: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GridArg {
    Table4,
    Table5,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub grid: GridArg,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub eval: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
    pub seeds: Vec<u64>,
    #[arg(long, default_value = "ablation.json")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    /// One score dump per model variant.
    #[arg(long, required = true, num_args = 1..)]
    pub scores: Vec<PathBuf>,
    #[arg(long, default_value = "diagnose.json")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SourceArg {
    Statement,
    Question,
}

#[derive(Args, Debug)]
pub struct AuditArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SourceArg::Statement)]
    pub source: SourceArg,
    #[arg(long, default_value = "audit.jsonl")]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let argv: Vec<String> = std::env::args().collect();
    let mut ctx = output::Context::new(&cli.workdir, argv.join(" "), cli.default_seed);
    let result = match cli.command {
        Command::Generate(a) => commands::generate(&mut ctx, a),
        Command::Train(a) => commands::train(&mut ctx, a),
        Command::Eval(a) => commands::eval(&mut ctx, a),
        Command::Perturb(a) => commands::perturb(&mut ctx, a),
        Command::Ablate(a) => commands::ablate(&mut ctx, a),
        Command::Diagnose(a) => commands::diagnose(&mut ctx, a),
        Command::HighlightAudit(a) => commands::highlight_audit(&mut ctx, a),
    };
    match result.and_then(|()| ctx.finish()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            ctx.rollback();
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}
