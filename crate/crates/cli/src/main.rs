//! `failprobe`: cohort selection, bucketing, embedding, repeated-holdout training
//! and failure analysis as batch commands.
//!
//! Exit codes: 0 success, 1 usage, 2 data validation, 3 missing embeddings.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<failprobe::Error> for Failure {
    fn from(e: failprobe::Error) -> Self {
        let code = match e {
            failprobe::Error::MissingEmbedding { .. } => 3,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "failprobe", version, about = "Repeated-holdout mortality prediction and failure-subgroup analysis")]
struct Cli {
    /// Flat JSON config; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads for repetitions. Output does not depend on this value.
    #[arg(long, global = true, env = "FAILPROBE_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Select the ICD/LOS cohort and write it as JSON.
    Cohort(CohortArgs),
    /// Build forward-filled day buckets; write JSONL plus a provenance sidecar.
    Buckets(BucketsArgs),
    /// Embed exported buckets with the deterministic stub embedder.
    EmbedStub(EmbedStubArgs),
    /// Run the repeated-holdout experiment and write the prediction log.
    Train(TrainArgs),
    /// Aggregate a prediction log into per-horizon confusion matrices.
    Report(ReportArgs),
    /// Profiles, histograms, failure subgroup and confounder ratios.
    Analyze(AnalyzeArgs),
    /// Generate a planted-confounder synthetic dataset.
    Synthbench(SynthArgs),
}

#[derive(Debug, Args)]
pub struct CohortArgs {
    #[arg(long)]
    pub admissions: Option<PathBuf>,
    #[arg(long)]
    pub diagnoses: Option<PathBuf>,
    /// ICD9 code, matched verbatim [default: 410.71]
    #[arg(long)]
    pub icd: Option<String>,
    /// `median` or a number of days [default: median]
    #[arg(long)]
    pub cutoff: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BucketsArgs {
    #[arg(long)]
    pub notes: Option<PathBuf>,
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    /// Days per grid [default: 8]
    #[arg(long)]
    pub days: Option<u8>,
    /// Bucket JSONL output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Provenance sidecar [default: <out stem>.provenance.json]
    #[arg(long)]
    pub provenance: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EmbedStubArgs {
    #[arg(long)]
    pub buckets: Option<PathBuf>,
    /// Embedding width [default: 768]
    #[arg(long)]
    pub dim: Option<u32>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    #[arg(long)]
    pub buckets: Option<PathBuf>,
    #[arg(long)]
    pub provenance: Option<PathBuf>,
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// [default: 100]
    #[arg(long)]
    pub reps: Option<u32>,
    /// [default: 0.25]
    #[arg(long)]
    pub test_frac: Option<f64>,
    /// `1..8`, `2-4` or `1,2,4,8` [default: 1..8]
    #[arg(long)]
    pub horizons: Option<String>,
    /// `undersample` or `oversample` [default: undersample]
    #[arg(long)]
    pub balance: Option<String>,
    /// [default: 100]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: 1e-5]
    #[arg(long)]
    pub lr: Option<f64>,
    /// `zeros` or `uniform:<scale>` [default: uniform:0.01]
    #[arg(long)]
    pub init: Option<String>,
    /// Master seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Prediction log CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Confusion report JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    #[arg(long)]
    pub buckets: Option<PathBuf>,
    #[arg(long)]
    pub provenance: Option<PathBuf>,
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Horizon for profiles and the subgroup [default: 1]
    #[arg(long)]
    pub horizon: Option<u8>,
    /// Subgroup keeps correct rates strictly below this [default: 0.1]
    #[arg(long)]
    pub threshold: Option<f64>,
    /// [default: 5]
    #[arg(long)]
    pub min_appearances: Option<u32>,
    /// Last day of the early stay phase [default: 4]
    #[arg(long)]
    pub phase_split: Option<u8>,
    /// Analysis report JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Histogram CSV for plotting.
    #[arg(long)]
    pub hist_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Cohort admissions [default: 400]
    #[arg(long)]
    pub size: Option<usize>,
    /// [default: 0.15]
    #[arg(long)]
    pub death_frac: Option<f64>,
    /// Fraction of survivors planted [default: 0.25]
    #[arg(long)]
    pub planted_frac: Option<f64>,
    /// [default: 16]
    #[arg(long)]
    pub dim: Option<u32>,
    /// [default: 8]
    #[arg(long)]
    pub days: Option<u8>,
    /// Embedding noise per dimension [default: 0.25]
    #[arg(long)]
    pub noise: Option<f64>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

fn run(cli: Cli) -> Result<(), Failure> {
    let file = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let threads = cli.threads.or(file.threads);
    let pool = {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = threads {
            if n == 0 {
                return Err(Failure::usage("--threads must be at least 1"));
            }
            builder = builder.num_threads(n);
        }
        builder
            .build()
            .map_err(|e| Failure::usage(format!("cannot start thread pool: {e}")))?
    };
    pool.install(|| match &cli.command {
        Command::Cohort(a) => commands::cohort(a, &file),
        Command::Buckets(a) => commands::buckets(a, &file),
        Command::EmbedStub(a) => commands::embed_stub(a, &file),
        Command::Train(a) => commands::train(a, &file),
        Command::Report(a) => commands::report(a, &file),
        Command::Analyze(a) => commands::analyze(a, &file),
        Command::Synthbench(a) => commands::synthbench(a, &file),
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
