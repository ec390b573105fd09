use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ntps_cli::commands::{self, ValidateArgs};
use ntps_cli::CliResult;
use ntps_core::synth::{SuiteOptions, SynthConfig};
use ntps_core::Pooling;

#[derive(Parser)]
#[command(name = "ntps", version, about = "Next-token perception score: streaming statistics, scoring and theorem checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolingArg {
    Mean,
    Sum,
}

impl From<PoolingArg> for Pooling {
    fn from(p: PoolingArg) -> Self {
        match p {
            PoolingArg::Mean => Pooling::Mean,
            PoolingArg::Sum => Pooling::Sum,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Accumulate activation files of one layer into a stats file.
    Accumulate {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score one stats file.
    Score {
        stats: PathBuf,
        #[arg(long = "k-prop")]
        k_prop: f64,
        #[arg(long, value_enum, default_value = "mean")]
        pooling: PoolingArg,
    },
    /// Score every layer of every dataset over a rank-proportion grid.
    Sweep {
        dir: PathBuf,
        #[arg(long, default_value = "0.05:0.95:0.05")]
        grid: String,
        /// dataset / metric_name / value table correlated against the scores.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Metric to use when the table holds several.
        #[arg(long)]
        metric: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the theorem checks on planted synthetic corpora and emit a JSON report.
    Validate {
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Planted-overlap grid.
        #[arg(long, default_value = "0:1:0.25")]
        grid: String,
        #[arg(long, value_delimiter = ',', default_value = "8,16,32")]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long = "k-true", default_value_t = 2)]
        k_true: usize,
        #[arg(long, default_value_t = 600)]
        n: usize,
        #[arg(long = "margin-trials", default_value_t = 1000)]
        margin_trials: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank datasets by expected fine-tuning gain (ascending score).
    PredictGain {
        ntps: PathBuf,
        #[arg(long)]
        observed: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a planted synthetic corpus as activation files.
    Synth {
        #[arg(long, default_value_t = 16)]
        d: usize,
        #[arg(long, default_value_t = 3)]
        c: usize,
        #[arg(long = "k-true", default_value_t = 2)]
        k_true: usize,
        #[arg(long, default_value_t = 0.5)]
        overlap: f64,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long = "min-len", default_value_t = 3)]
        min_len: usize,
        #[arg(long = "max-len", default_value_t = 6)]
        max_len: usize,
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Draw every sentence independently instead of in reflected pairs.
        #[arg(long = "no-mirror")]
        no_mirror: bool,
        #[arg(long, default_value_t = 0)]
        layer: u32,
        #[arg(long, default_value_t = 1)]
        shards: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn sink(out: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Accumulate { inputs, out } => {
            let stats = commands::cmd_accumulate(&inputs, &out, &commands::thread_pool()?)?;
            eprintln!("accumulated {} sentences into {}", stats.n(), out.display());
        }
        Command::Score { stats, k_prop, pooling } => {
            commands::cmd_score(&stats, k_prop, pooling.into(), &mut sink(None)?)?;
        }
        Command::Sweep { dir, grid, metrics, metric, out } => {
            let grid = commands::proportion_grid(&grid)?;
            let metrics = metrics.map(|p| commands::load_metric(&p, metric.as_deref(), None)).transpose()?;
            let pool = commands::thread_pool()?;
            let result = commands::cmd_sweep(&dir, &grid, metrics.as_ref(), &pool, &mut sink(out.as_deref())?)?;
            if let Some(best) = result.best_config {
                eprintln!(
                    "best layer {} k_prop {} spearman_r {}",
                    best.layer,
                    best.k_prop,
                    best.spearman_r.map_or("NA".to_string(), |r| r.to_string())
                );
            }
        }
        Command::Validate { seeds, grid, dims, classes, k_true, n, margin_trials, out } => {
            let args = ValidateArgs {
                seeds,
                overlaps: commands::value_grid(&grid)?,
                dims,
                classes,
                k_true,
                n,
                options: SuiteOptions { margin_trials, ..SuiteOptions::default() },
            };
            let pool = commands::thread_pool()?;
            commands::cmd_validate(&args, &pool, &mut sink(out.as_deref())?)?;
        }
        Command::PredictGain { ntps, observed, out } => {
            commands::cmd_predict_gain(&ntps, observed.as_deref(), &mut sink(out.as_deref())?)?;
        }
        Command::Synth { d, c, k_true, overlap, n, min_len, max_len, sigma, seed, no_mirror, layer, shards, out } => {
            let config = SynthConfig {
                d,
                c,
                k_true,
                overlap,
                n,
                len_range: (min_len, max_len),
                noise_sigma: sigma,
                seed,
                mirror: !no_mirror,
            };
            for p in commands::cmd_synth(&config, layer, &out, shards)? {
                eprintln!("wrote {}", p.display());
            }
        }
    }
    Ok(())
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
        Err(e) => {
            eprintln!("ntps: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
