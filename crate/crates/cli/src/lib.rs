//! Command-line front end for the `discrepancy` crate.
//!
//! [`run`] is the whole program minus process plumbing, so tests can drive
//! it in-process with captured streams.

use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
pub mod error;
pub mod features;
pub mod kernel_arg;

pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "discrepancy", version, about = "Kernel two-sample distances and evaluation-metric tools")]
pub struct Cli {
    /// Seed for every randomized step; required by randomized subcommands.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads. Results do not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Json)]
    pub output: OutputFormat,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Json,
    /// Table form of bias-demo reports.
    Csv,
}

#[derive(Debug, Args)]
pub struct PairArgs {
    /// First sample (`.fmat` binary or headerless CSV).
    #[arg(long)]
    pub x: PathBuf,
    /// Second sample.
    #[arg(long)]
    pub y: PathBuf,
}

#[derive(Debug, Args)]
pub struct KernelFlags {
    /// rbf[:s,..] | rq[:a,..] | dot | rq-dot[:a,..] | dist[:beta=B] | poly[:deg=D,gamma=G,coef=C]
    #[arg(long)]
    pub kernel: Option<String>,
    /// Shortcut for an RBF mixture with these bandwidths.
    #[arg(long, value_delimiter = ',')]
    pub sigmas: Option<Vec<f64>>,
    /// Shortcut for a rational-quadratic mixture with these shapes.
    #[arg(long, value_delimiter = ',')]
    pub alphas: Option<Vec<f64>>,
    /// Shortcut for the distance-induced kernel with this exponent.
    #[arg(long)]
    pub beta: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VarianceArg {
    Complete,
    Projection,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Squared MMD between two samples.
    Mmd {
        #[command(flatten)]
        pair: PairArgs,
        #[command(flatten)]
        kernel: KernelFlags,
        /// V-statistic instead of the unbiased U-statistic.
        #[arg(long, conflicts_with = "block")]
        biased: bool,
        /// Average the unbiased estimate over random blocks of this size.
        #[arg(long)]
        block: Option<usize>,
        /// Block repetitions (with --block).
        #[arg(long, requires = "block")]
        reps: Option<usize>,
    },
    /// Kernel Inception Distance (block-averaged, cubic polynomial kernel).
    Kid {
        #[command(flatten)]
        pair: PairArgs,
        /// Block size; 0 means min(m, n).
        #[arg(long)]
        block: Option<usize>,
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Fréchet distance between Gaussian fits of two samples.
    Fid {
        #[command(flatten)]
        pair: PairArgs,
    },
    /// Inception score of a matrix of class probabilities.
    InceptionScore {
        #[arg(long)]
        probs: PathBuf,
    },
    /// Is the candidate closer to the reference than the baseline?
    RelativeTest {
        #[arg(long)]
        candidate: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[command(flatten)]
        kernel: KernelFlags,
        #[arg(long, value_enum, default_value_t = VarianceArg::Complete)]
        variance: VarianceArg,
    },
    /// Learning-rate controller driven by p-values, one per line.
    LrAdapt {
        /// File of p-values; standard input when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        lr: f64,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, default_value_t = 3)]
        patience: u32,
        #[arg(long, default_value_t = 0.5)]
        decay: f64,
        #[arg(long, default_value_t = 0.0)]
        min_lr: f64,
        /// Emit one JSON line per p-value as it arrives.
        #[arg(long)]
        stream: bool,
    },
    /// Monte-Carlo estimator-bias experiments.
    BiasDemo {
        #[command(subcommand)]
        experiment: Experiment,
    },
    /// Finite-difference check of MMD loss gradients through a random MLP.
    Gradcheck {
        /// Critic layer widths, input first.
        #[arg(long, value_delimiter = ',', default_value = "8,16,4")]
        widths: Vec<usize>,
        /// Generator layer widths; its output width must match the critic input.
        #[arg(long, value_delimiter = ',')]
        generator: Option<Vec<usize>>,
        #[command(flatten)]
        kernel: KernelFlags,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Data rows.
        #[arg(long, default_value_t = 8)]
        m: usize,
        /// Noise rows.
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 20)]
        max_retries: u32,
    },
    /// Convert feature files between CSV and binary.
    Convert {
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        to: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum Experiment {
    /// Expected Wasserstein estimate under data splitting.
    Wasserstein {
        #[arg(long, default_value_t = 100_000)]
        reps: usize,
    },
    /// Test-set MMD of a witness direction tuned on training data.
    MaxMmd {
        #[arg(long, default_value_t = 2)]
        m_tr: usize,
        #[arg(long, default_value_t = 2)]
        n_tr: usize,
        #[arg(long, default_value_t = 100_000)]
        reps: usize,
    },
    /// KID or FID against sample size.
    ScoreCurves {
        #[arg(long, value_enum, default_value_t = MetricArg::Kid)]
        metric: MetricArg,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, value_enum, default_value_t = PairArg::Same)]
        pair: PairArg,
        /// Mean shift of the second distribution along the first axis (with --pair shifted).
        #[arg(long, default_value_t = 1.0)]
        offset: f64,
        #[arg(long, value_delimiter = ',', default_value = "10,100,1000")]
        n_list: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        reps: usize,
    },
    /// One-dimensional FID ordering reversal.
    #[command(name = "fid-reversal-1d")]
    FidReversal1d {
        #[arg(long, default_value_t = 10)]
        m: usize,
        #[arg(long, default_value_t = 100_000)]
        reps: usize,
    },
    /// FID ordering reversal after a ReLU feature map.
    FidReversalRelu {
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, value_delimiter = ',', default_value = "5,10,50")]
        m_list: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[arg(long, default_value_t = 100_000)]
        mc_samples: usize,
        #[arg(long, default_value_t = 5)]
        batches: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Kid,
    Fid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PairArg {
    Same,
    Shifted,
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code: 0 success, 1 input or usage error, 2 numerical
/// failure.
pub fn run<I, S>(args: I, stdin: &mut dyn BufRead, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{e}");
                    0
                }
                _ => {
                    let _ = write!(stderr, "{e}");
                    1
                }
            };
        }
    };
    let started = Instant::now();
    let name = commands::name(&cli.command);
    match commands::execute(&cli, stdin, stdout) {
        Ok(()) => {
            log::info!("{name} finished in {:.3} s", started.elapsed().as_secs_f64());
            let _ = stdout.flush();
            0
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}

/// [`run`] with in-memory streams: returns (exit code, stdout, stderr).
pub fn run_captured<I, S>(args: I, stdin: &str) -> (i32, String, String)
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let mut input = std::io::Cursor::new(stdin.as_bytes().to_vec());
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run(args, &mut input, &mut out, &mut err);
    (
        code,
        String::from_utf8_lossy(&out).into_owned(),
        String::from_utf8_lossy(&err).into_owned(),
    )
}
