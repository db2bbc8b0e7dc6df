//! `ncseg`: scribble-seeded segmentation with a normalized cut regularizer.
//!
//! Exit codes: 0 success, 1 a checked property failed, 2 usage or input error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ncut_core::{DescentConfig, Init, KernelMode, KernelSpec, LossConfig};

#[derive(Parser, Debug)]
#[command(
    name = "ncseg",
    version,
    about = "Normalized-cut regularized segmentation"
)]
struct Cli {
    /// Seed for every random choice (noise init, Lloyd init, synthetic data).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads for filtering; 0 uses all cores. Output is bit-identical
    /// across runs only with a single thread.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Segment an image from scribbles with partial cross-entropy plus regularizers.
    Segment(SegmentArgs),
    /// Unsupervised clustering by descent on K-means or normalized cut alone.
    Cluster(ClusterArgs),
    /// Report every energy of a given segmentation, plus accuracy against truth.
    Evaluate(EvaluateArgs),
    /// Run the gradient, identity and lattice oracle suite.
    Verify(VerifyArgs),
    /// Time lattice construction and filtering across image sizes.
    Bench(BenchArgs),
    /// Write a synthetic two-region image with scribbles and ground truth.
    Synth(SynthArgs),
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelChoice {
    /// Exact dense kernel; at most 4096 pixels.
    Exact,
    /// Permutohedral lattice approximation.
    Lattice,
}

impl From<KernelChoice> for KernelMode {
    fn from(k: KernelChoice) -> Self {
        match k {
            KernelChoice::Exact => KernelMode::Exact,
            KernelChoice::Lattice => KernelMode::Lattice,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

#[derive(Args, Debug, Clone)]
pub struct KernelArgs {
    #[arg(long, value_enum, default_value_t = KernelChoice::Lattice)]
    kernel: KernelChoice,
    #[arg(long, default_value_t = 15.0)]
    sigma_rgb: f64,
    #[arg(long, default_value_t = 100.0)]
    sigma_xy: f64,
    #[arg(long, value_enum, default_value_t = Precision::Double)]
    precision: Precision,
}

impl KernelArgs {
    pub fn spec(&self) -> anyhow::Result<KernelSpec> {
        Ok(KernelSpec::new(self.sigma_rgb, self.sigma_xy)?)
    }
}

#[derive(Args, Debug, Clone)]
pub struct WeightArgs {
    #[arg(long, default_value_t = 1.6)]
    lambda_nc: f64,
    #[arg(long, default_value_t = 0.0)]
    lambda_potts: f64,
    #[arg(long, default_value_t = 0.0)]
    lambda_kmeans: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda_nel: f64,
    /// Drop the partial cross-entropy term.
    #[arg(long)]
    no_pce: bool,
}

impl WeightArgs {
    pub fn config(&self) -> LossConfig {
        LossConfig {
            pce: !self.no_pce,
            lambda_nc: self.lambda_nc,
            lambda_potts: self.lambda_potts,
            lambda_kmeans: self.lambda_kmeans,
            lambda_nel: self.lambda_nel,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct DescentArgs {
    #[arg(long, default_value_t = 0.1)]
    step_size: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 1000)]
    max_iters: usize,
    /// Iterations with the normalized cut weight at zero before enabling it.
    #[arg(long, default_value_t = 100)]
    warmup_iters: usize,
    /// Relative energy change over 10 iterations below which descent stops.
    #[arg(long, default_value_t = 1e-4)]
    stop_tol: f64,
    #[arg(long, default_value_t = 1)]
    trace_every: usize,
    /// Let seed rows move freely instead of pinning them to their labels.
    #[arg(long)]
    no_clamp: bool,
    /// Step along the raw gradient instead of the max-norm normalized one.
    #[arg(long)]
    raw_gradient: bool,
    /// Start from uniform noise of this amplitude on the logits (uses --seed).
    #[arg(long)]
    init_noise: Option<f64>,
}

impl DescentArgs {
    pub fn config(&self, seed: u64, default_noise: Option<f64>) -> DescentConfig {
        let init = match self.init_noise.or(default_noise) {
            Some(scale) => Init::Noise { scale, seed },
            None => Init::Zeros,
        };
        DescentConfig {
            step_size: self.step_size,
            momentum: self.momentum,
            max_iters: self.max_iters,
            clamp_seeds: !self.no_clamp,
            trace_every: self.trace_every,
            stop_tol: self.stop_tol,
            warmup_iters: self.warmup_iters,
            normalize_gradient: !self.raw_gradient,
            init,
        }
    }
}

#[derive(Args, Debug)]
pub struct SegmentArgs {
    #[arg(long)]
    image: PathBuf,
    /// Gray PNG: 255 unlabeled, otherwise the class index.
    #[arg(long)]
    scribbles: PathBuf,
    #[arg(long)]
    classes: usize,
    /// Label map PNG (class index per pixel).
    #[arg(long)]
    out: PathBuf,
    /// Soft segmentation dump (SSEG).
    #[arg(long)]
    soft_out: Option<PathBuf>,
    /// Energy trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Scaled RGBXY feature CSV.
    #[arg(long)]
    features_out: Option<PathBuf>,
    /// Ground-truth label PNG; adds pixel accuracy to the report.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[command(flatten)]
    kernel: KernelArgs,
    #[command(flatten)]
    weights: WeightArgs,
    #[command(flatten)]
    descent: DescentArgs,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterLoss {
    Kmeans,
    Ncut,
}

#[derive(Args, Debug)]
pub struct ClusterArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long, value_enum)]
    loss: ClusterLoss,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    soft_out: Option<PathBuf>,
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value_t = 300)]
    lloyd_iters: usize,
    #[command(flatten)]
    kernel: KernelArgs,
    #[command(flatten)]
    descent: DescentArgs,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    classes: usize,
    /// Label map PNG to evaluate.
    #[arg(long, conflicts_with = "soft", required_unless_present = "soft")]
    labels: Option<PathBuf>,
    /// Soft segmentation dump (SSEG) to evaluate.
    #[arg(long)]
    soft: Option<PathBuf>,
    #[arg(long)]
    scribbles: Option<PathBuf>,
    #[arg(long)]
    truth: Option<PathBuf>,
    #[command(flatten)]
    kernel: KernelArgs,
    #[command(flatten)]
    weights: WeightArgs,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Random instances per gradient check.
    #[arg(long, default_value_t = 50)]
    instances: usize,
    /// Debug: perturb the analytic cut gradient to exercise the failure path.
    #[arg(long)]
    corrupt_gradient: bool,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Image side lengths; N is the square of each.
    #[arg(long, value_delimiter = ',', default_value = "64,128,256")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// Largest allowed time growth per fourfold increase in N.
    #[arg(long, default_value_t = 6.0)]
    max_ratio: f64,
    #[arg(long, default_value_t = 15.0)]
    sigma_rgb: f64,
    #[arg(long, default_value_t = 100.0)]
    sigma_xy: f64,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 64)]
    side: usize,
    /// Minimum RGB distance between the two region colors.
    #[arg(long, default_value_t = 60.0)]
    gap: f64,
    #[arg(long, default_value_t = 5.0)]
    noise: f64,
    #[arg(long, default_value_t = 10)]
    scribble_len: usize,
}

/// What a subcommand reports back to `main`.
pub enum Outcome {
    Ok,
    PropertyFailed,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
    {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let seed = cli.seed;
    let result = match cli.command {
        Command::Segment(a) => commands::segment(&a, seed),
        Command::Cluster(a) => commands::cluster(&a, seed),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Verify(a) => commands::verify(&a, seed),
        Command::Bench(a) => commands::bench(&a, seed),
        Command::Synth(a) => commands::synth(&a, seed),
    };
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::PropertyFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
