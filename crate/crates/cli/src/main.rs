use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod failure;
mod grid;

use failure::Failure;

/// Hessian block structure experiments for softmax classifiers.
#[derive(Debug, Parser)]
#[command(name = "hlab", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Root seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory receiving outputs and the run manifest.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Model {
    Linear,
    Mlp,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Loss {
    Ce,
    Mse,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Labels {
    Uniform,
    Blocked,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BlockKind {
    Ww,
    Vv,
    Wv,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Measure {
    /// Half the weights zero, half one.
    Mask,
    /// All weights one.
    Point,
    /// Sampled softmax weights `p(1-p)`.
    Softmax,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DecoupleKind {
    Ii,
    Ij,
    Lindeberg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Policy {
    Shared,
    Fresh,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OracleKind {
    Constants,
    Lognormal,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a dataset (HMAT inputs plus a label CSV).
    GenData(GenData),
    /// Compute one Hessian block or the full Hessian with a heatmap.
    Hessian(HessianArgs),
    /// Monte Carlo or closed-form estimate of a block-norm limit.
    Limits(LimitsArgs),
    /// Output-layer constants by quadrature, optionally cross-checked.
    Constants(ConstantsArgs),
    /// Off-diagonal decay sweep with a log-log slope fit.
    Decay(DecayArgs),
    /// Per-trial block norms across class counts.
    Concentration(ConcentrationArgs),
    /// Eigenvalues of an HMAT matrix, or the generalized MP Stieltjes transform.
    Spectrum(SpectrumArgs),
    /// Spectral distance between a weighted Gram matrix and its decoupled surrogate.
    DecoupleCheck(DecoupleArgs),
    /// Train an mlp with Adam and trace Hessian structure.
    Train(TrainArgs),
    /// Independent Monte Carlo checks of quadrature and limit laws.
    McOracle(OracleArgs),
}

#[derive(Debug, Args)]
struct GenData {
    #[arg(long)]
    d: usize,
    #[arg(long = "N")]
    n: usize,
    #[arg(long = "C")]
    classes: usize,
    #[arg(long, value_enum, default_value_t = Labels::Uniform)]
    labels: Labels,
    /// Draw clustered data with this many cluster centers instead of pure Gaussian inputs.
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
}

#[derive(Debug, Args)]
struct HessianArgs {
    #[arg(long, value_enum, default_value_t = Model::Mlp)]
    model: Model,
    #[arg(long, value_enum, default_value_t = Loss::Ce)]
    loss: Loss,
    #[arg(long)]
    d: usize,
    #[arg(long, default_value_t = 8)]
    m: usize,
    #[arg(long = "C")]
    classes: usize,
    #[arg(long = "N")]
    n: usize,
    #[arg(long, value_enum, default_value_t = Labels::Uniform)]
    labels: Labels,
    /// Assemble the full Hessian (otherwise a single block is written).
    #[arg(long)]
    full: bool,
    #[arg(long, value_enum, default_value_t = BlockKind::Vv)]
    block: BlockKind,
    #[arg(long, default_value_t = 0)]
    i: usize,
    #[arg(long, default_value_t = 0)]
    j: usize,
    /// Keep only the leading term of the wv block.
    #[arg(long)]
    leading_only: bool,
    #[arg(long, default_value_t = hlab::hessian::DEFAULT_SIDE_CAP)]
    side_cap: usize,
    /// Also write an 8-bit PGM preview of the heatmap.
    #[arg(long)]
    pgm: bool,
}

#[derive(Debug, Args)]
struct LimitsArgs {
    /// One of g_ii, g_ij, u_ii, u_ij, h_ii, h_ij, q_ii, q_ij.
    #[arg(long)]
    target: String,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long = "C")]
    classes: usize,
    #[arg(long, default_value_t = 8)]
    m: usize,
    #[arg(long, default_value_t = hlab::limits::DEFAULT_SAMPLES)]
    samples: u64,
}

#[derive(Debug, Args)]
struct ConstantsArgs {
    #[arg(long)]
    m: usize,
    /// Monte Carlo samples for the independent check (0 skips it).
    #[arg(long, default_value_t = 200_000)]
    mc_samples: u64,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    case: String,
    #[arg(long, default_value_t = 300)]
    d: usize,
    #[arg(long = "N", default_value_t = 300)]
    n: usize,
    #[arg(long, default_value_t = 8)]
    m: usize,
    #[arg(long, default_value_t = 20)]
    trials: usize,
}

#[derive(Debug, Args)]
struct DecayArgs {
    #[command(flatten)]
    sweep: SweepArgs,
    #[arg(long, default_value = "8:512:x2")]
    grid: String,
}

#[derive(Debug, Args)]
struct ConcentrationArgs {
    #[command(flatten)]
    sweep: SweepArgs,
    /// Class counts, same grammar as the decay grid.
    #[arg(long = "C", default_value = "4,16,64")]
    classes: String,
}

#[derive(Debug, Args)]
struct SpectrumArgs {
    /// Symmetric matrix to diagonalize; without it the fixed-point solver runs.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Measure::Mask)]
    measure: Measure,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long = "C", default_value_t = 8)]
    classes: usize,
    /// Draws used to represent a sampled measure.
    #[arg(long, default_value_t = 100_000)]
    measure_samples: usize,
    #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
    re_min: f64,
    #[arg(long, default_value_t = 5.0)]
    re_max: f64,
    #[arg(long, default_value_t = 61)]
    points: usize,
    /// Imaginary part of every evaluation point.
    #[arg(long, default_value_t = 0.05)]
    eta: f64,
}

#[derive(Debug, Args)]
struct DecoupleArgs {
    #[arg(long, value_enum, default_value_t = DecoupleKind::Ii)]
    kind: DecoupleKind,
    #[arg(long, default_value_t = 400)]
    d: usize,
    #[arg(long = "N", default_value_t = 400)]
    n: usize,
    #[arg(long = "C", default_value_t = 2)]
    classes: usize,
    #[arg(long, value_enum, default_value_t = Policy::Shared)]
    policy: Policy,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 64)]
    d: usize,
    #[arg(long, default_value_t = 8)]
    m: usize,
    #[arg(long = "C", default_value_t = 32)]
    classes: usize,
    #[arg(long = "N", default_value_t = 320)]
    n: usize,
    #[arg(long, value_enum, default_value_t = Loss::Ce)]
    loss: Loss,
    #[arg(long, value_enum, default_value_t = Labels::Blocked)]
    labels: Labels,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
}

#[derive(Debug, Args)]
struct OracleArgs {
    #[arg(long, value_enum, default_value_t = OracleKind::Constants)]
    kind: OracleKind,
    #[arg(long, default_value_t = 8)]
    m: usize,
    #[arg(long = "C", default_value_t = 4096)]
    classes: usize,
    #[arg(long, default_value_t = 1_000_000)]
    samples: u64,
}

fn init_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("HLAB_THREADS") else {
        return Ok(());
    };
    let threads = raw
        .parse::<usize>()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| Failure::Validation(format!("HLAB_THREADS = '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::Validation(e.to_string()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match init_threads().and_then(|()| commands::run(&cli.common, &cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hlab: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
