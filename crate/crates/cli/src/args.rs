use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "sst", version, about = "CASSI simulation and spectral-spatial transformer reconstruction")]
pub struct Cli {
    /// Worker threads for parallel evaluation [default: available cores]
    #[arg(long, global = true, env = "SST_THREADS")]
    pub threads: Option<usize>,

    /// Flat `key=value` file supplying defaults for the subcommand's flags
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a coded measurement of a scene
    Simulate(SimulateArgs),
    /// Train a reconstructor
    Train(TrainArgs),
    /// Reconstruct a cube from a measurement
    Reconstruct(ReconstructArgs),
    /// Score a checkpoint on ground-truth scenes
    Eval(EvalArgs),
    /// Finite-difference checks of every backward rule and model block
    Gradcheck(GradcheckArgs),
    /// Scalar loop oracles for the optics, kernels and metrics
    OracleCheck(OracleArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SceneKindArg {
    GaussianBlobs,
    GradientRamps,
    CheckerSpectra,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Scene cube (HSC); a synthetic scene is generated when absent
    #[arg(long, conflicts_with = "synthetic")]
    pub scene: Option<PathBuf>,
    /// Kind of synthetic scene
    #[arg(long, value_enum)]
    pub synthetic: Option<SceneKindArg>,
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    #[arg(long, default_value_t = 8)]
    pub channels: usize,
    /// Spectral smoothness of synthetic scenes
    #[arg(long, default_value_t = 1.0)]
    pub smoothness: f64,
    /// Coded mask (HSC, one channel); generated from the seed when absent
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub mask_density: f64,
    /// Dispersion step in pixels per channel
    #[arg(long = "d", visible_alias = "step", default_value_t = 1)]
    pub d: usize,
    #[arg(long, default_value_t = 0.0)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write PNG previews of the scene
    #[arg(long)]
    pub png: bool,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// 32×32×8 desk-scale model
    Toy,
    /// 8×8×4 model used by the gradient checks
    Tiny,
    SstS,
    SstM,
    SstL,
    SstLplus,
    /// Toy defaults; set the geometry with the model flags
    Custom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ReductionArg {
    Mean,
    Sum,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value_t = Preset::Toy)]
    pub preset: Preset,
    /// Number of reversible stages
    #[arg(long)]
    pub stages: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    /// Dispersion step
    #[arg(long = "d", visible_alias = "step")]
    pub d: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    /// Attention window size
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// Blocks per encoder level
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long)]
    pub ffn_mult: Option<usize>,
    /// Reversible projection between the two halves of a single stage
    #[arg(long)]
    pub inner_reversible: Option<bool>,
    /// Train only the shift-back and unmixing front end
    #[arg(long)]
    pub unmix_only: bool,

    #[arg(long)]
    pub epochs: Option<usize>,
    /// Iterations per epoch [default: one pass over the training scenes]
    #[arg(long)]
    pub iters_per_epoch: Option<usize>,
    /// Scenes per step [default: 3 for desk presets, 1 otherwise]
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Epochs between learning-rate halvings
    #[arg(long, default_value_t = 50)]
    pub lr_period: usize,
    /// Weight of the measurement-consistency loss term
    #[arg(long, default_value_t = 0.2)]
    pub xi: f64,
    #[arg(long, value_enum, default_value_t = ReductionArg::Mean)]
    pub reduction: ReductionArg,
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long, default_value_t = 0.0)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Directory of training scenes (HSC); synthetic scenes when absent
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Scenes held out for validation, taken from the end of the list
    #[arg(long, default_value_t = 2)]
    pub val_scenes: usize,
    /// Number of synthetic scenes (training plus validation)
    #[arg(long, default_value_t = 8)]
    pub scenes: usize,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Start from these weights instead of a fresh initialisation
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub measurement: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    /// Ground truth to score the reconstruction against
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub no_png: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    /// Ground-truth scenes (HSC files or directories of them)
    #[arg(long, required = true, num_args = 1.., value_delimiter = ',')]
    pub truth: Vec<PathBuf>,
    /// Also write reconstructions and stage traces here
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    F64,
    F32,
    Both,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Override every tolerance
    #[arg(long, allow_negative_numbers = true)]
    pub tol: Option<f64>,
    #[arg(long, value_enum, default_value_t = PrecisionArg::Both)]
    pub precision: PrecisionArg,
    /// Random instances per primitive
    #[arg(long, default_value_t = 20)]
    pub primitive_seeds: usize,
    /// Skip the model block checks
    #[arg(long)]
    pub no_blocks: bool,
    /// Flip the sign of one op's backward rule
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Args, Debug)]
pub struct OracleArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, allow_negative_numbers = true)]
    pub tol: Option<f64>,
}
