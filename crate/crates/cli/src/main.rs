mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use semadjust_core::config::ConfigFile;
use semadjust_core::data::Effect;
use semadjust_core::features::Profile;
use semadjust_core::model::Variant;

#[derive(Debug, Parser)]
#[command(name = "semadjust", version, about = "Semantics-aware photo adjustment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model; writes checkpoints, the loss log and the effective config to --out.
    Train(TrainArgs),
    /// Evaluate checkpoints on a dataset and write a per-effect report.
    Eval(EvalArgs),
    /// Adjust one image, optionally with a user-supplied adjustment map.
    Adjust(AdjustArgs),
    /// Write a synthetic benchmark with known presets.
    Synth(SynthArgs),
    /// Serve the HTTP inference API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Flat TOML config; flags override its keys. Relative paths inside it
    /// resolve against its directory.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Effect to train on when the dataset holds several.
    #[arg(long)]
    effect: Option<Effect>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    keys: ConfigFlags,
}

/// One flag per config key.
#[derive(Debug, Args, Default)]
struct ConfigFlags {
    /// Dataset root with input/ and target/<effect>/.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Scene-parsing dataset for multi-task variants (defaults to the training
    /// set when it has parse/ labels).
    #[arg(long)]
    parse_data: Option<PathBuf>,
    #[arg(long, value_parser = parse_profile)]
    profile: Option<Profile>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    backbone_lr_multiplier: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    pixels_per_image: Option<usize>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of presets.
    #[arg(long = "k", id = "K")]
    k: Option<usize>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    parse_classes: Option<usize>,
    #[arg(long)]
    first_layer_channels: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    block_channels: Option<Vec<usize>>,
    #[arg(long)]
    rnn_hidden: Option<usize>,
    #[arg(long)]
    rnn_channels: Option<usize>,
    #[arg(long)]
    context_dim: Option<usize>,
    #[arg(long)]
    pretrained: Option<bool>,
    #[arg(long)]
    pretrained_path: Option<PathBuf>,
    #[arg(long)]
    canvas: Option<usize>,
    #[arg(long)]
    validation_fraction: Option<f64>,
    #[arg(long)]
    validate_every: Option<usize>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
}

impl From<ConfigFlags> for ConfigFile {
    fn from(f: ConfigFlags) -> Self {
        ConfigFile {
            profile: f.profile,
            learning_rate: f.learning_rate,
            batch_size: f.batch_size,
            backbone_lr_multiplier: f.backbone_lr_multiplier,
            epochs: f.epochs,
            max_steps: f.max_steps,
            pixels_per_image: f.pixels_per_image,
            variant: f.variant,
            seed: f.seed,
            k: f.k,
            rank: f.rank,
            alpha: f.alpha,
            delta: f.delta,
            lambda: f.lambda,
            parse_classes: f.parse_classes,
            first_layer_channels: f.first_layer_channels,
            block_channels: f.block_channels,
            rnn_hidden: f.rnn_hidden,
            rnn_channels: f.rnn_channels,
            context_dim: f.context_dim,
            pretrained: f.pretrained,
            pretrained_path: f.pretrained_path,
            canvas: f.canvas,
            validation_fraction: f.validation_fraction,
            validate_every: f.validate_every,
            grad_clip: f.grad_clip,
            beta1: f.beta1,
            beta2: f.beta2,
            epsilon: f.epsilon,
            data: f.data,
            parse_data: f.parse_data,
        }
    }
}

fn parse_profile(s: &str) -> Result<Profile, String> {
    match s.to_ascii_lowercase().as_str() {
        "full" => Ok(Profile::Full),
        "toy" => Ok(Profile::Toy),
        _ => Err(format!("unknown profile {s:?} (expected full or toy)")),
    }
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint to evaluate; repeat to compare variants in one table.
    #[arg(long = "ckpt", required = true)]
    ckpts: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// CSV report path.
    #[arg(long)]
    report: PathBuf,
    /// Also write the aligned text table here.
    #[arg(long)]
    text: Option<PathBuf>,
    #[arg(long)]
    effect: Option<Effect>,
}

#[derive(Debug, Args)]
struct AdjustArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    /// User adjustment map: indexed PNG, or run-length JSON (`.json`).
    #[arg(long)]
    map: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Sidecar path for the map actually used; defaults to `<out stem>.map.png`
    /// next to --out, with a `.map.json` run-length twin.
    #[arg(long)]
    map_out: Option<PathBuf>,
    /// Blend presets by posterior instead of picking the most likely one.
    #[arg(long)]
    soft: bool,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// TOML generator spec; defaults to two presets at 64x64.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of near-boundary pixels whose target uses another preset.
    #[arg(long)]
    corruption: Option<f64>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    address: String,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value_t = semadjust_service::DEFAULT_MAX_EDGE)]
    max_edge: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Adjust(a) => commands::adjust(a),
        Command::Synth(a) => commands::synth(a),
        Command::Serve(a) => commands::serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
