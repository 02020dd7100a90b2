mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};

use config::{parse_size, UsageError};

/// Multi-patch hierarchical deblurring: data, training, inference, evaluation, benchmarks.
#[derive(Parser, Debug)]
#[command(name = "dmphn", version)]
struct Cli {
    /// Worker threads for kernels and data loading (default: all cores; bench defaults to 1).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// JSON file of defaults; keys mirror the long flags (e.g. "pattern", "max-steps").
    /// Flags override the file, the file overrides built-in defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on a generated (or any blur/sharp) dataset.
    Train(TrainArgs),
    /// Deblur one image or every image in a directory.
    Infer(InferArgs),
    /// Print per-image and mean PSNR/SSIM of a checkpoint on a split, as CSV.
    Eval(EvalArgs),
    /// Print parameter counts, sizes and analytic FLOPs per level.
    Inspect(InspectArgs),
    /// Time whole-image inference and print a CSV row.
    Bench(BenchArgs),
    /// Write a synthetic blurry/sharp dataset.
    GenData(GenDataArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct ModelArgs {
    /// Network family [default: dmphn].
    #[arg(long, value_parser = ["dmphn", "stack-dmphn", "vmphn", "stack-vmphn", "dmsn"])]
    pub model: Option<String>,
    /// Patches per level, e.g. 1-2-4-8; neighbouring counts differ by 1x, 2x or 4x [default: 1-2-4].
    #[arg(long)]
    pub pattern: Option<String>,
    /// Stacked units, stack-dmphn and stack-vmphn only [default: 2].
    #[arg(long)]
    pub stack: Option<usize>,
    /// Input scales, dmsn only [default: 3].
    #[arg(long)]
    pub scales: Option<usize>,
    /// Share one encoder-decoder pair across all levels.
    #[arg(long)]
    pub weight_sharing: bool,
    /// Channel widths: full (32/64/128) or desk (8/16/32) [default: desk for the desk
    /// training profile, full otherwise].
    #[arg(long, value_parser = ["full", "desk"])]
    pub width: Option<String>,
    /// Axis cut by the first two-way split [default: height].
    #[arg(long, value_parser = ["height", "width"])]
    pub split_axis: Option<String>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    /// Dataset root containing train/blur and train/sharp.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    /// desk: batch 4, crop 64, lr 1e-3, 30 epochs, desk widths.
    /// paper: batch 6, crop 256, lr 1e-4, 3000 epochs, full widths (not desk-runnable).
    #[arg(long, value_parser = ["desk", "paper"])]
    pub profile: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Square training crop side.
    #[arg(long)]
    pub crop: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Learning-rate factor applied every third of the epochs.
    #[arg(long)]
    pub decay: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Also checkpoint every this many steps.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Parameter precision.
    #[arg(long, value_parser = ["f32", "f64"])]
    pub dtype: Option<String>,
    /// Checkpoint path; the loss log goes next to it as <name>.loss.csv [default: model.ckpt].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from a checkpoint written by train; model flags are then ignored.
    #[arg(long, value_name = "CKPT")]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// An image (PNG or PPM) or a directory of them.
    #[arg(long = "in", value_name = "IMG|DIR")]
    pub input: PathBuf,
    /// Output directory for deblurred PNGs.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write each level's residual map as <name>.level<i>.png.
    #[arg(long)]
    pub levels: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset root.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test", value_parser = ["train", "test"])]
    pub split: String,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Image size for the FLOP count.
    #[arg(long, default_value = "720x1280", value_parser = parse_size)]
    pub size: (usize, usize),
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Image size; must be valid for the pattern.
    #[arg(long, default_value = "720x1280", value_parser = parse_size)]
    pub size: (usize, usize),
    /// Timed iterations.
    #[arg(long, default_value_t = 5)]
    pub iters: usize,
    /// Untimed iterations first.
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    /// Omit the CSV header line, e.g. when appending to a file.
    #[arg(long)]
    pub no_header: bool,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 128)]
    pub count: usize,
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    pub size: (usize, usize),
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fewest averaged frames per blurry image.
    #[arg(long, default_value_t = 7)]
    pub frames_min: usize,
    /// Most averaged frames per blurry image.
    #[arg(long, default_value_t = 13)]
    pub frames_max: usize,
    /// Largest camera step between frames, in pixels.
    #[arg(long, default_value_t = 2.0)]
    pub d_max: f64,
    /// Share of pairs in the test split.
    #[arg(long, default_value_t = 0.25)]
    pub test_fraction: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let threads = cli
        .threads
        .or(matches!(cli.command, Command::Bench(_)).then_some(1));
    if let Some(n) = threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let name = subcommand_name(&cli.command);
    match commands::run(cli.command, cli.config.as_deref()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            let mut cmd = Cli::command();
            cmd.build();
            if let Some(sub) = cmd.find_subcommand_mut(name) {
                eprintln!("\n{}", sub.render_usage());
            }
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn subcommand_name(c: &Command) -> &'static str {
    match c {
        Command::Train(_) => "train",
        Command::Infer(_) => "infer",
        Command::Eval(_) => "eval",
        Command::Inspect(_) => "inspect",
        Command::Bench(_) => "bench",
        Command::GenData(_) => "gen-data",
    }
}
