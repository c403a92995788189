//! `sherrylab` command-line entry point.
//!
//! Module errors print `{"error": kind, "message": text}` on stderr and exit
//! with status 1. Usage errors exit with status 2.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "sherrylab", version, about = "Zero-shot sketch-based image retrieval toolkit")]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `train.loss.tau_align=0.1`. Repeatable.
    #[arg(long = "set", value_name = "K=V", global = true)]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed for the command's random choices.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a split manifest from a dataset layout, or generate the toy benchmark.
    Prepare(PrepareArgs),
    /// Embed class names into a text bank.
    EmbedText(EmbedArgs),
    /// Train a student and write a checkpoint.
    Train(TrainArgs),
    /// Sketch-to-photo retrieval metrics.
    Eval(EvalArgs),
    /// Sketch-to-sketch retrieval metrics.
    Sbsr(SbsrArgs),
    /// Rank the gallery for one query image.
    Retrieve(RetrieveArgs),
    /// Figures and their numeric data.
    Plot(PlotArgs),
    /// Extract a feature index from manifest samples.
    Extract(ExtractArgs),
    /// Start the HTTP retrieval service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Generate the synthetic toy benchmark.
    #[arg(long, conflicts_with_all = ["template", "root"])]
    pub toy: bool,
    /// Built-in template name or a template JSON file.
    #[arg(long, requires = "root")]
    pub template: Option<String>,
    /// Dataset root with `sketch/<class>/` and `photo/<class>/` folders.
    #[arg(long)]
    pub root: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub num_seen: usize,
    #[arg(long, default_value_t = 4)]
    pub num_unseen: usize,
    #[arg(long, default_value_t = 20)]
    pub per_class: usize,
    #[arg(long, default_value_t = 16)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 0.5)]
    pub domain_offset: f64,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Write toy samples as `HxW` RGB PNG files; needs feature_dim = H*W*3.
    #[arg(long, value_name = "HxW")]
    pub images: Option<String>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    /// `stub` or `import`.
    #[arg(long)]
    pub provider: Option<String>,
    /// Text encoder name, e.g. RN50 or ViT-B/16.
    #[arg(long)]
    pub encoder: Option<String>,
    /// Embedding file for the import provider.
    #[arg(long = "import")]
    pub import_path: Option<PathBuf>,
    /// Prompt template containing `[class]`. Repeatable; several are averaged.
    #[arg(long = "template")]
    pub templates: Vec<String>,
    /// A_CLASS, A_PHOTO_OF_CLASS or ENSEMBLE; defaults to the configured mode.
    #[arg(long)]
    pub prompt_mode: Option<String>,
    /// Take class names from this manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Comma-separated class names.
    #[arg(long, value_delimiter = ',')]
    pub classes: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub bank: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, requires = "manifest", conflicts_with_all = ["queries", "gallery"])]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Query feature index, evaluated against `--gallery`.
    #[arg(long, requires = "gallery")]
    pub queries: Option<PathBuf>,
    #[arg(long, requires = "queries")]
    pub gallery: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SbsrArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Gallery feature index.
    #[arg(long)]
    pub gallery: PathBuf,
    /// Query image (PNG or JPEG).
    #[arg(long)]
    pub query: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlotKind {
    Tsne,
    Heatmap,
    Scaling,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    pub kind: PlotKind,
    /// Trained checkpoint (t-SNE and heatmap).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Text bank (heatmap and scaling).
    #[arg(long)]
    pub bank: Option<PathBuf>,
    /// Number of unseen classes to draw.
    #[arg(long)]
    pub num_classes: Option<usize>,
    /// Samples per class and domain.
    #[arg(long)]
    pub per_class: Option<usize>,
    /// Adapter counts for the scaling sweep; defaults to none, half and all.
    #[arg(long, value_delimiter = ',')]
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DomainArg {
    Sketch,
    Photo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = DomainArg::Photo)]
    pub domain: DomainArg,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub gallery: PathBuf,
    /// Manifest used to resolve thumbnails.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = if e.is_usage() { 2 } else { 1 };
            eprintln!("{}", serde_json::json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::from(code)
        }
    }
}
