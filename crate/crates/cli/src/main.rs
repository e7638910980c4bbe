mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use memefuse_core::Error;

#[derive(Parser, Debug)]
#[command(name = "memefuse", version, about = "Multimodal meme sentiment and affect classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one task model and write checkpoint, log and manifest.
    Train(TrainArgs),
    /// Print a metrics report for a labelled dataset.
    Evaluate(EvalArgs),
    /// Write per-meme head probabilities and labels as JSONL.
    Predict(PredictArgs),
    /// Run the tiny-config finite-difference suite.
    Gradcheck(GradcheckArgs),
    /// Write per-meme attention matrices and fusion weights as JSON.
    ExportAttention(ExportArgs),
    /// Convert a Memotion label CSV into dataset JSONL.
    ConvertDataset(ConvertArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON file with any of the resolved train settings; flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Checkpoint path; defaults to `<out>/model.ckpt`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// GloVe-format text file of pretrained word vectors.
    #[arg(long)]
    pub glove: Option<PathBuf>,
    /// Per-head class weights as JSON, e.g. `[[1,1.5,2]]`.
    #[arg(long = "class-weights")]
    pub class_weights: Option<String>,
    #[arg(long = "hops-unimodal")]
    pub hops_unimodal: Option<usize>,
    #[arg(long = "hops-segment")]
    pub hops_segment: Option<usize>,
    /// Gradient worker threads (0 = all cores); results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Labelled dataset; `--test` is accepted as an alias.
    #[arg(long, alias = "test")]
    pub data: PathBuf,
    #[arg(long)]
    pub glove: Option<PathBuf>,
    /// Directory for the report and manifest; stdout only when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, alias = "test")]
    pub data: PathBuf,
    #[arg(long)]
    pub glove: Option<PathBuf>,
    /// Output directory; predictions go to `<out>/predictions.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, alias = "test")]
    pub data: PathBuf,
    #[arg(long)]
    pub glove: Option<PathBuf>,
    /// Output directory; one `<id>.json` per meme.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ConvertArgs {
    #[arg(long)]
    pub csv: PathBuf,
    /// Output JSONL path.
    #[arg(long)]
    pub out: PathBuf,
    /// Feature directory recorded in each line, relative to the JSONL file.
    #[arg(long = "features-dir", default_value = "features")]
    pub features_dir: String,
    /// Separator between text segments inside the CSV text column.
    #[arg(long, default_value = "\n")]
    pub delimiter: String,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    /// Write outputs here instead of the recorded location.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e {
        e if e.is_numeric() => EXIT_NUMERIC,
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MEMEFUSE_LOG", "error")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let run = match cli.command {
        Command::Train(a) => commands::resolve_train(a),
        Command::Evaluate(a) => commands::resolve_evaluate(a),
        Command::Predict(a) => commands::resolve_predict(a),
        Command::Gradcheck(a) => commands::resolve_gradcheck(a),
        Command::ExportAttention(a) => commands::resolve_export(a),
        Command::ConvertDataset(a) => commands::resolve_convert(a),
        Command::Replay(a) => {
            return finish(commands::replay(&a.manifest, a.out));
        }
    };
    finish(run.and_then(commands::execute))
}

fn finish(result: memefuse_core::Result<()>) -> ExitCode {
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
