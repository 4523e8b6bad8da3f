//! `perception`: simulate, fit, analyse, correct, render, serve and export.

mod commands;
mod config;
mod error;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};

use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "perception", version, about = "Perception modelling and bias correction for text saliency maps")]
struct Cli {
    /// Plain-text `key = value` file with defaults for the subcommand's
    /// options; options given on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate ratings of a study plan from a ground-truth perception model.
    Simulate(SimulateArgs),
    /// Fit the ordinal additive perception model to rating records.
    Fit(FitArgs),
    /// Write partial-effect curves (CSV) and plots (SVG) of a fitted model.
    PartialEffects(PartialEffectsArgs),
    /// Estimate per-token perception bias of saliency maps.
    Bias(BiasArgs),
    /// Correct saliency maps for perception bias.
    Correct(CorrectArgs),
    /// Render a saliency map or bias report as SVG and HTML.
    Render(RenderArgs),
    /// Run a rating study over HTTP.
    Serve(ServeArgs),
    /// Export the ratings logged by `serve`.
    Export(ExportArgs),
}

#[derive(Args, Debug, Clone)]
pub struct CorpusArgs {
    /// CoNLL-U file with the sentences; the bundled toy corpus otherwise.
    #[arg(long, value_name = "FILE")]
    pub conllu: Option<PathBuf>,
    /// Word frequency table (`word<TAB>frequency`).
    #[arg(long, value_name = "FILE")]
    pub frequency: Option<PathBuf>,
    /// Sentiment lexicon (`word<TAB>polarity`).
    #[arg(long, value_name = "FILE")]
    pub sentiment: Option<PathBuf>,
    /// Use only the first N sentences.
    #[arg(long, value_name = "N")]
    pub sentences: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, default_value_t = 50)]
    pub participants: usize,
    /// saliency, corrected, bars or within.
    #[arg(long, default_value = "saliency")]
    pub mode: String,
    /// Ground-truth preset: nonlinear, oracle, word-length or flat.
    #[arg(long, default_value = "nonlinear")]
    pub truth: String,
    /// Ground-truth model as JSON; overrides --truth.
    #[arg(long, value_name = "FILE")]
    pub ground_truth: Option<PathBuf>,
    /// Comma-separated plan slots whose raters answer at random.
    #[arg(long, value_delimiter = ',')]
    pub clickers: Vec<usize>,
    /// Records, CSV if the name ends in .csv, JSONL otherwise; `-` for stdout.
    #[arg(long, default_value = "-")]
    pub out: String,
    #[arg(long, value_name = "FILE")]
    pub plan_out: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub traps_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Records (CSV or JSONL); `-` reads JSONL from stdin.
    #[arg(long, default_value = "-")]
    pub input: String,
    /// Model JSON; `-` for stdout.
    #[arg(long, default_value = "-")]
    pub out: String,
    /// Seed of the cross-validation folds; required unless every λ is fixed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Model specification as JSON; overrides the term options below.
    #[arg(long, value_name = "FILE")]
    pub spec: Option<PathBuf>,
    /// Covariates with a smooth term.
    #[arg(long, value_delimiter = ',', default_value = "saliency,word_length,display_index")]
    pub smooths: Vec<String>,
    /// Basis size of non-saliency smooths.
    #[arg(long, default_value_t = perception_core::model::DEFAULT_NUM_BASIS)]
    pub k: usize,
    /// Basis size of the saliency smooth.
    #[arg(long, default_value_t = perception_core::model::SALIENCY_NUM_BASIS)]
    pub k_saliency: usize,
    /// Leave out the worker and sentence random intercepts.
    #[arg(long)]
    pub no_random_effects: bool,
    /// Use this λ for every penalty instead of selecting by cross-validation.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Comma-separated λ grid for cross-validation.
    #[arg(long, value_delimiter = ',')]
    pub lambda_grid: Vec<f64>,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 200)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// Drop records with long words or slow answers before fitting.
    #[arg(long)]
    pub paper_filters: bool,
    /// Also write the fit report (convergence, λ, edf) as JSON.
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PartialEffectsArgs {
    /// Model JSON; `-` for stdin.
    #[arg(long, default_value = "-")]
    pub model: String,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub points: usize,
    /// Only these term labels, e.g. `s(saliency)`.
    #[arg(long, value_delimiter = ',')]
    pub terms: Vec<String>,
}

#[derive(Args, Debug, Clone)]
pub struct ReferenceArgs {
    /// Model JSON; `-` for stdin.
    #[arg(long, default_value = "-")]
    pub model: String,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sentence documents (JSON object, array or JSONL); random maps over the
    /// corpus otherwise.
    #[arg(long, value_name = "FILE")]
    pub input: Option<PathBuf>,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Number of sampled reference candidates (odd).
    #[arg(long, default_value_t = perception_core::correction::DEFAULT_REFERENCE_SAMPLES)]
    pub samples: usize,
    #[arg(long, default_value_t = perception_core::correction::DEFAULT_PROBE_SALIENCY)]
    pub probe: f64,
    /// Display index assumed for the rendered sentences.
    #[arg(long, default_value_t = 1)]
    pub display_index: usize,
    /// Write SVG renderings here.
    #[arg(long, value_name = "DIR")]
    pub svg_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BiasArgs {
    #[command(flatten)]
    pub reference: ReferenceArgs,
    /// Bias JSON; `-` for stdout.
    #[arg(long, default_value = "-")]
    pub out: String,
}

#[derive(Args, Debug)]
pub struct CorrectArgs {
    #[command(flatten)]
    pub reference: ReferenceArgs,
    #[arg(long, default_value_t = perception_core::correction::DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = perception_core::correction::DEFAULT_STEPS)]
    pub steps: usize,
    /// Corrected sentence documents as JSONL; `-` for stdout.
    #[arg(long, default_value = "-")]
    pub out: String,
    /// Bias reports before and after correction, as JSON.
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    /// heatmap, corrected-heatmap, bars or bias.
    #[arg(long, default_value = "heatmap")]
    pub mode: String,
    /// Sentence document (JSON object, array or JSONL).
    #[arg(long, value_name = "FILE")]
    pub input: Option<PathBuf>,
    /// Which sentence of a multi-document input.
    #[arg(long)]
    pub sentence_id: Option<String>,
    /// Bias JSON from `bias` or `correct --report` (bias mode).
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
    /// before or after (bias mode with correction reports).
    #[arg(long, default_value = "before")]
    pub which: String,
    /// `sentence` for per-sentence scaling or a fixed |b| mapped to full colour.
    #[arg(long, default_value = "sentence")]
    pub scale: String,
    /// SVG output; `-` for stdout.
    #[arg(long, default_value = "-")]
    pub out: String,
    /// Also write the HTML rendering here.
    #[arg(long, value_name = "FILE")]
    pub html: Option<PathBuf>,
    #[arg(long, default_value = "monospace")]
    pub font: String,
    /// Pixel width of one character cell.
    #[arg(long, default_value_t = 10)]
    pub char_width: u32,
    #[arg(long, default_value_t = 16)]
    pub font_size: u32,
    #[arg(long, default_value_t = 4)]
    pub cell_padding: u32,
    #[arg(long, default_value_t = 60)]
    pub bar_area_height: u32,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Directory holding the event log and frozen study definitions.
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long, default_value = "study")]
    pub study_id: String,
    /// Seed of the study plan.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, default_value_t = 60)]
    pub participants: usize,
    /// saliency, corrected, bars or within.
    #[arg(long, default_value = "within")]
    pub mode: String,
    /// Fitted model used to correct the maps of the corrected condition.
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = perception_core::correction::DEFAULT_REFERENCE_SAMPLES)]
    pub samples: usize,
    #[arg(long, default_value_t = perception_core::correction::DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = perception_core::correction::DEFAULT_STEPS)]
    pub steps: usize,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long, default_value = "study")]
    pub study_id: String,
    /// csv or jsonl.
    #[arg(long, default_value = "csv")]
    pub format: String,
    /// Drop flagged records instead of only marking them.
    #[arg(long)]
    pub paper_filters: bool,
    #[arg(long, default_value = "-")]
    pub out: String,
}

fn diagnostic(level: &str, code: &str, message: &str) {
    let line = serde_json::json!({ "level": level, "code": code, "message": message });
    let _ = writeln!(std::io::stderr(), "{line}");
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format(|buf, record| {
            let line = serde_json::json!({
                "level": record.level().as_str().to_lowercase(),
                "code": "log",
                "target": record.target(),
                "message": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        })
        .init();
}

fn run(args: Vec<String>) -> Result<(), CliError> {
    let args = config::merge(&Cli::command(), args)?;
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) if e.exit_code() == 0 => {
            let _ = e.print();
            return Ok(());
        }
        Err(e) => {
            let _ = write!(std::io::stderr(), "{}", e.render());
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            return Err(CliError::Usage(first));
        }
    };
    match cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Fit(a) => commands::fit(a),
        Command::PartialEffects(a) => commands::partial_effects(a),
        Command::Bias(a) => commands::bias(a),
        Command::Correct(a) => commands::correct(a),
        Command::Render(a) => commands::render(a),
        Command::Serve(a) => commands::serve(a),
        Command::Export(a) => commands::export(a),
    }
}

fn main() -> ExitCode {
    init_logging();
    let args: Vec<String> = std::env::args_os().map(|a| a.to_string_lossy().into_owned()).collect();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            diagnostic("error", e.code(), &e.to_string());
            ExitCode::from(if matches!(e, CliError::Usage(_)) { 2 } else { 1 })
        }
    }
}
