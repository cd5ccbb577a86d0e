//! The `attrground` command line. Each subcommand is a plain function over
//! its argument struct so the pipeline can also be driven from tests.

mod commands;
mod config;

use std::ffi::OsString;
use std::fmt;
use std::io::Write;
use std::net::IpAddr;
use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};

use attrground_core::dataset::{AnnotationFormat, SplitName, DEFAULT_WBF_IOU};
use attrground_core::knowledge::{ENV_LLM_KEY, ENV_LLM_MODEL, ENV_LLM_URL};
use attrground_core::metrics::{ApInterpolation, GroupBy};
use attrground_core::outparse::JsonCoords;
use attrground_core::promptgen::Attribute;

pub use commands::*;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_ENDPOINT: i32 = 3;

pub const ENV_CONFIG: &str = "ATTRGROUND_CONFIG";
pub const ENV_SEED: &str = "ATTRGROUND_SEED";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CliError {
    /// Bad flags, missing inputs or unusable configuration.
    Usage(String),
    /// Inputs were read but failed validation.
    Data(String),
    /// The completion endpoint failed or returned nothing usable.
    Endpoint(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Endpoint(_) => EXIT_ENDPOINT,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Endpoint(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

#[derive(Debug, Parser)]
#[command(
    name = "attrground",
    about = "Attribute-prompted abnormality grounding: data preparation, prompt distillation and evaluation",
    disable_version_flag = true,
    after_help = "Flags take precedence over environment variables, which take precedence over the config file."
)]
pub struct Cli {
    /// TOML or JSON file with defaults for any flag: top-level keys for
    /// global flags, one table per subcommand (e.g. [evaluate] runs = "out/runs").
    #[arg(long, global = true, env = ENV_CONFIG, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for every random choice: stub jitter and completion sampling.
    #[arg(long, global = true, env = ENV_SEED, default_value_t = 0)]
    pub seed: u64,
    /// Log more (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    /// Print name and version as JSON and exit.
    #[arg(short = 'V', long)]
    pub version: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate an annotation export and write it as flat JSON records.
    Ingest(IngestArgs),
    /// Fuse rater boxes per image and class and write a split manifest.
    Fuse(FuseArgs),
    /// Generate candidate attribute descriptions for every defined class.
    Decompose(DecomposeArgs),
    /// Record the chosen candidate for a class without the review UI.
    Select(SelectArgs),
    /// Export the prompt dictionary built from the latest selections.
    ExportDict(ExportDictArgs),
    /// Build prompt/answer pairs for manifest splits.
    BuildPairs(BuildPairsArgs),
    /// Answer every pair with its own boxes, optionally displaced.
    StubPredict(StubPredictArgs),
    /// Parse raw model outputs into structured predictions.
    Parse(ParseArgs),
    /// Score predictions against a manifest and store the run.
    Evaluate(EvaluateArgs),
    /// Print a stored run.
    Report(ReportArgs),
    /// Serve the review API and the UI bundle.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct IngestArgs {
    /// Annotation export (CSV or JSON array).
    #[arg(short, long)]
    pub annotations: PathBuf,
    /// Input format; inferred from the extension when omitted.
    #[arg(long)]
    pub format: Option<AnnotationFormat>,
    /// Output JSON file of validated records.
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct FuseArgs {
    /// Annotation export or `ingest` output.
    #[arg(short, long)]
    pub annotations: PathBuf,
    /// Input format; inferred from the extension when omitted.
    #[arg(long)]
    pub format: Option<AnnotationFormat>,
    /// IoU at which rater boxes are merged.
    #[arg(long, default_value_t = DEFAULT_WBF_IOU)]
    pub wbf_iou: f64,
    /// Split for rows without a split column.
    #[arg(long, default_value = "test")]
    pub default_split: SplitName,
    /// Partition classes into zeroshot (known) and ood (unknown) splits
    /// using `padchest` (the shipped table) or a class-map JSON file.
    #[arg(long, value_name = "padchest|FILE")]
    pub class_map: Option<String>,
    /// Output manifest JSON.
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct DecomposeArgs {
    /// Definition store JSON: [{class_name, definition, source}].
    #[arg(long)]
    pub definitions: PathBuf,
    /// Knowledge store directory for pools and selections.
    #[arg(long)]
    pub store: PathBuf,
    /// Use the offline synthetic generator instead of an endpoint.
    #[arg(long, conflicts_with = "replay")]
    pub stub: bool,
    /// Answer from a recorded transcript instead of an endpoint.
    #[arg(long, value_name = "TRANSCRIPT")]
    pub replay: Option<PathBuf>,
    /// Save every completion to this transcript for later replay.
    #[arg(long, value_name = "TRANSCRIPT")]
    pub record: Option<PathBuf>,
    /// Base URL of an OpenAI-compatible API.
    #[arg(long, env = ENV_LLM_URL)]
    pub llm_url: Option<String>,
    /// Bearer token for the endpoint.
    #[arg(long, env = ENV_LLM_KEY, hide_env_values = true)]
    pub llm_key: Option<String>,
    /// Model name sent with each request.
    #[arg(long, env = ENV_LLM_MODEL)]
    pub llm_model: Option<String>,
    /// Candidates per class.
    #[arg(long, default_value_t = 5)]
    pub n_candidates: usize,
    #[arg(long, default_value_t = 0.7)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0.7)]
    pub top_p: f64,
    #[arg(long, default_value_t = 1.1)]
    pub repetition_penalty: f64,
    #[arg(long, default_value_t = 1024)]
    pub max_tokens: u32,
    /// Classes generated concurrently.
    #[arg(long, default_value_t = 4)]
    pub concurrency: usize,
    /// Only these classes (comma separated); all by default.
    #[arg(long, value_delimiter = ',')]
    pub classes: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct SelectArgs {
    /// Knowledge store directory.
    #[arg(long)]
    pub store: PathBuf,
    /// Class to select for.
    #[arg(long, requires = "index", required_unless_present = "auto_select")]
    pub class: Option<String>,
    /// Candidate index within the class pool.
    #[arg(long, requires = "class")]
    pub index: Option<usize>,
    /// Pick the candidate richest in attribute terms for every pool
    /// without a selection.
    #[arg(long, conflicts_with_all = ["class", "index"])]
    pub auto_select: bool,
    /// With --auto-select, also replace existing selections.
    #[arg(long, requires = "auto_select")]
    pub force: bool,
    /// Lexicon JSON used by --auto-select; the shipped one by default.
    #[arg(long)]
    pub lexicons: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ExportDictArgs {
    /// Knowledge store directory.
    #[arg(long)]
    pub store: PathBuf,
    /// Require an entry for every class in this definition store.
    #[arg(long, conflicts_with = "classes")]
    pub definitions: Option<PathBuf>,
    /// Require an entry for these classes (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub classes: Vec<String>,
    /// Output dictionary JSON.
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatChoice {
    LocToken,
    JsonBox,
    Both,
}

#[derive(Debug, Clone, Args)]
pub struct BuildPairsArgs {
    /// Split manifest from `fuse`.
    #[arg(short, long)]
    pub manifest: PathBuf,
    /// Splits to include (comma separated).
    #[arg(long, value_delimiter = ',', default_value = "train")]
    pub split: Vec<SplitName>,
    /// Wire format; `both` writes `<stem>.loc_token.jsonl` and `<stem>.json_box.jsonl`.
    #[arg(long, value_enum, default_value_t = FormatChoice::LocToken)]
    pub format: FormatChoice,
    /// Append each class's attribute description to its prompt.
    #[arg(long)]
    pub with_knowledge: bool,
    /// Dictionaries to draw descriptions from, in lookup order: `vindr`,
    /// `padchest` or a JSON file. Implies --with-knowledge. Defaults to
    /// the shipped vindr then padchest dictionaries.
    #[arg(long, value_name = "vindr|padchest|FILE")]
    pub dictionary: Vec<String>,
    /// Remove one attribute's terms from every description. Implies --with-knowledge.
    #[arg(long)]
    pub mask: Option<Attribute>,
    /// Lexicon JSON for --mask; the shipped one by default.
    #[arg(long)]
    pub lexicons: Option<PathBuf>,
    /// Output JSONL file.
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct StubPredictArgs {
    /// Pairs JSONL from `build-pairs`.
    #[arg(long)]
    pub pairs: PathBuf,
    /// Fraction of each box's extent by which it is displaced.
    #[arg(long, default_value_t = 0.0)]
    pub jitter: f64,
    /// Output raw predictions JSONL.
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ParseArgs {
    /// Raw predictions JSONL: {image_id, class_name, format, raw_output}.
    #[arg(short, long)]
    pub predictions: PathBuf,
    /// Output parsed predictions JSONL.
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    /// Split manifest from `fuse`.
    #[arg(short, long)]
    pub manifest: PathBuf,
    /// Splits to score (comma separated).
    #[arg(long, value_delimiter = ',', default_value = "test")]
    pub split: Vec<SplitName>,
    /// Raw or parsed predictions JSONL.
    #[arg(short, long)]
    pub predictions: PathBuf,
    /// Directory holding stored runs.
    #[arg(long, default_value = "runs")]
    pub runs: PathBuf,
    /// `class` or `known_vs_unknown`.
    #[arg(long, default_value = "class")]
    pub group_by: GroupBy,
    /// Class map for known_vs_unknown grouping: `padchest` (default) or a JSON file.
    #[arg(long, value_name = "padchest|FILE")]
    pub class_map: Option<String>,
    /// `101-point` or `all-points`.
    #[arg(long, default_value = "101-point")]
    pub ap_interp: ApInterpolation,
    /// Extra IoU thresholds reported beside 0.3, 0.5, 0.75 and 0.5:0.95.
    #[arg(long, value_delimiter = ',')]
    pub iou_thresholds: Vec<f64>,
    /// How JSON-format coordinates relate to the image: `normalized` (0-1000) or `pixels`.
    #[arg(long, default_value = "normalized")]
    pub json_coords: JsonCoords,
    /// Also write the report JSON here.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Directory holding stored runs.
    #[arg(long, default_value = "runs")]
    pub runs: PathBuf,
    /// Run id, or `latest`.
    #[arg(long, default_value = "latest")]
    pub run: String,
    /// Print the report JSON instead of the text table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    /// Knowledge store directory.
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Definition store JSON.
    #[arg(long)]
    pub definitions: Option<PathBuf>,
    /// Directory holding stored runs.
    #[arg(long)]
    pub runs: Option<PathBuf>,
    /// Directory of images named `<image_id>.<png|jpg|jpeg|webp>`.
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Built UI bundle served at /.
    #[arg(long)]
    pub ui: Option<PathBuf>,
    #[arg(long, env = "ATTRGROUND_PORT", default_value_t = attrground_service::DEFAULT_PORT)]
    pub port: u16,
    /// Listen address; loopback unless set explicitly.
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: IpAddr,
}

pub fn version_json() -> String {
    serde_json::json!({"name": "attrground", "version": env!("CARGO_PKG_VERSION")}).to_string()
}

/// Parses `args` (program name first), layering the config file under
/// flags and environment.
pub fn parse_cli<I, T>(args: I) -> Result<Cli, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    config::parse_layered(args.into_iter().map(Into::into).collect())
}

pub fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    if cli.version {
        writeln!(out, "{}", version_json()).map_err(commands::write_err)?;
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(CliError::Usage("no subcommand given; see --help".into()));
    };
    let seed = cli.seed;
    match command {
        Command::Ingest(a) => cmd_ingest(&a, out),
        Command::Fuse(a) => cmd_fuse(&a, out),
        Command::Decompose(a) => cmd_decompose(&a, seed, out),
        Command::Select(a) => cmd_select(&a, out),
        Command::ExportDict(a) => cmd_export_dict(&a, out),
        Command::BuildPairs(a) => cmd_build_pairs(&a, out),
        Command::StubPredict(a) => cmd_stub_predict(&a, seed, out),
        Command::Parse(a) => cmd_parse(&a, out),
        Command::Evaluate(a) => cmd_evaluate(&a, out),
        Command::Report(a) => cmd_report(&a, out),
        Command::Serve(a) => cmd_serve(&a, out),
    }
}

/// Runs one invocation and returns the process exit code. Help goes to
/// `out`; diagnostics go to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match parse_cli(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{text}");
                    EXIT_USAGE
                }
            };
        }
    };
    match dispatch(cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
