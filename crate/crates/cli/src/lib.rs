//! The `lens` command line tool.
//!
//! Every analysis subcommand loads one LensDB, runs a single query and
//! writes a report to stdout or `--out`. Reports are CSV by default and
//! pretty-printed JSON with `--format text`.
//!
//! Exit codes: 0 success, 1 runtime error, 2 invalid database or probe
//! file, 64 usage error.

mod commands;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lens_core::LensError;
use lens_service::EmbedderError;

pub use commands::execute;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

pub const DEFAULT_SEED: u64 = 7;

#[derive(Debug, Parser)]
#[command(name = "lens", version, about = "Inspect model components through their concept embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, ValueEnum)]
pub enum Format {
    #[default]
    Csv,
    /// Pretty-printed JSON.
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GroupByArg {
    Label,
    Category,
}

/// Database location plus output options, shared by analysis subcommands.
#[derive(Debug, Args)]
pub struct Common {
    /// LensDB directory.
    #[arg(value_name = "DB")]
    pub db_path: Option<PathBuf>,
    /// LensDB directory, as an alternative to the positional argument.
    #[arg(long = "db", value_name = "DB", conflicts_with = "db_path")]
    pub db_flag: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Common {
    pub fn db(&self) -> Result<&PathBuf, CliError> {
        self.db_path
            .as_ref()
            .or(self.db_flag.as_ref())
            .ok_or_else(|| CliError::Usage("a database path is required (positional or --db)".into()))
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load a database and check every blob and probe set.
    Validate {
        #[command(flatten)]
        common: Common,
        /// Also check a probe file against the database dimension.
        #[arg(long)]
        probes: Option<String>,
    },
    /// Rank components by alignment with a text or vector probe.
    Search {
        #[command(flatten)]
        common: Common,
        /// Probe text, embedded by the sidecar at LENS_EMBEDDER_URL.
        #[arg(long, conflicts_with = "vector", required_unless_present = "vector")]
        text: Option<String>,
        /// JSON array of floats.
        #[arg(long)]
        vector: Option<PathBuf>,
        /// Null prompt subtracted from text probes.
        #[arg(long, default_value = "")]
        null_text: String,
        /// JSON array of floats used as the null embedding.
        #[arg(long, conflicts_with = "no_null")]
        null_vector: Option<PathBuf>,
        /// Score by raw similarity without a null embedding.
        #[arg(long)]
        no_null: bool,
        /// Restrict to these layers; repeatable.
        #[arg(long)]
        layer: Vec<String>,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
        #[arg(long, env = "LENS_EMBEDDER_URL")]
        embedder_url: Option<String>,
    },
    /// Label components with their best-aligned concept.
    Label {
        #[command(flatten)]
        common: Common,
        /// Probe file, or the name of a probe set stored in the database.
        #[arg(long)]
        probes: String,
        #[arg(long)]
        layer: Vec<String>,
        #[arg(long, default_value_t = lens_core::DEFAULT_TAU)]
        tau: f64,
    },
    /// Count labelled components per layer and concept.
    Dissect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        probes: String,
        #[arg(long)]
        layer: Vec<String>,
        #[arg(long, default_value_t = lens_core::DEFAULT_TAU)]
        tau: f64,
        #[arg(long, value_enum, default_value_t = GroupByArg::Label)]
        group_by: GroupByArg,
    },
    /// Set similarity between two layers, in both directions.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Second database; defaults to the first.
        #[arg(long)]
        other: Option<PathBuf>,
        #[arg(long)]
        layer: String,
        /// Layer of the second database; defaults to --layer.
        #[arg(long)]
        other_layer: Option<String>,
    },
    /// Bucket relevant components by valid and spurious alignment.
    Audit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        probes: String,
        #[arg(long)]
        target: String,
        #[arg(long)]
        layer: String,
        /// Relevance threshold; defaults to max(0.01, 0.05 / n_components).
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        allow_missing_null: bool,
    },
    /// Clarity, polysemanticity and redundancy of one layer.
    Metrics {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        layer: String,
        /// Clusters for polysemanticity.
        #[arg(long, default_value_t = lens_core::metrics::DEFAULT_CLUSTERS)]
        h: usize,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
    /// 2-D PCA projection of a layer, or labelled clusters with --clusters.
    Project {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        layer: String,
        #[arg(long, requires = "probes")]
        clusters: Option<usize>,
        #[arg(long)]
        probes: Option<String>,
        /// Labels reported per cluster.
        #[arg(long, default_value_t = 3)]
        top_k: usize,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
    /// Concept-level attribution graph for one target.
    Graph {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        probes: String,
        #[arg(long)]
        target: String,
        #[arg(long, default_value_t = lens_core::DEFAULT_TAU)]
        tau: f64,
        /// Minimum member relevance for a node to be kept.
        #[arg(long, default_value_t = lens_core::audit::DEFAULT_NODE_THRESHOLD)]
        threshold: f64,
        /// Emit Graphviz DOT instead of the edge table.
        #[arg(long)]
        dot: bool,
    },
    /// Serve the HTTP API over a database.
    Serve {
        #[arg(value_name = "DB")]
        db_path: Option<PathBuf>,
        #[arg(long = "db", value_name = "DB", conflicts_with = "db_path")]
        db_flag: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: std::net::SocketAddr,
        /// Further databases for /compare, as ID=PATH; repeatable.
        #[arg(long)]
        other: Vec<String>,
        #[arg(long, env = "LENS_EMBEDDER_URL")]
        embedder_url: Option<String>,
    },
    /// Write a seeded synthetic database with planted concepts.
    Synth {
        /// Output directory; must be empty or absent.
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        dim: usize,
    },
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Lens(LensError),
    Upstream(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Lens(e) if e.is_validation() => EXIT_VALIDATION,
            _ => EXIT_RUNTIME,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Lens(e) => write!(f, "{e}"),
            CliError::Upstream(m) => write!(f, "embedding sidecar unavailable: {m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<LensError> for CliError {
    fn from(e: LensError) -> Self {
        CliError::Lens(e)
    }
}

impl From<EmbedderError> for CliError {
    fn from(e: EmbedderError) -> Self {
        match e {
            EmbedderError::EmptyInput => CliError::Usage(e.to_string()),
            other => CliError::Upstream(other.to_string()),
        }
    }
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code. Errors are reported on stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
