use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Text,
    /// Stable `key=value` lines.
    Machine,
}

#[derive(Debug, Parser)]
#[command(name = "iovstore", version, about = "Interval-of-validity conditions store, slices, caching tier and integrity tools")]
pub struct Cli {
    /// Store directory.
    #[arg(long, global = true, env = "IOVSTORE_HOME")]
    pub store: Option<PathBuf>,
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    /// More logging on stderr; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Administer and write to a master store.
    #[command(subcommand)]
    Store(StoreCmd),
    /// Build, check and read release slices.
    #[command(subcommand)]
    Slice(SliceCmd),
    /// Run an origin HTTP server over a store or slice.
    Serve(ServeArgs),
    /// Run a caching proxy in front of an origin.
    Proxy(ProxyArgs),
    /// Query through an ordered list of backends.
    Query(QueryArgs),
    /// Checksums, verification and corruption injection.
    #[command(subcommand)]
    Integrity(IntegrityCmd),
    /// Run bundled or custom experiment scenarios.
    #[command(subcommand)]
    Scenario(ScenarioCmd),
}

#[derive(Debug, Args)]
pub struct QueryOpts {
    /// Folder path, e.g. DET/CALIB.
    pub folder: Option<String>,
    #[arg(long)]
    pub tag: Option<String>,
    /// Node the tag is resolved from; defaults to the folder itself.
    #[arg(long)]
    pub start: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub channel: u32,
    /// Point query at this validity point.
    #[arg(long, conflicts_with_all = ["from", "to"])]
    pub at: Option<u64>,
    /// Range query start.
    #[arg(long, requires = "to")]
    pub from: Option<u64>,
    /// Range query end (exclusive), or `open`.
    #[arg(long, requires = "from")]
    pub to: Option<String>,
}

#[derive(Debug, Args)]
pub struct SelectionOpts {
    /// Keep only the leaf tags this hierarchical tag resolves to.
    #[arg(long)]
    pub tag: Option<String>,
    /// Node the selection tag is resolved from.
    #[arg(long, default_value = "/", requires = "tag")]
    pub tag_start: String,
    /// Comma-separated folder list; default all folders.
    #[arg(long, value_delimiter = ',')]
    pub folders: Vec<String>,
    #[arg(long, requires = "to")]
    pub from: Option<u64>,
    /// Range end (exclusive), or `open`.
    #[arg(long, requires = "from")]
    pub to: Option<String>,
    /// Catalogue external files without bundling them.
    #[arg(long)]
    pub no_external: bool,
}

#[derive(Debug, Subcommand)]
pub enum StoreCmd {
    /// Create an empty store.
    Init {
        #[arg(long)]
        id: String,
    },
    /// Summary of partitions, folders and the state digest.
    Info,
    CreatePartition {
        name: String,
        #[arg(long)]
        role: String,
        /// Folderset that roots the partition.
        #[arg(long)]
        root: String,
    },
    CreateFolder {
        partition: String,
        path: String,
        #[arg(long, default_value = "opaque")]
        schema: String,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        channels: Vec<u32>,
    },
    /// Append one IOV, open-ended from `--since`.
    Commit {
        folder: String,
        #[arg(long)]
        tag: String,
        #[arg(long)]
        since: u64,
        #[arg(long, default_value_t = 0)]
        channel: u32,
        /// Inline payload given on the command line.
        #[arg(long, conflicts_with_all = ["data_file", "external"])]
        data: Option<String>,
        /// Inline payload read from a file.
        #[arg(long, conflicts_with = "external")]
        data_file: Option<PathBuf>,
        /// Logical name of an external payload file.
        #[arg(long, requires = "external_file")]
        external: Option<String>,
        #[arg(long, requires = "external")]
        external_file: Option<PathBuf>,
        #[arg(long, default_value = "")]
        author: String,
        #[arg(long, default_value = "")]
        comment: String,
    },
    /// Define a hierarchical tag: CHILD=TAG associations for OWNER.
    DefineTag {
        owner: String,
        name: String,
        associations: Vec<String>,
    },
    /// Without a folder, list every record; otherwise answer one query.
    Read(QueryOpts),
    /// Write a snapshot file of a selection.
    Snapshot {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        selection: SelectionOpts,
    },
    /// Re-hash every object and external file.
    Scrub,
}

#[derive(Debug, Subcommand)]
pub enum SliceCmd {
    Build {
        #[arg(long)]
        out: PathBuf,
        /// Value of the manifest `created` field.
        #[arg(long, default_value_t = 0)]
        created: u64,
        /// Extra directory searched for external files.
        #[arg(long)]
        external_root: Vec<PathBuf>,
        #[command(flatten)]
        selection: SelectionOpts,
    },
    /// Open with full verification and print the manifest summary.
    OpenCheck { slice: PathBuf },
    /// Per-member verification report.
    Verify { slice: PathBuf },
    /// Print a catalogued external file.
    Cat {
        slice: PathBuf,
        logical_name: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Serve this slice instead of the store.
    #[arg(long)]
    pub slice: Option<PathBuf>,
    #[arg(long)]
    pub listen: Option<String>,
    /// `infinite` or seconds; default 300 for a store, infinite for a slice.
    #[arg(long)]
    pub ttl: Option<String>,
    /// Simulated round trip added to every response.
    #[arg(long, default_value_t = 0.0)]
    pub rtt_ms: f64,
    #[arg(long, default_value_t = 0.0)]
    pub jitter_ms: f64,
    /// Simulated bandwidth; 0 means unlimited.
    #[arg(long, default_value_t = 0.0)]
    pub mib_per_s: f64,
    /// Sleep for the simulated delay instead of only reporting it.
    #[arg(long)]
    pub real_delay: bool,
    /// Minimum interval between store refreshes.
    #[arg(long, default_value_t = 1000)]
    pub refresh_ms: u64,
}

#[derive(Debug, Args)]
pub struct ProxyArgs {
    #[arg(long)]
    pub upstream: Option<String>,
    #[arg(long)]
    pub listen: Option<String>,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long)]
    pub budget_mib: Option<u64>,
    /// Simulated round trip between client and proxy.
    #[arg(long, default_value_t = 0.0)]
    pub hop_rtt_ms: f64,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    /// Backend as proxy=URL, origin=URL, slice=PATH, snapshot=PATH or
    /// store=PATH; tried in order.
    #[arg(long = "endpoint")]
    pub endpoints: Vec<String>,
    #[arg(long, default_value_t = 30)]
    pub timeout_s: u64,
    #[command(flatten)]
    pub query: QueryOpts,
}

#[derive(Debug, Subcommand)]
pub enum IntegrityCmd {
    /// Digest and CRC-32 of a file.
    Digest {
        file: PathBuf,
        #[arg(long, default_value = "sha256")]
        algorithm: String,
    },
    /// Write INPUT as a buffered produced file with a checksum manifest,
    /// then verify it from storage.
    Produce {
        input: PathBuf,
        output: PathBuf,
        /// Defaults to OUTPUT.manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        buffer_kib: usize,
    },
    /// Verify a produced file against its manifest.
    Verify {
        file: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Name the file was produced under, when checking a renamed copy.
        #[arg(long)]
        name: Option<String>,
    },
    /// Write a corrupted copy: bitflip:POS, truncate:LEN or zero:A..B.
    Inject {
        src: PathBuf,
        kind: String,
        out: PathBuf,
    },
    /// Compare a source and destination digest (or file).
    TransferCheck {
        src: String,
        dst: String,
        #[arg(long, default_value_t = 1)]
        attempt: u32,
        #[arg(long, default_value_t = iovstore_core::integrity::DEFAULT_MAX_ATTEMPTS)]
        max_attempts: u32,
    },
}

#[derive(Debug, Subcommand)]
pub enum ScenarioCmd {
    List,
    Run {
        /// Bundled scenario name.
        #[arg(required_unless_present = "file", conflicts_with = "file")]
        name: Option<String>,
        /// Scenario TOML file.
        #[arg(long)]
        file: Option<PathBuf>,
        /// Keep generated stores and caches here.
        #[arg(long)]
        workdir: Option<PathBuf>,
        /// Also write the report to this file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}
