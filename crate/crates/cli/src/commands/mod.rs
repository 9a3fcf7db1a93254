pub mod integrity;
pub mod query;
pub mod scenario;
pub mod serve;
pub mod slice;
pub mod store;

use std::path::PathBuf;

use anyhow::Result;
use iovstore_core::model::{IovInterval, NodePath, TagName, ValidityPoint};
use iovstore_core::query::CanonicalQuery;
use iovstore_core::store::{FolderSelection, Selection, Store, StoreOptions};

use crate::args::{Command, Format, QueryOpts, SelectionOpts};
use crate::config::CliConfig;
use crate::exit::CliError;
use crate::output::Output;

pub struct Ctx {
    pub store: Option<PathBuf>,
    pub format: Format,
    pub config: CliConfig,
}

impl Ctx {
    pub fn store_path(&self) -> Result<PathBuf, CliError> {
        self.store
            .clone()
            .ok_or_else(|| CliError::Usage("no store given: use --store, IOVSTORE_HOME or the config file".into()))
    }

    pub fn open_store(&self, writable: bool) -> Result<Store> {
        let options = if writable { StoreOptions::default() } else { StoreOptions::read_only() };
        Ok(Store::open(&self.store_path()?, options)?)
    }

    pub fn emit(&self, out: &Output) -> Result<()> {
        out.emit(self.format)?;
        Ok(())
    }
}

pub fn run(ctx: &Ctx, command: Command) -> Result<Output> {
    match command {
        Command::Store(cmd) => store::run(ctx, cmd),
        Command::Slice(cmd) => slice::run(ctx, cmd),
        Command::Serve(args) => serve::serve(ctx, args),
        Command::Proxy(args) => serve::proxy(ctx, args),
        Command::Query(args) => query::run(ctx, args),
        Command::Integrity(cmd) => integrity::run(ctx, cmd),
        Command::Scenario(cmd) => scenario::run(ctx, cmd),
    }
}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    CliError::Usage(msg.into()).into()
}

fn parse_point(s: &str) -> Result<ValidityPoint> {
    s.parse().map_err(|_| usage(format!("'{s}' is not a validity point")))
}

fn window(from: Option<u64>, to: Option<&str>) -> Result<Option<IovInterval>> {
    match (from, to) {
        (Some(from), Some(to)) => Ok(Some(IovInterval::new(ValidityPoint(from), parse_point(to)?)?)),
        _ => Ok(None),
    }
}

pub fn canonical_query(opts: &QueryOpts) -> Result<CanonicalQuery> {
    let folder = opts.folder.as_deref().ok_or_else(|| usage("a folder is required"))?;
    let folder = NodePath::parse(folder)?;
    let tag = TagName::new(opts.tag.as_deref().ok_or_else(|| usage("--tag is required"))?)?;
    let start = match &opts.start {
        Some(s) => NodePath::parse(s)?,
        None => folder.clone(),
    };
    if let Some(t) = opts.at {
        return Ok(CanonicalQuery::point(folder, opts.channel, start, tag, ValidityPoint(t))?);
    }
    match window(opts.from, opts.to.as_deref())? {
        Some(w) => Ok(CanonicalQuery::range(folder, opts.channel, start, tag, w)),
        None => Err(usage("give --at T or --from A --to B")),
    }
}

pub fn selection(opts: &SelectionOpts) -> Result<Selection> {
    let mut sel = Selection::everything();
    if !opts.folders.is_empty() {
        let folders = opts.folders.iter().map(|f| NodePath::parse(f)).collect::<Result<Vec<_>, _>>()?;
        sel.folders = FolderSelection::List(folders);
    }
    if let Some(tag) = &opts.tag {
        sel.tag = Some((NodePath::parse(&opts.tag_start)?, TagName::new(tag)?));
    }
    if let Some(w) = window(opts.from, opts.to.as_deref())? {
        sel.iov_range = w;
    }
    sel.include_external = !opts.no_external;
    Ok(sel)
}
