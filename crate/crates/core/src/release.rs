//! Release slices: one ustar archive holding a snapshot of a store
//! selection, the external files it references and a file catalog.
//!
//! Members, in this order:
//!
//! ```text
//! MANIFEST            sorted `key = value` lines plus a self-digest line
//! catalog.txt         `logical_name path size sha256`, sorted by name
//! snapshot.iov        snapshot file (see crate::snapshot)
//! external/<name>...  bundled external payload files, sorted by name
//! ```
//!
//! Headers are rendered canonically (mode 0644, uid/gid 0, mtime 0, no
//! owner names), padding is zero and the archive ends with exactly two
//! zero blocks. Readers reject anything else, so any change to the file is
//! detected either by a header or padding check or by a member digest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::integrity::{file_digest, ContentDigest, DigestAlgorithm, VerificationReport};
use crate::model::{validate_logical_name, IovInterval, NodePath, TagName, ValidityPoint};
use crate::query::{CanonicalQuery, ConditionsRead, ReadError, ResultSet};
use crate::snapshot::{write_snapshot, Snapshot};
use crate::store::{FolderSelection, Selection, Store, StoreError};

pub const SLICE_FORMAT: &str = "iovslice/1";
pub const MANIFEST_NAME: &str = "MANIFEST";
pub const CATALOG_NAME: &str = "catalog.txt";
pub const SNAPSHOT_NAME: &str = "snapshot.iov";
pub const EXTERNAL_PREFIX: &str = "external/";

const BLOCK: usize = 512;
const SELF_DIGEST_KEY: &str = "manifest-sha256";
/// Catalog path for external files that were not bundled.
const NOT_BUNDLED: &str = "-";

#[derive(Debug, thiserror::Error)]
pub enum ReleaseError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("missing external file '{0}'")]
    MissingExternalFile(String),
    #[error("external file '{name}' has digest {actual}, expected {expected}")]
    ExternalDigestMismatch {
        name: String,
        expected: ContentDigest,
        actual: ContentDigest,
    },
    #[error("corrupt slice: {0}")]
    CorruptSlice(String),
    #[error("unsupported slice format '{0}'")]
    UnsupportedVersion(String),
    #[error("unknown logical name '{0}'")]
    UnknownLogicalName(String),
    #[error("logical name '{0}' is catalogued but was not bundled into the slice")]
    NotBundled(String),
    #[error("corrupt member '{0}'")]
    CorruptMember(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Default)]
pub struct BuildOptions {
    /// Value written to the manifest `created` field. Kept explicit so that
    /// rebuilding from the same state gives the same bytes.
    pub created: u64,
    /// Extra directories searched for external files, after the store's own.
    pub external_roots: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub size: u64,
    pub digest: ContentDigest,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceManifest {
    pub format: String,
    pub source_store: String,
    pub created: u64,
    pub selection: Selection,
    /// Every member except the manifest, sorted by name.
    pub entries: Vec<ManifestEntry>,
    pub total_size: u64,
}

fn fmt_point(p: ValidityPoint) -> String {
    p.to_string()
}

impl SliceManifest {
    pub fn entry(&self, name: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut lines: BTreeMap<String, String> = BTreeMap::new();
        lines.insert("format".into(), self.format.clone());
        lines.insert("source-store".into(), self.source_store.clone());
        lines.insert("created".into(), self.created.to_string());
        let folders = match &self.selection.folders {
            FolderSelection::All => "ALL".to_string(),
            FolderSelection::List(list) => list.iter().map(|f| f.to_string()).collect::<Vec<_>>().join(" "),
        };
        lines.insert("selection.folders".into(), folders);
        let tag = match &self.selection.tag {
            Some((node, tag)) => format!("{node} {tag}"),
            None => "-".into(),
        };
        lines.insert("selection.tag".into(), tag);
        lines.insert(
            "selection.iov-range".into(),
            format!(
                "{} {}",
                fmt_point(self.selection.iov_range.since()),
                fmt_point(self.selection.iov_range.until())
            ),
        );
        lines.insert(
            "selection.include-external".into(),
            self.selection.include_external.to_string(),
        );
        for e in &self.entries {
            lines.insert(format!("member.{}", e.name), format!("{} {}", e.size, e.digest));
        }
        lines.insert("total-size".into(), self.total_size.to_string());
        let mut body = String::new();
        for (k, v) in &lines {
            writeln!(body, "{k} = {v}").expect("writing to a String");
        }
        let digest = ContentDigest::of(body.as_bytes());
        writeln!(body, "{SELF_DIGEST_KEY} = {digest}").expect("writing to a String");
        body
    }

    pub fn parse(text: &str) -> Result<Self, ReleaseError> {
        let bad = |why: String| ReleaseError::CorruptSlice(format!("manifest: {why}"));
        let split = text
            .rfind(&format!("{SELF_DIGEST_KEY} = "))
            .ok_or_else(|| bad("no self digest".into()))?;
        let (body, trailer) = text.split_at(split);
        let recorded = trailer
            .strip_prefix(&format!("{SELF_DIGEST_KEY} = "))
            .and_then(|t| t.strip_suffix('\n'))
            .ok_or_else(|| bad("malformed self digest line".into()))?;
        if recorded != ContentDigest::of(body.as_bytes()).to_hex() {
            return Err(bad("self digest mismatch".into()));
        }
        let mut map = BTreeMap::new();
        let mut previous: Option<&str> = None;
        for line in body.lines() {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| bad(format!("bad line '{line}'")))?;
            if previous.is_some_and(|p| p >= k) {
                return Err(bad(format!("keys not sorted at '{k}'")));
            }
            previous = Some(k);
            map.insert(k, v);
        }
        let format = map.get("format").ok_or_else(|| bad("no format".into()))?;
        if *format != SLICE_FORMAT {
            return Err(ReleaseError::UnsupportedVersion(format.to_string()));
        }
        let get = |k: &str| map.get(k).copied().ok_or_else(|| bad(format!("missing '{k}'")));
        let num = |k: &str| -> Result<u64, ReleaseError> {
            get(k)?.parse().map_err(|_| bad(format!("bad number in '{k}'")))
        };
        let folders = match get("selection.folders")? {
            "ALL" => FolderSelection::All,
            list => FolderSelection::List(
                list.split(' ')
                    .map(NodePath::parse)
                    .collect::<Result<_, _>>()
                    .map_err(|e| bad(e.to_string()))?,
            ),
        };
        let tag = match get("selection.tag")? {
            "-" => None,
            s => {
                let (node, tag) = s.split_once(' ').ok_or_else(|| bad("bad tag".into()))?;
                Some((
                    NodePath::parse(node).map_err(|e| bad(e.to_string()))?,
                    TagName::new(tag).map_err(|e| bad(e.to_string()))?,
                ))
            }
        };
        let (since, until) = get("selection.iov-range")?
            .split_once(' ')
            .ok_or_else(|| bad("bad iov range".into()))?;
        let point = |s: &str| s.parse::<ValidityPoint>().map_err(|_| bad(format!("bad point '{s}'")));
        let iov_range = IovInterval::new(point(since)?, point(until)?).map_err(|e| bad(e.to_string()))?;
        let include_external = match get("selection.include-external")? {
            "true" => true,
            "false" => false,
            other => return Err(bad(format!("bad flag '{other}'"))),
        };
        let mut entries = Vec::new();
        for (k, v) in &map {
            let Some(name) = k.strip_prefix("member.") else { continue };
            let (size, digest) = v.split_once(' ').ok_or_else(|| bad(format!("bad member '{k}'")))?;
            entries.push(ManifestEntry {
                name: name.to_string(),
                size: size.parse().map_err(|_| bad(format!("bad size for '{name}'")))?,
                digest: digest.parse().map_err(|_| bad(format!("bad digest for '{name}'")))?,
            });
        }
        let manifest = SliceManifest {
            format: format.to_string(),
            source_store: get("source-store")?.to_string(),
            created: num("created")?,
            selection: Selection {
                folders,
                tag,
                iov_range,
                include_external,
            },
            entries,
            total_size: num("total-size")?,
        };
        if manifest.to_text() != text {
            return Err(bad("not in canonical form".into()));
        }
        Ok(manifest)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CatalogEntry {
    pub logical_name: String,
    /// Member name inside the archive, or `None` when not bundled.
    pub path: Option<String>,
    pub size: u64,
    pub digest: ContentDigest,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FileCatalog {
    entries: BTreeMap<String, CatalogEntry>,
}

impl FileCatalog {
    pub fn get(&self, logical_name: &str) -> Option<&CatalogEntry> {
        self.entries.get(logical_name)
    }

    pub fn entries(&self) -> impl Iterator<Item = &CatalogEntry> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in self.entries.values() {
            writeln!(
                out,
                "{} {} {} {}",
                e.logical_name,
                e.path.as_deref().unwrap_or(NOT_BUNDLED),
                e.size,
                e.digest
            )
            .expect("writing to a String");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, ReleaseError> {
        let bad = |why: String| ReleaseError::CorruptSlice(format!("catalog: {why}"));
        let mut entries = BTreeMap::new();
        for line in text.lines() {
            let f: Vec<&str> = line.split(' ').collect();
            if f.len() != 4 {
                return Err(bad(format!("bad line '{line}'")));
            }
            let path = (f[1] != NOT_BUNDLED).then(|| f[1].to_string());
            let entry = CatalogEntry {
                logical_name: f[0].to_string(),
                path,
                size: f[2].parse().map_err(|_| bad(format!("bad size in '{line}'")))?,
                digest: f[3].parse().map_err(|_| bad(format!("bad digest in '{line}'")))?,
            };
            entries.insert(entry.logical_name.clone(), entry);
        }
        let catalog = FileCatalog { entries };
        if catalog.to_text() != text {
            return Err(bad("not in canonical form".into()));
        }
        Ok(catalog)
    }
}

fn canonical_header(name: &str, size: u64) -> io::Result<[u8; BLOCK]> {
    let mut h = tar::Header::new_ustar();
    h.set_path(name)?;
    h.set_size(size);
    h.set_mode(0o644);
    h.set_uid(0);
    h.set_gid(0);
    h.set_mtime(0);
    h.set_entry_type(tar::EntryType::Regular);
    h.set_cksum();
    Ok(*h.as_bytes())
}

fn padding(size: u64) -> usize {
    (BLOCK - (size % BLOCK as u64) as usize) % BLOCK
}

enum MemberSource<'a> {
    Bytes(&'a [u8]),
    File(PathBuf),
}

struct ArchiveWriter<W: Write> {
    out: W,
}

impl<W: Write> ArchiveWriter<W> {
    fn member(&mut self, name: &str, size: u64, source: MemberSource<'_>) -> Result<(), ReleaseError> {
        self.out.write_all(&canonical_header(name, size)?)?;
        let copied = match source {
            MemberSource::Bytes(b) => {
                self.out.write_all(b)?;
                b.len() as u64
            }
            MemberSource::File(path) => io::copy(&mut File::open(&path)?.take(size + 1), &mut self.out)?,
        };
        if copied != size {
            return Err(ReleaseError::Io(io::Error::other(format!(
                "member {name} changed size while being archived"
            ))));
        }
        self.out.write_all(&[0u8; BLOCK][..padding(size)])?;
        Ok(())
    }

    fn finish(mut self) -> io::Result<W> {
        self.out.write_all(&[0u8; 2 * BLOCK])?;
        self.out.flush()?;
        Ok(self.out)
    }
}

fn find_external(
    store: &Store,
    roots: &[PathBuf],
    name: &str,
    digest: &ContentDigest,
    size: u64,
) -> Result<PathBuf, ReleaseError> {
    let candidates = std::iter::once(store.external_path(name)).chain(roots.iter().map(|r| r.join(name)));
    let mut mismatch = None;
    for path in candidates {
        let f = match File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => continue,
            Err(e) => return Err(e.into()),
        };
        if f.metadata()?.len() != size {
            continue;
        }
        let actual: ContentDigest = file_digest(f, DigestAlgorithm::Sha256)?
            .hex()
            .parse()
            .expect("sha256 digests are 64 hex characters");
        if actual == *digest {
            return Ok(path);
        }
        mismatch = Some(actual);
    }
    match mismatch {
        Some(actual) => Err(ReleaseError::ExternalDigestMismatch {
            name: name.to_string(),
            expected: *digest,
            actual,
        }),
        None => Err(ReleaseError::MissingExternalFile(name.to_string())),
    }
}

/// Writes a slice of `selection` to `out`. The same store state, selection
/// and options always give the same bytes.
pub fn build_slice(
    store: &Store,
    selection: &Selection,
    out: &Path,
    options: &BuildOptions,
) -> Result<SliceManifest, ReleaseError> {
    let contents = store.snapshot_contents(selection)?;
    let snapshot = write_snapshot(&contents);
    let selection = contents.selection.clone();

    let mut catalog = FileCatalog::default();
    let mut bundled = Vec::new();
    for (name, ext) in &contents.externals {
        validate_logical_name(name).map_err(StoreError::from)?;
        let path = if selection.include_external {
            let source = find_external(store, &options.external_roots, name, &ext.digest, ext.size)?;
            let member = format!("{EXTERNAL_PREFIX}{name}");
            bundled.push((member.clone(), ext.size, ext.digest, source));
            Some(member)
        } else {
            None
        };
        catalog.entries.insert(
            name.clone(),
            CatalogEntry {
                logical_name: name.clone(),
                path,
                size: ext.size,
                digest: ext.digest,
            },
        );
    }
    let catalog_text = catalog.to_text();

    let mut entries = vec![
        ManifestEntry {
            name: CATALOG_NAME.into(),
            size: catalog_text.len() as u64,
            digest: ContentDigest::of(catalog_text.as_bytes()),
        },
        ManifestEntry {
            name: SNAPSHOT_NAME.into(),
            size: snapshot.len() as u64,
            digest: ContentDigest::of(&snapshot),
        },
    ];
    for (member, size, digest, _) in &bundled {
        entries.push(ManifestEntry {
            name: member.clone(),
            size: *size,
            digest: *digest,
        });
    }
    let manifest = SliceManifest {
        format: SLICE_FORMAT.into(),
        source_store: contents.store_id.clone(),
        created: options.created,
        selection,
        total_size: entries.iter().map(|e| e.size).sum(),
        entries,
    };
    let manifest_text = manifest.to_text();

    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let tmp = tempfile::NamedTempFile::new_in(dir)?;
    let mut w = ArchiveWriter {
        out: io::BufWriter::with_capacity(1 << 20, tmp),
    };
    w.member(MANIFEST_NAME, manifest_text.len() as u64, MemberSource::Bytes(manifest_text.as_bytes()))?;
    w.member(CATALOG_NAME, catalog_text.len() as u64, MemberSource::Bytes(catalog_text.as_bytes()))?;
    w.member(SNAPSHOT_NAME, snapshot.len() as u64, MemberSource::Bytes(&snapshot))?;
    for (member, size, _, source) in bundled {
        w.member(&member, size, MemberSource::File(source))?;
    }
    let tmp = w.finish()?.into_inner().map_err(|e| e.into_error())?;
    tmp.as_file().sync_all()?;
    tmp.persist(out).map_err(|e| e.error)?;
    Ok(manifest)
}

/// Location of one member inside an archive.
#[derive(Debug, Clone, PartialEq, Eq)]
struct MemberSpan {
    name: String,
    offset: u64,
    size: u64,
}

#[derive(Debug, Default)]
struct Layout {
    members: Vec<MemberSpan>,
    /// (member name or "archive", problem) for every structural defect.
    problems: Vec<(String, String)>,
}

/// Walks the archive headers, checking that each header is canonical, that
/// padding is zero and that the archive ends with exactly two zero blocks.
fn scan_layout(f: &mut File) -> io::Result<Layout> {
    let len = f.metadata()?.len();
    let mut layout = Layout::default();
    let mut pos = 0u64;
    let mut block = [0u8; BLOCK];
    loop {
        if pos + BLOCK as u64 > len {
            layout.problems.push(("archive".into(), format!("truncated at offset {pos}")));
            break;
        }
        f.seek(SeekFrom::Start(pos))?;
        f.read_exact(&mut block)?;
        if block.iter().all(|&b| b == 0) {
            let rest = len - pos;
            let mut tail = Vec::new();
            f.take(2 * BLOCK as u64 + 1).read_to_end(&mut tail)?;
            if rest != 2 * BLOCK as u64 || tail.iter().any(|&b| b != 0) {
                layout
                    .problems
                    .push(("archive".into(), format!("bad end-of-archive at offset {pos}")));
            }
            break;
        }
        let header = tar::Header::from_byte_slice(&block);
        let parsed = header
            .path()
            .ok()
            .and_then(|p| p.to_str().map(str::to_string))
            .zip(header.size().ok());
        let Some((name, size)) = parsed else {
            layout
                .problems
                .push(("archive".into(), format!("unreadable header at offset {pos}")));
            break;
        };
        if canonical_header(&name, size).ok().as_ref() != Some(&block) {
            layout
                .problems
                .push((name.clone(), format!("non-canonical header at offset {pos}")));
        }
        let data = pos + BLOCK as u64;
        let pad = padding(size) as u64;
        if data + size + pad > len {
            layout.problems.push((name.clone(), "member truncated".into()));
            layout.members.push(MemberSpan { name, offset: data, size });
            break;
        }
        if pad > 0 {
            let mut p = vec![0u8; pad as usize];
            f.seek(SeekFrom::Start(data + size))?;
            f.read_exact(&mut p)?;
            if p.iter().any(|&b| b != 0) {
                layout.problems.push((name.clone(), "non-zero padding".into()));
            }
        }
        layout.members.push(MemberSpan { name, offset: data, size });
        pos = data + size + pad;
    }
    Ok(layout)
}

fn read_span(f: &mut File, span: &MemberSpan) -> io::Result<Vec<u8>> {
    let mut buf = vec![0u8; span.size as usize];
    f.seek(SeekFrom::Start(span.offset))?;
    f.read_exact(&mut buf)?;
    Ok(buf)
}

fn span_digest(f: &mut File, span: &MemberSpan) -> io::Result<ContentDigest> {
    f.seek(SeekFrom::Start(span.offset))?;
    let d = file_digest((&mut *f).take(span.size), DigestAlgorithm::Sha256)?;
    Ok(d.hex().parse().expect("sha256 digests are 64 hex characters"))
}

fn expected_order(manifest: &SliceManifest) -> Vec<String> {
    let mut names = vec![MANIFEST_NAME.to_string(), CATALOG_NAME.into(), SNAPSHOT_NAME.into()];
    names.extend(
        manifest
            .entries
            .iter()
            .filter(|e| e.name.starts_with(EXTERNAL_PREFIX))
            .map(|e| e.name.clone()),
    );
    names
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verify {
    /// Check every member digest while opening.
    Eager,
    /// Check the manifest, catalog and snapshot while opening; external
    /// files are checked when looked up.
    Lazy,
}

/// An opened slice. Answers the same queries as the store it came from,
/// for its selection, without access to that store.
pub struct SliceHandle {
    path: PathBuf,
    manifest: SliceManifest,
    catalog: FileCatalog,
    snapshot: Snapshot,
    members: BTreeMap<String, MemberSpan>,
}

impl std::fmt::Debug for SliceHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SliceHandle").field("path", &self.path).finish_non_exhaustive()
    }
}

pub fn open_slice(path: &Path, verify: Verify) -> Result<SliceHandle, ReleaseError> {
    let mut f = File::open(path)?;
    let layout = scan_layout(&mut f)?;
    if let Some((member, why)) = layout.problems.first() {
        return Err(ReleaseError::CorruptSlice(format!("{member}: {why}")));
    }
    let first = layout
        .members
        .first()
        .filter(|m| m.name == MANIFEST_NAME)
        .ok_or_else(|| ReleaseError::CorruptSlice("first member is not MANIFEST".into()))?;
    let text = String::from_utf8(read_span(&mut f, first)?)
        .map_err(|_| ReleaseError::CorruptSlice("manifest is not UTF-8".into()))?;
    let manifest = SliceManifest::parse(&text)?;

    let names: Vec<String> = layout.members.iter().map(|m| m.name.clone()).collect();
    if names != expected_order(&manifest) {
        return Err(ReleaseError::CorruptSlice("members do not match the manifest".into()));
    }
    let members: BTreeMap<String, MemberSpan> =
        layout.members.into_iter().map(|m| (m.name.clone(), m)).collect();
    for entry in &manifest.entries {
        let span = &members[&entry.name];
        if span.size != entry.size {
            return Err(ReleaseError::CorruptSlice(format!("{}: size mismatch", entry.name)));
        }
        let check = verify == Verify::Eager || !entry.name.starts_with(EXTERNAL_PREFIX);
        if check && entry.name != SNAPSHOT_NAME && span_digest(&mut f, span)? != entry.digest {
            return Err(ReleaseError::CorruptSlice(format!("{}: digest mismatch", entry.name)));
        }
    }

    let catalog_bytes = read_span(&mut f, &members[CATALOG_NAME])?;
    let catalog = FileCatalog::parse(
        std::str::from_utf8(&catalog_bytes)
            .map_err(|_| ReleaseError::CorruptSlice("catalog is not UTF-8".into()))?,
    )?;
    let snap_bytes: Arc<[u8]> = read_span(&mut f, &members[SNAPSHOT_NAME])?.into();
    let snap_entry = manifest.entry(SNAPSHOT_NAME).expect("order check ensures presence");
    if ContentDigest::of(&snap_bytes) != snap_entry.digest {
        return Err(ReleaseError::CorruptSlice(format!("{SNAPSHOT_NAME}: digest mismatch")));
    }
    let snapshot = Snapshot::from_bytes(snap_bytes)
        .map_err(|e| ReleaseError::CorruptSlice(format!("{SNAPSHOT_NAME}: {e}")))?;
    check_catalog(&manifest, &catalog, &snapshot).map_err(ReleaseError::CorruptSlice)?;

    Ok(SliceHandle {
        path: path.to_path_buf(),
        manifest,
        catalog,
        snapshot,
        members,
    })
}

/// Every external reference has a matching catalog entry, and every
/// bundled catalog entry agrees with the manifest.
fn check_catalog(manifest: &SliceManifest, catalog: &FileCatalog, snapshot: &Snapshot) -> Result<(), String> {
    for (name, ext) in snapshot.externals() {
        let entry = catalog
            .get(name)
            .ok_or_else(|| format!("external '{name}' has no catalog entry"))?;
        if entry.digest != ext.digest || entry.size != ext.size {
            return Err(format!("catalog entry for '{name}' disagrees with the snapshot"));
        }
    }
    if catalog.len() != snapshot.externals().len() {
        return Err("catalog lists names the snapshot does not reference".into());
    }
    for entry in catalog.entries() {
        match &entry.path {
            Some(member) => {
                let m = manifest
                    .entry(member)
                    .ok_or_else(|| format!("catalog path '{member}' is not a member"))?;
                if *member != format!("{EXTERNAL_PREFIX}{}", entry.logical_name)
                    || m.digest != entry.digest
                    || m.size != entry.size
                {
                    return Err(format!("catalog entry '{}' disagrees with the manifest", entry.logical_name));
                }
            }
            None if manifest.selection.include_external => {
                return Err(format!("'{}' should have been bundled", entry.logical_name));
            }
            None => {}
        }
    }
    Ok(())
}

impl SliceHandle {
    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn manifest(&self) -> &SliceManifest {
        &self.manifest
    }

    pub fn catalog(&self) -> &FileCatalog {
        &self.catalog
    }

    pub fn snapshot(&self) -> &Snapshot {
        &self.snapshot
    }

    /// SHA-256 of the whole archive file.
    pub fn archive_digest(&self) -> Result<ContentDigest, ReleaseError> {
        let d = file_digest(File::open(&self.path)?, DigestAlgorithm::Sha256)?;
        Ok(d.hex().parse().expect("sha256 digests are 64 hex characters"))
    }

    pub fn dump(&self) -> Result<ResultSet, ReadError> {
        self.snapshot.dump()
    }
}

impl ConditionsRead for SliceHandle {
    fn read_query(&self, q: &CanonicalQuery) -> Result<ResultSet, ReadError> {
        self.snapshot.read_query(q)
    }

    fn source_id(&self) -> String {
        format!("slice:{}", &self.snapshot.file_digest().to_hex()[..16])
    }

    fn immutable(&self) -> bool {
        true
    }
}

/// Returns the bytes of a bundled external file after checking them
/// against the catalog.
pub fn catalog_lookup(handle: &SliceHandle, logical_name: &str) -> Result<Vec<u8>, ReleaseError> {
    let entry = handle
        .catalog
        .get(logical_name)
        .ok_or_else(|| ReleaseError::UnknownLogicalName(logical_name.to_string()))?;
    let member = entry
        .path
        .as_ref()
        .ok_or_else(|| ReleaseError::NotBundled(logical_name.to_string()))?;
    let span = &handle.members[member];
    let data = File::open(&handle.path)
        .and_then(|mut f| read_span(&mut f, span))
        .map_err(|_| ReleaseError::CorruptMember(member.clone()))?;
    if data.len() as u64 != entry.size || ContentDigest::of(&data) != entry.digest {
        return Err(ReleaseError::CorruptMember(member.clone()));
    }
    Ok(data)
}

/// Recomputes every member digest and the snapshot trailer, and checks the
/// archive structure. Corruption is reported per item, never raised.
pub fn verify_slice(path: &Path) -> Result<VerificationReport, ReleaseError> {
    let mut report = VerificationReport::default();
    let mut f = File::open(path)?;
    let layout = scan_layout(&mut f)?;
    let mut structural: BTreeMap<&str, &str> = BTreeMap::new();
    for (member, why) in &layout.problems {
        structural.entry(member).or_insert(why);
    }
    let ok = "ok";
    match structural.get("archive") {
        Some(why) => report.fail("archive", ok, *why),
        None => report.push("archive", ok, ok),
    }

    let manifest = layout
        .members
        .iter()
        .find(|m| m.name == MANIFEST_NAME)
        .ok_or_else(|| "no MANIFEST member".to_string())
        .and_then(|span| {
            if let Some(why) = structural.get(MANIFEST_NAME) {
                return Err(why.to_string());
            }
            let bytes = read_span(&mut f, span).map_err(|e| e.to_string())?;
            let text = String::from_utf8(bytes).map_err(|_| "not UTF-8".to_string())?;
            SliceManifest::parse(&text).map_err(|e| e.to_string())
        });
    let manifest = match manifest {
        Ok(m) => {
            report.push(MANIFEST_NAME, ok, ok);
            m
        }
        Err(why) => {
            report.fail(MANIFEST_NAME, ok, why);
            for span in &layout.members {
                if span.name != MANIFEST_NAME {
                    report.fail(span.name.clone(), "listed in manifest", "manifest unusable");
                }
            }
            return Ok(report);
        }
    };

    let names: Vec<String> = layout.members.iter().map(|m| m.name.clone()).collect();
    let order = expected_order(&manifest);
    if names == order {
        report.push("layout", ok, ok);
    } else {
        report.fail("layout", order.join(","), names.join(","));
    }

    let spans: BTreeMap<&str, &MemberSpan> = layout.members.iter().map(|m| (m.name.as_str(), m)).collect();
    for span in &layout.members {
        if span.name != MANIFEST_NAME && manifest.entry(&span.name).is_none() {
            report.fail(span.name.clone(), "listed in manifest", "not listed");
        }
    }
    let mut snapshot = None;
    for entry in &manifest.entries {
        let expected = format!("{} {}", entry.size, entry.digest);
        let Some(span) = spans.get(entry.name.as_str()) else {
            report.fail(entry.name.clone(), expected, "missing");
            continue;
        };
        if let Some(why) = structural.get(entry.name.as_str()) {
            report.fail(entry.name.clone(), expected, *why);
            continue;
        }
        let digest = span_digest(&mut f, span)?;
        report.push(entry.name.clone(), expected, format!("{} {}", span.size, digest));
        if entry.name == SNAPSHOT_NAME {
            let bytes = read_span(&mut f, span)?;
            match Snapshot::from_bytes(bytes) {
                Ok(s) => {
                    report.push("snapshot.iov:trailer", ok, ok);
                    snapshot = Some(s);
                }
                Err(e) => report.fail("snapshot.iov:trailer", ok, e.to_string()),
            }
        }
    }

    let catalog = spans
        .get(CATALOG_NAME)
        .filter(|_| !structural.contains_key(CATALOG_NAME))
        .ok_or_else(|| "catalog member unusable".to_string())
        .and_then(|span| {
            let bytes = read_span(&mut f, span).map_err(|e| e.to_string())?;
            let text = String::from_utf8(bytes).map_err(|_| "not UTF-8".to_string())?;
            FileCatalog::parse(&text).map_err(|e| e.to_string())
        });
    match (catalog, snapshot) {
        (Ok(catalog), Some(snapshot)) => match check_catalog(&manifest, &catalog, &snapshot) {
            Ok(()) => report.push("catalog:resolvable", ok, ok),
            Err(why) => report.fail("catalog:resolvable", ok, why),
        },
        (Err(why), _) => report.fail("catalog:resolvable", ok, why),
        (_, None) => report.fail("catalog:resolvable", ok, "snapshot unusable"),
    }
    Ok(report)
}
