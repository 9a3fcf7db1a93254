//! The master conditions store.
//!
//! Directory layout (format `iovstore`, version 1):
//!
//! ```text
//! STORE.json            store manifest: format, version, id, partitions
//! tags.json             hierarchical tag document, rewritten atomically
//! index.json            checkpoint of the replayed state, rewritten periodically
//! logs/<partition>.log  append-only record log, one per partition
//! objects/ab/cdef...    inline payload objects, content addressed (SHA-256)
//! external/<name>       registered external payload files
//! LOCK                  held exclusively by the single writer
//! ```
//!
//! Log frames are `u32 len | u32 crc32 | JSON entry`. A commit writes its
//! payload object first and its log frame second, so a crash in between
//! leaves at most an unreferenced object. An incomplete trailing frame is
//! treated as never written.
//!
//! There is no delete or update path: the only mutations are new
//! partitions, new folders, new tags and extend-only commits.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, MutexGuard, RwLock, RwLockReadGuard};

use serde::{Deserialize, Serialize};

use crate::integrity::{ContentDigest, VerificationReport};
use crate::model::{
    ChannelId, ConditionsState, ConditionsView, FolderSpec, FoldersetTree, IovInterval,
    IovSequence, ModelError, NodePath, PayloadRef, SequenceKey, TagName, TagNode, TagTree,
    ValidityPoint,
};
use crate::object::{decode_object, encode_object, object_header};
use crate::query::{
    evaluate, CanonicalQuery, ConditionsRead, PayloadSource, ReadError, ResultRow, ResultSet,
};
use crate::snapshot::{write_snapshot, ExternalEntry, SnapshotContents};

pub const STORE_FORMAT: &str = "iovstore";
pub const STORE_VERSION: u32 = 1;

const MANIFEST_FILE: &str = "STORE.json";
const TAGS_FILE: &str = "tags.json";
const INDEX_FILE: &str = "index.json";
const LOCK_FILE: &str = "LOCK";
const LOGS_DIR: &str = "logs";
const OBJECTS_DIR: &str = "objects";
const EXTERNAL_DIR: &str = "external";
const TMP_DIR: &str = "tmp";

/// Schema id given to payloads stored outside of a commit.
pub const OPAQUE_SCHEMA: &str = "opaque";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("unknown partition '{0}'")]
    UnknownPartition(String),
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("policy violation: {0}")]
    PolicyViolation(String),
    #[error("store handle is read-only")]
    ReadOnly,
    #[error("store is locked by another writer")]
    Locked,
    #[error("no store at {0}")]
    NotFound(PathBuf),
    #[error("unsupported store format: {0}")]
    UnsupportedVersion(String),
    #[error("corrupt store: {0}")]
    Corrupt(String),
    #[error("missing external file '{0}'")]
    MissingExternalFile(String),
    #[error("injected fault: {0}")]
    InjectedFault(&'static str),
    #[error("store handle unusable after an interrupted write; reopen it")]
    Poisoned,
    #[error("malformed request: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl From<ReadError> for StoreError {
    fn from(e: ReadError) -> Self {
        match e {
            ReadError::Model(m) => StoreError::Model(m),
            ReadError::Io(io) => StoreError::Io(io),
            ReadError::Corrupt(c) => StoreError::Corrupt(c),
            ReadError::MalformedQuery(m) => StoreError::Malformed(m),
        }
    }
}

impl From<StoreError> for ReadError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Model(m) => ReadError::Model(m),
            StoreError::Io(io) => ReadError::Io(io),
            StoreError::Malformed(m) => ReadError::MalformedQuery(m),
            other => ReadError::Corrupt(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionRole {
    Online,
    Offline,
    Simulation,
}

impl PartitionRole {
    pub(crate) fn code(self) -> u8 {
        match self {
            PartitionRole::Online => 0,
            PartitionRole::Offline => 1,
            PartitionRole::Simulation => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(PartitionRole::Online),
            1 => Some(PartitionRole::Offline),
            2 => Some(PartitionRole::Simulation),
            _ => None,
        }
    }
}

impl std::str::FromStr for PartitionRole {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "online" => Ok(PartitionRole::Online),
            "offline" => Ok(PartitionRole::Offline),
            "simulation" => Ok(PartitionRole::Simulation),
            other => Err(StoreError::InvalidPartition(format!("unknown role '{other}'"))),
        }
    }
}

/// A named namespace owning one folderset subtree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub name: String,
    pub role: PartitionRole,
    pub root: NodePath,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FolderSelection {
    All,
    List(Vec<NodePath>),
}

/// What a snapshot or slice contains.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub folders: FolderSelection,
    /// Start node and tag used to pick one leaf tag per folder; `None`
    /// keeps every leaf tag and every hierarchical tag.
    pub tag: Option<(NodePath, TagName)>,
    pub iov_range: IovInterval,
    pub include_external: bool,
}

impl Selection {
    pub fn everything() -> Self {
        Self {
            folders: FolderSelection::All,
            tag: None,
            iov_range: IovInterval::everything(),
            include_external: true,
        }
    }

    pub fn tagged(start: NodePath, tag: TagName) -> Self {
        Self {
            tag: Some((start, tag)),
            ..Self::everything()
        }
    }

    /// Sorted, de-duplicated folder list; `List([])` is rejected.
    pub fn normalized(mut self) -> Result<Self, StoreError> {
        if let FolderSelection::List(list) = &mut self.folders {
            if list.is_empty() {
                return Err(StoreError::Malformed("empty folder selection".into()));
            }
            list.sort();
            list.dedup();
        }
        Ok(self)
    }
}

/// Test hook: make the next commit fail part-way, as a crash would.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultPoint {
    /// After the payload object is durable, before the log frame.
    AfterPayloadWrite,
    /// Write only the first `keep` bytes of the log frame.
    TornLogWrite { keep: usize },
}

#[derive(Debug, Clone)]
pub struct StoreOptions {
    /// fsync objects, logs and documents.
    pub sync: bool,
    pub read_only: bool,
    /// Rewrite the index after this many log entries.
    pub checkpoint_interval: u64,
    pub fault: Option<FaultPoint>,
}

impl Default for StoreOptions {
    fn default() -> Self {
        Self {
            sync: true,
            read_only: false,
            checkpoint_interval: 4096,
            fault: None,
        }
    }
}

impl StoreOptions {
    pub fn read_only() -> Self {
        Self {
            read_only: true,
            ..Self::default()
        }
    }

    /// No fsync; for generated stores and tests.
    pub fn fast() -> Self {
        Self {
            sync: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CommitPayload {
    Inline(Vec<u8>),
    External {
        logical_name: String,
        digest: ContentDigest,
        size: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitRequest {
    pub folder: NodePath,
    pub channel: ChannelId,
    pub leaf_tag: TagName,
    pub since: ValidityPoint,
    pub payload: CommitPayload,
    pub author: String,
    pub comment: String,
}

impl CommitRequest {
    pub fn inline(folder: NodePath, leaf_tag: TagName, since: u64, data: Vec<u8>) -> Self {
        Self {
            folder,
            channel: crate::model::DEFAULT_CHANNEL,
            leaf_tag,
            since: ValidityPoint(since),
            payload: CommitPayload::Inline(data),
            author: String::new(),
            comment: String::new(),
        }
    }

    pub fn on_channel(mut self, channel: ChannelId) -> Self {
        self.channel = channel;
        self
    }
}

/// Requests the public API refuses unconditionally.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Mutation {
    DeleteRecord { key: SequenceKey, insertion_index: u64 },
    UpdateRecord { key: SequenceKey, insertion_index: u64, payload: PayloadRef },
    DeletePayload(ContentDigest),
    OverwritePayload { digest: ContentDigest, data: Vec<u8> },
    DeleteFolder(NodePath),
    ChangeFolderSchema { folder: NodePath, schema_id: String },
    DeleteTag { owner: NodePath, name: TagName },
    RepointLeafTag { folder: NodePath, tag: TagName, target: SequenceKey },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoreManifest {
    format: String,
    version: u32,
    id: String,
    partitions: Vec<Partition>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum LogEntry {
    CreateFolder {
        path: NodePath,
        spec: FolderSpec,
    },
    Commit {
        folder: NodePath,
        channel: ChannelId,
        leaf_tag: TagName,
        since: ValidityPoint,
        payload: PayloadRef,
        insertion_index: u64,
        author: String,
        comment: String,
    },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct LogMark {
    offset: u64,
    crc: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexFile {
    format: String,
    version: u32,
    folders: FoldersetTree,
    sequences: Vec<IovSequence>,
    logs: BTreeMap<String, LogMark>,
}

#[derive(Clone)]
struct LogCursor {
    offset: u64,
    crc: crc32fast::Hasher,
}

impl LogCursor {
    fn new() -> Self {
        Self {
            offset: 0,
            crc: crc32fast::Hasher::new(),
        }
    }

    fn advance(&mut self, bytes: &[u8]) {
        self.offset += bytes.len() as u64;
        self.crc.update(bytes);
    }

    fn mark(&self) -> LogMark {
        LogMark {
            offset: self.offset,
            crc: self.crc.clone().finalize(),
        }
    }
}

struct Inner {
    manifest: StoreManifest,
    state: ConditionsState,
    cursors: BTreeMap<String, LogCursor>,
    entries_since_checkpoint: u64,
}

impl Inner {
    fn partition_of(&self, folder: &NodePath) -> Option<&Partition> {
        self.manifest
            .partitions
            .iter()
            .find(|p| p.root.is_prefix_of(folder))
    }
}

struct Writer {
    poisoned: bool,
}

/// A handle on a store directory. Reads may run concurrently from many
/// threads; writes are serialized.
pub struct Store {
    root: PathBuf,
    options: StoreOptions,
    inner: RwLock<Inner>,
    writer: Mutex<Writer>,
    _lock: Option<File>,
    tmp_counter: AtomicU64,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("root", &self.root).finish_non_exhaustive()
    }
}

fn write_atomic(root: &Path, target: &Path, bytes: &[u8], sync: bool) -> io::Result<()> {
    let tmp = root.join(TMP_DIR).join(format!(
        "{}.{}.tmp",
        target.file_name().and_then(|n| n.to_str()).unwrap_or("doc"),
        std::process::id()
    ));
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        if sync {
            f.sync_all()?;
        }
    }
    fs::rename(&tmp, target)?;
    if sync {
        if let Some(dir) = target.parent() {
            File::open(dir)?.sync_all()?;
        }
    }
    Ok(())
}

fn frame(entry: &LogEntry) -> Vec<u8> {
    let body = serde_json::to_vec(entry).expect("log entries always serialize");
    let mut out = Vec::with_capacity(body.len() + 8);
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&crate::integrity::buffer_checksum(&body).0.to_le_bytes());
    out.extend_from_slice(&body);
    out
}

/// Splits `bytes` into complete frames. Returns the entries and the length
/// of the valid prefix; an incomplete tail is ignored, a complete frame
/// with a bad checksum is corruption.
fn parse_frames(bytes: &[u8], base: u64) -> Result<(Vec<(LogEntry, usize)>, usize), StoreError> {
    let mut entries = Vec::new();
    let mut pos = 0usize;
    while bytes.len() - pos >= 8 {
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes")) as usize;
        let crc = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().expect("4 bytes"));
        if bytes.len() - pos - 8 < len {
            break;
        }
        let body = &bytes[pos + 8..pos + 8 + len];
        if crate::integrity::buffer_checksum(body).0 != crc {
            return Err(StoreError::Corrupt(format!(
                "log frame at offset {} fails its checksum",
                base + pos as u64
            )));
        }
        let entry: LogEntry = serde_json::from_slice(body).map_err(|e| {
            StoreError::Corrupt(format!("log frame at offset {}: {e}", base + pos as u64))
        })?;
        entries.push((entry, 8 + len));
        pos += 8 + len;
    }
    Ok((entries, pos))
}

fn apply_entry(state: &mut ConditionsState, entry: LogEntry) -> Result<(), StoreError> {
    match entry {
        LogEntry::CreateFolder { path, spec } => state.folders.add_folder(path, spec)?,
        LogEntry::Commit {
            folder,
            channel,
            leaf_tag,
            since,
            payload,
            insertion_index,
            ..
        } => {
            let key = SequenceKey {
                folder: folder.clone(),
                channel,
                leaf_tag: leaf_tag.clone(),
            };
            let seq = state
                .sequences
                .entry(key)
                .or_insert_with(|| IovSequence::new(folder, channel, leaf_tag));
            let record = seq.push_iov(since, payload)?;
            if record.insertion_index != insertion_index {
                return Err(StoreError::Corrupt(format!(
                    "insertion index {insertion_index} replayed as {}",
                    record.insertion_index
                )));
            }
        }
    }
    Ok(())
}

impl Store {
    /// Creates an empty store directory. `id` defaults to a random UUID
    /// supplied by the caller's choice of generator; pass one explicitly
    /// for reproducible stores.
    pub fn init(root: &Path, id: &str, options: StoreOptions) -> Result<Store, StoreError> {
        if root.join(MANIFEST_FILE).exists() {
            return Err(ModelError::AlreadyExists(format!("store at {}", root.display())).into());
        }
        if id.is_empty() || id.chars().any(|c| c.is_whitespace()) {
            return Err(StoreError::Malformed(format!("bad store id '{id}'")));
        }
        for dir in [LOGS_DIR, OBJECTS_DIR, EXTERNAL_DIR, TMP_DIR] {
            fs::create_dir_all(root.join(dir))?;
        }
        let manifest = StoreManifest {
            format: STORE_FORMAT.into(),
            version: STORE_VERSION,
            id: id.into(),
            partitions: Vec::new(),
        };
        write_atomic(
            root,
            &root.join(TAGS_FILE),
            b"[]\n",
            options.sync,
        )?;
        write_atomic(
            root,
            &root.join(MANIFEST_FILE),
            &serde_json::to_vec_pretty(&manifest).expect("manifest serializes"),
            options.sync,
        )?;
        Self::open(root, options)
    }

    pub fn open(root: &Path, options: StoreOptions) -> Result<Store, StoreError> {
        let manifest = read_manifest(root)?;
        let lock = if options.read_only {
            None
        } else {
            let f = OpenOptions::new()
                .create(true)
                .truncate(false)
                .write(true)
                .open(root.join(LOCK_FILE))?;
            f.try_lock().map_err(|e| match e {
                fs::TryLockError::WouldBlock => StoreError::Locked,
                fs::TryLockError::Error(io) => StoreError::Io(io),
            })?;
            Some(f)
        };
        let mut inner = Inner {
            manifest,
            state: ConditionsState::default(),
            cursors: BTreeMap::new(),
            entries_since_checkpoint: 0,
        };
        load_index(root, &mut inner);
        let store = Store {
            root: root.to_path_buf(),
            options,
            inner: RwLock::new(inner),
            writer: Mutex::new(Writer { poisoned: false }),
            _lock: lock,
            tmp_counter: AtomicU64::new(0),
        };
        store.refresh()?;
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn id(&self) -> String {
        self.read_inner().manifest.id.clone()
    }

    pub fn partitions(&self) -> Vec<Partition> {
        self.read_inner().manifest.partitions.clone()
    }

    /// Runs `f` against a consistent view of the current state.
    pub fn with_state<R>(&self, f: impl FnOnce(&ConditionsState) -> R) -> R {
        f(&self.read_inner().state)
    }

    fn read_inner(&self) -> RwLockReadGuard<'_, Inner> {
        self.inner.read().unwrap_or_else(|e| e.into_inner())
    }

    fn writer(&self) -> Result<MutexGuard<'_, Writer>, StoreError> {
        if self.options.read_only {
            return Err(StoreError::ReadOnly);
        }
        let w = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        if w.poisoned {
            return Err(StoreError::Poisoned);
        }
        Ok(w)
    }

    /// Picks up partitions, tags and log entries written since the last
    /// refresh (by this or another handle).
    pub fn refresh(&self) -> Result<(), StoreError> {
        let manifest = read_manifest(&self.root)?;
        let tags = read_tags(&self.root)?;
        let mut inner = self.inner.write().unwrap_or_else(|e| e.into_inner());
        inner.manifest = manifest;
        inner.state.tags = tags;
        let names: Vec<String> = inner.manifest.partitions.iter().map(|p| p.name.clone()).collect();
        for name in names {
            let path = self.log_path(&name);
            let mut cursor = inner.cursors.get(&name).cloned().unwrap_or_else(LogCursor::new);
            let tail = match File::open(&path) {
                Ok(mut f) => {
                    let len = f.metadata()?.len();
                    if len < cursor.offset {
                        return Err(StoreError::Corrupt(format!("log {name} shrank")));
                    }
                    if len == cursor.offset {
                        inner.cursors.insert(name, cursor);
                        continue;
                    }
                    io::Seek::seek(&mut f, io::SeekFrom::Start(cursor.offset))?;
                    let mut buf = Vec::with_capacity((len - cursor.offset) as usize);
                    f.read_to_end(&mut buf)?;
                    buf
                }
                Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
                Err(e) => return Err(e.into()),
            };
            let (entries, valid) = parse_frames(&tail, cursor.offset)?;
            let mut applied = 0u64;
            let mut pos = 0usize;
            for (entry, len) in entries {
                apply_entry(&mut inner.state, entry)?;
                cursor.advance(&tail[pos..pos + len]);
                pos += len;
                applied += 1;
            }
            debug_assert_eq!(pos, valid);
            if valid < tail.len() && !self.options.read_only {
                // Torn trailing frame from an interrupted commit.
                let f = OpenOptions::new().write(true).open(&path)?;
                f.set_len(cursor.offset)?;
                if self.options.sync {
                    f.sync_all()?;
                }
            }
            inner.entries_since_checkpoint += applied;
            inner.cursors.insert(name, cursor);
        }
        Ok(())
    }

    fn log_path(&self, partition: &str) -> PathBuf {
        self.root.join(LOGS_DIR).join(format!("{partition}.log"))
    }

    fn object_path(&self, digest: &ContentDigest) -> PathBuf {
        let hex = digest.to_hex();
        self.root.join(OBJECTS_DIR).join(&hex[..2]).join(&hex[2..])
    }

    pub fn create_partition(
        &self,
        name: &str,
        role: PartitionRole,
        root: NodePath,
    ) -> Result<(), StoreError> {
        let _w = self.writer()?;
        let valid = !name.is_empty()
            && name.len() <= 64
            && name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        if !valid {
            return Err(StoreError::InvalidPartition(format!("bad name '{name}'")));
        }
        let mut manifest = self.read_inner().manifest.clone();
        if manifest.partitions.iter().any(|p| p.name == name) {
            return Err(ModelError::AlreadyExists(format!("partition '{name}'")).into());
        }
        if let Some(p) = manifest
            .partitions
            .iter()
            .find(|p| p.root.is_prefix_of(&root) || root.is_prefix_of(&p.root))
        {
            return Err(StoreError::InvalidPartition(format!(
                "root {root} overlaps partition '{}' at {}",
                p.name, p.root
            )));
        }
        manifest.partitions.push(Partition {
            name: name.to_string(),
            role,
            root,
        });
        write_atomic(
            &self.root,
            &self.root.join(MANIFEST_FILE),
            &serde_json::to_vec_pretty(&manifest).expect("manifest serializes"),
            self.options.sync,
        )?;
        let mut inner = self.inner.write().unwrap_or_else(|e| e.into_inner());
        inner.manifest = manifest;
        inner.cursors.entry(name.to_string()).or_insert_with(LogCursor::new);
        Ok(())
    }

    pub fn create_folder(
        &self,
        partition: &str,
        path: NodePath,
        schema_id: &str,
        channels: &[ChannelId],
    ) -> Result<(), StoreError> {
        let mut w = self.writer()?;
        let spec = FolderSpec::new(schema_id, channels.iter().copied());
        {
            let inner = self.read_inner();
            let p = inner
                .manifest
                .partitions
                .iter()
                .find(|p| p.name == partition)
                .ok_or_else(|| StoreError::UnknownPartition(partition.to_string()))?;
            if !p.root.is_prefix_of(&path) || p.root == path {
                return Err(StoreError::InvalidPartition(format!(
                    "{path} is not inside partition '{partition}' ({})",
                    p.root
                )));
            }
            inner.state.folders.check_add(&path, &spec)?;
        }
        self.append(&mut w, partition, LogEntry::CreateFolder { path, spec })
    }

    /// Stores `data` as a content-addressed inline object. Idempotent.
    pub fn put_payload(&self, data: &[u8]) -> Result<PayloadRef, StoreError> {
        let _w = self.writer()?;
        let digest = self.write_object(data)?;
        Ok(PayloadRef::inline(digest, data.len() as u64, OPAQUE_SCHEMA))
    }

    fn write_object(&self, data: &[u8]) -> Result<ContentDigest, StoreError> {
        let digest = ContentDigest::of(data);
        let path = self.object_path(&digest);
        if path.exists() {
            return Ok(digest);
        }
        let dir = path.parent().expect("object paths have a parent");
        fs::create_dir_all(dir)?;
        let tmp = self.root.join(TMP_DIR).join(format!(
            "obj.{}.{}.{}",
            &digest.to_hex()[..16],
            std::process::id(),
            self.tmp_counter.fetch_add(1, Ordering::Relaxed)
        ));
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&encode_object(data))?;
            if self.options.sync {
                f.sync_all()?;
            }
        }
        fs::rename(&tmp, &path)?;
        if self.options.sync {
            File::open(dir)?.sync_all()?;
        }
        Ok(digest)
    }

    /// Reads an inline object, checking size, CRC-32 and content digest.
    pub fn get_payload(&self, digest: &ContentDigest) -> Result<Vec<u8>, StoreError> {
        let raw = self.raw_object(digest)?;
        let data = decode_object(&raw)
            .map_err(|e| StoreError::Corrupt(format!("object {digest}: {e}")))?;
        if ContentDigest::of(&data) != *digest {
            return Err(StoreError::Corrupt(format!("object {digest}: digest mismatch")));
        }
        Ok(data)
    }

    fn raw_object(&self, digest: &ContentDigest) -> Result<Vec<u8>, StoreError> {
        fs::read(self.object_path(digest)).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => StoreError::Corrupt(format!("object {digest} is missing")),
            _ => StoreError::Io(e),
        })
    }

    pub fn object_count(&self) -> Result<usize, StoreError> {
        let mut n = 0;
        for fan in fs::read_dir(self.root.join(OBJECTS_DIR))? {
            let fan = fan?;
            if fan.file_type()?.is_dir() {
                n += fs::read_dir(fan.path())?.count();
            }
        }
        Ok(n)
    }

    /// Registers an external payload file under `logical_name`. Registering
    /// the same content again is a no-op; different content is refused.
    pub fn register_external(
        &self,
        logical_name: &str,
        data: &[u8],
    ) -> Result<(ContentDigest, u64), StoreError> {
        let _w = self.writer()?;
        crate::model::validate_logical_name(logical_name)?;
        let digest = ContentDigest::of(data);
        let path = self.root.join(EXTERNAL_DIR).join(logical_name);
        if path.exists() {
            let existing = fs::read(&path)?;
            if ContentDigest::of(&existing) != digest {
                return Err(StoreError::PolicyViolation(format!(
                    "external file '{logical_name}' already registered with different content"
                )));
            }
            return Ok((digest, data.len() as u64));
        }
        fs::create_dir_all(path.parent().expect("external paths have a parent"))?;
        write_atomic(&self.root, &path, data, self.options.sync)?;
        Ok((digest, data.len() as u64))
    }

    /// Location where a registered external file would live.
    pub fn external_path(&self, logical_name: &str) -> PathBuf {
        self.root.join(EXTERNAL_DIR).join(logical_name)
    }

    /// Appends one IOV to the sequence named by the request, creating the
    /// leaf tag on first use.
    pub fn commit(&self, req: CommitRequest) -> Result<crate::model::IovRecord, StoreError> {
        let mut w = self.writer()?;
        let (partition, payload, insertion_index) = {
            let inner = self.read_inner();
            let spec = inner
                .state
                .folders
                .folder(&req.folder)
                .ok_or_else(|| ModelError::UnknownFolder(req.folder.clone()))?;
            if !spec.channels.contains(&req.channel) {
                return Err(ModelError::UnknownChannel {
                    folder: req.folder.clone(),
                    channel: req.channel,
                }
                .into());
            }
            IovInterval::open_from(req.since)?;
            let key = SequenceKey {
                folder: req.folder.clone(),
                channel: req.channel,
                leaf_tag: req.leaf_tag.clone(),
            };
            let last = inner.state.sequences.get(&key).and_then(|s| s.last());
            if let Some(last) = last {
                if req.since <= last.interval.since() {
                    return Err(ModelError::ExtendOnlyViolation {
                        last_since: last.interval.since(),
                        since: req.since,
                    }
                    .into());
                }
            }
            let payload = match &req.payload {
                CommitPayload::Inline(data) => PayloadRef::inline(
                    ContentDigest::of(data),
                    data.len() as u64,
                    spec.schema_id.clone(),
                ),
                CommitPayload::External {
                    logical_name,
                    digest,
                    size,
                } => PayloadRef::external(logical_name.clone(), *digest, *size, spec.schema_id.clone())?,
            };
            let partition = inner
                .partition_of(&req.folder)
                .ok_or_else(|| StoreError::Corrupt(format!("{} has no partition", req.folder)))?
                .name
                .clone();
            (partition, payload, last.map_or(0, |r| r.insertion_index + 1))
        };
        if let CommitPayload::Inline(data) = &req.payload {
            self.write_object(data)?;
        }
        if self.options.fault == Some(FaultPoint::AfterPayloadWrite) {
            w.poisoned = true;
            return Err(StoreError::InjectedFault("crash after payload write"));
        }
        let entry = LogEntry::Commit {
            folder: req.folder.clone(),
            channel: req.channel,
            leaf_tag: req.leaf_tag.clone(),
            since: req.since,
            payload,
            insertion_index,
            author: req.author,
            comment: req.comment,
        };
        self.append(&mut w, &partition, entry)?;
        let inner = self.read_inner();
        let key = SequenceKey {
            folder: req.folder,
            channel: req.channel,
            leaf_tag: req.leaf_tag,
        };
        Ok(inner.state.sequences[&key]
            .last()
            .expect("record just committed")
            .clone())
    }

    fn append(&self, w: &mut Writer, partition: &str, entry: LogEntry) -> Result<(), StoreError> {
        let bytes = frame(&entry);
        let path = self.log_path(partition);
        let result = (|| -> Result<(), StoreError> {
            let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
            if let Some(FaultPoint::TornLogWrite { keep }) = self.options.fault {
                f.write_all(&bytes[..keep.min(bytes.len().saturating_sub(1))])?;
                return Err(StoreError::InjectedFault("torn log write"));
            }
            f.write_all(&bytes)?;
            if self.options.sync {
                f.sync_data()?;
            }
            Ok(())
        })();
        if let Err(e) = result {
            // The log may now end in a partial frame; only a reopen repairs it.
            w.poisoned = true;
            return Err(e);
        }
        let mut inner = self.inner.write().unwrap_or_else(|e| e.into_inner());
        apply_entry(&mut inner.state, entry)?;
        inner
            .cursors
            .entry(partition.to_string())
            .or_insert_with(LogCursor::new)
            .advance(&bytes);
        inner.entries_since_checkpoint += 1;
        if inner.entries_since_checkpoint >= self.options.checkpoint_interval {
            self.write_index(&mut inner)?;
        }
        Ok(())
    }

    /// Rewrites the index so the next open replays nothing.
    pub fn checkpoint(&self) -> Result<(), StoreError> {
        let _w = self.writer()?;
        let mut inner = self.inner.write().unwrap_or_else(|e| e.into_inner());
        self.write_index(&mut inner)
    }

    fn write_index(&self, inner: &mut Inner) -> Result<(), StoreError> {
        let index = IndexFile {
            format: STORE_FORMAT.into(),
            version: STORE_VERSION,
            folders: inner.state.folders.clone(),
            sequences: inner.state.sequences.values().cloned().collect(),
            logs: inner
                .cursors
                .iter()
                .map(|(k, c)| (k.clone(), c.mark()))
                .collect(),
        };
        write_atomic(
            &self.root,
            &self.root.join(INDEX_FILE),
            &serde_json::to_vec(&index).expect("index serializes"),
            self.options.sync,
        )?;
        inner.entries_since_checkpoint = 0;
        Ok(())
    }

    /// Adds a hierarchical tag. Re-defining an existing tag identically is
    /// a no-op; any other change to it is a policy violation.
    pub fn define_tag(&self, node: TagNode) -> Result<(), StoreError> {
        let _w = self.writer()?;
        let mut tags = {
            let inner = self.read_inner();
            if let Some(existing) = inner.state.tags.get(&node.owner, &node.name) {
                if *existing == node.associations {
                    return Ok(());
                }
                return Err(StoreError::PolicyViolation(format!(
                    "tag '{}' at {} already exists with different associations",
                    node.name, node.owner
                )));
            }
            inner.state.tags.validate(&node, &inner.state.folders, |f, t| {
                inner.state.leaf_tag_exists(f, t)
            })?;
            inner.state.tags.clone()
        };
        tags.insert(node)?;
        let doc: Vec<TagNode> = tags.nodes().collect();
        write_atomic(
            &self.root,
            &self.root.join(TAGS_FILE),
            &serde_json::to_vec_pretty(&doc).expect("tags serialize"),
            self.options.sync,
        )?;
        self.inner.write().unwrap_or_else(|e| e.into_inner()).state.tags = tags;
        Ok(())
    }

    /// Deletion and in-place update are not part of the API.
    pub fn mutate(&self, request: Mutation) -> Result<(), StoreError> {
        let what = match request {
            Mutation::DeleteRecord { .. } => "records cannot be deleted",
            Mutation::UpdateRecord { .. } => "records cannot be updated",
            Mutation::DeletePayload(_) => "payload objects cannot be deleted",
            Mutation::OverwritePayload { .. } => "payload objects cannot be overwritten",
            Mutation::DeleteFolder(_) => "folders cannot be deleted",
            Mutation::ChangeFolderSchema { .. } => "folder schemas are immutable",
            Mutation::DeleteTag { .. } => "tags cannot be deleted",
            Mutation::RepointLeafTag { .. } => "leaf tags cannot be re-pointed",
        };
        Err(StoreError::PolicyViolation(what.to_string()))
    }

    /// Folders owned by a partition.
    pub fn partition_folders(&self, partition: &str) -> Result<Vec<NodePath>, StoreError> {
        let inner = self.read_inner();
        let p = inner
            .manifest
            .partitions
            .iter()
            .find(|p| p.name == partition)
            .ok_or_else(|| StoreError::UnknownPartition(partition.to_string()))?;
        Ok(inner
            .state
            .folders
            .folders_under(&p.root)
            .map(|(f, _)| f.clone())
            .collect())
    }

    /// Every record, with inline payloads.
    pub fn dump(&self) -> Result<ResultSet, StoreError> {
        let inner = self.read_inner();
        Ok(dump_state(&inner.state, self)?)
    }

    /// Builds the contents of a snapshot of `selection` from one consistent
    /// view of the store.
    pub fn snapshot_contents(&self, selection: &Selection) -> Result<SnapshotContents, StoreError> {
        let selection = selection.clone().normalized()?;
        let inner = self.read_inner();
        let state = &inner.state;

        if let Some((start, tag)) = &selection.tag {
            let known = if state.folders.is_folder(start) {
                state.leaf_tag_exists(start, tag)
            } else {
                state.tags.contains(start, tag)
            };
            if !known {
                return Err(ModelError::UnknownTag {
                    node: start.clone(),
                    tag: tag.clone(),
                }
                .into());
            }
        }
        let scope = selection
            .tag
            .as_ref()
            .map(|(s, _)| s.clone())
            .unwrap_or_else(NodePath::root);
        let candidates: Vec<NodePath> = match &selection.folders {
            FolderSelection::All => state.folders.folders_under(&scope).map(|(f, _)| f.clone()).collect(),
            FolderSelection::List(list) => {
                for f in list {
                    if !state.folders.is_folder(f) {
                        return Err(ModelError::UnknownFolder(f.clone()).into());
                    }
                    if !scope.is_prefix_of(f) {
                        return Err(ModelError::NotDescendant {
                            start: scope.clone(),
                            folder: f.clone(),
                        }
                        .into());
                    }
                }
                list.clone()
            }
        };

        let mut out = ConditionsState {
            window: Some(selection.iov_range),
            ..Default::default()
        };
        let mut chosen: BTreeMap<&NodePath, Option<TagName>> = BTreeMap::new();
        for folder in &candidates {
            let leaf = match &selection.tag {
                Some((start, tag)) => match state.tags.resolve(start, tag, folder) {
                    Ok(leaf) => Some(leaf),
                    Err(_) if selection.folders == FolderSelection::All => continue,
                    Err(e) => return Err(e.into()),
                },
                None => None,
            };
            let spec = state.folders.folder(folder).expect("candidate folders exist");
            out.folders.add_folder(folder.clone(), spec.clone())?;
            chosen.insert(folder, leaf);
        }
        for (key, seq) in &state.sequences {
            let keep = match chosen.get(&key.folder) {
                Some(Some(leaf)) => leaf == &key.leaf_tag,
                Some(None) => true,
                None => false,
            };
            if keep {
                out.sequences
                    .insert(key.clone(), seq.restricted(&selection.iov_range));
            }
        }
        match &selection.tag {
            Some((start, tag)) => {
                for node in state.tags.reachable(start, tag) {
                    out.tags.insert(node)?;
                }
            }
            None => out.tags = state.tags.clone(),
        }

        let mut objects = BTreeMap::new();
        let mut externals = BTreeMap::new();
        for seq in out.sequences.values() {
            for r in seq.records() {
                let p = &r.payload;
                match p.logical_name() {
                    None => {
                        if !objects.contains_key(&p.digest) {
                            let raw = self.raw_object(&p.digest)?;
                            let data = decode_object(&raw).map_err(|e| {
                                StoreError::Corrupt(format!("object {}: {e}", p.digest))
                            })?;
                            if ContentDigest::of(&data) != p.digest {
                                return Err(StoreError::Corrupt(format!(
                                    "object {} fails its digest",
                                    p.digest
                                )));
                            }
                            objects.insert(p.digest, raw);
                        }
                    }
                    Some(name) => {
                        let entry = ExternalEntry {
                            digest: p.digest,
                            size: p.size,
                        };
                        if let Some(prev) = externals.insert(name.to_string(), entry) {
                            if prev != entry {
                                return Err(StoreError::Corrupt(format!(
                                    "logical name '{name}' refers to two different files"
                                )));
                            }
                        }
                    }
                }
            }
        }
        let partitions = inner
            .manifest
            .partitions
            .iter()
            .filter(|p| out.folders.folders().any(|(f, _)| p.root.is_prefix_of(f)))
            .cloned()
            .collect();
        Ok(SnapshotContents {
            store_id: inner.manifest.id.clone(),
            selection,
            partitions,
            state: out,
            objects,
            externals,
        })
    }

    /// Serialized snapshot file bytes for `selection`.
    pub fn snapshot(&self, selection: &Selection) -> Result<Vec<u8>, StoreError> {
        Ok(write_snapshot(&self.snapshot_contents(selection)?))
    }

    pub fn snapshot_to(&self, selection: &Selection, out: &Path) -> Result<ContentDigest, StoreError> {
        let bytes = self.snapshot(selection)?;
        fs::write(out, &bytes)?;
        Ok(ContentDigest::of(&bytes))
    }

    /// SHA-256 of a full snapshot: identical for identical store contents.
    pub fn state_digest(&self) -> Result<ContentDigest, StoreError> {
        Ok(ContentDigest::of(&self.snapshot(&Selection::everything())?))
    }

    /// Recomputes the digest of every stored object.
    pub fn scrub(&self) -> Result<VerificationReport, StoreError> {
        let mut report = VerificationReport::default();
        let mut files = Vec::new();
        for fan in fs::read_dir(self.root.join(OBJECTS_DIR))? {
            let fan = fan?;
            if !fan.file_type()?.is_dir() {
                continue;
            }
            for obj in fs::read_dir(fan.path())? {
                let obj = obj?;
                files.push(format!(
                    "{}{}",
                    fan.file_name().to_string_lossy(),
                    obj.file_name().to_string_lossy()
                ));
            }
        }
        files.sort();
        for name in files {
            let path = self.root.join(OBJECTS_DIR).join(&name[..2]).join(&name[2..]);
            let actual = fs::read(&path)
                .map_err(|e| e.to_string())
                .and_then(|raw| {
                    object_header(&raw).map_err(|e| e.to_string())?;
                    decode_object(&raw).map_err(|e| e.to_string())
                })
                .map(|data| ContentDigest::of(&data).to_hex());
            match actual {
                Ok(hex) => report.push(name.clone(), name, hex),
                Err(e) => report.fail(name.clone(), name, e),
            }
        }
        Ok(report)
    }
}

/// Every record of `state` in (folder, channel, leaf tag, since) order.
pub(crate) fn dump_state<P: PayloadSource + ?Sized>(
    state: &ConditionsState,
    objects: &P,
) -> Result<ResultSet, ReadError> {
    let mut rows = Vec::new();
    for seq in state.sequences.values() {
        for record in seq.records() {
            let data = if record.payload.is_inline() {
                Some(objects.load(&record.payload.digest, record.payload.size)?)
            } else {
                None
            };
            rows.push(ResultRow {
                folder: seq.folder().clone(),
                channel: seq.channel(),
                leaf_tag: seq.leaf_tag().clone(),
                record: record.clone(),
                data,
            });
        }
    }
    Ok(ResultSet { rows })
}

fn read_manifest(root: &Path) -> Result<StoreManifest, StoreError> {
    let bytes = match fs::read(root.join(MANIFEST_FILE)) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            return Err(StoreError::NotFound(root.to_path_buf()))
        }
        Err(e) => return Err(e.into()),
    };
    let manifest: StoreManifest = serde_json::from_slice(&bytes)
        .map_err(|e| StoreError::Corrupt(format!("{MANIFEST_FILE}: {e}")))?;
    if manifest.format != STORE_FORMAT || manifest.version != STORE_VERSION {
        return Err(StoreError::UnsupportedVersion(format!(
            "{} v{}",
            manifest.format, manifest.version
        )));
    }
    Ok(manifest)
}

fn read_tags(root: &Path) -> Result<TagTree, StoreError> {
    let bytes = fs::read(root.join(TAGS_FILE))?;
    let nodes: Vec<TagNode> = serde_json::from_slice(&bytes)
        .map_err(|e| StoreError::Corrupt(format!("{TAGS_FILE}: {e}")))?;
    let mut tags = TagTree::new();
    for node in nodes {
        tags.insert(node)?;
    }
    Ok(tags)
}

/// Loads the checkpoint if it still matches the log prefixes it covers;
/// otherwise leaves `inner` empty for a full replay.
fn load_index(root: &Path, inner: &mut Inner) {
    let Ok(bytes) = fs::read(root.join(INDEX_FILE)) else {
        return;
    };
    let Ok(index) = serde_json::from_slice::<IndexFile>(&bytes) else {
        return;
    };
    if index.format != STORE_FORMAT || index.version != STORE_VERSION {
        return;
    }
    let mut cursors = BTreeMap::new();
    for (name, mark) in &index.logs {
        let path = root.join(LOGS_DIR).join(format!("{name}.log"));
        let Ok(mut f) = File::open(&path) else {
            if mark.offset == 0 {
                cursors.insert(name.clone(), LogCursor::new());
                continue;
            }
            return;
        };
        let mut prefix = Vec::new();
        if (&mut f).take(mark.offset).read_to_end(&mut prefix).is_err()
            || prefix.len() as u64 != mark.offset
        {
            return;
        }
        let mut cursor = LogCursor::new();
        cursor.advance(&prefix);
        if cursor.mark().crc != mark.crc {
            return;
        }
        cursors.insert(name.clone(), cursor);
    }
    let mut sequences = BTreeMap::new();
    for seq in index.sequences {
        let Ok(checked) = IovSequence::from_records(
            seq.folder().clone(),
            seq.channel(),
            seq.leaf_tag().clone(),
            seq.records().to_vec(),
        ) else {
            return;
        };
        sequences.insert(
            SequenceKey {
                folder: checked.folder().clone(),
                channel: checked.channel(),
                leaf_tag: checked.leaf_tag().clone(),
            },
            checked,
        );
    }
    inner.state.folders = index.folders;
    inner.state.sequences = sequences;
    inner.cursors = cursors;
}

impl PayloadSource for Store {
    fn load(&self, digest: &ContentDigest, size: u64) -> Result<Vec<u8>, ReadError> {
        let raw = self.raw_object(digest)?;
        let data = decode_object(&raw)
            .map_err(|e| ReadError::Corrupt(format!("object {digest}: {e}")))?;
        if data.len() as u64 != size {
            return Err(ReadError::Corrupt(format!("object {digest} has wrong size")));
        }
        Ok(data)
    }
}

impl ConditionsRead for Store {
    fn read_query(&self, q: &CanonicalQuery) -> Result<ResultSet, ReadError> {
        let inner = self.read_inner();
        evaluate(&inner.state, self, q)
    }

    fn source_id(&self) -> String {
        format!("store:{}", self.id())
    }
}
