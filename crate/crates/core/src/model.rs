//! Interval-of-validity data model.
//!
//! Conditions are stored as ordered, non-overlapping sequences of
//! `[since, until)` intervals, one sequence per (folder, channel, leaf tag).
//! Folders live in a folderset tree; hierarchical tags defined on folderset
//! nodes pick, child by child, which leaf tag each folder resolves to.
//!
//! Everything here is a plain value: no I/O, no interior mutability.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::integrity::ContentDigest;

pub type ChannelId = u32;

/// Channel used when a folder is created without an explicit channel list.
pub const DEFAULT_CHANNEL: ChannelId = 0;

const MAX_NAME_LEN: usize = 255;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid interval [{since}, {until})")]
    InvalidInterval { since: ValidityPoint, until: ValidityPoint },
    #[error("extend-only violation: since {since} is not after the last since {last_since}")]
    ExtendOnlyViolation {
        last_since: ValidityPoint,
        since: ValidityPoint,
    },
    #[error("invalid name '{0}'")]
    InvalidName(String),
    #[error("invalid path '{0}'")]
    InvalidPath(String),
    #[error("{0} already exists")]
    AlreadyExists(String),
    #[error("unknown folder {0}")]
    UnknownFolder(NodePath),
    #[error("{0} is not a folderset")]
    NotAFolderset(NodePath),
    #[error("unknown channel {channel} in folder {folder}")]
    UnknownChannel { folder: NodePath, channel: ChannelId },
    #[error("unknown tag '{tag}' at {node}")]
    UnknownTag { node: NodePath, tag: TagName },
    #[error("tag '{tag}' at {node} has no association for '{child}'")]
    MissingAssociation {
        node: NodePath,
        tag: TagName,
        child: String,
    },
    #[error("invalid association: {0}")]
    InvalidAssociation(String),
    #[error("{folder} is not below {start}")]
    NotDescendant { start: NodePath, folder: NodePath },
    #[error("no valid record in {folder} channel {channel} tag '{tag}' for the requested time")]
    NoValidRecord {
        folder: NodePath,
        channel: ChannelId,
        tag: TagName,
    },
    #[error("invalid payload reference: {0}")]
    InvalidPayload(String),
    #[error("invalid sequence: {0}")]
    InvalidSequence(String),
}

/// A point on the abstract condition-time axis.
///
/// `u64::MAX` is reserved as [`ValidityPoint::OPEN`] and is never a valid
/// query point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ValidityPoint(pub u64);

impl ValidityPoint {
    pub const OPEN: ValidityPoint = ValidityPoint(u64::MAX);

    pub fn is_open(self) -> bool {
        self == Self::OPEN
    }
}

impl fmt::Display for ValidityPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_open() {
            f.write_str("open")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl FromStr for ValidityPoint {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("open") {
            Ok(Self::OPEN)
        } else {
            s.parse().map(ValidityPoint)
        }
    }
}

impl From<u64> for ValidityPoint {
    fn from(v: u64) -> Self {
        ValidityPoint(v)
    }
}

/// Half-open validity interval `[since, until)`; `until` may be OPEN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IovInterval {
    since: ValidityPoint,
    until: ValidityPoint,
}

impl IovInterval {
    pub fn new(since: ValidityPoint, until: ValidityPoint) -> Result<Self, ModelError> {
        if since >= until {
            return Err(ModelError::InvalidInterval { since, until });
        }
        Ok(Self { since, until })
    }

    pub fn open_from(since: ValidityPoint) -> Result<Self, ModelError> {
        Self::new(since, ValidityPoint::OPEN)
    }

    pub fn everything() -> Self {
        Self {
            since: ValidityPoint(0),
            until: ValidityPoint::OPEN,
        }
    }

    pub fn since(&self) -> ValidityPoint {
        self.since
    }

    pub fn until(&self) -> ValidityPoint {
        self.until
    }

    pub fn is_open(&self) -> bool {
        self.until.is_open()
    }

    pub fn contains(&self, t: ValidityPoint) -> bool {
        !t.is_open() && self.since <= t && t < self.until
    }

    /// True when `[a, b)` and this interval share at least one point.
    pub fn intersects(&self, other: &IovInterval) -> bool {
        self.since < other.until && other.since < self.until
    }

    pub fn covers(&self, other: &IovInterval) -> bool {
        self.since <= other.since && other.until <= self.until
    }
}

impl fmt::Display for IovInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.since, self.until)
    }
}

/// Convenience constructor matching the `make_interval` operation.
pub fn make_interval(
    since: impl Into<ValidityPoint>,
    until: impl Into<ValidityPoint>,
) -> Result<IovInterval, ModelError> {
    IovInterval::new(since.into(), until.into())
}

fn valid_name(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= MAX_NAME_LEN
        && s != "."
        && s != ".."
        && !s.chars().any(|c| c == '/' || c.is_whitespace() || c.is_control())
}

/// A node in the folderset tree. The root has no components and prints as
/// `/`; other nodes print as `a/b/c`.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct NodePath(Vec<String>);

impl NodePath {
    pub fn root() -> Self {
        Self(Vec::new())
    }

    pub fn parse(s: &str) -> Result<Self, ModelError> {
        let trimmed = s.trim_matches('/');
        if trimmed.is_empty() {
            return if s.is_empty() || s.chars().all(|c| c == '/') {
                Ok(Self::root())
            } else {
                Err(ModelError::InvalidPath(s.to_string()))
            };
        }
        let parts: Vec<String> = trimmed.split('/').map(str::to_string).collect();
        if parts.iter().any(|p| !valid_name(p)) {
            return Err(ModelError::InvalidPath(s.to_string()));
        }
        Ok(Self(parts))
    }

    pub fn is_root(&self) -> bool {
        self.0.is_empty()
    }

    pub fn components(&self) -> &[String] {
        &self.0
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }

    pub fn child(&self, name: &str) -> Result<Self, ModelError> {
        if !valid_name(name) {
            return Err(ModelError::InvalidName(name.to_string()));
        }
        let mut parts = self.0.clone();
        parts.push(name.to_string());
        Ok(Self(parts))
    }

    pub fn parent(&self) -> Option<Self> {
        if self.is_root() {
            None
        } else {
            Some(Self(self.0[..self.0.len() - 1].to_vec()))
        }
    }

    pub fn name(&self) -> Option<&str> {
        self.0.last().map(String::as_str)
    }

    /// True when `self` is `other` or one of its ancestors.
    pub fn is_prefix_of(&self, other: &NodePath) -> bool {
        other.0.len() >= self.0.len() && other.0[..self.0.len()] == self.0[..]
    }

    /// Components of `other` below `self`, if `self` is a prefix of it.
    pub fn relative<'a>(&self, other: &'a NodePath) -> Option<&'a [String]> {
        self.is_prefix_of(other).then(|| &other.0[self.0.len()..])
    }
}

impl fmt::Display for NodePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_root() {
            f.write_str("/")
        } else {
            f.write_str(&self.0.join("/"))
        }
    }
}

impl fmt::Debug for NodePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NodePath({self})")
    }
}

impl FromStr for NodePath {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl Serialize for NodePath {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for NodePath {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Self::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Name of a hierarchical or leaf tag.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct TagName(String);

impl TagName {
    pub fn new(name: &str) -> Result<Self, ModelError> {
        if valid_name(name) {
            Ok(Self(name.to_string()))
        } else {
            Err(ModelError::InvalidName(name.to_string()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TagName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for TagName {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::new(s)
    }
}

impl<'de> Deserialize<'de> for TagName {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Self::new(&s).map_err(serde::de::Error::custom)
    }
}

/// Logical file names may contain `/` but no empty, `.` or `..` components.
pub fn validate_logical_name(name: &str) -> Result<(), ModelError> {
    let ok = !name.is_empty()
        && name.len() <= 200
        && name.split('/').all(valid_name)
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-' | '/' | '+'));
    if ok {
        Ok(())
    } else {
        Err(ModelError::InvalidName(name.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PayloadKind {
    Inline,
    External { logical_name: String },
}

/// Reference to a payload: either an object stored in the database itself
/// or an external file resolved through a file catalog.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PayloadRef {
    pub kind: PayloadKind,
    pub digest: ContentDigest,
    pub size: u64,
    pub schema_id: String,
}

impl PayloadRef {
    pub fn inline(digest: ContentDigest, size: u64, schema_id: impl Into<String>) -> Self {
        Self {
            kind: PayloadKind::Inline,
            digest,
            size,
            schema_id: schema_id.into(),
        }
    }

    pub fn external(
        logical_name: impl Into<String>,
        digest: ContentDigest,
        size: u64,
        schema_id: impl Into<String>,
    ) -> Result<Self, ModelError> {
        let logical_name = logical_name.into();
        validate_logical_name(&logical_name)
            .map_err(|_| ModelError::InvalidPayload(format!("bad logical name '{logical_name}'")))?;
        Ok(Self {
            kind: PayloadKind::External { logical_name },
            digest,
            size,
            schema_id: schema_id.into(),
        })
    }

    pub fn is_inline(&self) -> bool {
        matches!(self.kind, PayloadKind::Inline)
    }

    pub fn logical_name(&self) -> Option<&str> {
        match &self.kind {
            PayloadKind::External { logical_name } => Some(logical_name),
            PayloadKind::Inline => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IovRecord {
    pub interval: IovInterval,
    pub payload: PayloadRef,
    pub insertion_index: u64,
}

/// Records of one (folder, channel, leaf tag), sorted by `since`, pairwise
/// disjoint, with at most the last one open-ended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IovSequence {
    folder: NodePath,
    channel: ChannelId,
    leaf_tag: TagName,
    records: Vec<IovRecord>,
}

impl IovSequence {
    pub fn new(folder: NodePath, channel: ChannelId, leaf_tag: TagName) -> Self {
        Self {
            folder,
            channel,
            leaf_tag,
            records: Vec::new(),
        }
    }

    /// Builds a sequence from existing records, checking every invariant.
    pub fn from_records(
        folder: NodePath,
        channel: ChannelId,
        leaf_tag: TagName,
        records: Vec<IovRecord>,
    ) -> Result<Self, ModelError> {
        for pair in records.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if a.interval.since() >= b.interval.since() {
                return Err(ModelError::InvalidSequence("since not strictly increasing".into()));
            }
            if a.interval.until() > b.interval.since() {
                return Err(ModelError::InvalidSequence("overlapping intervals".into()));
            }
            if a.insertion_index >= b.insertion_index {
                return Err(ModelError::InvalidSequence(
                    "insertion index not increasing".into(),
                ));
            }
        }
        Ok(Self {
            folder,
            channel,
            leaf_tag,
            records,
        })
    }

    pub fn folder(&self) -> &NodePath {
        &self.folder
    }

    pub fn channel(&self) -> ChannelId {
        self.channel
    }

    pub fn leaf_tag(&self) -> &TagName {
        &self.leaf_tag
    }

    pub fn records(&self) -> &[IovRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&IovRecord> {
        self.records.last()
    }

    /// Point lookup by binary search on `since`.
    pub fn resolve(&self, t: ValidityPoint) -> Option<&IovRecord> {
        if t.is_open() {
            return None;
        }
        let idx = self.records.partition_point(|r| r.interval.since() <= t);
        let candidate = self.records.get(idx.checked_sub(1)?)?;
        candidate.interval.contains(t).then_some(candidate)
    }

    /// All records intersecting `window`, in `since` order.
    pub fn range(&self, window: &IovInterval) -> &[IovRecord] {
        let end = self
            .records
            .partition_point(|r| r.interval.since() < window.until());
        let start = self.records[..end].partition_point(|r| r.interval.until() <= window.since());
        &self.records[start..end]
    }

    /// Extends the sequence with `[since, OPEN)`, truncating a trailing open
    /// record at `since`. Nothing else about existing records changes.
    pub fn push_iov(
        &mut self,
        since: ValidityPoint,
        payload: PayloadRef,
    ) -> Result<&IovRecord, ModelError> {
        let interval = IovInterval::open_from(since)?;
        let insertion_index = match self.records.last_mut() {
            Some(last) => {
                if since <= last.interval.since() {
                    return Err(ModelError::ExtendOnlyViolation {
                        last_since: last.interval.since(),
                        since,
                    });
                }
                if last.interval.is_open() {
                    last.interval = IovInterval::new(last.interval.since(), since)?;
                } else if last.interval.until() > since {
                    return Err(ModelError::ExtendOnlyViolation {
                        last_since: last.interval.since(),
                        since,
                    });
                }
                last.insertion_index + 1
            }
            None => 0,
        };
        self.records.push(IovRecord {
            interval,
            payload,
            insertion_index,
        });
        Ok(self.records.last().expect("just pushed"))
    }

    /// Value-returning form of [`IovSequence::push_iov`].
    pub fn with_iov(&self, since: ValidityPoint, payload: PayloadRef) -> Result<Self, ModelError> {
        let mut next = self.clone();
        next.push_iov(since, payload)?;
        Ok(next)
    }

    /// Copy holding only the records that intersect `window`.
    pub fn restricted(&self, window: &IovInterval) -> Self {
        Self {
            folder: self.folder.clone(),
            channel: self.channel,
            leaf_tag: self.leaf_tag.clone(),
            records: self.range(window).to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FolderSpec {
    pub schema_id: String,
    pub channels: BTreeSet<ChannelId>,
}

impl FolderSpec {
    pub fn new(schema_id: impl Into<String>, channels: impl IntoIterator<Item = ChannelId>) -> Self {
        let mut channels: BTreeSet<_> = channels.into_iter().collect();
        if channels.is_empty() {
            channels.insert(DEFAULT_CHANNEL);
        }
        Self {
            schema_id: schema_id.into(),
            channels,
        }
    }
}

/// Folders keyed by path; foldersets are implied by folder ancestry.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldersetTree {
    folders: BTreeMap<NodePath, FolderSpec>,
}

impl FoldersetTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_folder(&mut self, path: NodePath, spec: FolderSpec) -> Result<(), ModelError> {
        self.check_add(&path, &spec)?;
        self.folders.insert(path, spec);
        Ok(())
    }

    /// Validates a folder addition without applying it.
    pub fn check_add(&self, path: &NodePath, spec: &FolderSpec) -> Result<(), ModelError> {
        if path.is_root() {
            return Err(ModelError::InvalidPath("/".into()));
        }
        if self.folders.contains_key(path) {
            return Err(ModelError::AlreadyExists(format!("folder {path}")));
        }
        if self.is_folderset(path) {
            return Err(ModelError::AlreadyExists(format!("folderset {path}")));
        }
        let mut ancestor = path.parent();
        while let Some(a) = ancestor {
            if self.folders.contains_key(&a) {
                return Err(ModelError::InvalidPath(format!(
                    "{path}: ancestor {a} is a folder"
                )));
            }
            ancestor = a.parent();
        }
        if !valid_name(&spec.schema_id) {
            return Err(ModelError::InvalidName(spec.schema_id.clone()));
        }
        Ok(())
    }

    pub fn folder(&self, path: &NodePath) -> Option<&FolderSpec> {
        self.folders.get(path)
    }

    pub fn is_folder(&self, path: &NodePath) -> bool {
        self.folders.contains_key(path)
    }

    /// The root, and every proper ancestor of a folder, is a folderset.
    pub fn is_folderset(&self, path: &NodePath) -> bool {
        path.is_root()
            || self
                .folders
                .range(path.clone()..)
                .next()
                .is_some_and(|(f, _)| f != path && path.is_prefix_of(f))
    }

    pub fn folders(&self) -> impl Iterator<Item = (&NodePath, &FolderSpec)> {
        self.folders.iter()
    }

    pub fn folders_under<'a>(
        &'a self,
        node: &'a NodePath,
    ) -> impl Iterator<Item = (&'a NodePath, &'a FolderSpec)> + 'a {
        self.folders
            .range(node.clone()..)
            .take_while(move |(f, _)| node.is_prefix_of(f))
    }

    /// Names of the immediate children of a folderset node.
    pub fn children(&self, node: &NodePath) -> BTreeSet<String> {
        self.folders_under(node)
            .filter_map(|(f, _)| node.relative(f).and_then(|rest| rest.first().cloned()))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.folders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.folders.is_empty()
    }
}

/// A hierarchical tag: for each immediate child of `owner`, the name of the
/// tag to follow there (hierarchical for foldersets, leaf for folders).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagNode {
    pub owner: NodePath,
    pub name: TagName,
    pub associations: BTreeMap<String, TagName>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TagTree {
    nodes: BTreeMap<(NodePath, TagName), BTreeMap<String, TagName>>,
}

impl TagTree {
    pub fn new() -> Self {
        Self::default()
    }

    /// Checks that `node` is well-formed against the folderset tree, the
    /// already-defined hierarchical tags and the known leaf tags.
    pub fn validate(
        &self,
        node: &TagNode,
        folders: &FoldersetTree,
        leaf_tag_exists: impl Fn(&NodePath, &TagName) -> bool,
    ) -> Result<(), ModelError> {
        if !folders.is_folderset(&node.owner) {
            return Err(ModelError::NotAFolderset(node.owner.clone()));
        }
        let children = folders.children(&node.owner);
        for (child, target) in &node.associations {
            if !children.contains(child) {
                return Err(ModelError::InvalidAssociation(format!(
                    "'{child}' is not a child of {}",
                    node.owner
                )));
            }
            let child_path = node.owner.child(child)?;
            let ok = if folders.is_folder(&child_path) {
                leaf_tag_exists(&child_path, target)
            } else {
                self.contains(&child_path, target)
            };
            if !ok {
                return Err(ModelError::InvalidAssociation(format!(
                    "no tag '{target}' at {child_path}"
                )));
            }
        }
        Ok(())
    }

    /// Inserts a node without validation; callers run [`TagTree::validate`]
    /// first (loading from durable storage skips it).
    pub fn insert(&mut self, node: TagNode) -> Result<(), ModelError> {
        let key = (node.owner, node.name);
        if self.nodes.contains_key(&key) {
            return Err(ModelError::AlreadyExists(format!("tag '{}' at {}", key.1, key.0)));
        }
        self.nodes.insert(key, node.associations);
        Ok(())
    }

    pub fn contains(&self, owner: &NodePath, name: &TagName) -> bool {
        self.nodes.contains_key(&(owner.clone(), name.clone()))
    }

    pub fn get(&self, owner: &NodePath, name: &TagName) -> Option<&BTreeMap<String, TagName>> {
        self.nodes.get(&(owner.clone(), name.clone()))
    }

    pub fn nodes(&self) -> impl Iterator<Item = TagNode> + '_ {
        self.nodes.iter().map(|((owner, name), assoc)| TagNode {
            owner: owner.clone(),
            name: name.clone(),
            associations: assoc.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Walks from `(start, tag)` down to `folder` and returns the leaf tag
    /// reached there. When `start` is the folder itself, `tag` is taken to
    /// be a leaf tag and returned unchanged.
    pub fn resolve(
        &self,
        start: &NodePath,
        tag: &TagName,
        folder: &NodePath,
    ) -> Result<TagName, ModelError> {
        let rest = start.relative(folder).ok_or_else(|| ModelError::NotDescendant {
            start: start.clone(),
            folder: folder.clone(),
        })?;
        let mut node = start.clone();
        let mut current = tag.clone();
        for child in rest {
            let assoc = self.get(&node, &current).ok_or_else(|| ModelError::UnknownTag {
                node: node.clone(),
                tag: current.clone(),
            })?;
            let next = assoc
                .get(child)
                .ok_or_else(|| ModelError::MissingAssociation {
                    node: node.clone(),
                    tag: current.clone(),
                    child: child.clone(),
                })?
                .clone();
            node = node.child(child)?;
            current = next;
        }
        Ok(current)
    }

    /// The hierarchical tag nodes visited by any resolution starting at
    /// `(start, tag)`.
    pub fn reachable(&self, start: &NodePath, tag: &TagName) -> Vec<TagNode> {
        let mut out = Vec::new();
        let mut stack = vec![(start.clone(), tag.clone())];
        while let Some((owner, name)) = stack.pop() {
            let Some(assoc) = self.get(&owner, &name) else {
                continue;
            };
            for (child, target) in assoc {
                if let Ok(path) = owner.child(child) {
                    stack.push((path, target.clone()));
                }
            }
            out.push(TagNode {
                owner,
                name,
                associations: assoc.clone(),
            });
        }
        out.sort_by(|a, b| (&a.owner, &a.name).cmp(&(&b.owner, &b.name)));
        out
    }
}

/// Identity of a sequence.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SequenceKey {
    pub folder: NodePath,
    pub channel: ChannelId,
    pub leaf_tag: TagName,
}

/// Read access to resolved conditions, implemented by the master store and
/// by snapshots.
pub trait ConditionsView {
    fn folderset(&self) -> &FoldersetTree;
    fn tag_tree(&self) -> &TagTree;
    fn sequence(&self, key: &SequenceKey) -> Option<&IovSequence>;

    /// Range of condition time this view can answer for.
    fn validity_window(&self) -> IovInterval {
        IovInterval::everything()
    }

    fn leaf_tag_exists(&self, folder: &NodePath, tag: &TagName) -> bool;
}

/// Resolves `folder` through the tag tree and returns the sequence selected
/// for `channel`, or an error naming the first missing piece.
pub fn select_sequence<'a, V: ConditionsView + ?Sized>(
    view: &'a V,
    folder: &NodePath,
    channel: ChannelId,
    start: &NodePath,
    tag: &TagName,
) -> Result<&'a IovSequence, ModelError> {
    let spec = view
        .folderset()
        .folder(folder)
        .ok_or_else(|| ModelError::UnknownFolder(folder.clone()))?;
    if !spec.channels.contains(&channel) {
        return Err(ModelError::UnknownChannel {
            folder: folder.clone(),
            channel,
        });
    }
    let leaf_tag = view.tag_tree().resolve(start, tag, folder)?;
    let key = SequenceKey {
        folder: folder.clone(),
        channel,
        leaf_tag,
    };
    match view.sequence(&key) {
        Some(seq) => Ok(seq),
        None if view.leaf_tag_exists(folder, &key.leaf_tag) => Err(ModelError::NoValidRecord {
            folder: folder.clone(),
            channel,
            tag: key.leaf_tag,
        }),
        None => Err(ModelError::UnknownTag {
            node: folder.clone(),
            tag: key.leaf_tag,
        }),
    }
}

/// Tag resolution followed by point lookup.
pub fn effective_payload<V: ConditionsView + ?Sized>(
    view: &V,
    folder: &NodePath,
    channel: ChannelId,
    start: &NodePath,
    tag: &TagName,
    t: ValidityPoint,
) -> Result<PayloadRef, ModelError> {
    let seq = select_sequence(view, folder, channel, start, tag)?;
    let no_record = || ModelError::NoValidRecord {
        folder: folder.clone(),
        channel,
        tag: seq.leaf_tag().clone(),
    };
    if !view.validity_window().contains(t) {
        return Err(no_record());
    }
    seq.resolve(t)
        .map(|r| r.payload.clone())
        .ok_or_else(no_record)
}

/// In-memory conditions state shared by the store and snapshot readers.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConditionsState {
    pub folders: FoldersetTree,
    pub tags: TagTree,
    pub sequences: BTreeMap<SequenceKey, IovSequence>,
    pub window: Option<IovInterval>,
}

impl ConditionsView for ConditionsState {
    fn folderset(&self) -> &FoldersetTree {
        &self.folders
    }

    fn tag_tree(&self) -> &TagTree {
        &self.tags
    }

    fn sequence(&self, key: &SequenceKey) -> Option<&IovSequence> {
        self.sequences.get(key)
    }

    fn validity_window(&self) -> IovInterval {
        self.window.unwrap_or_else(IovInterval::everything)
    }

    fn leaf_tag_exists(&self, folder: &NodePath, tag: &TagName) -> bool {
        self.sequences
            .range(
                SequenceKey {
                    folder: folder.clone(),
                    channel: 0,
                    leaf_tag: tag.clone(),
                }..,
            )
            .take_while(|(k, _)| &k.folder == folder)
            .any(|(k, _)| &k.leaf_tag == tag)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn p(s: &str) -> NodePath {
        NodePath::parse(s).unwrap()
    }

    fn t(s: &str) -> TagName {
        TagName::new(s).unwrap()
    }

    fn payload(n: u8) -> PayloadRef {
        PayloadRef::inline(ContentDigest::of(&[n]), 1, "blob")
    }

    #[test]
    fn interval_construction() {
        let all = make_interval(0, ValidityPoint::OPEN).unwrap();
        assert!(all.is_open());
        assert!(all.contains(ValidityPoint(u64::MAX - 1)));
        assert!(!all.contains(ValidityPoint::OPEN));
        assert!(matches!(
            make_interval(10, 10),
            Err(ModelError::InvalidInterval { .. })
        ));
        let i = make_interval(3, 7).unwrap();
        assert!(i.contains(ValidityPoint(3)));
        assert!(!i.contains(ValidityPoint(7)));
    }

    #[test]
    fn node_paths() {
        assert!(p("/").is_root());
        assert!(p("").is_root());
        assert_eq!(p("/geom/pixels/").to_string(), "geom/pixels");
        assert!(NodePath::parse("a//b").is_err());
        assert!(NodePath::parse("a/ b").is_err());
        assert!(NodePath::parse("a/../b").is_err());
        assert!(p("a").is_prefix_of(&p("a/b")));
        assert!(!p("a/b").is_prefix_of(&p("a")));
        assert!(!p("ab").is_prefix_of(&p("a/b")));
        assert_eq!(p("a/b/c").parent().unwrap(), p("a/b"));
    }

    #[test]
    fn resolve_iov_basics() {
        let seq = IovSequence::new(p("f"), 0, t("v1"));
        assert!(seq.resolve(ValidityPoint(5)).is_none());
        let seq = seq
            .with_iov(ValidityPoint(0), payload(1))
            .unwrap()
            .with_iov(ValidityPoint(10), payload(2))
            .unwrap();
        assert_eq!(seq.resolve(ValidityPoint(10)).unwrap().payload, payload(2));
        assert_eq!(seq.resolve(ValidityPoint(9)).unwrap().payload, payload(1));
        assert!(seq.resolve(ValidityPoint::OPEN).is_none());
    }

    #[test]
    fn insert_iov_truncates_and_rejects_out_of_order() {
        let seq = IovSequence::new(p("f"), 0, t("v1"));
        let seq = seq.with_iov(ValidityPoint(0), payload(1)).unwrap();
        assert_eq!(seq.records()[0].interval, IovInterval::everything());
        let seq2 = seq.with_iov(ValidityPoint(100), payload(2)).unwrap();
        assert_eq!(seq2.records()[0].interval, make_interval(0, 100).unwrap());
        assert_eq!(seq2.records()[1].interval, make_interval(100, ValidityPoint::OPEN).unwrap());
        assert_eq!(seq2.records()[1].insertion_index, 1);
        // The input value is untouched.
        assert!(seq.records()[0].interval.is_open());
        assert!(matches!(
            seq2.with_iov(ValidityPoint(50), payload(3)),
            Err(ModelError::ExtendOnlyViolation { .. })
        ));
        assert!(matches!(
            seq2.with_iov(ValidityPoint(100), payload(3)),
            Err(ModelError::ExtendOnlyViolation { .. })
        ));
    }

    #[test]
    fn from_records_rejects_overlap() {
        let r = |a: u64, b: u64, i| IovRecord {
            interval: make_interval(a, b).unwrap(),
            payload: payload(0),
            insertion_index: i,
        };
        assert!(IovSequence::from_records(p("f"), 0, t("x"), vec![r(0, 5, 0), r(5, 9, 1)]).is_ok());
        assert!(IovSequence::from_records(p("f"), 0, t("x"), vec![r(0, 6, 0), r(5, 9, 1)]).is_err());
        assert!(IovSequence::from_records(p("f"), 0, t("x"), vec![r(0, 5, 1), r(5, 9, 1)]).is_err());
    }

    fn linear_scan(seq: &IovSequence, at: ValidityPoint) -> Option<&IovRecord> {
        let hits: Vec<_> = seq.records().iter().filter(|r| r.interval.contains(at)).collect();
        assert!(hits.len() <= 1);
        hits.first().copied()
    }

    fn random_sequence(rng: &mut ChaCha8Rng, max_len: usize) -> IovSequence {
        let mut seq = IovSequence::new(p("f"), 0, t("v"));
        let n = rng.random_range(0..=max_len);
        let mut since = rng.random_range(0..50u64);
        for i in 0..n {
            seq.push_iov(ValidityPoint(since), payload(i as u8)).unwrap();
            since += rng.random_range(1..40u64);
        }
        seq
    }

    #[test]
    fn resolve_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..2000 {
            let seq = random_sequence(&mut rng, 200);
            let hi = seq.last().map_or(100, |r| r.interval.since().0 + 100);
            let at = ValidityPoint(rng.random_range(0..hi));
            assert_eq!(seq.resolve(at), linear_scan(&seq, at));
        }
    }

    #[test]
    fn range_matches_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let seq = random_sequence(&mut rng, 60);
            let a = rng.random_range(0..1500u64);
            let b = a + rng.random_range(1..400u64);
            let w = make_interval(a, b).unwrap();
            let expected: Vec<_> = seq
                .records()
                .iter()
                .filter(|r| r.interval.intersects(&w))
                .cloned()
                .collect();
            assert_eq!(seq.range(&w), &expected[..]);
        }
    }

    fn two_level() -> (FoldersetTree, TagTree, ConditionsState) {
        let mut folders = FoldersetTree::new();
        folders.add_folder(p("det1/fA"), FolderSpec::new("s", [0])).unwrap();
        folders.add_folder(p("det2/fB"), FolderSpec::new("s", [0])).unwrap();
        let mut state = ConditionsState {
            folders: folders.clone(),
            ..Default::default()
        };
        for (f, leaf) in [("det1/fA", "fa-01"), ("det1/fA", "fa-02"), ("det2/fB", "fb-01")] {
            let key = SequenceKey {
                folder: p(f),
                channel: 0,
                leaf_tag: t(leaf),
            };
            let mut seq = IovSequence::new(p(f), 0, t(leaf));
            seq.push_iov(ValidityPoint(0), payload(leaf.len() as u8 + leaf.as_bytes()[4]))
                .unwrap();
            state.sequences.insert(key, seq);
        }
        let mut tags = TagTree::new();
        let nodes = [
            TagNode {
                owner: p("det1"),
                name: t("D1-T"),
                associations: [("fA".to_string(), t("fa-02"))].into(),
            },
            TagNode {
                owner: p("/"),
                name: t("GLOBAL-A"),
                associations: [("det1".to_string(), t("D1-T"))].into(),
            },
        ];
        for node in nodes {
            tags.validate(&node, &folders, |f, l| state.leaf_tag_exists(f, l))
                .unwrap();
            tags.insert(node).unwrap();
        }
        state.tags = tags.clone();
        (folders, tags, state)
    }

    #[test]
    fn resolve_tag_two_levels() {
        let (_, tags, _) = two_level();
        assert_eq!(
            tags.resolve(&p("/"), &t("GLOBAL-A"), &p("det1/fA")).unwrap(),
            t("fa-02")
        );
        // Traversal from an interior node gives the same answer.
        assert_eq!(tags.resolve(&p("det1"), &t("D1-T"), &p("det1/fA")).unwrap(), t("fa-02"));
        assert_eq!(tags.resolve(&p("det1/fA"), &t("fa-01"), &p("det1/fA")).unwrap(), t("fa-01"));
        assert!(matches!(
            tags.resolve(&p("/"), &t("GLOBAL-A"), &p("det2/fB")),
            Err(ModelError::MissingAssociation { .. })
        ));
        assert!(matches!(
            tags.resolve(&p("/"), &t("NOPE"), &p("det1/fA")),
            Err(ModelError::UnknownTag { .. })
        ));
        assert!(matches!(
            tags.resolve(&p("det2"), &t("D1-T"), &p("det1/fA")),
            Err(ModelError::NotDescendant { .. })
        ));
    }

    #[test]
    fn tag_validation() {
        let (folders, mut tags, state) = two_level();
        let exists = |f: &NodePath, l: &TagName| state.leaf_tag_exists(f, l);
        let bad_child = TagNode {
            owner: p("det1"),
            name: t("X"),
            associations: [("fZ".to_string(), t("fa-01"))].into(),
        };
        assert!(tags.validate(&bad_child, &folders, exists).is_err());
        let bad_target = TagNode {
            owner: p("det1"),
            name: t("X"),
            associations: [("fA".to_string(), t("fa-99"))].into(),
        };
        assert!(tags.validate(&bad_target, &folders, exists).is_err());
        let on_folder = TagNode {
            owner: p("det1/fA"),
            name: t("X"),
            associations: BTreeMap::new(),
        };
        assert!(matches!(
            tags.validate(&on_folder, &folders, exists),
            Err(ModelError::NotAFolderset(_))
        ));
        let dup = tags.nodes().next().unwrap();
        assert!(tags.insert(dup).is_err());
        assert_eq!(tags.reachable(&p("/"), &t("GLOBAL-A")).len(), 2);
    }

    #[test]
    fn effective_payload_composes() {
        let (_, _, state) = two_level();
        let via_global = effective_payload(
            &state,
            &p("det1/fA"),
            0,
            &p("/"),
            &t("GLOBAL-A"),
            ValidityPoint(7),
        )
        .unwrap();
        let direct = state.sequences[&SequenceKey {
            folder: p("det1/fA"),
            channel: 0,
            leaf_tag: t("fa-02"),
        }]
            .resolve(ValidityPoint(7))
            .unwrap()
            .payload
            .clone();
        assert_eq!(via_global, direct);
        assert!(matches!(
            effective_payload(&state, &p("det1/fA"), 3, &p("/"), &t("GLOBAL-A"), ValidityPoint(7)),
            Err(ModelError::UnknownChannel { .. })
        ));
        assert!(matches!(
            effective_payload(&state, &p("nope"), 0, &p("/"), &t("GLOBAL-A"), ValidityPoint(7)),
            Err(ModelError::UnknownFolder(_))
        ));
    }

    #[test]
    fn folderset_tree_structure() {
        let mut tree = FoldersetTree::new();
        tree.add_folder(p("a/b/c"), FolderSpec::new("s", [])).unwrap();
        tree.add_folder(p("a/d"), FolderSpec::new("s", [1, 2])).unwrap();
        assert!(tree.is_folderset(&p("a")));
        assert!(tree.is_folderset(&p("a/b")));
        assert!(!tree.is_folderset(&p("a/d")));
        assert_eq!(tree.children(&p("a")), ["b".to_string(), "d".to_string()].into());
        assert_eq!(tree.children(&p("/")), ["a".to_string()].into());
        assert!(tree.add_folder(p("a/b"), FolderSpec::new("s", [])).is_err());
        assert!(tree.add_folder(p("a/d/e"), FolderSpec::new("s", [])).is_err());
        assert!(tree.add_folder(p("a/d"), FolderSpec::new("s", [])).is_err());
        assert_eq!(tree.folder(&p("a/b/c")).unwrap().channels, [0].into());
    }
}
