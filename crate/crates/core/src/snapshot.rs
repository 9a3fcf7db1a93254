//! Portable single-file snapshots of a store selection.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "IOVSNAP1" | u32 version | u32 section count
//! section table: (u32 kind, u64 offset, u64 length) per section
//! section bodies
//! SHA-256 of every preceding byte (32 bytes)
//! ```
//!
//! Sections appear in kind order and each kind exactly once. A [`Snapshot`]
//! is read-only: it implements the read API and nothing else.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::codec::{DecodeError, Decoder, Encoder};
use crate::integrity::ContentDigest;
use crate::model::{
    ConditionsState, FolderSpec, FoldersetTree, IovInterval, IovRecord, IovSequence, NodePath,
    SequenceKey, TagName, TagNode, TagTree, ValidityPoint,
};
use crate::object::{decode_object, object_header};
use crate::query::{
    decode_payload_ref, encode_payload_ref, evaluate, CanonicalQuery, ConditionsRead,
    PayloadSource, ReadError, ResultSet,
};
use crate::store::{FolderSelection, Partition, PartitionRole, Selection};

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"IOVSNAP1";
pub const SNAPSHOT_VERSION: u32 = 1;

const SECTION_META: u32 = 1;
const SECTION_PARTITIONS: u32 = 2;
const SECTION_FOLDERS: u32 = 3;
const SECTION_TAGS: u32 = 4;
const SECTION_SEQUENCES: u32 = 5;
const SECTION_OBJECTS: u32 = 6;
const SECTION_EXTERNALS: u32 = 7;
const SECTION_KINDS: [u32; 7] = [
    SECTION_META,
    SECTION_PARTITIONS,
    SECTION_FOLDERS,
    SECTION_TAGS,
    SECTION_SEQUENCES,
    SECTION_OBJECTS,
    SECTION_EXTERNALS,
];

#[derive(Debug, thiserror::Error)]
pub enum SnapshotError {
    #[error("not a snapshot file (bad magic)")]
    BadMagic,
    #[error("unsupported snapshot version {0}")]
    UnsupportedVersion(u32),
    #[error("snapshot digest mismatch: trailer {expected}, content {actual}")]
    DigestMismatch {
        expected: ContentDigest,
        actual: ContentDigest,
    },
    #[error("malformed snapshot: {0}")]
    Malformed(String),
}

impl From<DecodeError> for SnapshotError {
    fn from(e: DecodeError) -> Self {
        SnapshotError::Malformed(e.to_string())
    }
}

/// External payload known to a snapshot: digest and size by logical name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExternalEntry {
    pub digest: ContentDigest,
    pub size: u64,
}

/// Everything that goes into a snapshot file.
#[derive(Debug, Clone)]
pub struct SnapshotContents {
    pub store_id: String,
    pub selection: Selection,
    pub partitions: Vec<Partition>,
    pub state: ConditionsState,
    /// Encoded objects (see [`crate::object`]) keyed by content digest.
    pub objects: BTreeMap<ContentDigest, Vec<u8>>,
    pub externals: BTreeMap<String, ExternalEntry>,
}

fn encode_selection(e: &mut Encoder, sel: &Selection) {
    match &sel.folders {
        FolderSelection::All => {
            e.u8(1).u32(0);
        }
        FolderSelection::List(list) => {
            e.u8(0).u32(list.len() as u32);
            for f in list {
                e.str(&f.to_string());
            }
        }
    }
    match &sel.tag {
        Some((node, tag)) => e.u8(1).str(&node.to_string()).str(tag.as_str()),
        None => e.u8(0),
    };
    e.u64(sel.iov_range.since().0)
        .u64(sel.iov_range.until().0)
        .u8(sel.include_external as u8);
}

fn decode_selection(d: &mut Decoder<'_>) -> Result<Selection, SnapshotError> {
    let all = d.u8()?;
    let n = d.u32()?;
    let folders = if all == 1 {
        FolderSelection::All
    } else {
        let mut list = Vec::new();
        for _ in 0..n {
            list.push(parse_path(d.str()?)?);
        }
        FolderSelection::List(list)
    };
    let tag = match d.u8()? {
        0 => None,
        1 => Some((parse_path(d.str()?)?, parse_tag(d.str()?)?)),
        _ => return Err(SnapshotError::Malformed("bad tag flag".into())),
    };
    let iov_range = IovInterval::new(ValidityPoint(d.u64()?), ValidityPoint(d.u64()?))
        .map_err(|e| SnapshotError::Malformed(e.to_string()))?;
    let include_external = d.u8()? != 0;
    Ok(Selection {
        folders,
        tag,
        iov_range,
        include_external,
    })
}

fn parse_path(s: &str) -> Result<NodePath, SnapshotError> {
    NodePath::parse(s).map_err(|e| SnapshotError::Malformed(e.to_string()))
}

fn parse_tag(s: &str) -> Result<TagName, SnapshotError> {
    TagName::new(s).map_err(|e| SnapshotError::Malformed(e.to_string()))
}

/// Serializes `contents` into snapshot file bytes. Output depends only on
/// the contents.
pub fn write_snapshot(contents: &SnapshotContents) -> Vec<u8> {
    let mut sections: Vec<(u32, Vec<u8>)> = Vec::with_capacity(SECTION_KINDS.len());

    let mut e = Encoder::new();
    e.str(&contents.store_id);
    encode_selection(&mut e, &contents.selection);
    sections.push((SECTION_META, e.finish()));

    let mut e = Encoder::new();
    e.u32(contents.partitions.len() as u32);
    for p in &contents.partitions {
        e.str(&p.name).u8(p.role.code()).str(&p.root.to_string());
    }
    sections.push((SECTION_PARTITIONS, e.finish()));

    let mut e = Encoder::new();
    e.u32(contents.state.folders.len() as u32);
    for (path, spec) in contents.state.folders.folders() {
        e.str(&path.to_string())
            .str(&spec.schema_id)
            .u32(spec.channels.len() as u32);
        for c in &spec.channels {
            e.u32(*c);
        }
    }
    sections.push((SECTION_FOLDERS, e.finish()));

    let mut e = Encoder::new();
    e.u32(contents.state.tags.len() as u32);
    for node in contents.state.tags.nodes() {
        e.str(&node.owner.to_string())
            .str(node.name.as_str())
            .u32(node.associations.len() as u32);
        for (child, target) in &node.associations {
            e.str(child).str(target.as_str());
        }
    }
    sections.push((SECTION_TAGS, e.finish()));

    let mut e = Encoder::new();
    e.u32(contents.state.sequences.len() as u32);
    for seq in contents.state.sequences.values() {
        e.str(&seq.folder().to_string())
            .u32(seq.channel())
            .str(seq.leaf_tag().as_str())
            .u32(seq.len() as u32);
        for r in seq.records() {
            e.u64(r.interval.since().0)
                .u64(r.interval.until().0)
                .u64(r.insertion_index);
            encode_payload_ref(&mut e, &r.payload);
        }
    }
    sections.push((SECTION_SEQUENCES, e.finish()));

    let object_bytes: usize = contents.objects.values().map(|o| o.len() + 40).sum();
    let mut e = Encoder::with_capacity(object_bytes + 4);
    e.u32(contents.objects.len() as u32);
    for (digest, raw) in &contents.objects {
        e.digest(digest).bytes(raw);
    }
    sections.push((SECTION_OBJECTS, e.finish()));

    let mut e = Encoder::new();
    e.u32(contents.externals.len() as u32);
    for (name, ext) in &contents.externals {
        e.str(name).digest(&ext.digest).u64(ext.size);
    }
    sections.push((SECTION_EXTERNALS, e.finish()));

    let header_len = 8 + 4 + 4 + sections.len() * (4 + 8 + 8);
    let body_len: usize = sections.iter().map(|(_, b)| b.len()).sum();
    let mut out = Encoder::with_capacity(header_len + body_len + 32);
    out.raw(SNAPSHOT_MAGIC)
        .u32(SNAPSHOT_VERSION)
        .u32(sections.len() as u32);
    let mut offset = header_len as u64;
    for (kind, body) in &sections {
        out.u32(*kind).u64(offset).u64(body.len() as u64);
        offset += body.len() as u64;
    }
    for (_, body) in &sections {
        out.raw(body);
    }
    let mut bytes = out.finish();
    let digest = ContentDigest::of(&bytes);
    bytes.extend_from_slice(digest.as_bytes());
    bytes
}

#[derive(Debug, Clone, Copy)]
struct ObjectSlot {
    offset: usize,
    len: usize,
}

/// An opened, verified snapshot file.
#[derive(Debug)]
pub struct Snapshot {
    bytes: Arc<[u8]>,
    store_id: String,
    selection: Selection,
    partitions: Vec<Partition>,
    state: ConditionsState,
    objects: BTreeMap<ContentDigest, ObjectSlot>,
    externals: BTreeMap<String, ExternalEntry>,
    file_digest: ContentDigest,
}

impl Snapshot {
    /// Checks the trailer digest, then decodes every section.
    pub fn from_bytes(bytes: impl Into<Arc<[u8]>>) -> Result<Self, SnapshotError> {
        let bytes: Arc<[u8]> = bytes.into();
        if bytes.len() < 8 + 4 + 4 + 32 || &bytes[..8] != SNAPSHOT_MAGIC {
            return Err(SnapshotError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != SNAPSHOT_VERSION {
            return Err(SnapshotError::UnsupportedVersion(version));
        }
        let body_end = bytes.len() - 32;
        let expected = ContentDigest(bytes[body_end..].try_into().expect("32 bytes"));
        let actual = ContentDigest::of(&bytes[..body_end]);
        if expected != actual {
            return Err(SnapshotError::DigestMismatch { expected, actual });
        }

        let mut d = Decoder::new(&bytes[..body_end]);
        d.take(12)?;
        let count = d.u32()? as usize;
        if count != SECTION_KINDS.len() {
            return Err(SnapshotError::Malformed(format!("{count} sections")));
        }
        let header_len = 16 + count * 20;
        let mut ranges = Vec::with_capacity(count);
        let mut expected_offset = header_len;
        for kind in SECTION_KINDS {
            let k = d.u32()?;
            let offset = d.u64()? as usize;
            let len = d.u64()? as usize;
            if k != kind || offset != expected_offset || offset.checked_add(len).is_none_or(|e| e > body_end) {
                return Err(SnapshotError::Malformed(format!("bad section table entry {k}")));
            }
            expected_offset += len;
            ranges.push(offset..offset + len);
        }
        if expected_offset != body_end {
            return Err(SnapshotError::Malformed("sections do not cover file".into()));
        }
        let section = |i: usize| Decoder::new(&bytes[ranges[i].clone()]);

        let mut d = section(0);
        let store_id = d.str()?.to_string();
        let selection = decode_selection(&mut d)?;
        d.expect_end()?;

        let mut d = section(1);
        let mut partitions = Vec::new();
        for _ in 0..d.u32()? {
            let name = d.str()?.to_string();
            let role = PartitionRole::from_code(d.u8()?)
                .ok_or_else(|| SnapshotError::Malformed("bad partition role".into()))?;
            let root = parse_path(d.str()?)?;
            partitions.push(Partition { name, role, root });
        }
        d.expect_end()?;

        let mut d = section(2);
        let mut folders = FoldersetTree::new();
        for _ in 0..d.u32()? {
            let path = parse_path(d.str()?)?;
            let schema = d.str()?.to_string();
            let mut channels = Vec::new();
            for _ in 0..d.u32()? {
                channels.push(d.u32()?);
            }
            folders
                .add_folder(path, FolderSpec::new(schema, channels))
                .map_err(|e| SnapshotError::Malformed(e.to_string()))?;
        }
        d.expect_end()?;

        let mut d = section(3);
        let mut tags = TagTree::new();
        for _ in 0..d.u32()? {
            let owner = parse_path(d.str()?)?;
            let name = parse_tag(d.str()?)?;
            let mut associations = BTreeMap::new();
            for _ in 0..d.u32()? {
                let child = d.str()?.to_string();
                associations.insert(child, parse_tag(d.str()?)?);
            }
            tags.insert(TagNode {
                owner,
                name,
                associations,
            })
            .map_err(|e| SnapshotError::Malformed(e.to_string()))?;
        }
        d.expect_end()?;

        let mut d = section(4);
        let mut sequences = BTreeMap::new();
        for _ in 0..d.u32()? {
            let folder = parse_path(d.str()?)?;
            let channel = d.u32()?;
            let leaf_tag = parse_tag(d.str()?)?;
            let n = d.u32()? as usize;
            let mut records = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                let since = ValidityPoint(d.u64()?);
                let until = ValidityPoint(d.u64()?);
                let insertion_index = d.u64()?;
                let payload = decode_payload_ref(&mut d)?;
                records.push(IovRecord {
                    interval: IovInterval::new(since, until)
                        .map_err(|e| SnapshotError::Malformed(e.to_string()))?,
                    payload,
                    insertion_index,
                });
            }
            let seq = IovSequence::from_records(folder.clone(), channel, leaf_tag.clone(), records)
                .map_err(|e| SnapshotError::Malformed(e.to_string()))?;
            sequences.insert(
                SequenceKey {
                    folder,
                    channel,
                    leaf_tag,
                },
                seq,
            );
        }
        d.expect_end()?;

        let mut d = section(5);
        let base = ranges[5].start;
        let mut objects = BTreeMap::new();
        for _ in 0..d.u32()? {
            let digest = d.digest()?;
            let raw = d.bytes()?;
            let offset = base + d.position() - raw.len();
            object_header(raw).map_err(|e| SnapshotError::Malformed(e.to_string()))?;
            objects.insert(
                digest,
                ObjectSlot {
                    offset,
                    len: raw.len(),
                },
            );
        }
        d.expect_end()?;

        let mut d = section(6);
        let mut externals = BTreeMap::new();
        for _ in 0..d.u32()? {
            let name = d.str()?.to_string();
            let digest = d.digest()?;
            let size = d.u64()?;
            externals.insert(name, ExternalEntry { digest, size });
        }
        d.expect_end()?;

        let state = ConditionsState {
            folders,
            tags,
            sequences,
            window: Some(selection.iov_range),
        };
        Ok(Self {
            bytes,
            store_id,
            selection,
            partitions,
            state,
            objects,
            externals,
            file_digest: expected,
        })
    }

    pub fn store_id(&self) -> &str {
        &self.store_id
    }

    pub fn selection(&self) -> &Selection {
        &self.selection
    }

    pub fn partitions(&self) -> &[Partition] {
        &self.partitions
    }

    pub fn state(&self) -> &ConditionsState {
        &self.state
    }

    pub fn externals(&self) -> &BTreeMap<String, ExternalEntry> {
        &self.externals
    }

    pub fn object_count(&self) -> usize {
        self.objects.len()
    }

    /// The trailer digest (SHA-256 of the file minus its last 32 bytes).
    pub fn file_digest(&self) -> ContentDigest {
        self.file_digest
    }

    pub fn len_bytes(&self) -> usize {
        self.bytes.len()
    }

    /// Every record in the snapshot, with inline payloads.
    pub fn dump(&self) -> Result<ResultSet, ReadError> {
        crate::store::dump_state(&self.state, self)
    }
}

impl PayloadSource for Snapshot {
    fn load(&self, digest: &ContentDigest, size: u64) -> Result<Vec<u8>, ReadError> {
        let slot = self
            .objects
            .get(digest)
            .ok_or_else(|| ReadError::Corrupt(format!("snapshot lacks object {digest}")))?;
        let data = decode_object(&self.bytes[slot.offset..slot.offset + slot.len])
            .map_err(|e| ReadError::Corrupt(format!("object {digest}: {e}")))?;
        if data.len() as u64 != size {
            return Err(ReadError::Corrupt(format!("object {digest} has wrong size")));
        }
        Ok(data)
    }
}

impl ConditionsRead for Snapshot {
    fn read_query(&self, q: &CanonicalQuery) -> Result<ResultSet, ReadError> {
        evaluate(&self.state, self, q)
    }

    fn source_id(&self) -> String {
        format!("snapshot:{}", &self.file_digest.to_hex()[..16])
    }

    fn immutable(&self) -> bool {
        true
    }
}
