//! The uniform read API shared by every backend.
//!
//! A [`CanonicalQuery`] has exactly one textual form, used both as the HTTP
//! path and as the cache key:
//!
//! ```text
//! /v1/q/f=<folder>;c=<channel>;n=<start node>;t=<tag>;p=<t>
//! /v1/q/f=<folder>;c=<channel>;n=<start node>;t=<tag>;r=<since>,<until>
//! ```
//!
//! Names are percent-encoded (everything outside `A-Z a-z 0-9 - . _ ~`,
//! uppercase escapes); numbers are lowercase hex without leading zeros.
//! Results travel as a versioned little-endian [`ResultSet`] encoding.

use std::fmt;
use std::io;

use percent_encoding::{percent_decode_str, utf8_percent_encode, AsciiSet, NON_ALPHANUMERIC};

use crate::codec::{DecodeError, Decoder, Encoder};
use crate::integrity::ContentDigest;
use crate::model::{
    select_sequence, ChannelId, ConditionsView, IovInterval, IovRecord, ModelError, NodePath,
    PayloadKind, PayloadRef, TagName, ValidityPoint,
};

pub const QUERY_PREFIX: &str = "/v1/q/";

const NAME_SET: &AsciiSet = &NON_ALPHANUMERIC.remove(b'-').remove(b'.').remove(b'_').remove(b'~');

const RESULT_MAGIC: &[u8; 4] = b"IORS";
const RESULT_VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ReadError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("malformed query: {0}")]
    MalformedQuery(String),
    #[error("corrupt data: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QueryMode {
    Point(ValidityPoint),
    Range(IovInterval),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CanonicalQuery {
    pub folder: NodePath,
    pub channel: ChannelId,
    pub start: NodePath,
    pub tag: TagName,
    pub mode: QueryMode,
}

impl CanonicalQuery {
    pub fn point(
        folder: NodePath,
        channel: ChannelId,
        start: NodePath,
        tag: TagName,
        t: ValidityPoint,
    ) -> Result<Self, ReadError> {
        if t.is_open() {
            return Err(ReadError::MalformedQuery("OPEN is not a query point".into()));
        }
        Ok(Self {
            folder,
            channel,
            start,
            tag,
            mode: QueryMode::Point(t),
        })
    }

    pub fn range(
        folder: NodePath,
        channel: ChannelId,
        start: NodePath,
        tag: TagName,
        window: IovInterval,
    ) -> Self {
        Self {
            folder,
            channel,
            start,
            tag,
            mode: QueryMode::Range(window),
        }
    }

    /// The canonical request path, also used as the cache key.
    pub fn to_path(&self) -> String {
        let enc = |s: String| utf8_percent_encode(&s, NAME_SET).to_string();
        let mode = match self.mode {
            QueryMode::Point(t) => format!("p={:x}", t.0),
            QueryMode::Range(w) => format!("r={:x},{:x}", w.since().0, w.until().0),
        };
        format!(
            "{QUERY_PREFIX}f={};c={:x};n={};t={};{mode}",
            enc(self.folder.to_string()),
            self.channel,
            enc(self.start.to_string()),
            enc(self.tag.to_string()),
        )
    }

    /// Strict inverse of [`CanonicalQuery::to_path`]: any non-canonical
    /// spelling is rejected.
    pub fn from_path(path: &str) -> Result<Self, ReadError> {
        let bad = |why: &str| ReadError::MalformedQuery(format!("{why}: '{path}'"));
        let body = path.strip_prefix(QUERY_PREFIX).ok_or_else(|| bad("missing /v1/q/ prefix"))?;
        let fields: Vec<&str> = body.split(';').collect();
        if fields.len() != 5 {
            return Err(bad("expected 5 fields"));
        }
        let field = |i: usize, key: &str| {
            fields[i]
                .strip_prefix(key)
                .and_then(|v| v.strip_prefix('='))
                .ok_or_else(|| bad("unexpected field order"))
        };
        let name = |v: &str| {
            percent_decode_str(v)
                .decode_utf8()
                .map(|s| s.into_owned())
                .map_err(|_| bad("bad percent-encoding"))
        };
        let hex = |v: &str| {
            if v.is_empty()
                || (v.len() > 1 && v.starts_with('0'))
                || !v.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
            {
                return Err(bad("bad hex number"));
            }
            u64::from_str_radix(v, 16).map_err(|_| bad("bad hex number"))
        };
        let folder = NodePath::parse(&name(field(0, "f")?)?)?;
        if folder.is_root() {
            return Err(bad("folder may not be the root"));
        }
        let channel = ChannelId::try_from(hex(field(1, "c")?)?).map_err(|_| bad("channel too large"))?;
        let start = NodePath::parse(&name(field(2, "n")?)?)?;
        let tag = TagName::new(&name(field(3, "t")?)?)?;
        let q = if let Ok(p) = field(4, "p") {
            Self::point(folder, channel, start, tag, ValidityPoint(hex(p)?))?
        } else {
            let (a, b) = field(4, "r")?.split_once(',').ok_or_else(|| bad("bad range"))?;
            let window = IovInterval::new(ValidityPoint(hex(a)?), ValidityPoint(hex(b)?))?;
            Self::range(folder, channel, start, tag, window)
        };
        if q.to_path() != path {
            return Err(bad("not in canonical form"));
        }
        Ok(q)
    }
}

impl fmt::Display for CanonicalQuery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_path())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResultRow {
    pub folder: NodePath,
    pub channel: ChannelId,
    pub leaf_tag: TagName,
    pub record: IovRecord,
    /// Payload bytes for inline payloads; `None` for external references.
    pub data: Option<Vec<u8>>,
}

/// Rows ordered by (folder, channel, since).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ResultSet {
    pub rows: Vec<ResultRow>,
}

impl ResultSet {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Sum of inline payload bytes carried by the rows.
    pub fn payload_bytes(&self) -> u64 {
        self.rows
            .iter()
            .filter_map(|r| r.data.as_ref())
            .map(|d| d.len() as u64)
            .sum()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::with_capacity(64 + self.payload_bytes() as usize);
        e.raw(RESULT_MAGIC).u16(RESULT_VERSION).u32(self.rows.len() as u32);
        for row in &self.rows {
            let r = &row.record;
            e.str(&row.folder.to_string())
                .u32(row.channel)
                .str(row.leaf_tag.as_str())
                .u64(r.interval.since().0)
                .u64(r.interval.until().0)
                .u64(r.insertion_index);
            encode_payload_ref(&mut e, &r.payload);
            match &row.data {
                Some(d) => e.u8(1).bytes(d),
                None => e.u8(0),
            };
        }
        e.finish()
    }

    pub fn decode(buf: &[u8]) -> Result<Self, DecodeError> {
        let mut d = Decoder::new(buf);
        if d.take(4)? != RESULT_MAGIC {
            return Err(d.err("bad result-set magic"));
        }
        let version = d.u16()?;
        if version != RESULT_VERSION {
            return Err(d.err(format!("unsupported result-set version {version}")));
        }
        let n = d.u32()? as usize;
        let mut rows = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let folder = NodePath::parse(d.str()?).map_err(|e| d.err(e.to_string()))?;
            let channel = d.u32()?;
            let leaf_tag = TagName::new(d.str()?).map_err(|e| d.err(e.to_string()))?;
            let since = ValidityPoint(d.u64()?);
            let until = ValidityPoint(d.u64()?);
            let interval = IovInterval::new(since, until).map_err(|e| d.err(e.to_string()))?;
            let insertion_index = d.u64()?;
            let payload = decode_payload_ref(&mut d)?;
            let data = match d.u8()? {
                0 => None,
                1 => Some(d.bytes()?.to_vec()),
                _ => return Err(d.err("bad data flag")),
            };
            rows.push(ResultRow {
                folder,
                channel,
                leaf_tag,
                record: IovRecord {
                    interval,
                    payload,
                    insertion_index,
                },
                data,
            });
        }
        d.expect_end()?;
        Ok(Self { rows })
    }
}

pub(crate) fn encode_payload_ref(e: &mut Encoder, p: &PayloadRef) {
    match &p.kind {
        PayloadKind::Inline => e.u8(0),
        PayloadKind::External { .. } => e.u8(1),
    };
    e.digest(&p.digest)
        .u64(p.size)
        .str(&p.schema_id)
        .str(p.logical_name().unwrap_or(""));
}

pub(crate) fn decode_payload_ref(d: &mut Decoder<'_>) -> Result<PayloadRef, DecodeError> {
    let kind = d.u8()?;
    let digest = d.digest()?;
    let size = d.u64()?;
    let schema_id = d.str()?.to_string();
    let logical = d.str()?;
    match kind {
        0 if logical.is_empty() => Ok(PayloadRef::inline(digest, size, schema_id)),
        1 => PayloadRef::external(logical, digest, size, schema_id).map_err(|e| d.err(e.to_string())),
        _ => Err(d.err("bad payload kind")),
    }
}

/// Backends that answer canonical queries: the master store, snapshots and
/// opened release slices.
pub trait ConditionsRead: Send + Sync {
    fn read_query(&self, q: &CanonicalQuery) -> Result<ResultSet, ReadError>;

    /// Identifier reported to clients as the origin of a response.
    fn source_id(&self) -> String;

    /// True for immutable sources (snapshots and slices).
    fn immutable(&self) -> bool {
        false
    }
}

/// Source of inline payload bytes for [`evaluate`].
pub trait PayloadSource {
    fn load(&self, digest: &ContentDigest, size: u64) -> Result<Vec<u8>, ReadError>;
}

/// Runs a query against a view: tag resolution, window check, then point or
/// range lookup, with inline payloads loaded from `objects`.
pub fn evaluate<V, P>(view: &V, objects: &P, q: &CanonicalQuery) -> Result<ResultSet, ReadError>
where
    V: ConditionsView + ?Sized,
    P: PayloadSource + ?Sized,
{
    let seq = select_sequence(view, &q.folder, q.channel, &q.start, &q.tag)?;
    let window = view.validity_window();
    let no_record = || {
        ReadError::Model(ModelError::NoValidRecord {
            folder: q.folder.clone(),
            channel: q.channel,
            tag: seq.leaf_tag().clone(),
        })
    };
    let records: Vec<&IovRecord> = match q.mode {
        QueryMode::Point(t) => {
            if !window.contains(t) {
                return Err(no_record());
            }
            vec![seq.resolve(t).ok_or_else(no_record)?]
        }
        QueryMode::Range(w) => {
            if !window.covers(&w) {
                return Err(no_record());
            }
            seq.range(&w).iter().collect()
        }
    };
    let mut rows = Vec::with_capacity(records.len());
    for record in records {
        let data = if record.payload.is_inline() {
            Some(objects.load(&record.payload.digest, record.payload.size)?)
        } else {
            None
        };
        rows.push(ResultRow {
            folder: q.folder.clone(),
            channel: q.channel,
            leaf_tag: seq.leaf_tag().clone(),
            record: record.clone(),
            data,
        });
    }
    Ok(ResultSet { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn q(folder: &str, t: u64) -> CanonicalQuery {
        CanonicalQuery::point(
            NodePath::parse(folder).unwrap(),
            0,
            NodePath::root(),
            TagName::new("GLOBAL").unwrap(),
            ValidityPoint(t),
        )
        .unwrap()
    }

    #[test]
    fn canonical_path_shape() {
        assert_eq!(q("det1/fA", 10).to_path(), "/v1/q/f=det1%2FfA;c=0;n=%2F;t=GLOBAL;p=a");
        let range = CanonicalQuery::range(
            NodePath::parse("det1/fA").unwrap(),
            0,
            NodePath::root(),
            TagName::new("GLOBAL").unwrap(),
            IovInterval::new(ValidityPoint(10), ValidityPoint(11)).unwrap(),
        );
        assert_ne!(range.to_path(), q("det1/fA", 10).to_path());
        assert_eq!(CanonicalQuery::from_path(&range.to_path()).unwrap(), range);
    }

    #[test]
    fn non_canonical_spellings_rejected() {
        for bad in [
            "/v1/q/f=det1%2FfA;c=0;n=%2F;t=GLOBAL;p=0a",
            "/v1/q/f=det1%2FfA;c=0;n=%2F;t=GLOBAL;p=A",
            "/v1/q/f=det1/fA;c=0;n=%2F;t=GLOBAL;p=a",
            "/v1/q/c=0;f=det1%2FfA;n=%2F;t=GLOBAL;p=a",
            "/v1/q/f=det1%2ffA;c=0;n=%2F;t=GLOBAL;p=a",
            "/v1/q/f=det1%2FfA;c=0;n=%2F;t=GLOBAL;r=5,5",
            "/v1/q/f=det1%2FfA;c=0;n=%2F;t=GLOBAL;p=ffffffffffffffff",
            "/v1/q/f=det1%2FfA;c=0;n=%2F;t=GLOBAL",
            "/v2/q/f=det1%2FfA;c=0;n=%2F;t=GLOBAL;p=a",
        ] {
            assert!(CanonicalQuery::from_path(bad).is_err(), "{bad}");
        }
    }

    fn name_strategy() -> impl Strategy<Value = String> {
        "[a-zA-Z0-9_.:%+-]{1,8}".prop_filter("no dot names", |s| s != "." && s != "..")
    }

    fn query_strategy() -> impl Strategy<Value = CanonicalQuery> {
        (
            prop::collection::vec(name_strategy(), 1..4),
            any::<u32>(),
            prop::collection::vec(name_strategy(), 0..2),
            name_strategy(),
            any::<bool>(),
            0..u64::MAX - 1,
            1..u64::MAX,
        )
            .prop_map(|(f, c, n, tag, point, a, len)| {
                let folder = NodePath::parse(&f.join("/")).unwrap();
                let start = NodePath::parse(&n.join("/")).unwrap();
                let tag = TagName::new(&tag).unwrap();
                if point {
                    CanonicalQuery::point(folder, c, start, tag, ValidityPoint(a)).unwrap()
                } else {
                    let b = a.saturating_add(len).max(a + 1);
                    let w = IovInterval::new(ValidityPoint(a), ValidityPoint(b)).unwrap();
                    CanonicalQuery::range(folder, c, start, tag, w)
                }
            })
    }

    proptest! {
        #[test]
        fn canonical_path_round_trips(query in query_strategy()) {
            let path = query.to_path();
            prop_assert_eq!(CanonicalQuery::from_path(&path).unwrap(), query);
        }

        #[test]
        fn canonical_path_injective(a in query_strategy(), b in query_strategy()) {
            prop_assert_eq!(a == b, a.to_path() == b.to_path());
        }

        #[test]
        fn result_set_round_trips(rows in prop::collection::vec((any::<u32>(), any::<u64>(), prop::option::of(prop::collection::vec(any::<u8>(), 0..64))), 0..8)) {
            let rs = ResultSet {
                rows: rows
                    .into_iter()
                    .enumerate()
                    .map(|(i, (channel, since, data))| {
                        let since = since % (u64::MAX - 1);
                        let payload = match &data {
                            Some(d) => PayloadRef::inline(ContentDigest::of(d), d.len() as u64, "s"),
                            None => PayloadRef::external(format!("ext/{i}.pool"), ContentDigest::of(&[]), 0, "s").unwrap(),
                        };
                        ResultRow {
                            folder: NodePath::parse("a/b").unwrap(),
                            channel,
                            leaf_tag: TagName::new("v1").unwrap(),
                            record: IovRecord {
                                interval: IovInterval::new(ValidityPoint(since), ValidityPoint::OPEN).unwrap(),
                                payload,
                                insertion_index: i as u64,
                            },
                            data,
                        }
                    })
                    .collect(),
            };
            let bytes = rs.encode();
            prop_assert_eq!(ResultSet::decode(&bytes).unwrap(), rs);
        }
    }

    #[test]
    fn many_distinct_queries_give_distinct_paths() {
        let mut seen = HashSet::new();
        let mut n = 0;
        for f in 0..50 {
            for c in 0..20u32 {
                for t in 0..100u64 {
                    let mut query = q(&format!("d{}/f{f}", f % 7), t * 3);
                    query.channel = c;
                    assert!(seen.insert(query.to_path()));
                    n += 1;
                }
            }
        }
        assert_eq!(seen.len(), n);
        assert_eq!(n, 100_000);
    }

    #[test]
    fn decode_rejects_garbage() {
        assert!(ResultSet::decode(b"").is_err());
        let mut ok = ResultSet::default().encode();
        assert!(ResultSet::decode(&ok).unwrap().is_empty());
        ok.push(0);
        assert!(ResultSet::decode(&ok).is_err());
    }
}
