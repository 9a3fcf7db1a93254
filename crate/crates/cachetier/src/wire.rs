//! HTTP wire conventions shared by the origin, the proxy and the client.
//!
//! A query is `GET /v1/q/<canonical query>`. A 200 response body is the
//! binary `ResultSet` encoding; error bodies are plain text. Every
//! response carries:
//!
//! | header              | value                                          |
//! |---------------------|------------------------------------------------|
//! | `etag`              | `"<validator>"`                                |
//! | `x-iov-validator`   | SHA-256 of the body, lowercase hex             |
//! | `x-iov-ttl`         | seconds, or `infinite`                         |
//! | `x-iov-origin`      | id of the data source that produced the body   |
//! | `x-iov-error`       | error kind, on non-200 responses               |
//! | `x-iov-cache`       | `HIT`, `MISS` or `REVALIDATED`, from a proxy   |
//! | `x-iov-sim-delay-us`| simulated network time spent producing it      |

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use iovstore_core::integrity::ContentDigest;
use iovstore_core::model::ModelError;
use iovstore_core::query::ReadError;

pub const H_VALIDATOR: &str = "x-iov-validator";
pub const H_TTL: &str = "x-iov-ttl";
pub const H_ORIGIN: &str = "x-iov-origin";
pub const H_ERROR: &str = "x-iov-error";
pub const H_CACHE: &str = "x-iov-cache";
pub const H_SIM_DELAY: &str = "x-iov-sim-delay-us";
pub const STATS_PATH: &str = "/v1/stats";

/// Time-to-live announced by an origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Ttl {
    Seconds(u64),
    Infinite,
}

impl Ttl {
    /// Master-backed origins; the data behind them can change.
    pub const MASTER_DEFAULT: Ttl = Ttl::Seconds(300);

    pub fn as_duration(self) -> Option<Duration> {
        match self {
            Ttl::Seconds(s) => Some(Duration::from_secs(s)),
            Ttl::Infinite => None,
        }
    }
}

impl fmt::Display for Ttl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ttl::Seconds(s) => write!(f, "{s}"),
            Ttl::Infinite => f.write_str("infinite"),
        }
    }
}

impl FromStr for Ttl {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "infinite" | "inf" => Ok(Ttl::Infinite),
            _ => s.parse().map(Ttl::Seconds).map_err(|_| format!("bad ttl '{s}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CacheStatus {
    Hit,
    Miss,
    Revalidated,
}

impl fmt::Display for CacheStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CacheStatus::Hit => "HIT",
            CacheStatus::Miss => "MISS",
            CacheStatus::Revalidated => "REVALIDATED",
        })
    }
}

impl FromStr for CacheStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "HIT" => Ok(CacheStatus::Hit),
            "MISS" => Ok(CacheStatus::Miss),
            "REVALIDATED" => Ok(CacheStatus::Revalidated),
            _ => Err(format!("bad cache status '{s}'")),
        }
    }
}

/// Error classes carried in `x-iov-error`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorKind {
    MalformedQuery,
    UnknownFolder,
    UnknownChannel,
    UnknownTag,
    NoValidRecord,
    Resolution,
    Corrupt,
    Unavailable,
    Internal,
}

impl ErrorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorKind::MalformedQuery => "malformed-query",
            ErrorKind::UnknownFolder => "unknown-folder",
            ErrorKind::UnknownChannel => "unknown-channel",
            ErrorKind::UnknownTag => "unknown-tag",
            ErrorKind::NoValidRecord => "no-valid-record",
            ErrorKind::Resolution => "resolution",
            ErrorKind::Corrupt => "corrupt",
            ErrorKind::Unavailable => "unavailable",
            ErrorKind::Internal => "internal",
        }
    }

    pub fn status(self) -> u16 {
        match self {
            ErrorKind::MalformedQuery => 400,
            ErrorKind::UnknownFolder
            | ErrorKind::UnknownChannel
            | ErrorKind::UnknownTag
            | ErrorKind::NoValidRecord
            | ErrorKind::Resolution => 404,
            ErrorKind::Unavailable => 503,
            ErrorKind::Corrupt | ErrorKind::Internal => 500,
        }
    }

    pub fn of(e: &ReadError) -> Self {
        match e {
            ReadError::MalformedQuery(_) => ErrorKind::MalformedQuery,
            ReadError::Model(m) => match m {
                ModelError::UnknownFolder(_) | ModelError::NotAFolderset(_) => ErrorKind::UnknownFolder,
                ModelError::UnknownChannel { .. } => ErrorKind::UnknownChannel,
                ModelError::UnknownTag { .. } => ErrorKind::UnknownTag,
                ModelError::NoValidRecord { .. } => ErrorKind::NoValidRecord,
                ModelError::InvalidInterval { .. } | ModelError::InvalidName(_) | ModelError::InvalidPath(_) => {
                    ErrorKind::MalformedQuery
                }
                _ => ErrorKind::Resolution,
            },
            ReadError::Corrupt(_) => ErrorKind::Corrupt,
            ReadError::Io(_) => ErrorKind::Internal,
        }
    }
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ErrorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            ErrorKind::MalformedQuery,
            ErrorKind::UnknownFolder,
            ErrorKind::UnknownChannel,
            ErrorKind::UnknownTag,
            ErrorKind::NoValidRecord,
            ErrorKind::Resolution,
            ErrorKind::Corrupt,
            ErrorKind::Unavailable,
            ErrorKind::Internal,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
        .ok_or_else(|| format!("bad error kind '{s}'"))
    }
}

/// One response as produced by an origin or served by a proxy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireResponse {
    pub status: u16,
    pub body: Vec<u8>,
    /// Always `ContentDigest::of(&body)`.
    pub validator: ContentDigest,
    pub ttl: Ttl,
    pub origin_id: String,
    pub error: Option<ErrorKind>,
    /// Simulated network time accumulated upstream of the receiver.
    pub sim_delay: Duration,
}

impl WireResponse {
    pub fn ok(body: Vec<u8>, ttl: Ttl, origin_id: impl Into<String>) -> Self {
        Self {
            status: 200,
            validator: ContentDigest::of(&body),
            body,
            ttl,
            origin_id: origin_id.into(),
            error: None,
            sim_delay: Duration::ZERO,
        }
    }

    pub fn error(kind: ErrorKind, message: &str, ttl: Ttl, origin_id: impl Into<String>) -> Self {
        let body = message.as_bytes().to_vec();
        Self {
            status: kind.status(),
            validator: ContentDigest::of(&body),
            body,
            ttl,
            origin_id: origin_id.into(),
            error: Some(kind),
            sim_delay: Duration::ZERO,
        }
    }

    /// Answers that depend only on the data and may be cached.
    pub fn is_cacheable(&self) -> bool {
        self.status == 200 || self.status == 404
    }

    pub fn validator_ok(&self) -> bool {
        ContentDigest::of(&self.body) == self.validator
    }
}

pub fn etag(v: &ContentDigest) -> String {
    format!("\"{v}\"")
}

/// Accepts a quoted or bare validator.
pub fn parse_etag(s: &str) -> Option<ContentDigest> {
    s.trim().trim_start_matches("W/").trim_matches('"').parse().ok()
}

pub fn micros(d: Duration) -> u64 {
    d.as_micros().min(u64::MAX as u128) as u64
}
