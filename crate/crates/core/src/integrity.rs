//! End-to-end integrity primitives.
//!
//! Three independent layers are provided and used throughout the crate:
//! a 32-bit buffer checksum (CRC-32, IEEE) over uncompressed buffers, a strong
//! file/content digest (SHA-256 by default), and the checksum manifest text
//! format that lists both for a set of files. On top of those sit the
//! verify-after-produce and verify-after-transfer workflows plus a
//! deterministic corruption injector used by the test suites.

use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;
use sha2::{Digest as _, Sha256, Sha512};

const STREAM_CHUNK: usize = 64 * 1024;

/// Default number of transfer attempts before a mismatch becomes terminal.
pub const DEFAULT_MAX_ATTEMPTS: u32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum IntegrityError {
    #[error("digest algorithms differ: {0} vs {1}")]
    AlgorithmMismatch(DigestAlgorithm, DigestAlgorithm),
    #[error("invalid digest: {0}")]
    InvalidDigest(String),
    #[error("corruption position {position} out of range for {len}-byte input")]
    OutOfRange { position: u64, len: u64 },
    #[error("malformed checksum manifest line {line}: {reason}")]
    MalformedManifest { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// CRC-32 (IEEE 802.3 polynomial, reflected, init and xorout all-ones).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Checksum32(pub u32);

impl fmt::Display for Checksum32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:08x}", self.0)
    }
}

impl FromStr for Checksum32 {
    type Err = IntegrityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 8 || !is_lower_hex(s) {
            return Err(IntegrityError::InvalidDigest(format!("bad crc32 '{s}'")));
        }
        u32::from_str_radix(s, 16)
            .map(Checksum32)
            .map_err(|e| IntegrityError::InvalidDigest(e.to_string()))
    }
}

pub fn buffer_checksum(bytes: &[u8]) -> Checksum32 {
    Checksum32(crc32fast::hash(bytes))
}

fn is_lower_hex(s: &str) -> bool {
    s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

/// SHA-256 of some content, the content address used by the store.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContentDigest(pub [u8; 32]);

impl ContentDigest {
    pub fn of(bytes: &[u8]) -> Self {
        Self(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    /// Parses a lowercase 64-character hex string.
    pub fn from_hex(s: &str) -> Result<Self, IntegrityError> {
        if s.len() != 64 || !is_lower_hex(s) {
            return Err(IntegrityError::InvalidDigest(format!(
                "expected 64 lowercase hex characters, got '{s}'"
            )));
        }
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out)
            .map_err(|e| IntegrityError::InvalidDigest(e.to_string()))?;
        Ok(Self(out))
    }
}

impl fmt::Display for ContentDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for ContentDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentDigest({})", self.to_hex())
    }
}

impl FromStr for ContentDigest {
    type Err = IntegrityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::from_hex(s)
    }
}

impl serde::Serialize for ContentDigest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> serde::Deserialize<'de> for ContentDigest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Self::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DigestAlgorithm {
    Sha256,
    Sha512,
}

impl DigestAlgorithm {
    pub fn hex_len(self) -> usize {
        match self {
            DigestAlgorithm::Sha256 => 64,
            DigestAlgorithm::Sha512 => 128,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DigestAlgorithm::Sha256 => "sha256",
            DigestAlgorithm::Sha512 => "sha512",
        }
    }
}

impl fmt::Display for DigestAlgorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DigestAlgorithm {
    type Err = IntegrityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sha256" => Ok(DigestAlgorithm::Sha256),
            "sha512" => Ok(DigestAlgorithm::Sha512),
            other => Err(IntegrityError::InvalidDigest(format!(
                "unknown algorithm '{other}'"
            ))),
        }
    }
}

/// A file or content digest tagged with its algorithm.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Digest {
    algorithm: DigestAlgorithm,
    hex: String,
}

impl Digest {
    pub fn new(algorithm: DigestAlgorithm, hex: &str) -> Result<Self, IntegrityError> {
        if hex.len() != algorithm.hex_len() || !is_lower_hex(hex) {
            return Err(IntegrityError::InvalidDigest(format!(
                "'{hex}' is not a lowercase {algorithm} hex digest"
            )));
        }
        Ok(Self {
            algorithm,
            hex: hex.to_string(),
        })
    }

    pub fn of_bytes(algorithm: DigestAlgorithm, bytes: &[u8]) -> Self {
        let hex = match algorithm {
            DigestAlgorithm::Sha256 => hex::encode(Sha256::digest(bytes)),
            DigestAlgorithm::Sha512 => hex::encode(Sha512::digest(bytes)),
        };
        Self { algorithm, hex }
    }

    pub fn algorithm(&self) -> DigestAlgorithm {
        self.algorithm
    }

    pub fn hex(&self) -> &str {
        &self.hex
    }
}

impl From<ContentDigest> for Digest {
    fn from(d: ContentDigest) -> Self {
        Self {
            algorithm: DigestAlgorithm::Sha256,
            hex: d.to_hex(),
        }
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.algorithm, self.hex)
    }
}

impl FromStr for Digest {
    type Err = IntegrityError;

    /// Accepts `alg:hex` or a bare 64-character SHA-256 hex string.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            Some((alg, hex)) => Digest::new(alg.parse()?, hex),
            None => Digest::new(DigestAlgorithm::Sha256, s),
        }
    }
}

enum StreamHasher {
    Sha256(Sha256),
    Sha512(Sha512),
}

impl StreamHasher {
    fn new(algorithm: DigestAlgorithm) -> Self {
        match algorithm {
            DigestAlgorithm::Sha256 => StreamHasher::Sha256(Sha256::new()),
            DigestAlgorithm::Sha512 => StreamHasher::Sha512(Sha512::new()),
        }
    }

    fn update(&mut self, bytes: &[u8]) {
        match self {
            StreamHasher::Sha256(h) => h.update(bytes),
            StreamHasher::Sha512(h) => h.update(bytes),
        }
    }

    fn finish(self) -> Digest {
        let (algorithm, hex) = match self {
            StreamHasher::Sha256(h) => (DigestAlgorithm::Sha256, hex::encode(h.finalize())),
            StreamHasher::Sha512(h) => (DigestAlgorithm::Sha512, hex::encode(h.finalize())),
        };
        Digest { algorithm, hex }
    }
}

/// Streams `reader` through the digest in fixed-size chunks.
pub fn file_digest<R: Read>(mut reader: R, algorithm: DigestAlgorithm) -> io::Result<Digest> {
    let mut hasher = StreamHasher::new(algorithm);
    let mut buf = vec![0u8; STREAM_CHUNK];
    loop {
        let n = match reader.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e),
        };
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finish())
}

/// Size, CRC-32 and SHA-256 of a file, computed in one streaming pass.
pub fn file_checksums(path: &Path) -> io::Result<ChecksumEntry> {
    let mut file = File::open(path)?;
    let mut sha = Sha256::new();
    let mut crc = crc32fast::Hasher::new();
    let mut size = 0u64;
    let mut buf = vec![0u8; STREAM_CHUNK];
    loop {
        let n = match file.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e),
        };
        sha.update(&buf[..n]);
        crc.update(&buf[..n]);
        size += n as u64;
    }
    Ok(ChecksumEntry {
        name: path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        size,
        crc32: Checksum32(crc.finalize()),
        sha256: ContentDigest(sha.finalize().into()),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckItem {
    pub name: String,
    pub expected: String,
    pub actual: String,
    pub pass: bool,
}

/// Per-item outcome of a verification run. Corruption is reported here
/// rather than raised as an error.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VerificationReport {
    pub items: Vec<CheckItem>,
}

impl VerificationReport {
    pub fn push(
        &mut self,
        name: impl Into<String>,
        expected: impl Into<String>,
        actual: impl Into<String>,
    ) {
        let expected = expected.into();
        let actual = actual.into();
        let pass = expected == actual;
        self.items.push(CheckItem {
            name: name.into(),
            expected,
            actual,
            pass,
        });
    }

    pub fn fail(&mut self, name: impl Into<String>, expected: impl Into<String>, why: impl Into<String>) {
        self.items.push(CheckItem {
            name: name.into(),
            expected: expected.into(),
            actual: why.into(),
            pass: false,
        });
    }

    pub fn pass(&self) -> bool {
        self.items.iter().all(|i| i.pass)
    }

    pub fn passed(&self) -> usize {
        self.items.iter().filter(|i| i.pass).count()
    }

    pub fn failed(&self) -> usize {
        self.items.len() - self.passed()
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckItem> {
        self.items.iter().filter(|i| !i.pass)
    }

    pub fn item(&self, name: &str) -> Option<&CheckItem> {
        self.items.iter().find(|i| i.name == name)
    }
}

impl fmt::Display for VerificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for item in &self.items {
            let status = if item.pass { "ok" } else { "FAIL" };
            write!(f, "{status} {}", item.name)?;
            if !item.pass {
                write!(f, " expected={} actual={}", item.expected, item.actual)?;
            }
            writeln!(f)?;
        }
        write!(
            f,
            "{}: {} passed, {} failed",
            if self.pass() { "PASS" } else { "FAIL" },
            self.passed(),
            self.failed()
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferDecision {
    Accept,
    RejectAndRetry,
    /// Retry budget exhausted; the data must not be used.
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferOutcome {
    pub decision: TransferDecision,
    pub attempt: u32,
    pub cause: Option<String>,
}

/// Compares the digest taken where a file was produced with the digest of
/// the transferred copy. A mismatch is never accepted.
pub fn transfer_check(
    src: &Digest,
    dst: &Digest,
    attempt: u32,
    max_attempts: u32,
) -> Result<TransferOutcome, IntegrityError> {
    if src.algorithm() != dst.algorithm() {
        return Err(IntegrityError::AlgorithmMismatch(
            src.algorithm(),
            dst.algorithm(),
        ));
    }
    if src == dst {
        return Ok(TransferOutcome {
            decision: TransferDecision::Accept,
            attempt,
            cause: None,
        });
    }
    let mismatch = format!("checksum mismatch: source {} destination {}", src.hex(), dst.hex());
    if attempt < max_attempts {
        Ok(TransferOutcome {
            decision: TransferDecision::RejectAndRetry,
            attempt,
            cause: Some(mismatch),
        })
    } else {
        Ok(TransferOutcome {
            decision: TransferDecision::Reject,
            attempt,
            cause: Some(format!(
                "silent corruption risk after {attempt} attempts; {mismatch}"
            )),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corruption {
    /// Flip bit `pos % 8` (LSB first) of byte `pos / 8`.
    BitFlip(u64),
    /// Truncate to exactly this many bytes.
    Truncate(u64),
    /// Zero the byte range `[start, end)`.
    ZeroRange(u64, u64),
}

impl Corruption {
    pub fn apply(&self, bytes: &mut Vec<u8>) -> Result<(), IntegrityError> {
        let len = bytes.len() as u64;
        match *self {
            Corruption::BitFlip(pos) => {
                let byte = pos / 8;
                if byte >= len {
                    return Err(IntegrityError::OutOfRange { position: pos, len });
                }
                bytes[byte as usize] ^= 1 << (pos % 8);
            }
            Corruption::Truncate(n) => {
                if n > len {
                    return Err(IntegrityError::OutOfRange { position: n, len });
                }
                bytes.truncate(n as usize);
            }
            Corruption::ZeroRange(a, b) => {
                if a > b || b > len {
                    return Err(IntegrityError::OutOfRange { position: b, len });
                }
                bytes[a as usize..b as usize].fill(0);
            }
        }
        Ok(())
    }
}

impl FromStr for Corruption {
    type Err = IntegrityError;

    /// `bitflip:<pos>`, `truncate:<len>` or `zero:<start>..<end>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || IntegrityError::InvalidDigest(format!("bad corruption spec '{s}'"));
        let (kind, arg) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "bitflip" => arg.parse().map(Corruption::BitFlip).map_err(|_| bad()),
            "truncate" => arg.parse().map(Corruption::Truncate).map_err(|_| bad()),
            "zero" => {
                let (a, b) = arg.split_once("..").ok_or_else(bad)?;
                Ok(Corruption::ZeroRange(
                    a.parse().map_err(|_| bad())?,
                    b.parse().map_err(|_| bad())?,
                ))
            }
            _ => Err(bad()),
        }
    }
}

/// Writes a corrupted copy of `src` to `out`. The source is never modified.
pub fn inject_corruption(src: &Path, kind: Corruption, out: &Path) -> Result<(), IntegrityError> {
    let mut bytes = fs::read(src)?;
    kind.apply(&mut bytes)?;
    fs::write(out, bytes)?;
    Ok(())
}

/// One line of the checksum manifest: `name size crc32 sha256`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChecksumEntry {
    pub name: String,
    pub size: u64,
    pub crc32: Checksum32,
    pub sha256: ContentDigest,
}

impl ChecksumEntry {
    pub fn of_bytes(name: impl Into<String>, bytes: &[u8]) -> Self {
        Self {
            name: name.into(),
            size: bytes.len() as u64,
            crc32: buffer_checksum(bytes),
            sha256: ContentDigest::of(bytes),
        }
    }
}

/// Sorted list of [`ChecksumEntry`], one per line. Names may not contain
/// whitespace.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChecksumManifest {
    entries: Vec<ChecksumEntry>,
}

impl ChecksumManifest {
    pub fn new(mut entries: Vec<ChecksumEntry>) -> Self {
        entries.sort_by(|a, b| a.name.cmp(&b.name));
        Self { entries }
    }

    pub fn entries(&self) -> &[ChecksumEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ChecksumEntry> {
        self.entries
            .binary_search_by(|e| e.name.as_str().cmp(name))
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!("{} {} {} {}\n", e.name, e.size, e.crc32, e.sha256));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, IntegrityError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let bad = |reason: &str| IntegrityError::MalformedManifest {
                line: line_no,
                reason: reason.to_string(),
            };
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(' ').collect();
            if fields.len() != 4 {
                return Err(bad("expected 4 fields"));
            }
            entries.push(ChecksumEntry {
                name: fields[0].to_string(),
                size: fields[1].parse().map_err(|_| bad("bad size"))?,
                crc32: fields[2].parse().map_err(|_| bad("bad crc32"))?,
                sha256: fields[3].parse().map_err(|_| bad("bad sha256"))?,
            });
        }
        let manifest = Self::new(entries.clone());
        if manifest.entries != entries {
            return Err(IntegrityError::MalformedManifest {
                line: 0,
                reason: "entries are not sorted by name".into(),
            });
        }
        Ok(manifest)
    }

    /// Re-reads every listed file under `dir` and compares size, CRC-32 and
    /// SHA-256.
    pub fn verify_dir(&self, dir: &Path) -> VerificationReport {
        let mut report = VerificationReport::default();
        for e in &self.entries {
            let expected = format!("{} {} {}", e.size, e.crc32, e.sha256);
            match file_checksums(&dir.join(&e.name)) {
                Ok(actual) => report.push(
                    e.name.clone(),
                    expected,
                    format!("{} {} {}", actual.size, actual.crc32, actual.sha256),
                ),
                Err(err) => report.fail(e.name.clone(), expected, format!("io error: {err}")),
            }
        }
        report
    }
}

/// Name of the manifest entry describing one compressed buffer of `file`.
pub fn buffer_entry_name(file: &str, offset: u64, compressed_len: u64) -> String {
    format!("{file}@{offset:016x}+{compressed_len:08x}")
}

fn parse_buffer_entry_name(name: &str) -> Option<(&str, u64, u64)> {
    let (file, rest) = name.rsplit_once('@')?;
    let (offset, clen) = rest.split_once('+')?;
    Some((
        file,
        u64::from_str_radix(offset, 16).ok()?,
        u64::from_str_radix(clen, 16).ok()?,
    ))
}

/// Writes an output file as a sequence of independently deflated buffers,
/// each framed by its little-endian u32 compressed length, and records a
/// checksum manifest covering every buffer and the whole file.
pub struct ProducedFileWriter {
    name: String,
    path: PathBuf,
    out: BufWriter<File>,
    offset: u64,
    entries: Vec<ChecksumEntry>,
}

impl ProducedFileWriter {
    pub fn create(path: &Path) -> io::Result<Self> {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
        Ok(Self {
            name,
            path: path.to_path_buf(),
            out: BufWriter::new(File::create(path)?),
            offset: 0,
            entries: Vec::new(),
        })
    }

    pub fn write_buffer(&mut self, data: &[u8]) -> io::Result<()> {
        let mut enc = DeflateEncoder::new(Vec::new(), Compression::default());
        enc.write_all(data)?;
        let compressed = enc.finish()?;
        let clen = u32::try_from(compressed.len())
            .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "buffer too large"))?;
        self.out.write_all(&clen.to_le_bytes())?;
        self.out.write_all(&compressed)?;
        self.entries.push(ChecksumEntry::of_bytes(
            buffer_entry_name(&self.name, self.offset, clen as u64),
            data,
        ));
        self.offset += 4 + clen as u64;
        Ok(())
    }

    /// Flushes and syncs the file, then digests it as read back from disk.
    pub fn finish(self) -> io::Result<ChecksumManifest> {
        let file = self.out.into_inner().map_err(|e| e.into_error())?;
        file.sync_all()?;
        drop(file);
        let mut whole = file_checksums(&self.path)?;
        whole.name = self.name;
        let mut entries = self.entries;
        entries.push(whole);
        Ok(ChecksumManifest::new(entries))
    }
}

/// Re-reads a produced file from storage and checks every deflate buffer
/// (inflated length and CRC-32) and then the whole-file size and digest.
///
/// Only entries belonging to the file named like `path` are considered.
pub fn verify_after_produce(path: &Path, manifest: &ChecksumManifest) -> VerificationReport {
    let mut report = VerificationReport::default();
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut file = match File::open(path) {
        Ok(f) => f,
        Err(e) => {
            report.fail(name, "readable file", format!("io error: {e}"));
            return report;
        }
    };
    for entry in manifest.entries() {
        let Some((file_name, offset, clen)) = parse_buffer_entry_name(&entry.name) else {
            continue;
        };
        if file_name != name {
            continue;
        }
        let expected = format!("{} {}", entry.size, entry.crc32);
        match read_buffer(&mut file, offset, clen) {
            Ok(data) => report.push(
                entry.name.clone(),
                expected,
                format!("{} {}", data.len(), buffer_checksum(&data)),
            ),
            Err(e) => report.fail(entry.name.clone(), expected, e),
        }
    }
    match manifest.get(&name) {
        Some(entry) => {
            let expected = format!("{} {}", entry.size, entry.sha256);
            match file_checksums(path) {
                Ok(actual) => report.push(
                    name,
                    expected,
                    format!("{} {}", actual.size, actual.sha256),
                ),
                Err(e) => report.fail(name, expected, format!("io error: {e}")),
            }
        }
        None => report.fail(name, "manifest entry", "missing from manifest"),
    }
    report
}

fn read_buffer(file: &mut File, offset: u64, clen: u64) -> Result<Vec<u8>, String> {
    file.seek(SeekFrom::Start(offset)).map_err(|e| e.to_string())?;
    let mut len = [0u8; 4];
    file.read_exact(&mut len).map_err(|e| format!("short read: {e}"))?;
    let framed = u32::from_le_bytes(len) as u64;
    if framed != clen {
        return Err(format!("frame length {framed} != {clen}"));
    }
    let mut compressed = vec![0u8; clen as usize];
    file.read_exact(&mut compressed)
        .map_err(|e| format!("short read: {e}"))?;
    let mut data = Vec::new();
    DeflateDecoder::new(&compressed[..])
        .read_to_end(&mut data)
        .map_err(|e| format!("inflate failed: {e}"))?;
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Bitwise CRC-32 (reflected 0xEDB88320), kept independent of crc32fast.
    fn reference_crc32(bytes: &[u8]) -> u32 {
        let mut crc = 0xffff_ffffu32;
        for &b in bytes {
            crc ^= b as u32;
            for _ in 0..8 {
                crc = if crc & 1 != 0 { (crc >> 1) ^ 0xedb8_8320 } else { crc >> 1 };
            }
        }
        !crc
    }

    #[test]
    fn crc32_check_values() {
        assert_eq!(buffer_checksum(b""), Checksum32(0));
        assert_eq!(reference_crc32(b""), 0);
        assert_eq!(buffer_checksum(b"123456789"), Checksum32(0xcbf4_3926));
        assert_eq!(reference_crc32(b"123456789"), 0xcbf4_3926);
        let data: Vec<u8> = (0..5000u32).map(|i| (i * 31 % 251) as u8).collect();
        assert_eq!(buffer_checksum(&data).0, reference_crc32(&data));
    }

    #[test]
    fn every_single_bit_flip_changes_crc() {
        let buf: Vec<u8> = (0..1024u32).map(|i| (i.wrapping_mul(2654435761) >> 7) as u8).collect();
        let base = buffer_checksum(&buf);
        let mut changed = 0;
        for pos in 0..(buf.len() as u64 * 8) {
            let mut b = buf.clone();
            Corruption::BitFlip(pos).apply(&mut b).unwrap();
            if buffer_checksum(&b) != base {
                changed += 1;
            }
        }
        assert_eq!(changed, 8192);
    }

    #[test]
    fn sha256_empty_vector() {
        // Reference value from an independent SHA-256 implementation.
        assert_eq!(
            ContentDigest::of(b"").to_hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn streaming_digest_matches_one_shot() {
        let data: Vec<u8> = (0..(3 * STREAM_CHUNK + 17)).map(|i| (i % 253) as u8).collect();
        let streamed = file_digest(&data[..], DigestAlgorithm::Sha256).unwrap();
        assert_eq!(streamed, Digest::of_bytes(DigestAlgorithm::Sha256, &data));
        let streamed = file_digest(&data[..], DigestAlgorithm::Sha512).unwrap();
        assert_eq!(streamed, Digest::of_bytes(DigestAlgorithm::Sha512, &data));
        let mut changed = data.clone();
        changed[100] ^= 0x40;
        assert_ne!(
            file_digest(&changed[..], DigestAlgorithm::Sha256).unwrap(),
            streamed
        );
    }

    #[test]
    fn digest_parsing() {
        let d = Digest::of_bytes(DigestAlgorithm::Sha256, b"x");
        assert_eq!(d.to_string().parse::<Digest>().unwrap(), d);
        assert_eq!(d.hex().parse::<Digest>().unwrap(), d);
        assert!("sha256:ABCD".parse::<Digest>().is_err());
        assert!(ContentDigest::from_hex(&"A".repeat(64)).is_err());
    }

    #[test]
    fn transfer_check_rules() {
        let a = Digest::of_bytes(DigestAlgorithm::Sha256, b"a");
        let b = Digest::of_bytes(DigestAlgorithm::Sha256, b"b");
        assert_eq!(
            transfer_check(&a, &a, 1, 3).unwrap().decision,
            TransferDecision::Accept
        );
        assert_eq!(
            transfer_check(&a, &b, 1, 3).unwrap().decision,
            TransferDecision::RejectAndRetry
        );
        let last = transfer_check(&a, &b, 3, 3).unwrap();
        assert_eq!(last.decision, TransferDecision::Reject);
        assert!(last.cause.unwrap().contains("silent corruption"));
        let c = Digest::of_bytes(DigestAlgorithm::Sha512, b"a");
        assert!(matches!(
            transfer_check(&a, &c, 1, 3),
            Err(IntegrityError::AlgorithmMismatch(..))
        ));
    }

    #[test]
    fn corruption_kinds() {
        let mut one = vec![0u8];
        Corruption::BitFlip(0).apply(&mut one).unwrap();
        assert_eq!(one, vec![1]);
        let mut v = vec![1u8, 2, 3];
        Corruption::Truncate(0).apply(&mut v).unwrap();
        assert!(v.is_empty());
        let mut z = vec![0u8; 8];
        let before = ContentDigest::of(&z);
        Corruption::ZeroRange(2, 6).apply(&mut z).unwrap();
        assert_eq!(ContentDigest::of(&z), before);
        assert!(Corruption::BitFlip(64).apply(&mut z).is_err());
        assert!(Corruption::Truncate(9).apply(&mut z).is_err());
        assert_eq!("zero:1..4".parse::<Corruption>().unwrap(), Corruption::ZeroRange(1, 4));
    }

    #[test]
    fn inject_leaves_source_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("src");
        let out = dir.path().join("out");
        fs::write(&src, [0u8, 0xff]).unwrap();
        inject_corruption(&src, Corruption::BitFlip(9), &out).unwrap();
        assert_eq!(fs::read(&src).unwrap(), vec![0, 0xff]);
        assert_eq!(fs::read(&out).unwrap(), vec![0, 0xfd]);
    }

    fn produce(dir: &Path) -> (PathBuf, ChecksumManifest) {
        let path = dir.join("events.out");
        let mut w = ProducedFileWriter::create(&path).unwrap();
        for i in 0..5u8 {
            let data: Vec<u8> = (0..4000u32).map(|j| ((j * 7) as u8) ^ i).collect();
            w.write_buffer(&data).unwrap();
        }
        (path, w.finish().unwrap())
    }

    #[test]
    fn verify_after_produce_pristine_and_corrupted() {
        let dir = tempfile::tempdir().unwrap();
        let (path, manifest) = produce(dir.path());
        let report = verify_after_produce(&path, &manifest);
        assert!(report.pass(), "{report}");
        assert_eq!(report.items.len(), 6);

        // Corrupt the third buffer's compressed payload.
        let third = manifest
            .entries()
            .iter()
            .filter_map(|e| parse_buffer_entry_name(&e.name))
            .nth(2)
            .unwrap();
        let bad = dir.path().join("bad").join("events.out");
        fs::create_dir_all(bad.parent().unwrap()).unwrap();
        inject_corruption(&path, Corruption::BitFlip((third.1 + 10) * 8 + 3), &bad).unwrap();
        let report = verify_after_produce(&bad, &manifest);
        assert!(!report.pass());
        let failed: Vec<_> = report.failures().map(|i| i.name.clone()).collect();
        assert!(failed.contains(&buffer_entry_name("events.out", third.1, third.2)));
        assert!(failed.contains(&"events.out".to_string()));

        let len = fs::metadata(&path).unwrap().len();
        inject_corruption(&path, Corruption::Truncate(len - 1), &bad).unwrap();
        let report = verify_after_produce(&bad, &manifest);
        assert!(!report.item("events.out").unwrap().pass);
    }

    #[test]
    fn manifest_text_round_trip_and_dir_verify() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("b"), b"bbb").unwrap();
        fs::write(dir.path().join("a"), b"").unwrap();
        let m = ChecksumManifest::new(vec![
            file_checksums(&dir.path().join("b")).unwrap(),
            file_checksums(&dir.path().join("a")).unwrap(),
        ]);
        let text = m.to_text();
        assert!(text.starts_with("a 0 00000000 e3b0c442"));
        assert_eq!(ChecksumManifest::parse(&text).unwrap(), m);
        assert!(m.verify_dir(dir.path()).pass());
        fs::write(dir.path().join("b"), b"bbc").unwrap();
        assert_eq!(m.verify_dir(dir.path()).failed(), 1);
        let unsorted = text.lines().rev().collect::<Vec<_>>().join("\n");
        assert!(ChecksumManifest::parse(&unsorted).is_err());
    }
}
