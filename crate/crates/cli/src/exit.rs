//! Error classes and their exit codes.
//!
//! | code | class       |
//! |------|-------------|
//! | 0    | success     |
//! | 1    | internal    |
//! | 2    | usage       |
//! | 3    | policy      |
//! | 4    | io          |
//! | 5    | not-found   |
//! | 6    | integrity   |
//! | 7    | unavailable |
//! | 8    | check-failed|
//! | 9    | busy        |

use iovstore_cachetier::{ClientError, ErrorKind};
use iovstore_core::integrity::IntegrityError;
use iovstore_core::model::ModelError;
use iovstore_core::query::ReadError;
use iovstore_core::release::ReleaseError;
use iovstore_core::snapshot::SnapshotError;
use iovstore_core::store::StoreError;
use iovstore_harness::HarnessError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("verification failed: {0}")]
    VerificationFailed(String),
    #[error("transfer rejected: {0}")]
    TransferRejected(String),
    #[error("scenario checks failed: {0}")]
    ChecksFailed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Internal,
    Usage,
    Policy,
    Io,
    NotFound,
    Integrity,
    Unavailable,
    CheckFailed,
    Busy,
}

impl ErrorClass {
    pub fn code(self) -> u8 {
        match self {
            ErrorClass::Internal => 1,
            ErrorClass::Usage => 2,
            ErrorClass::Policy => 3,
            ErrorClass::Io => 4,
            ErrorClass::NotFound => 5,
            ErrorClass::Integrity => 6,
            ErrorClass::Unavailable => 7,
            ErrorClass::CheckFailed => 8,
            ErrorClass::Busy => 9,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorClass::Internal => "internal",
            ErrorClass::Usage => "usage",
            ErrorClass::Policy => "policy",
            ErrorClass::Io => "io",
            ErrorClass::NotFound => "not-found",
            ErrorClass::Integrity => "integrity",
            ErrorClass::Unavailable => "unavailable",
            ErrorClass::CheckFailed => "check-failed",
            ErrorClass::Busy => "busy",
        }
    }
}

/// Variant name from a derived `Debug` rendering.
fn variant<T: std::fmt::Debug>(e: &T) -> String {
    let s = format!("{e:?}");
    s.split(|c: char| !c.is_alphanumeric() && c != '_').next().unwrap_or("").to_string()
}

fn model(e: &ModelError) -> (ErrorClass, String) {
    use ModelError::*;
    let class = match e {
        ExtendOnlyViolation { .. } | AlreadyExists(_) => ErrorClass::Policy,
        UnknownFolder(_) | UnknownChannel { .. } | UnknownTag { .. } | MissingAssociation { .. } | NoValidRecord { .. } => {
            ErrorClass::NotFound
        }
        InvalidInterval { .. } | InvalidName(_) | InvalidPath(_) | NotAFolderset(_) | InvalidAssociation(_)
        | NotDescendant { .. } | InvalidPayload(_) => ErrorClass::Usage,
        InvalidSequence(_) => ErrorClass::Integrity,
    };
    (class, variant(e))
}

fn store(e: &StoreError) -> (ErrorClass, String) {
    use StoreError::*;
    let class = match e {
        Model(m) => return model(m),
        UnknownPartition(_) | NotFound(_) | MissingExternalFile(_) => ErrorClass::NotFound,
        InvalidPartition(_) | Malformed(_) => ErrorClass::Usage,
        PolicyViolation(_) | ReadOnly => ErrorClass::Policy,
        Locked => ErrorClass::Busy,
        UnsupportedVersion(_) | Corrupt(_) => ErrorClass::Integrity,
        InjectedFault(_) | Poisoned => ErrorClass::Internal,
        Io(_) => ErrorClass::Io,
    };
    (class, variant(e))
}

fn read(e: &ReadError) -> (ErrorClass, String) {
    let class = match e {
        ReadError::Model(m) => return model(m),
        ReadError::MalformedQuery(_) => ErrorClass::Usage,
        ReadError::Corrupt(_) => ErrorClass::Integrity,
        ReadError::Io(_) => ErrorClass::Io,
    };
    (class, variant(e))
}

fn release(e: &ReleaseError) -> (ErrorClass, String) {
    use ReleaseError::*;
    let class = match e {
        Store(s) => return store(s),
        MissingExternalFile(_) | UnknownLogicalName(_) | NotBundled(_) => ErrorClass::NotFound,
        ExternalDigestMismatch { .. } | CorruptSlice(_) | UnsupportedVersion(_) | CorruptMember(_) => {
            ErrorClass::Integrity
        }
        Io(_) => ErrorClass::Io,
    };
    (class, variant(e))
}

fn integrity(e: &IntegrityError) -> (ErrorClass, String) {
    let class = match e {
        IntegrityError::Io(_) => ErrorClass::Io,
        IntegrityError::MalformedManifest { .. } => ErrorClass::Integrity,
        _ => ErrorClass::Usage,
    };
    (class, variant(e))
}

fn client(e: &ClientError) -> (ErrorClass, String) {
    match e {
        ClientError::NoEndpoints => (ErrorClass::Usage, variant(e)),
        ClientError::AllBackendsFailed(_) => (ErrorClass::Unavailable, variant(e)),
        ClientError::Query { kind, .. } => {
            let class = match kind {
                ErrorKind::MalformedQuery => ErrorClass::Usage,
                ErrorKind::Corrupt => ErrorClass::Integrity,
                ErrorKind::Unavailable => ErrorClass::Unavailable,
                ErrorKind::Internal => ErrorClass::Internal,
                _ => ErrorClass::NotFound,
            };
            (class, variant(kind))
        }
    }
}

fn harness(e: &HarnessError) -> (ErrorClass, String) {
    match e {
        HarnessError::Store(s) => store(s),
        HarnessError::Release(r) => release(r),
        HarnessError::Read(r) => read(r),
        HarnessError::Client(c) => client(c),
        HarnessError::Io(_) => (ErrorClass::Io, variant(e)),
        _ => (ErrorClass::Usage, variant(e)),
    }
}

/// Class and most specific error name found in the chain of `err`.
pub fn classify(err: &anyhow::Error) -> (ErrorClass, String) {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            let class = match e {
                CliError::Usage(_) => ErrorClass::Usage,
                CliError::VerificationFailed(_) | CliError::TransferRejected(_) => ErrorClass::Integrity,
                CliError::ChecksFailed(_) => ErrorClass::CheckFailed,
            };
            return (class, variant(e));
        }
        if let Some(e) = cause.downcast_ref::<StoreError>() {
            return store(e);
        }
        if let Some(e) = cause.downcast_ref::<ModelError>() {
            return model(e);
        }
        if let Some(e) = cause.downcast_ref::<ReadError>() {
            return read(e);
        }
        if let Some(e) = cause.downcast_ref::<ReleaseError>() {
            return release(e);
        }
        if let Some(e) = cause.downcast_ref::<SnapshotError>() {
            return (ErrorClass::Integrity, variant(e));
        }
        if let Some(e) = cause.downcast_ref::<IntegrityError>() {
            return integrity(e);
        }
        if let Some(e) = cause.downcast_ref::<ClientError>() {
            return client(e);
        }
        if let Some(e) = cause.downcast_ref::<HarnessError>() {
            return harness(e);
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return (ErrorClass::Io, "Io".into());
        }
    }
    (ErrorClass::Internal, "Internal".into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use iovstore_core::model::ValidityPoint;

    #[test]
    fn extend_only_is_policy() {
        let e = StoreError::Model(ModelError::ExtendOnlyViolation {
            last_since: ValidityPoint(5),
            since: ValidityPoint(3),
        });
        let (class, name) = classify(&anyhow::Error::new(e).context("commit"));
        assert_eq!(class, ErrorClass::Policy);
        assert_eq!(name, "ExtendOnlyViolation");
    }

    #[test]
    fn codes_are_distinct() {
        let all = [
            ErrorClass::Internal,
            ErrorClass::Usage,
            ErrorClass::Policy,
            ErrorClass::Io,
            ErrorClass::NotFound,
            ErrorClass::Integrity,
            ErrorClass::Unavailable,
            ErrorClass::CheckFailed,
            ErrorClass::Busy,
        ];
        let codes: std::collections::HashSet<u8> = all.iter().map(|c| c.code()).collect();
        assert_eq!(codes.len(), all.len());
        assert!(!codes.contains(&0));
    }

    #[test]
    fn all_backends_failed_is_unavailable() {
        let e = ClientError::AllBackendsFailed(Vec::new());
        assert_eq!(classify(&e.into()).0, ErrorClass::Unavailable);
    }
}
