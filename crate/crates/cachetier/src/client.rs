//! Failover client: tries an ordered list of backends and returns the
//! first good answer. Which backend answered is reported but never changes
//! the result.

use std::fmt;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use iovstore_core::integrity::ContentDigest;
use iovstore_core::query::{CanonicalQuery, ConditionsRead, ResultSet};
use iovstore_core::release::{open_slice, ReleaseError, Verify};

use crate::http::{agent, fetch};
use crate::wire::{CacheStatus, ErrorKind};

#[derive(Clone)]
pub enum Endpoint {
    Proxy(String),
    Origin(String),
    /// An in-process read source, typically an opened slice.
    Local { label: String, source: Arc<dyn ConditionsRead> },
}

impl Endpoint {
    pub fn slice(path: &Path) -> Result<Self, ReleaseError> {
        let handle = open_slice(path, Verify::Lazy)?;
        Ok(Endpoint::Local {
            label: format!("slice:{}", path.display()),
            source: Arc::new(handle),
        })
    }

    pub fn local(label: impl Into<String>, source: Arc<dyn ConditionsRead>) -> Self {
        Endpoint::Local {
            label: label.into(),
            source,
        }
    }

    /// Parses `proxy=URL`, `origin=URL` or `slice=PATH`.
    pub fn parse(spec: &str) -> Result<Self, String> {
        let (kind, value) = spec
            .split_once('=')
            .ok_or_else(|| format!("endpoint '{spec}' is not KIND=VALUE"))?;
        match kind {
            "proxy" => Ok(Endpoint::Proxy(value.trim_end_matches('/').to_string())),
            "origin" => Ok(Endpoint::Origin(value.trim_end_matches('/').to_string())),
            "slice" => Endpoint::slice(Path::new(value)).map_err(|e| e.to_string()),
            other => Err(format!("unknown endpoint kind '{other}'")),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Endpoint::Proxy(u) => format!("proxy={u}"),
            Endpoint::Origin(u) => format!("origin={u}"),
            Endpoint::Local { label, .. } => label.clone(),
        }
    }
}

impl fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Ordered, non-empty list of backends.
#[derive(Debug, Clone)]
pub struct EndpointList(Vec<Endpoint>);

impl EndpointList {
    pub fn new(endpoints: Vec<Endpoint>) -> Result<Self, ClientError> {
        if endpoints.is_empty() {
            return Err(ClientError::NoEndpoints);
        }
        Ok(Self(endpoints))
    }

    pub fn endpoints(&self) -> &[Endpoint] {
        &self.0
    }
}

#[derive(Debug, Clone)]
pub struct BackendFailure {
    pub backend: String,
    pub cause: String,
}

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("no endpoints configured")]
    NoEndpoints,
    /// A definitive answer: the data has no result for this query.
    #[error("{kind}: {message}")]
    Query {
        kind: ErrorKind,
        message: String,
        backend: usize,
    },
    #[error("all backends failed: {}", .0.iter().map(|f| format!("[{}: {}]", f.backend, f.cause)).collect::<Vec<_>>().join(" "))]
    AllBackendsFailed(Vec<BackendFailure>),
}

#[derive(Debug, Clone)]
pub struct ClientResponse {
    pub result: ResultSet,
    /// Encoded result, identical whichever backend answered.
    pub body: Vec<u8>,
    pub validator: ContentDigest,
    /// Index into the endpoint list of the backend that answered.
    pub backend: usize,
    pub cache: Option<CacheStatus>,
    pub origin_id: String,
    /// Simulated network time over all attempts.
    pub sim_delay: Duration,
    pub attempts: usize,
}

enum Attempt {
    Answer(ClientResponse),
    Definitive(ErrorKind, String),
    Failed(String),
}

pub struct FailoverClient {
    endpoints: EndpointList,
    agent: ureq::Agent,
}

impl FailoverClient {
    pub fn new(endpoints: EndpointList) -> Self {
        Self::with_timeout(endpoints, Duration::from_secs(30))
    }

    pub fn with_timeout(endpoints: EndpointList, timeout: Duration) -> Self {
        Self {
            endpoints,
            agent: agent(timeout),
        }
    }

    pub fn endpoints(&self) -> &EndpointList {
        &self.endpoints
    }

    pub fn read(&self, q: &CanonicalQuery) -> Result<ClientResponse, ClientError> {
        let path = q.to_path();
        let mut failures = Vec::new();
        let mut delay = Duration::ZERO;
        for (i, ep) in self.endpoints.0.iter().enumerate() {
            let (attempt, spent) = self.try_one(ep, i, q, &path);
            delay += spent;
            match attempt {
                Attempt::Answer(mut r) => {
                    r.sim_delay = delay;
                    r.attempts = i + 1;
                    return Ok(r);
                }
                Attempt::Definitive(kind, message) => {
                    return Err(ClientError::Query {
                        kind,
                        message,
                        backend: i,
                    })
                }
                Attempt::Failed(cause) => failures.push(BackendFailure {
                    backend: ep.label(),
                    cause,
                }),
            }
        }
        Err(ClientError::AllBackendsFailed(failures))
    }

    fn try_one(&self, ep: &Endpoint, index: usize, q: &CanonicalQuery, path: &str) -> (Attempt, Duration) {
        match ep {
            Endpoint::Local { source, .. } => {
                let attempt = match source.read_query(q) {
                    Ok(result) => {
                        let body = result.encode();
                        Attempt::Answer(ClientResponse {
                            validator: ContentDigest::of(&body),
                            result,
                            body,
                            backend: index,
                            cache: None,
                            origin_id: source.source_id(),
                            sim_delay: Duration::ZERO,
                            attempts: 0,
                        })
                    }
                    Err(e) => {
                        let kind = ErrorKind::of(&e);
                        if kind.status() < 500 {
                            Attempt::Definitive(kind, e.to_string())
                        } else {
                            Attempt::Failed(e.to_string())
                        }
                    }
                };
                (attempt, Duration::ZERO)
            }
            Endpoint::Proxy(base) | Endpoint::Origin(base) => {
                let fetched = match fetch(&self.agent, &format!("{base}{path}"), None) {
                    Ok(f) => f,
                    Err(e) => return (Attempt::Failed(e), Duration::ZERO),
                };
                let r = fetched.response;
                let attempt = match r.status {
                    200 => match ResultSet::decode(&r.body) {
                        Ok(result) => Attempt::Answer(ClientResponse {
                            result,
                            validator: r.validator,
                            body: r.body,
                            backend: index,
                            cache: fetched.cache,
                            origin_id: r.origin_id,
                            sim_delay: Duration::ZERO,
                            attempts: 0,
                        }),
                        Err(e) => Attempt::Failed(format!("undecodable body: {e}")),
                    },
                    400..=499 => Attempt::Definitive(
                        r.error.unwrap_or(ErrorKind::Resolution),
                        String::from_utf8_lossy(&r.body).into_owned(),
                    ),
                    s => Attempt::Failed(format!("status {s}: {}", String::from_utf8_lossy(&r.body))),
                };
                (attempt, r.sim_delay)
            }
        }
    }
}
