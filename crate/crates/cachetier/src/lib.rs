//! Scalable read path for iovstore: an origin HTTP server over a store or
//! slice, a read-through caching proxy and a failover client.

pub mod client;
pub mod http;
pub mod origin;
pub mod proxy;
pub mod wire;

pub use client::{ClientError, ClientResponse, Endpoint, EndpointList, FailoverClient};
pub use http::{spawn, ServerHandle};
pub use origin::{DelayMode, FaultKind, FaultPlan, LatencyModel, Origin, OriginBackend, OriginConfig};
pub use proxy::{Clock, HttpUpstream, ManualClock, ProxyCache, ProxyConfig, SystemClock};
pub use wire::{CacheStatus, ErrorKind, Ttl, WireResponse};

/// `canonical_url` of a query against a server base URL.
pub fn canonical_url(base: &str, q: &iovstore_core::query::CanonicalQuery) -> String {
    format!("{}{}", base.trim_end_matches('/'), q.to_path())
}
