//! The origin server: translates canonical query URLs into read API calls
//! against a store, snapshot or slice.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::State;
use axum::http::{HeaderMap, Method, Uri};
use axum::response::Response;
use axum::Router;
use iovstore_core::integrity::ContentDigest;
use iovstore_core::query::{CanonicalQuery, ConditionsRead};
use iovstore_core::store::Store;
use serde::Serialize;

use crate::http::{json_response, method_not_allowed, to_http};
use crate::wire::{parse_etag, ErrorKind, Ttl, WireResponse, STATS_PATH};

/// Simulated cost of one network hop: a round trip, a deterministic jitter
/// derived from the request key and a transfer time proportional to size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LatencyModel {
    pub rtt: Duration,
    pub jitter: Duration,
    /// Transfer time per MiB of body.
    pub per_mib: Duration,
}

impl LatencyModel {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn fixed(rtt: Duration) -> Self {
        Self {
            rtt,
            ..Self::default()
        }
    }

    pub fn is_zero(&self) -> bool {
        *self == Self::default()
    }

    pub fn delay(&self, key: &str, bytes: usize) -> Duration {
        let jitter = if self.jitter.is_zero() {
            Duration::ZERO
        } else {
            let h = ContentDigest::of(key.as_bytes());
            let r = u64::from_le_bytes(h.0[..8].try_into().expect("8 bytes"));
            Duration::from_nanos(r % (self.jitter.as_nanos() as u64 + 1))
        };
        let transfer = self.per_mib.mul_f64(bytes as f64 / (1024.0 * 1024.0));
        self.rtt + jitter + transfer
    }
}

/// Whether latency is slept for real or only reported in
/// `x-iov-sim-delay-us` for the client to account.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DelayMode {
    #[default]
    Simulated,
    Real,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultKind {
    /// Answer 503.
    Unavailable,
    /// Damage the body but keep the validator of the intact body.
    CorruptBody,
    /// `Unavailable` in even periods, `CorruptBody` in odd ones.
    Mixed,
}

/// Deterministic flapping: request number `n` (from 0) is faulty when
/// `n % period < down`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaultPlan {
    pub period: u64,
    pub down: u64,
    pub kind: FaultKind,
}

impl FaultPlan {
    pub fn hits(&self, n: u64) -> bool {
        self.period > 0 && n % self.period < self.down
    }

    /// The fault applied to request `n`, if any.
    pub fn fault_at(&self, n: u64) -> Option<FaultKind> {
        if !self.hits(n) {
            return None;
        }
        Some(match self.kind {
            FaultKind::Mixed if (n / self.period) % 2 == 0 => FaultKind::Unavailable,
            FaultKind::Mixed => FaultKind::CorruptBody,
            k => k,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct OriginConfig {
    /// `None` picks 300 s for a master store and infinite for immutable
    /// sources.
    pub ttl: Option<Ttl>,
    pub latency: LatencyModel,
    pub delay_mode: DelayMode,
    pub fault: Option<FaultPlan>,
    /// Minimum time between store refreshes; zero disables refreshing.
    pub refresh_interval: Duration,
}

#[derive(Clone)]
pub enum OriginBackend {
    /// A master store, refreshed periodically to pick up new commits.
    Store(Arc<Store>),
    Source(Arc<dyn ConditionsRead>),
}

impl OriginBackend {
    fn reader(&self) -> &dyn ConditionsRead {
        match self {
            OriginBackend::Store(s) => s.as_ref(),
            OriginBackend::Source(s) => s.as_ref(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct OriginStats {
    /// Query requests received, including faulted and not-modified ones.
    pub requests: u64,
    pub ok: u64,
    pub not_modified: u64,
    pub errors: u64,
    pub faults: u64,
}

#[derive(Default)]
struct Counters {
    requests: AtomicU64,
    ok: AtomicU64,
    not_modified: AtomicU64,
    errors: AtomicU64,
    faults: AtomicU64,
}

pub struct Origin {
    backend: OriginBackend,
    config: OriginConfig,
    ttl: Ttl,
    id: String,
    counters: Counters,
    last_refresh: Mutex<Instant>,
}

impl Origin {
    pub fn new(backend: OriginBackend, config: OriginConfig) -> Self {
        let reader = backend.reader();
        let ttl = config.ttl.unwrap_or(if reader.immutable() {
            Ttl::Infinite
        } else {
            Ttl::MASTER_DEFAULT
        });
        let id = reader.source_id();
        Self {
            backend,
            config,
            ttl,
            id,
            counters: Counters::default(),
            last_refresh: Mutex::new(Instant::now()),
        }
    }

    pub fn ttl(&self) -> Ttl {
        self.ttl
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn config(&self) -> &OriginConfig {
        &self.config
    }

    pub fn stats(&self) -> OriginStats {
        let c = &self.counters;
        OriginStats {
            requests: c.requests.load(Ordering::Relaxed),
            ok: c.ok.load(Ordering::Relaxed),
            not_modified: c.not_modified.load(Ordering::Relaxed),
            errors: c.errors.load(Ordering::Relaxed),
            faults: c.faults.load(Ordering::Relaxed),
        }
    }

    fn maybe_refresh(&self) {
        let OriginBackend::Store(store) = &self.backend else {
            return;
        };
        if self.config.refresh_interval.is_zero() {
            return;
        }
        let mut last = self.last_refresh.lock().unwrap_or_else(|e| e.into_inner());
        if last.elapsed() >= self.config.refresh_interval {
            *last = Instant::now();
            if let Err(e) = store.refresh() {
                tracing::warn!("store refresh failed: {e}");
            }
        }
    }

    /// Answers one request path. With `if_none_match` equal to the current
    /// validator the answer is a bodiless 304.
    pub fn handle(&self, path: &str, if_none_match: Option<ContentDigest>) -> WireResponse {
        let n = self.counters.requests.fetch_add(1, Ordering::Relaxed);
        let fault = self.config.fault.and_then(|f| f.fault_at(n));
        if fault == Some(FaultKind::Unavailable) {
            self.counters.faults.fetch_add(1, Ordering::Relaxed);
            let mut r = WireResponse::error(ErrorKind::Unavailable, "origin unavailable", Ttl::Seconds(0), &self.id);
            r.sim_delay = self.config.latency.delay(path, 0);
            return r;
        }
        self.maybe_refresh();

        let mut resp = match CanonicalQuery::from_path(path) {
            Err(e) => WireResponse::error(ErrorKind::of(&e), &e.to_string(), self.ttl, &self.id),
            Ok(q) => match self.backend.reader().read_query(&q) {
                Ok(rs) => WireResponse::ok(rs.encode(), self.ttl, &self.id),
                Err(e) => WireResponse::error(ErrorKind::of(&e), &e.to_string(), self.ttl, &self.id),
            },
        };
        if resp.status == 200 {
            self.counters.ok.fetch_add(1, Ordering::Relaxed);
        } else {
            self.counters.errors.fetch_add(1, Ordering::Relaxed);
        }
        if resp.status == 400 {
            resp.ttl = Ttl::Seconds(0);
        }
        if resp.is_cacheable() && if_none_match == Some(resp.validator) {
            self.counters.not_modified.fetch_add(1, Ordering::Relaxed);
            resp.status = 304;
            resp.body.clear();
        }
        if fault.is_some() && !resp.body.is_empty() {
            self.counters.faults.fetch_add(1, Ordering::Relaxed);
            let mid = resp.body.len() / 2;
            resp.body[mid] ^= 0x20;
        }
        resp.sim_delay = self.config.latency.delay(path, resp.body.len());
        resp
    }
}

async fn origin_handler(State(origin): State<Arc<Origin>>, method: Method, uri: Uri, headers: HeaderMap) -> Response {
    if method != Method::GET {
        return method_not_allowed();
    }
    let path = uri.path().to_string();
    if path == STATS_PATH {
        return json_response(&origin.stats());
    }
    let inm = headers
        .get(axum::http::header::IF_NONE_MATCH)
        .and_then(|v| v.to_str().ok())
        .and_then(parse_etag);
    let o = origin.clone();
    let mut resp = match tokio::task::spawn_blocking(move || o.handle(&path, inm)).await {
        Ok(r) => r,
        Err(e) => WireResponse::error(ErrorKind::Internal, &e.to_string(), Ttl::Seconds(0), origin.id()),
    };
    if origin.config.delay_mode == DelayMode::Real {
        tokio::time::sleep(resp.sim_delay).await;
        resp.sim_delay = Duration::ZERO;
    }
    to_http(&resp, None)
}

pub fn router(origin: Arc<Origin>) -> Router {
    Router::new().fallback(origin_handler).with_state(origin)
}
