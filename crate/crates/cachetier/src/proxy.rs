//! Read-through caching proxy keyed on canonical query URLs.
//!
//! Entries live on disk, one file per key named by the SHA-256 of the key,
//! with an in-memory index persisted to `index.json` by [`ProxyCache::flush`].
//! Fresh entries are served without contacting the upstream; expired ones
//! are revalidated with their validator. A cached body is re-hashed on
//! every hit and dropped if it no longer matches. Eviction is least
//! recently used within a byte budget. Concurrent misses for one key share
//! a single upstream fetch.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use axum::extract::State;
use axum::http::{Method, Uri};
use axum::response::Response;
use axum::Router;
use iovstore_core::integrity::ContentDigest;
use iovstore_core::query::CanonicalQuery;
use serde::{Deserialize, Serialize};

use crate::http::{fetch, json_response, method_not_allowed, to_http};
use crate::origin::LatencyModel;
use crate::wire::{CacheStatus, ErrorKind, Ttl, WireResponse, STATS_PATH};

/// Monotonic time source, replaceable in tests.
pub trait Clock: Send + Sync {
    fn now(&self) -> Duration;
}

pub struct SystemClock(Instant);

impl Default for SystemClock {
    fn default() -> Self {
        SystemClock(Instant::now())
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.0.elapsed()
    }
}

#[derive(Default)]
pub struct ManualClock(Mutex<Duration>);

impl ManualClock {
    pub fn advance(&self, d: Duration) {
        *self.0.lock().unwrap_or_else(|e| e.into_inner()) += d;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Duration {
        *self.0.lock().unwrap_or_else(|e| e.into_inner())
    }
}

/// Where a proxy sends misses and revalidations.
pub trait Upstream: Send + Sync {
    /// Err means the upstream could not be reached or sent a damaged reply.
    fn get(&self, path: &str, if_none_match: Option<&ContentDigest>) -> Result<WireResponse, String>;
}

pub struct HttpUpstream {
    base: String,
    agent: ureq::Agent,
}

impl HttpUpstream {
    pub fn new(base: &str, timeout: Duration) -> Self {
        Self {
            base: base.trim_end_matches('/').to_string(),
            agent: crate::http::agent(timeout),
        }
    }
}

impl Upstream for HttpUpstream {
    fn get(&self, path: &str, if_none_match: Option<&ContentDigest>) -> Result<WireResponse, String> {
        fetch(&self.agent, &format!("{}{path}", self.base), if_none_match).map(|f| f.response)
    }
}

#[derive(Debug, Clone)]
pub struct ProxyConfig {
    pub cache_dir: PathBuf,
    pub byte_budget: u64,
    /// Simulated cost of the client-to-proxy hop.
    pub hop_latency: LatencyModel,
}

#[derive(Debug, thiserror::Error)]
pub enum ProxyError {
    #[error("upstream unavailable: {0}")]
    UpstreamUnavailable(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ProxyStats {
    pub hits: u64,
    pub misses: u64,
    pub revalidated: u64,
    pub upstream_requests: u64,
    pub upstream_failures: u64,
    pub corrupt_entries: u64,
    pub evictions: u64,
    pub entries: u64,
    pub bytes: u64,
}

#[derive(Default)]
struct Counters {
    hits: AtomicU64,
    misses: AtomicU64,
    revalidated: AtomicU64,
    upstream_requests: AtomicU64,
    upstream_failures: AtomicU64,
    corrupt_entries: AtomicU64,
    evictions: AtomicU64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    status: u16,
    validator: ContentDigest,
    ttl: Ttl,
    origin_id: String,
    error: Option<String>,
    size: u64,
    #[serde(skip)]
    expires_at: Option<Duration>,
    #[serde(skip)]
    tick: u64,
}

impl Entry {
    fn fresh(&self, now: Duration) -> bool {
        match self.ttl {
            Ttl::Infinite => true,
            Ttl::Seconds(_) => self.expires_at.is_some_and(|e| now < e),
        }
    }
}

impl Serialize for Ttl {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Ttl {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Default)]
struct CacheState {
    entries: HashMap<String, Entry>,
    lru: BTreeMap<u64, String>,
    tick: u64,
    bytes: u64,
}

type FlightResult = Result<WireResponse, String>;

#[derive(Default)]
struct Flight {
    result: Mutex<Option<FlightResult>>,
    done: Condvar,
}

pub struct ProxyCache {
    config: ProxyConfig,
    upstream: Box<dyn Upstream>,
    clock: Arc<dyn Clock>,
    state: Mutex<CacheState>,
    flights: Mutex<HashMap<String, Arc<Flight>>>,
    counters: Counters,
    tmp_seq: AtomicU64,
}

const INDEX_FILE: &str = "index.json";

fn key_file(key: &str) -> String {
    ContentDigest::of(key.as_bytes()).to_hex()
}

impl ProxyCache {
    /// Opens (or creates) the cache directory. Entries from a previous run
    /// are kept but treated as expired until revalidated.
    pub fn new(config: ProxyConfig, upstream: Box<dyn Upstream>, clock: Arc<dyn Clock>) -> io::Result<Self> {
        fs::create_dir_all(config.cache_dir.join("tmp"))?;
        let mut state = CacheState::default();
        if let Ok(bytes) = fs::read(config.cache_dir.join(INDEX_FILE)) {
            let saved: BTreeMap<String, Entry> = serde_json::from_slice(&bytes).unwrap_or_default();
            for (key, mut entry) in saved {
                if !entry_path(&config.cache_dir, &key).exists() {
                    continue;
                }
                state.tick += 1;
                entry.tick = state.tick;
                entry.expires_at = None;
                state.lru.insert(entry.tick, key.clone());
                state.bytes += entry.size;
                state.entries.insert(key, entry);
            }
        }
        Ok(Self {
            config,
            upstream,
            clock,
            state: Mutex::new(state),
            flights: Mutex::new(HashMap::new()),
            counters: Counters::default(),
            tmp_seq: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &ProxyConfig {
        &self.config
    }

    pub fn stats(&self) -> ProxyStats {
        let c = &self.counters;
        let s = self.lock_state();
        ProxyStats {
            hits: c.hits.load(Ordering::Relaxed),
            misses: c.misses.load(Ordering::Relaxed),
            revalidated: c.revalidated.load(Ordering::Relaxed),
            upstream_requests: c.upstream_requests.load(Ordering::Relaxed),
            upstream_failures: c.upstream_failures.load(Ordering::Relaxed),
            corrupt_entries: c.corrupt_entries.load(Ordering::Relaxed),
            evictions: c.evictions.load(Ordering::Relaxed),
            entries: s.entries.len() as u64,
            bytes: s.bytes,
        }
    }

    /// Path of the body file for `key`, present while the key is cached.
    pub fn entry_path(&self, key: &str) -> PathBuf {
        entry_path(&self.config.cache_dir, key)
    }

    fn lock_state(&self) -> std::sync::MutexGuard<'_, CacheState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Writes the index so a restarted proxy keeps its entries.
    pub fn flush(&self) -> io::Result<()> {
        let saved: BTreeMap<String, Entry> = self
            .lock_state()
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let tmp = self.config.cache_dir.join("tmp").join(INDEX_FILE);
        fs::write(&tmp, serde_json::to_vec(&saved).expect("index serializes"))?;
        fs::rename(tmp, self.config.cache_dir.join(INDEX_FILE))
    }

    /// Serves `path` from cache or upstream.
    pub fn fetch(&self, path: &str) -> Result<(WireResponse, CacheStatus), ProxyError> {
        if let Err(e) = CanonicalQuery::from_path(path) {
            let mut r = WireResponse::error(ErrorKind::MalformedQuery, &e.to_string(), Ttl::Seconds(0), "proxy");
            r.sim_delay = self.config.hop_latency.delay(path, r.body.len());
            return Ok((r, CacheStatus::Miss));
        }
        let now = self.clock.now();
        let cached = {
            let s = self.lock_state();
            s.entries.get(path).cloned()
        };
        let stale = match cached {
            Some(entry) => match self.read_body(path, &entry) {
                Some(body) if entry.fresh(now) => {
                    self.touch(path);
                    self.counters.hits.fetch_add(1, Ordering::Relaxed);
                    let resp = self.served(path, &entry, body, Duration::ZERO);
                    return Ok((resp, CacheStatus::Hit));
                }
                Some(_) => Some(entry),
                None => {
                    self.counters.corrupt_entries.fetch_add(1, Ordering::Relaxed);
                    self.remove(path);
                    None
                }
            },
            None => None,
        };
        self.single_flight(path, stale)
    }

    fn single_flight(&self, path: &str, stale: Option<Entry>) -> Result<(WireResponse, CacheStatus), ProxyError> {
        let (flight, leader) = {
            let mut flights = self.flights.lock().unwrap_or_else(|e| e.into_inner());
            match flights.get(path) {
                Some(f) => (f.clone(), false),
                None => {
                    let f = Arc::new(Flight::default());
                    flights.insert(path.to_string(), f.clone());
                    (f, true)
                }
            }
        };
        if !leader {
            let mut slot = flight.result.lock().unwrap_or_else(|e| e.into_inner());
            while slot.is_none() {
                slot = flight.done.wait(slot).unwrap_or_else(|e| e.into_inner());
            }
            self.counters.hits.fetch_add(1, Ordering::Relaxed);
            return match slot.clone().expect("checked above") {
                Ok(mut r) => {
                    r.sim_delay += self.config.hop_latency.delay(path, r.body.len());
                    Ok((r, CacheStatus::Hit))
                }
                Err(e) => Err(ProxyError::UpstreamUnavailable(e)),
            };
        }

        let outcome = self.fill(path, stale);
        let shared = outcome
            .as_ref()
            .map(|(r, _)| r.clone())
            .map_err(|e| e.to_string());
        *flight.result.lock().unwrap_or_else(|e| e.into_inner()) = Some(shared);
        flight.done.notify_all();
        self.flights.lock().unwrap_or_else(|e| e.into_inner()).remove(path);
        outcome.map(|(mut r, status)| {
            r.sim_delay += self.config.hop_latency.delay(path, r.body.len());
            (r, status)
        })
    }

    /// Fetches from upstream (revalidating `stale` when given) and stores
    /// the result. The returned delay is the upstream's only.
    fn fill(&self, path: &str, stale: Option<Entry>) -> Result<(WireResponse, CacheStatus), ProxyError> {
        let validator = stale.as_ref().map(|e| e.validator);
        self.counters.upstream_requests.fetch_add(1, Ordering::Relaxed);
        let reply = self.upstream.get(path, validator.as_ref()).map_err(|e| {
            self.counters.upstream_failures.fetch_add(1, Ordering::Relaxed);
            ProxyError::UpstreamUnavailable(e)
        })?;
        if reply.status >= 500 {
            self.counters.upstream_failures.fetch_add(1, Ordering::Relaxed);
            return Err(ProxyError::UpstreamUnavailable(format!(
                "upstream answered {}: {}",
                reply.status,
                String::from_utf8_lossy(&reply.body)
            )));
        }
        let now = self.clock.now();
        if reply.status == 304 {
            if let Some(mut entry) = stale.filter(|e| Some(e.validator) == Some(reply.validator)) {
                if let Some(body) = self.read_body(path, &entry) {
                    entry.ttl = reply.ttl;
                    entry.expires_at = reply.ttl.as_duration().map(|d| now + d);
                    self.update_expiry(path, &entry);
                    self.counters.revalidated.fetch_add(1, Ordering::Relaxed);
                    return Ok((self.served(path, &entry, body, reply.sim_delay), CacheStatus::Revalidated));
                }
            }
            // Our copy vanished or changed under us; fetch a full body.
            self.counters.corrupt_entries.fetch_add(1, Ordering::Relaxed);
            self.remove(path);
            return self.fill(path, None);
        }
        self.counters.misses.fetch_add(1, Ordering::Relaxed);
        if reply.is_cacheable() {
            self.store(path, &reply, now)?;
        }
        Ok((reply, CacheStatus::Miss))
    }

    fn served(&self, _path: &str, entry: &Entry, body: Vec<u8>, upstream_delay: Duration) -> WireResponse {
        WireResponse {
            status: entry.status,
            validator: entry.validator,
            body,
            ttl: entry.ttl,
            origin_id: entry.origin_id.clone(),
            error: entry.error.as_deref().and_then(|e| e.parse().ok()),
            sim_delay: upstream_delay,
        }
    }

    /// The cached body if it still hashes to the entry's validator.
    fn read_body(&self, path: &str, entry: &Entry) -> Option<Vec<u8>> {
        let body = fs::read(self.entry_path(path)).ok()?;
        (body.len() as u64 == entry.size && ContentDigest::of(&body) == entry.validator).then_some(body)
    }

    fn touch(&self, path: &str) {
        let mut s = self.lock_state();
        s.tick += 1;
        let tick = s.tick;
        if let Some(e) = s.entries.get_mut(path) {
            let old = std::mem::replace(&mut e.tick, tick);
            s.lru.remove(&old);
            s.lru.insert(tick, path.to_string());
        }
    }

    fn update_expiry(&self, path: &str, entry: &Entry) {
        let mut s = self.lock_state();
        s.tick += 1;
        let tick = s.tick;
        if let Some(e) = s.entries.get_mut(path) {
            e.ttl = entry.ttl;
            e.expires_at = entry.expires_at;
            let old = std::mem::replace(&mut e.tick, tick);
            s.lru.remove(&old);
            s.lru.insert(tick, path.to_string());
        }
    }

    fn remove(&self, path: &str) {
        let mut s = self.lock_state();
        if let Some(e) = s.entries.remove(path) {
            s.lru.remove(&e.tick);
            s.bytes -= e.size;
            let _ = fs::remove_file(self.entry_path(path));
        }
    }

    fn store(&self, path: &str, reply: &WireResponse, now: Duration) -> io::Result<()> {
        let size = reply.body.len() as u64;
        if size > self.config.byte_budget {
            return Ok(());
        }
        let target = self.entry_path(path);
        fs::create_dir_all(target.parent().expect("entry paths have a parent"))?;
        let tmp = self
            .config
            .cache_dir
            .join("tmp")
            .join(format!("{}.{}", key_file(path), self.tmp_seq.fetch_add(1, Ordering::Relaxed)));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&reply.body)?;
        }
        let mut s = self.lock_state();
        fs::rename(&tmp, &target)?;
        s.tick += 1;
        let entry = Entry {
            status: reply.status,
            validator: reply.validator,
            ttl: reply.ttl,
            origin_id: reply.origin_id.clone(),
            error: reply.error.map(|e| e.as_str().to_string()),
            size,
            expires_at: reply.ttl.as_duration().map(|d| now + d),
            tick: s.tick,
        };
        if let Some(old) = s.entries.insert(path.to_string(), entry) {
            s.lru.remove(&old.tick);
            s.bytes -= old.size;
        }
        let tick = s.tick;
        s.lru.insert(tick, path.to_string());
        s.bytes += size;
        while s.bytes > self.config.byte_budget {
            let Some((_, victim)) = s.lru.pop_first() else { break };
            if let Some(e) = s.entries.remove(&victim) {
                s.bytes -= e.size;
                let _ = fs::remove_file(entry_path(&self.config.cache_dir, &victim));
                self.counters.evictions.fetch_add(1, Ordering::Relaxed);
            }
        }
        Ok(())
    }

    /// Whether `path` currently has an entry.
    pub fn contains(&self, path: &str) -> bool {
        self.lock_state().entries.contains_key(path)
    }
}

impl Drop for ProxyCache {
    fn drop(&mut self) {
        if let Err(e) = self.flush() {
            tracing::warn!("could not save proxy index: {e}");
        }
    }
}

fn entry_path(dir: &Path, key: &str) -> PathBuf {
    let h = key_file(key);
    dir.join(&h[..2]).join(&h[2..])
}

async fn proxy_handler(State(proxy): State<Arc<ProxyCache>>, method: Method, uri: Uri) -> Response {
    if method != Method::GET {
        return method_not_allowed();
    }
    let path = uri.path().to_string();
    if path == STATS_PATH {
        return json_response(&proxy.stats());
    }
    let p = proxy.clone();
    let hop = proxy.config.hop_latency.delay(&path, 0);
    match tokio::task::spawn_blocking(move || p.fetch(&path)).await {
        Ok(Ok((resp, status))) => to_http(&resp, Some(status)),
        Ok(Err(e)) => {
            let mut r = WireResponse::error(ErrorKind::Unavailable, &e.to_string(), Ttl::Seconds(0), "proxy");
            r.status = 502;
            r.sim_delay = hop;
            to_http(&r, None)
        }
        Err(e) => to_http(
            &WireResponse::error(ErrorKind::Internal, &e.to_string(), Ttl::Seconds(0), "proxy"),
            None,
        ),
    }
}

pub fn router(proxy: Arc<ProxyCache>) -> Router {
    Router::new().fallback(proxy_handler).with_state(proxy)
}
