//! Replays a trace through a failover client and validates every answer
//! against the oracle digest.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use iovstore_cachetier::{CacheStatus, ClientError, FailoverClient};
use iovstore_core::integrity::ContentDigest;
use serde::Deserialize;

use crate::workload::Trace;
use crate::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClockMode {
    /// Job time is wall time only.
    Real,
    /// Job time is wall time plus the network delay servers report.
    #[default]
    Simulated,
}

#[derive(Debug, Clone, Copy)]
pub struct ReplayOptions {
    /// Jobs run concurrently.
    pub parallelism: usize,
    pub clock: ClockMode,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        Self {
            parallelism: 1,
            clock: ClockMode::Simulated,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metrics {
    pub queries: u64,
    /// Inline payload bytes delivered.
    pub bytes: u64,
    /// Answers whose digest differs from the oracle.
    pub wrong_results: u64,
    /// Definitive query errors where the oracle had an answer.
    pub failures: u64,
    pub hits: u64,
    pub misses: u64,
    pub revalidated: u64,
    /// Answers per endpoint index.
    pub per_backend: Vec<u64>,
    /// Answers that needed more than one backend.
    pub failovers: u64,
    pub job_seconds: Vec<f64>,
    pub wall_seconds: f64,
}

impl Metrics {
    fn merge(&mut self, other: Metrics) {
        self.queries += other.queries;
        self.bytes += other.bytes;
        self.wrong_results += other.wrong_results;
        self.failures += other.failures;
        self.hits += other.hits;
        self.misses += other.misses;
        self.revalidated += other.revalidated;
        self.failovers += other.failovers;
        if self.per_backend.len() < other.per_backend.len() {
            self.per_backend.resize(other.per_backend.len(), 0);
        }
        for (a, b) in self.per_backend.iter_mut().zip(other.per_backend) {
            *a += b;
        }
        self.job_seconds.extend(other.job_seconds);
    }

    /// Nearest-rank percentile of job times; 0 with no jobs.
    pub fn job_percentile(&self, p: f64) -> f64 {
        if self.job_seconds.is_empty() {
            return 0.0;
        }
        let mut v = self.job_seconds.clone();
        v.sort_by(f64::total_cmp);
        let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
        v[rank.min(v.len()) - 1]
    }

    pub fn mean_job_seconds(&self) -> f64 {
        if self.job_seconds.is_empty() {
            return 0.0;
        }
        self.job_seconds.iter().sum::<f64>() / self.job_seconds.len() as f64
    }

    /// Share of proxy answers served without going upstream.
    pub fn hit_ratio(&self) -> f64 {
        let n = self.hits + self.misses + self.revalidated;
        if n == 0 {
            0.0
        } else {
            self.hits as f64 / n as f64
        }
    }

    /// Report lines under `prefix`.
    pub fn lines(&self, prefix: &str) -> Vec<(String, String)> {
        let backends = self
            .per_backend
            .iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join(",");
        [
            ("queries", self.queries.to_string()),
            ("bytes", self.bytes.to_string()),
            ("wrong-results", self.wrong_results.to_string()),
            ("failures", self.failures.to_string()),
            ("cache-hits", self.hits.to_string()),
            ("cache-misses", self.misses.to_string()),
            ("cache-revalidated", self.revalidated.to_string()),
            ("hit-ratio", format!("{:.4}", self.hit_ratio())),
            ("per-backend", backends),
            ("failovers", self.failovers.to_string()),
            ("jobs", self.job_seconds.len().to_string()),
            ("job-seconds.mean", format!("{:.4}", self.mean_job_seconds())),
            ("job-seconds.p50", format!("{:.4}", self.job_percentile(50.0))),
            ("job-seconds.p95", format!("{:.4}", self.job_percentile(95.0))),
            ("job-seconds.max", format!("{:.4}", self.job_percentile(100.0))),
            ("wall-seconds", format!("{:.3}", self.wall_seconds)),
        ]
        .into_iter()
        .map(|(k, v)| (format!("{prefix}.{k}"), v))
        .collect()
    }
}

fn run_job(client: &FailoverClient, trace: &Trace, seq: &[u32], clock: ClockMode) -> Result<Metrics, ClientError> {
    let mut m = Metrics {
        per_backend: vec![0; client.endpoints().endpoints().len()],
        ..Metrics::default()
    };
    let started = Instant::now();
    let mut simulated = Duration::ZERO;
    for &c in seq {
        let case = &trace.cases[c as usize];
        m.queries += 1;
        match client.read(&case.query) {
            Ok(r) => {
                simulated += r.sim_delay;
                if r.attempts > 1 {
                    m.failovers += 1;
                }
                m.per_backend[r.backend] += 1;
                match r.cache {
                    Some(CacheStatus::Hit) => m.hits += 1,
                    Some(CacheStatus::Miss) => m.misses += 1,
                    Some(CacheStatus::Revalidated) => m.revalidated += 1,
                    None => {}
                }
                if ContentDigest::of(&r.body) == case.digest {
                    m.bytes += r.result.payload_bytes();
                } else {
                    m.wrong_results += 1;
                }
            }
            Err(ClientError::Query { .. }) => m.failures += 1,
            Err(e) => return Err(e),
        }
    }
    let mut t = started.elapsed();
    if clock == ClockMode::Simulated {
        t += simulated;
    }
    m.job_seconds.push(t.as_secs_f64());
    Ok(m)
}

/// Runs every job of `trace` through `client`, `parallelism` jobs at a
/// time. An unhandled failure (every backend failed) aborts the replay.
pub fn replay(trace: &Trace, client: &FailoverClient, options: &ReplayOptions) -> Result<Metrics, HarnessError> {
    if options.parallelism == 0 {
        return Err(HarnessError::InvalidConfig("parallelism must be at least 1".into()));
    }
    let jobs = trace.job_sequences();
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let total = Mutex::new(Metrics {
        per_backend: vec![0; client.endpoints().endpoints().len()],
        ..Metrics::default()
    });
    let error: Mutex<Option<ClientError>> = Mutex::new(None);
    let started = Instant::now();
    std::thread::scope(|s| {
        for _ in 0..options.parallelism.min(jobs.len().max(1)) {
            s.spawn(|| loop {
                if abort.load(Ordering::Relaxed) {
                    return;
                }
                let j = next.fetch_add(1, Ordering::Relaxed);
                let Some(seq) = jobs.get(j) else { return };
                match run_job(client, trace, seq, options.clock) {
                    Ok(m) => total.lock().unwrap_or_else(|e| e.into_inner()).merge(m),
                    Err(e) => {
                        abort.store(true, Ordering::Relaxed);
                        error.lock().unwrap_or_else(|e| e.into_inner()).get_or_insert(e);
                        return;
                    }
                }
            });
        }
    });
    if let Some(e) = error.into_inner().unwrap_or_else(|e| e.into_inner()) {
        return Err(e.into());
    }
    let mut m = total.into_inner().unwrap_or_else(|e| e.into_inner());
    m.wall_seconds = started.elapsed().as_secs_f64();
    Ok(m)
}
