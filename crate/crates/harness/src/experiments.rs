//! End-to-end experiments. Each builds what it needs under a work
//! directory and returns a report with its measurements and checks.

use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use iovstore_cachetier::origin::router as origin_router;
use iovstore_cachetier::proxy::router as proxy_router;
use iovstore_cachetier::{
    spawn, Endpoint, EndpointList, FailoverClient, FaultKind, FaultPlan, HttpUpstream, LatencyModel, Origin,
    OriginBackend, OriginConfig, ProxyCache, ProxyConfig, ServerHandle, SystemClock, Ttl,
};
use iovstore_core::release::{build_slice, open_slice, BuildOptions, Verify, SNAPSHOT_NAME};
use iovstore_core::store::{Selection, Store};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::arrival::{fluctuation_ratio, ArrivalModel};
use crate::gen::{gen_store, StorePreset, StoreSpec};
use crate::replay::{replay, ClockMode, ReplayOptions};
use crate::report::ScenarioReport;
use crate::workload::{dedup_trace, gen_workload, Trace, WorkloadProfile};
use crate::HarnessError;

const MIB: f64 = 1024.0 * 1024.0;

fn local() -> std::net::SocketAddr {
    std::net::SocketAddr::from(([127, 0, 0, 1], 0))
}

fn ms(v: f64) -> Duration {
    Duration::from_secs_f64(v / 1000.0)
}

fn link(rtt_ms: f64, jitter_ms: f64, mib_per_s: f64) -> LatencyModel {
    LatencyModel {
        rtt: ms(rtt_ms),
        jitter: ms(jitter_ms),
        per_mib: Duration::from_secs_f64(1.0 / mib_per_s),
    }
}

fn positive(name: &str, v: f64) -> Result<(), HarnessError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(HarnessError::InvalidConfig(format!("{name} must be positive, got {v}")))
    }
}

fn non_negative(name: &str, v: f64) -> Result<(), HarnessError> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(HarnessError::InvalidConfig(format!("{name} must not be negative, got {v}")))
    }
}

fn nonzero(name: &str, v: u64) -> Result<(), HarnessError> {
    if v > 0 {
        Ok(())
    } else {
        Err(HarnessError::InvalidConfig(format!("{name} must be at least 1")))
    }
}

fn origin_server(store: Store, config: OriginConfig) -> Result<(Arc<Origin>, ServerHandle), HarnessError> {
    let origin = Arc::new(Origin::new(OriginBackend::Store(Arc::new(store)), config));
    let server = spawn(origin_router(origin.clone()), local())?;
    Ok((origin, server))
}

fn proxy_server(
    dir: &Path,
    upstream: &str,
    budget_mib: u64,
    hop: LatencyModel,
) -> Result<(Arc<ProxyCache>, ServerHandle), HarnessError> {
    let config = ProxyConfig {
        cache_dir: dir.to_path_buf(),
        byte_budget: budget_mib * 1024 * 1024,
        hop_latency: hop,
    };
    let upstream = Box::new(HttpUpstream::new(upstream, Duration::from_secs(30)));
    let proxy = Arc::new(ProxyCache::new(config, upstream, Arc::new(SystemClock::default()))?);
    let server = spawn(proxy_router(proxy.clone()), local())?;
    Ok((proxy, server))
}

fn client(endpoints: Vec<Endpoint>) -> Result<FailoverClient, HarnessError> {
    Ok(FailoverClient::new(EndpointList::new(endpoints)?))
}

/// Job time straight from a distant origin versus through a warm nearby
/// proxy.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", default)]
pub struct SpeedupParams {
    pub store_scale: f64,
    pub profile: String,
    pub jobs: u32,
    pub upstream_rtt_ms: f64,
    pub upstream_jitter_ms: f64,
    pub upstream_mib_per_s: f64,
    pub proxy_rtt_ms: f64,
    pub proxy_mib_per_s: f64,
    pub cache_budget_mib: u64,
    pub min_speedup: f64,
}

impl Default for SpeedupParams {
    fn default() -> Self {
        Self {
            store_scale: 1.0,
            profile: "reco-job".into(),
            jobs: 1,
            upstream_rtt_ms: 50.0,
            upstream_jitter_ms: 5.0,
            upstream_mib_per_s: 12.5,
            proxy_rtt_ms: 0.2,
            proxy_mib_per_s: 120.0,
            cache_budget_mib: 1024,
            min_speedup: 3.0,
        }
    }
}

impl SpeedupParams {
    pub fn validate(&self) -> Result<(), HarnessError> {
        StoreSpec::scaled(StorePreset::Reco, self.store_scale).validate()?;
        WorkloadProfile::preset(&self.profile)?;
        nonzero("jobs", self.jobs as u64)?;
        non_negative("upstream-rtt-ms", self.upstream_rtt_ms)?;
        non_negative("upstream-jitter-ms", self.upstream_jitter_ms)?;
        positive("upstream-mib-per-s", self.upstream_mib_per_s)?;
        non_negative("proxy-rtt-ms", self.proxy_rtt_ms)?;
        positive("proxy-mib-per-s", self.proxy_mib_per_s)?;
        nonzero("cache-budget-mib", self.cache_budget_mib)?;
        positive("min-speedup", self.min_speedup)
    }
}

pub fn frontier_speedup(
    p: &SpeedupParams,
    workdir: &Path,
    seed: u64,
    report: &mut ScenarioReport,
) -> Result<(), HarnessError> {
    p.validate()?;
    let gs = gen_store(&workdir.join("store"), &StoreSpec::scaled(StorePreset::Reco, p.store_scale), seed)?;
    report.extend(gs.report.lines());
    let profile = WorkloadProfile::preset(&p.profile)?.scaled(p.store_scale);
    let trace = gen_workload(&gs, &profile, &ArrivalModel::Poisson { rate: 1.0 }, p.jobs, seed ^ 0x5eed)?;
    let job_bytes = trace.job_bytes();
    report.set("workload.profile", &profile.name);
    report.set("workload.queries-per-job", profile.queries);
    report.set("workload.job-bytes.min", job_bytes.iter().min().copied().unwrap_or(0));
    report.set("workload.distinct-queries", trace.cases.len());

    let config = OriginConfig {
        latency: link(p.upstream_rtt_ms, p.upstream_jitter_ms, p.upstream_mib_per_s),
        ..OriginConfig::default()
    };
    let (origin, origin_srv) = origin_server(gs.store, config)?;
    let options = ReplayOptions {
        parallelism: 1,
        clock: ClockMode::Simulated,
    };

    let direct = replay(&trace, &client(vec![Endpoint::Origin(origin_srv.url())])?, &options)?;
    report.extend(direct.lines("direct"));

    let hop = link(p.proxy_rtt_ms, 0.0, p.proxy_mib_per_s);
    let (proxy, proxy_srv) = proxy_server(&workdir.join("cache"), &origin_srv.url(), p.cache_budget_mib, hop)?;
    let via_proxy = client(vec![Endpoint::Proxy(proxy_srv.url())])?;
    let before_cold = origin.stats().requests;
    let cold = replay(&trace, &via_proxy, &options)?;
    let before_warm = origin.stats().requests;
    let warm = replay(&trace, &via_proxy, &options)?;
    let warm_origin = origin.stats().requests - before_warm;
    report.extend(cold.lines("cold"));
    report.extend(warm.lines("warm"));
    report.set("cold.origin-requests", before_warm - before_cold);
    report.set("warm.origin-requests", warm_origin);

    let speedup = if warm.mean_job_seconds() > 0.0 {
        direct.mean_job_seconds() / warm.mean_job_seconds()
    } else {
        f64::INFINITY
    };
    report.set("speedup", format!("{speedup:.2}"));
    report.check(
        "speedup",
        speedup >= p.min_speedup,
        format!("warm proxy {speedup:.2}x faster than direct, need {}x", p.min_speedup),
    );
    if let Some(target) = profile.target_bytes {
        let floor = (target as f64 * 0.9) as u64;
        let min = job_bytes.iter().min().copied().unwrap_or(0);
        report.check("job-bytes", min >= floor, format!("smallest job reads {min} bytes, floor {floor}"));
    }
    let wrong = direct.wrong_results + cold.wrong_results + warm.wrong_results;
    let failed = direct.failures + cold.failures + warm.failures;
    report.check("correct", wrong == 0 && failed == 0, format!("{wrong} wrong results, {failed} failures"));
    let served = warm.hits + warm.misses + warm.revalidated;
    report.check(
        "accounting",
        served == warm.queries && warm_origin == warm.misses + warm.revalidated,
        format!(
            "warm: {} hits + {} upstream of {} queries, origin saw {warm_origin}",
            warm.hits,
            warm.misses + warm.revalidated,
            warm.queries
        ),
    );
    drop(proxy_srv);
    proxy.flush()?;
    Ok(())
}

/// Build a geometry slice, then open it and run one job against it
/// locally.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", default)]
pub struct SliceAttachParams {
    pub store_scale: f64,
    pub profile: String,
    pub max_seconds: f64,
    pub min_snapshot_mib: f64,
    pub max_snapshot_mib: f64,
}

impl Default for SliceAttachParams {
    fn default() -> Self {
        Self {
            store_scale: 1.0,
            profile: "geometry-job".into(),
            max_seconds: 10.0,
            min_snapshot_mib: 20.0 / 1.048576,
            max_snapshot_mib: 50.0 / 1.048576,
        }
    }
}

impl SliceAttachParams {
    pub fn validate(&self) -> Result<(), HarnessError> {
        StoreSpec::scaled(StorePreset::Geometry, self.store_scale).validate()?;
        WorkloadProfile::preset(&self.profile)?;
        positive("max-seconds", self.max_seconds)?;
        non_negative("min-snapshot-mib", self.min_snapshot_mib)?;
        if self.max_snapshot_mib < self.min_snapshot_mib {
            return Err(HarnessError::InvalidConfig("max-snapshot-mib below min-snapshot-mib".into()));
        }
        Ok(())
    }
}

pub fn slice_attach(
    p: &SliceAttachParams,
    workdir: &Path,
    seed: u64,
    report: &mut ScenarioReport,
) -> Result<(), HarnessError> {
    p.validate()?;
    let gs = gen_store(&workdir.join("store"), &StoreSpec::scaled(StorePreset::Geometry, p.store_scale), seed)?;
    report.extend(gs.report.lines());
    let profile = WorkloadProfile::preset(&p.profile)?.scaled(p.store_scale);
    let trace = gen_workload(&gs, &profile, &ArrivalModel::Poisson { rate: 1.0 }, 1, seed ^ 0x5eed)?;

    let slice = workdir.join("geometry.slice");
    let t = Instant::now();
    let manifest = build_slice(
        &gs.store,
        &Selection::tagged(iovstore_core::model::NodePath::root(), gs.global_tag()),
        &slice,
        &BuildOptions::default(),
    )?;
    report.set("slice.build-seconds", format!("{:.3}", t.elapsed().as_secs_f64()));
    let snapshot_bytes = manifest.entry(SNAPSHOT_NAME).map(|e| e.size).unwrap_or(0);
    report.set("slice.snapshot-bytes", snapshot_bytes);
    report.set("slice.total-bytes", manifest.total_size);

    let t = Instant::now();
    let handle = open_slice(&slice, Verify::Eager)?;
    let open = t.elapsed().as_secs_f64();
    let c = client(vec![Endpoint::local(format!("slice:{}", slice.display()), Arc::new(handle))])?;
    let m = replay(
        &trace,
        &c,
        &ReplayOptions {
            parallelism: 1,
            clock: ClockMode::Real,
        },
    )?;
    let job = m.mean_job_seconds();
    report.set("slice.open-seconds", format!("{open:.3}"));
    report.extend(m.lines("job"));
    report.set("attach-seconds", format!("{:.3}", open + job));

    let mib = snapshot_bytes as f64 / MIB;
    report.check(
        "snapshot-size",
        (p.min_snapshot_mib..=p.max_snapshot_mib).contains(&mib),
        format!(
            "snapshot {mib:.1} MiB, bounds [{:.1}, {:.1}]",
            p.min_snapshot_mib, p.max_snapshot_mib
        ),
    );
    report.check(
        "attach-time",
        open + job < p.max_seconds,
        format!("open {open:.2}s + job {job:.2}s, limit {}s", p.max_seconds),
    );
    report.check(
        "correct",
        m.wrong_results == 0 && m.failures == 0 && m.queries == trace.len() as u64,
        format!("{} queries, {} wrong, {} failed", m.queries, m.wrong_results, m.failures),
    );
    Ok(())
}

/// Many requests over few distinct queries through one proxy in front of
/// an infinite-TTL origin: the origin must see each distinct query once.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", default)]
pub struct DedupParams {
    pub store_scale: f64,
    pub distinct: usize,
    pub total: usize,
    pub jobs: u32,
    pub parallelism: usize,
}

impl Default for DedupParams {
    fn default() -> Self {
        Self {
            store_scale: 0.05,
            distinct: 500,
            total: 50_000,
            jobs: 50,
            parallelism: 8,
        }
    }
}

impl DedupParams {
    pub fn validate(&self) -> Result<(), HarnessError> {
        StoreSpec::scaled(StorePreset::Reco, self.store_scale).validate()?;
        nonzero("distinct", self.distinct as u64)?;
        nonzero("jobs", self.jobs as u64)?;
        nonzero("parallelism", self.parallelism as u64)?;
        if self.total < self.distinct {
            return Err(HarnessError::InvalidConfig("total must be at least distinct".into()));
        }
        Ok(())
    }
}

pub fn dedup(p: &DedupParams, workdir: &Path, seed: u64, report: &mut ScenarioReport) -> Result<(), HarnessError> {
    p.validate()?;
    let gs = gen_store(&workdir.join("store"), &StoreSpec::scaled(StorePreset::Reco, p.store_scale), seed)?;
    report.extend(gs.report.lines());
    let trace = dedup_trace(&gs, p.distinct, p.total, p.jobs, seed ^ 0xd1ce)?;
    let config = OriginConfig {
        ttl: Some(Ttl::Infinite),
        ..OriginConfig::default()
    };
    let (origin, origin_srv) = origin_server(gs.store, config)?;
    let (proxy, proxy_srv) = proxy_server(&workdir.join("cache"), &origin_srv.url(), 1024, LatencyModel::none())?;
    let m = replay(
        &trace,
        &client(vec![Endpoint::Proxy(proxy_srv.url())])?,
        &ReplayOptions {
            parallelism: p.parallelism,
            clock: ClockMode::Real,
        },
    )?;
    let origin_requests = origin.stats().requests;
    let upstream = proxy.stats().upstream_requests;
    report.extend(m.lines("proxy"));
    report.set("origin.requests", origin_requests);
    report.set("proxy.upstream-requests", upstream);
    report.check(
        "origin-requests",
        origin_requests == p.distinct as u64 && upstream == p.distinct as u64,
        format!("origin saw {origin_requests} requests for {} distinct queries", p.distinct),
    );
    report.check(
        "correct",
        m.wrong_results == 0 && m.failures == 0 && m.queries == p.total as u64,
        format!("{} queries, {} wrong, {} failed", m.queries, m.wrong_results, m.failures),
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaultName {
    Unavailable,
    CorruptBody,
    Mixed,
}

impl From<FaultName> for FaultKind {
    fn from(f: FaultName) -> Self {
        match f {
            FaultName::Unavailable => FaultKind::Unavailable,
            FaultName::CorruptBody => FaultKind::CorruptBody,
            FaultName::Mixed => FaultKind::Mixed,
        }
    }
}

/// A flapping origin backed by a slice: every answer must still be right.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", default)]
pub struct RobustnessParams {
    pub store_scale: f64,
    pub queries: usize,
    pub distinct: usize,
    pub jobs: u32,
    pub parallelism: usize,
    pub fault_period: u64,
    pub fault_down: u64,
    pub fault: FaultName,
}

impl Default for RobustnessParams {
    fn default() -> Self {
        Self {
            store_scale: 0.01,
            queries: 1_000_000,
            distinct: 5000,
            jobs: 1000,
            parallelism: 8,
            fault_period: 10,
            fault_down: 3,
            fault: FaultName::Mixed,
        }
    }
}

impl RobustnessParams {
    pub fn validate(&self) -> Result<(), HarnessError> {
        StoreSpec::scaled(StorePreset::Reco, self.store_scale).validate()?;
        nonzero("distinct", self.distinct as u64)?;
        nonzero("jobs", self.jobs as u64)?;
        nonzero("parallelism", self.parallelism as u64)?;
        nonzero("fault-period", self.fault_period)?;
        if self.queries < self.distinct {
            return Err(HarnessError::InvalidConfig("queries must be at least distinct".into()));
        }
        if self.fault_down > self.fault_period {
            return Err(HarnessError::InvalidConfig("fault-down exceeds fault-period".into()));
        }
        Ok(())
    }
}

pub fn robustness(
    p: &RobustnessParams,
    workdir: &Path,
    seed: u64,
    report: &mut ScenarioReport,
) -> Result<(), HarnessError> {
    p.validate()?;
    let gs = gen_store(&workdir.join("store"), &StoreSpec::scaled(StorePreset::Reco, p.store_scale), seed)?;
    report.extend(gs.report.lines());
    let trace = dedup_trace(&gs, p.distinct, p.queries, p.jobs, seed ^ 0xfa17)?;
    let slice = workdir.join("fallback.slice");
    build_slice(&gs.store, &Selection::everything(), &slice, &BuildOptions::default())?;
    let config = OriginConfig {
        fault: Some(FaultPlan {
            period: p.fault_period,
            down: p.fault_down,
            kind: p.fault.into(),
        }),
        ..OriginConfig::default()
    };
    let (origin, origin_srv) = origin_server(gs.store, config)?;
    let c = client(vec![Endpoint::Origin(origin_srv.url()), Endpoint::slice(&slice)?])?;
    let result = replay(
        &trace,
        &c,
        &ReplayOptions {
            parallelism: p.parallelism,
            clock: ClockMode::Real,
        },
    );
    let stats = origin.stats();
    report.set("origin.requests", stats.requests);
    report.set("origin.faults", stats.faults);
    match result {
        Ok(m) => {
            report.extend(m.lines("client"));
            report.set("client.unhandled-failures", 0);
            let rate = m.queries as f64 / m.wall_seconds.max(1e-9);
            report.set("throughput.queries-per-second", format!("{rate:.0}"));
            report.set("throughput.queries-per-30-days", format!("{:.3e}", rate * 30.0 * 86_400.0));
            report.check(
                "correct",
                m.wrong_results == 0 && m.failures == 0 && m.queries == p.queries as u64,
                format!("{} queries, {} wrong, {} failed", m.queries, m.wrong_results, m.failures),
            );
            report.check(
                "failover-exercised",
                m.failovers > 0 || p.fault_down == 0,
                format!("{} answers came from a later backend", m.failovers),
            );
        }
        Err(HarnessError::Client(e)) => {
            report.set("client.unhandled-failures", 1);
            report.check("correct", false, format!("replay aborted: {e}"));
        }
        Err(e) => return Err(e),
    }
    Ok(())
}

/// Measures the fluctuation ratio of Poisson and overdispersed arrivals.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", default)]
pub struct FluctuationParams {
    pub bins: usize,
    pub bin_seconds: f64,
    pub rate: f64,
    pub k: f64,
    pub poisson_tolerance: f64,
    pub overdispersed_tolerance: f64,
}

impl Default for FluctuationParams {
    fn default() -> Self {
        Self {
            bins: 10_000,
            bin_seconds: 1.0,
            rate: 1000.0,
            k: 14.0,
            poisson_tolerance: 0.2,
            overdispersed_tolerance: 1.5,
        }
    }
}

impl FluctuationParams {
    pub fn validate(&self) -> Result<(), HarnessError> {
        positive("bin-seconds", self.bin_seconds)?;
        non_negative("poisson-tolerance", self.poisson_tolerance)?;
        non_negative("overdispersed-tolerance", self.overdispersed_tolerance)?;
        ArrivalModel::Overdispersed { rate: self.rate, k: self.k }.validate()
    }
}

pub fn fluctuation(p: &FluctuationParams, seed: u64, report: &mut ScenarioReport) -> Result<(), HarnessError> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let poisson = ArrivalModel::Poisson { rate: p.rate }.bin_counts(p.bins, p.bin_seconds, &mut rng)?;
    let over = ArrivalModel::Overdispersed { rate: p.rate, k: p.k }.bin_counts(p.bins, p.bin_seconds, &mut rng)?;
    let rp = fluctuation_ratio(&poisson)?;
    let ro = fluctuation_ratio(&over)?;
    report.set("bins", p.bins);
    report.set("poisson.ratio", format!("{rp:.4}"));
    report.set("overdispersed.k", p.k);
    report.set("overdispersed.ratio", format!("{ro:.4}"));
    report.check(
        "poisson-ratio",
        (rp - 1.0).abs() <= p.poisson_tolerance,
        format!("{rp:.3} vs 1 +- {}", p.poisson_tolerance),
    );
    report.check(
        "overdispersed-ratio",
        (ro - p.k).abs() <= p.overdispersed_tolerance,
        format!("{ro:.3} vs {} +- {}", p.k, p.overdispersed_tolerance),
    );
    Ok(())
}

/// A zero-query trace against the minimal store.
pub fn empty(workdir: &Path, seed: u64, report: &mut ScenarioReport) -> Result<(), HarnessError> {
    let gs = gen_store(&workdir.join("store"), &StoreSpec::new(StorePreset::Minimal), seed)?;
    report.extend(gs.report.lines());
    let trace = Trace::default();
    let source: Arc<dyn iovstore_core::query::ConditionsRead> = Arc::new(gs.store);
    let m = replay(&trace, &client(vec![Endpoint::local("store", source)])?, &ReplayOptions::default())?;
    report.extend(m.lines("replay"));
    report.check("empty", m.queries == 0 && m.wrong_results == 0, format!("{} queries", m.queries));
    Ok(())
}
