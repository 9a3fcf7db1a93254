//! Job workloads: traces of canonical queries with oracle digests.

use std::collections::HashMap;

use iovstore_core::integrity::ContentDigest;
use iovstore_core::model::{IovInterval, NodePath, TagName, ValidityPoint};
use iovstore_core::query::{CanonicalQuery, ConditionsRead};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::arrival::ArrivalModel;
use crate::gen::GeneratedStore;
use crate::HarnessError;

/// Byte targets are aimed at within this fraction...
const AIM: f64 = 0.02;
/// ...and a trace outside this fraction is refused.
const TOLERANCE: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct WorkloadProfile {
    pub name: String,
    /// Queries issued by one job.
    pub queries: usize,
    /// Inline payload bytes one job should read, if constrained.
    #[serde(default)]
    pub target_bytes: Option<u64>,
    /// Share of range queries; the rest are point queries.
    #[serde(default)]
    pub range_fraction: f64,
    /// Spacing of queries inside a job, in the trace timeline.
    #[serde(default = "default_think_ms")]
    pub think_ms: f64,
}

fn default_think_ms() -> f64 {
    1.0
}

impl WorkloadProfile {
    pub const PRESETS: [&'static str; 4] = ["geometry-job", "reco-job", "cms-job", "lhcb-job"];

    pub fn preset(name: &str) -> Result<Self, HarnessError> {
        let (queries, target) = match name {
            "geometry-job" => (3000, None),
            "reco-job" => (11_000, Some(77_000_000)),
            "cms-job" => (5000, Some(60_000_000)),
            "lhcb-job" => (2500, Some(40_000_000)),
            _ => {
                return Err(HarnessError::Unknown {
                    what: "workload profile",
                    name: name.to_string(),
                })
            }
        };
        Ok(Self {
            name: name.to_string(),
            queries,
            target_bytes: target,
            range_fraction: 0.0,
            think_ms: default_think_ms(),
        })
    }

    /// Scales the byte target along with a scaled store.
    pub fn scaled(mut self, scale: f64) -> Self {
        self.target_bytes = self.target_bytes.map(|b| (b as f64 * scale).round() as u64);
        self
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if !(0.0..=1.0).contains(&self.range_fraction) {
            return Err(HarnessError::InvalidConfig(format!(
                "range fraction must be in [0, 1], got {}",
                self.range_fraction
            )));
        }
        if !(self.think_ms.is_finite() && self.think_ms >= 0.0) {
            return Err(HarnessError::InvalidConfig("think time must be non-negative".into()));
        }
        if self.target_bytes.is_some() && self.queries == 0 {
            return Err(HarnessError::InvalidConfig("a byte target needs at least one query".into()));
        }
        Ok(())
    }
}

/// One distinct query and what a correct answer to it looks like.
#[derive(Debug, Clone)]
pub struct QueryCase {
    pub query: CanonicalQuery,
    pub path: String,
    /// Digest of the encoded result, taken from the master store.
    pub digest: ContentDigest,
    /// Inline payload bytes in the result.
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEvent {
    /// Seconds from the start of the trace.
    pub t: f64,
    pub job: u32,
    /// Index into [`Trace::cases`].
    pub case: u32,
}

#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub profile: String,
    pub cases: Vec<QueryCase>,
    /// Ordered by time.
    pub events: Vec<TraceEvent>,
    pub jobs: u32,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Case indices of each job in issue order.
    pub fn job_sequences(&self) -> Vec<Vec<u32>> {
        let mut out = vec![Vec::new(); self.jobs as usize];
        for e in &self.events {
            out[e.job as usize].push(e.case);
        }
        out
    }

    pub fn total_bytes(&self) -> u64 {
        self.events.iter().map(|e| self.cases[e.case as usize].bytes).sum()
    }

    pub fn job_bytes(&self) -> Vec<u64> {
        self.job_sequences()
            .iter()
            .map(|seq| seq.iter().map(|&c| self.cases[c as usize].bytes).sum())
            .collect()
    }
}

#[derive(Clone)]
struct Draw {
    query: CanonicalQuery,
    bytes: u64,
}

fn draw<R: Rng>(gs: &GeneratedStore, range_fraction: f64, rng: &mut R) -> Draw {
    let u = &gs.universe[rng.random_range(0..gs.universe.len())];
    let i = rng.random_range(0..u.sinces.len());
    let global = gs.global_tag();
    let (start, tag): (NodePath, TagName) = match rng.random_range(0..20) {
        0..12 => (NodePath::root(), global),
        12..17 => (u.folder.parent().expect("folders have a parent"), global),
        _ => (u.folder.clone(), u.leaf_tag.clone()),
    };
    let since = u.sinces[i];
    if rng.random::<f64>() < range_fraction {
        let last = (i + 1).min(u.sinces.len() - 1);
        let until = u.until(last, gs.horizon);
        let window = IovInterval::new(ValidityPoint(since), ValidityPoint(until)).expect("since < until");
        let bytes = (i..=last).map(|k| u.inline_bytes(k)).sum();
        let query = CanonicalQuery::range(u.folder.clone(), u.channel, start, tag, window);
        Draw { query, bytes }
    } else {
        let t = rng.random_range(since..u.until(i, gs.horizon));
        let query = CanonicalQuery::point(u.folder.clone(), u.channel, start, tag, ValidityPoint(t))
            .expect("valid point");
        Draw {
            query,
            bytes: u.inline_bytes(i),
        }
    }
}

/// Draws one job's queries and swaps individual queries until the job's
/// bytes land within 2% of the target.
fn job_queries<R: Rng>(gs: &GeneratedStore, profile: &WorkloadProfile, rng: &mut R) -> Result<Vec<Draw>, HarnessError> {
    let mut picks: Vec<Draw> = (0..profile.queries)
        .map(|_| draw(gs, profile.range_fraction, rng))
        .collect();
    let Some(target) = profile.target_bytes else {
        return Ok(picks);
    };
    let lo = target as f64 * (1.0 - AIM);
    let hi = target as f64 * (1.0 + AIM);
    let mut sum: u64 = picks.iter().map(|d| d.bytes).sum();
    let mut tries = 0usize;
    while ((sum as f64) < lo || (sum as f64) > hi) && tries < 50 * profile.queries {
        tries += 1;
        let i = rng.random_range(0..picks.len());
        let c = draw(gs, profile.range_fraction, rng);
        let better = if (sum as f64) < lo {
            c.bytes > picks[i].bytes
        } else {
            c.bytes < picks[i].bytes
        };
        if better {
            sum = sum - picks[i].bytes + c.bytes;
            picks[i] = c;
        }
    }
    if (sum as f64 - target as f64).abs() > target as f64 * TOLERANCE {
        return Err(HarnessError::UnreachableByteTarget { target, achieved: sum });
    }
    Ok(picks)
}

/// Builds the case table for `queries`, answering each distinct query once
/// against `oracle`. Returns the case index of every input query.
pub fn oracle_cases(
    oracle: &dyn ConditionsRead,
    queries: impl IntoIterator<Item = CanonicalQuery>,
) -> Result<(Vec<QueryCase>, Vec<u32>), HarnessError> {
    let mut index: HashMap<String, u32> = HashMap::new();
    let mut cases = Vec::new();
    let mut refs = Vec::new();
    for q in queries {
        let path = q.to_path();
        let id = match index.get(&path) {
            Some(&id) => id,
            None => {
                let result = oracle.read_query(&q)?;
                let id = cases.len() as u32;
                cases.push(QueryCase {
                    digest: ContentDigest::of(&result.encode()),
                    bytes: result.payload_bytes(),
                    query: q,
                    path: path.clone(),
                });
                index.insert(path, id);
                id
            }
        };
        refs.push(id);
    }
    Ok((cases, refs))
}

/// `jobs` jobs of `profile` starting at times drawn from `arrival`.
pub fn gen_workload(
    gs: &GeneratedStore,
    profile: &WorkloadProfile,
    arrival: &ArrivalModel,
    jobs: u32,
    seed: u64,
) -> Result<Trace, HarnessError> {
    profile.validate()?;
    arrival.validate()?;
    if gs.universe.is_empty() {
        return Err(HarnessError::InvalidConfig("store has no folders to query".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let starts = arrival.arrival_times(jobs as usize, 1.0, &mut rng)?;
    let mut queries = Vec::new();
    let mut timing = Vec::new();
    for (job, start) in starts.iter().enumerate() {
        for (k, d) in job_queries(gs, profile, &mut rng)?.into_iter().enumerate() {
            queries.push(d.query);
            timing.push((start + k as f64 * profile.think_ms / 1000.0, job as u32));
        }
    }
    let (cases, refs) = oracle_cases(&gs.store, queries)?;
    let mut events: Vec<TraceEvent> = timing
        .into_iter()
        .zip(refs)
        .map(|((t, job), case)| TraceEvent { t, job, case })
        .collect();
    events.sort_by(|a, b| a.t.total_cmp(&b.t));
    Ok(Trace {
        profile: profile.name.clone(),
        cases,
        events,
        jobs,
    })
}

/// `total` requests over exactly `distinct` different queries, each used
/// at least once, shuffled and dealt round-robin to `jobs` jobs.
pub fn dedup_trace(
    gs: &GeneratedStore,
    distinct: usize,
    total: usize,
    jobs: u32,
    seed: u64,
) -> Result<Trace, HarnessError> {
    if distinct == 0 || total < distinct || jobs == 0 {
        return Err(HarnessError::InvalidConfig(format!(
            "need 0 < distinct <= total and jobs > 0, got distinct={distinct} total={total} jobs={jobs}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = std::collections::HashSet::new();
    let mut queries = Vec::with_capacity(distinct);
    let mut tries = 0;
    while queries.len() < distinct {
        tries += 1;
        if tries > distinct * 100 {
            return Err(HarnessError::InvalidConfig(format!(
                "store too small for {distinct} distinct queries"
            )));
        }
        let d = draw(gs, 0.0, &mut rng);
        if seen.insert(d.query.to_path()) {
            queries.push(d.query);
        }
    }
    let (cases, _) = oracle_cases(&gs.store, queries)?;
    let mut order: Vec<u32> = (0..distinct as u32).collect();
    order.extend((distinct..total).map(|_| rng.random_range(0..distinct as u32)));
    order.shuffle(&mut rng);
    let events = order
        .into_iter()
        .enumerate()
        .map(|(i, case)| TraceEvent {
            t: i as f64 / 1000.0,
            job: (i % jobs as usize) as u32,
            case,
        })
        .collect();
    Ok(Trace {
        profile: "dedup".into(),
        cases,
        events,
        jobs,
    })
}
