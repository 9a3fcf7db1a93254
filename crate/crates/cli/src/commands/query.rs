use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use iovstore_cachetier::{CacheStatus, Endpoint, EndpointList, FailoverClient};
use iovstore_core::snapshot::Snapshot;
use iovstore_core::store::{Store, StoreOptions};

use super::{canonical_query, usage, Ctx};
use crate::args::QueryArgs;
use crate::output::{self, Output};

/// Parses the client endpoint kinds plus the local `snapshot=` and `store=`
/// sources.
pub fn endpoint(spec: &str) -> Result<Endpoint> {
    let (kind, value) = spec
        .split_once('=')
        .ok_or_else(|| usage(format!("endpoint '{spec}' is not KIND=VALUE")))?;
    match kind {
        "slice" => Ok(Endpoint::slice(Path::new(value))?),
        "snapshot" => {
            let bytes = fs::read(value).with_context(|| format!("reading {value}"))?;
            Ok(Endpoint::local(format!("snapshot:{value}"), Arc::new(Snapshot::from_bytes(bytes)?)))
        }
        "store" => {
            let store = Store::open(Path::new(value), StoreOptions::read_only())?;
            Ok(Endpoint::local(format!("store:{value}"), Arc::new(store)))
        }
        _ => Endpoint::parse(spec).map_err(usage),
    }
}

fn cache_name(c: CacheStatus) -> &'static str {
    match c {
        CacheStatus::Hit => "hit",
        CacheStatus::Miss => "miss",
        CacheStatus::Revalidated => "revalidated",
    }
}

pub fn run(ctx: &Ctx, args: QueryArgs) -> Result<Output> {
    let specs = if args.endpoints.is_empty() {
        &ctx.config.query.endpoints
    } else {
        &args.endpoints
    };
    if specs.is_empty() {
        return Err(usage("no endpoints: pass --endpoint or set [query] endpoints in the config"));
    }
    let q = canonical_query(&args.query)?;
    let endpoints = specs.iter().map(|s| endpoint(s)).collect::<Result<Vec<_>>>()?;
    let client = FailoverClient::with_timeout(EndpointList::new(endpoints)?, Duration::from_secs(args.timeout_s));
    let resp = client.read(&q)?;
    let mut out = Output::new();
    out.set("backend", client.endpoints().endpoints()[resp.backend].label())
        .set("cache", resp.cache.map(cache_name).unwrap_or("none"))
        .set("origin-id", &resp.origin_id)
        .set("attempts", resp.attempts)
        .set("sim-delay-us", resp.sim_delay.as_micros())
        .set("validator", resp.validator);
    output::result_set(&mut out, &resp.result);
    Ok(out)
}
