use std::io::Write;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Result;
use iovstore_cachetier::{
    http, origin, proxy, DelayMode, HttpUpstream, LatencyModel, Origin, OriginBackend, OriginConfig, ProxyCache,
    ProxyConfig, SystemClock, Ttl,
};
use iovstore_core::release::{open_slice, Verify};
use tracing::info;

use super::{usage, Ctx};
use crate::args::{Format, ProxyArgs, ServeArgs};
use crate::config::parse_listen;
use crate::output::Output;

const DEFAULT_ORIGIN_LISTEN: &str = "127.0.0.1:8080";
const DEFAULT_PROXY_LISTEN: &str = "127.0.0.1:8081";
const DEFAULT_BUDGET_MIB: u64 = 1024;
const UPSTREAM_TIMEOUT: Duration = Duration::from_secs(30);

fn ms(v: f64) -> Result<Duration> {
    Duration::try_from_secs_f64(v / 1000.0).map_err(|_| usage(format!("{v} is not a non-negative duration")))
}

fn announce(format: Format, addr: SocketAddr) {
    let mut stdout = std::io::stdout().lock();
    let _ = match format {
        Format::Machine => writeln!(stdout, "listen=http://{addr}"),
        Format::Text => writeln!(stdout, "listening on http://{addr}"),
    };
    let _ = stdout.flush();
}

pub fn serve(ctx: &Ctx, args: ServeArgs) -> Result<Output> {
    let listen = args
        .listen
        .as_deref()
        .or(ctx.config.serve.listen.as_deref())
        .unwrap_or(DEFAULT_ORIGIN_LISTEN);
    let addr = parse_listen(listen)?;
    let ttl = match &args.ttl {
        Some(t) => Some(t.parse::<Ttl>().map_err(usage)?),
        None => None,
    };
    let per_mib = if args.mib_per_s > 0.0 {
        Duration::from_secs_f64(1.0 / args.mib_per_s)
    } else {
        Duration::ZERO
    };
    let config = OriginConfig {
        ttl,
        latency: LatencyModel {
            rtt: ms(args.rtt_ms)?,
            jitter: ms(args.jitter_ms)?,
            per_mib,
        },
        delay_mode: if args.real_delay { DelayMode::Real } else { DelayMode::Simulated },
        fault: None,
        refresh_interval: Duration::from_millis(args.refresh_ms),
    };
    let backend = match &args.slice {
        Some(path) => OriginBackend::Source(Arc::new(open_slice(path, Verify::Eager)?)),
        None => OriginBackend::Store(Arc::new(ctx.open_store(false)?)),
    };
    let origin = Arc::new(Origin::new(backend, config));
    info!(id = origin.id(), ttl = ?origin.ttl(), "origin ready");
    let format = ctx.format;
    http::serve_until_interrupted(origin::router(origin.clone()), addr, |a| announce(format, a))?;
    let stats = origin.stats();
    let mut out = Output::new();
    out.set("requests", stats.requests)
        .set("ok", stats.ok)
        .set("not-modified", stats.not_modified)
        .set("errors", stats.errors);
    Ok(out)
}

pub fn proxy(ctx: &Ctx, args: ProxyArgs) -> Result<Output> {
    let section = &ctx.config.proxy;
    let upstream = args
        .upstream
        .or_else(|| section.upstream.clone())
        .ok_or_else(|| usage("--upstream is required"))?;
    let cache_dir = args
        .cache_dir
        .or_else(|| section.cache_dir.clone())
        .ok_or_else(|| usage("--cache-dir is required"))?;
    let budget = args.budget_mib.or(section.budget_mib).unwrap_or(DEFAULT_BUDGET_MIB);
    if budget == 0 {
        return Err(usage("--budget-mib must be at least 1"));
    }
    let listen = args
        .listen
        .as_deref()
        .or(section.listen.as_deref())
        .unwrap_or(DEFAULT_PROXY_LISTEN);
    let addr = parse_listen(listen)?;
    let cache = ProxyCache::new(
        ProxyConfig {
            cache_dir,
            byte_budget: budget * 1024 * 1024,
            hop_latency: LatencyModel::fixed(ms(args.hop_rtt_ms)?),
        },
        Box::new(HttpUpstream::new(&upstream, UPSTREAM_TIMEOUT)),
        Arc::new(SystemClock::default()),
    )?;
    let cache = Arc::new(cache);
    info!(upstream = %upstream, budget_mib = budget, "proxy ready");
    let format = ctx.format;
    http::serve_until_interrupted(proxy::router(cache.clone()), addr, |a| announce(format, a))?;
    cache.flush()?;
    let stats = cache.stats();
    let mut out = Output::new();
    out.set("hits", stats.hits)
        .set("misses", stats.misses)
        .set("revalidated", stats.revalidated)
        .set("entries", stats.entries)
        .set("bytes", stats.bytes);
    Ok(out)
}
