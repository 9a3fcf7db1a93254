//! HTTP plumbing: response rendering, the blocking client call and
//! background server threads.

use std::io;
use std::net::SocketAddr;
use std::thread::JoinHandle;
use std::time::Duration;

use axum::body::Body;
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::Response;
use axum::Router;
use iovstore_core::integrity::ContentDigest;
use serde::Serialize;
use tokio::sync::oneshot;

use crate::wire::{
    etag, micros, parse_etag, CacheStatus, ErrorKind, Ttl, WireResponse, H_CACHE, H_ERROR, H_ORIGIN,
    H_SIM_DELAY, H_TTL, H_VALIDATOR,
};

pub(crate) fn to_http(r: &WireResponse, cache: Option<CacheStatus>) -> Response {
    let mut b = Response::builder()
        .status(StatusCode::from_u16(r.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR))
        .header(header::ETAG, etag(&r.validator))
        .header(H_VALIDATOR, r.validator.to_hex())
        .header(H_TTL, r.ttl.to_string())
        .header(H_SIM_DELAY, micros(r.sim_delay).to_string())
        .header(
            header::CACHE_CONTROL,
            match r.ttl {
                Ttl::Infinite => "public, max-age=31536000, immutable".to_string(),
                Ttl::Seconds(s) => format!("public, max-age={s}"),
            },
        );
    if let Ok(v) = HeaderValue::from_str(&r.origin_id) {
        b = b.header(H_ORIGIN, v);
    }
    if let Some(kind) = r.error {
        b = b
            .header(H_ERROR, kind.as_str())
            .header(header::CONTENT_TYPE, "text/plain; charset=utf-8");
    } else if r.status == 200 {
        b = b.header(header::CONTENT_TYPE, "application/octet-stream");
    }
    if let Some(c) = cache {
        b = b.header(H_CACHE, c.to_string());
    }
    b.body(Body::from(r.body.clone())).expect("static header names are valid")
}

pub(crate) fn json_response<T: Serialize>(v: &T) -> Response {
    Response::builder()
        .status(StatusCode::OK)
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(serde_json::to_vec(v).expect("stats serialize")))
        .expect("static header names are valid")
}

pub(crate) fn method_not_allowed() -> Response {
    Response::builder()
        .status(StatusCode::METHOD_NOT_ALLOWED)
        .header(header::ALLOW, "GET")
        .body(Body::empty())
        .expect("static header names are valid")
}

/// Shared blocking HTTP agent: no TLS, status codes returned as values.
pub fn agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .max_idle_connections(256)
        .max_idle_connections_per_host(256)
        .build()
        .into()
}

/// A received response plus the cache status a proxy reported.
#[derive(Debug, Clone)]
pub struct Fetched {
    pub response: WireResponse,
    pub cache: Option<CacheStatus>,
}

/// GETs `url` and checks that the body matches its validator. Transport
/// failures and validator mismatches are errors; HTTP error statuses are
/// returned as responses.
pub fn fetch(agent: &ureq::Agent, url: &str, if_none_match: Option<&ContentDigest>) -> Result<Fetched, String> {
    let mut req = agent.get(url);
    if let Some(v) = if_none_match {
        req = req.header("if-none-match", etag(v));
    }
    let mut resp = req.call().map_err(|e| format!("{url}: {e}"))?;
    let status = resp.status().as_u16();
    let header = |name: &str| {
        resp.headers()
            .get(name)
            .and_then(|v| v.to_str().ok())
            .map(str::to_string)
    };
    let validator = header(H_VALIDATOR).and_then(|v| parse_etag(&v));
    let ttl = header(H_TTL).and_then(|v| v.parse().ok()).unwrap_or(Ttl::Seconds(0));
    let origin_id = header(H_ORIGIN).unwrap_or_default();
    let error = header(H_ERROR).and_then(|v| v.parse::<ErrorKind>().ok());
    let cache = header(H_CACHE).and_then(|v| v.parse().ok());
    let sim_delay = header(H_SIM_DELAY)
        .and_then(|v| v.parse().ok())
        .map(Duration::from_micros)
        .unwrap_or_default();
    let body = resp
        .body_mut()
        .with_config()
        .limit(u64::MAX)
        .read_to_vec()
        .map_err(|e| format!("{url}: reading body: {e}"))?;
    let validator = match (status, validator) {
        (304, Some(v)) => v,
        (304, None) => return Err(format!("{url}: 304 without validator")),
        (_, Some(v)) if ContentDigest::of(&body) == v => v,
        (_, Some(_)) => return Err(format!("{url}: body does not match its validator")),
        (_, None) if status >= 500 => ContentDigest::of(&body),
        (_, None) => return Err(format!("{url}: response without validator")),
    };
    Ok(Fetched {
        response: WireResponse {
            status,
            body,
            validator,
            ttl,
            origin_id,
            error: error.or_else(|| (status >= 500).then_some(ErrorKind::Unavailable)),
            sim_delay,
        },
        cache,
    })
}

/// An HTTP server running on its own thread and tokio runtime. Dropping
/// the handle stops it.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(mut self) {
        self.stop_inner();
    }

    fn stop_inner(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_inner();
    }
}

fn runtime(name: &str) -> io::Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .thread_name(name)
        .enable_all()
        .build()
}

/// Binds `addr` (port 0 picks a free port) and serves `router` in the
/// background.
pub fn spawn(router: Router, addr: SocketAddr) -> io::Result<ServerHandle> {
    let rt = runtime("iov-http")?;
    let listener = rt.block_on(tokio::net::TcpListener::bind(addr))?;
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel();
    let thread = std::thread::Builder::new().name("iov-http".into()).spawn(move || {
        rt.block_on(async move {
            let server = axum::serve(listener, router).with_graceful_shutdown(async {
                let _ = rx.await;
            });
            if let Err(e) = server.await {
                tracing::error!("server stopped: {e}");
            }
        });
        rt.shutdown_timeout(Duration::from_secs(1));
    })?;
    Ok(ServerHandle {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

/// Serves `router` on `addr` until Ctrl-C. `on_bound` sees the bound
/// address before requests are accepted.
pub fn serve_until_interrupted(router: Router, addr: SocketAddr, on_bound: impl FnOnce(SocketAddr)) -> io::Result<()> {
    let rt = runtime("iov-http")?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        on_bound(listener.local_addr()?);
        axum::serve(listener, router)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })
}
