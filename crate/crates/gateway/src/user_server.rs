//! The per-user server: binds a port, reports its address to the hub and
//! serves its pages to requests carrying the owner's credentials.

use std::collections::HashMap;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::{Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{Html, IntoResponse, Redirect, Response};
use axum::routing::get;
use axum::Router;
use bytes::Bytes;
use gate_core::spawner::{ENV_ADVERTISE_HOST, ENV_GATEWAY_URL, ENV_PATH_PREFIX, ENV_PORT, ENV_SESSION_TOKEN};
use http_body_util::{BodyExt, Full};
use hyper_util::client::legacy::connect::HttpConnector;
use hyper_util::client::legacy::Client;
use hyper_util::rt::TokioExecutor;
use serde_json::{json, Value};
use subtle::ConstantTimeEq;
use thiserror::Error;
use tokio::net::TcpListener;
use tracing::{info, warn};

/// Cookie accepted in place of a bearer token.
pub const SESSION_COOKIE: &str = "gateway-session";

#[derive(Debug, Error)]
pub enum UserServerError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("cannot bind: {0}")]
    Bind(std::io::Error),
    #[error("hub rejected the session token ({0})")]
    Rejected(String),
    #[error("hub unreachable: {0}")]
    Unreachable(String),
    #[error("serving failed: {0}")]
    Serve(std::io::Error),
}

impl UserServerError {
    pub fn exit_code(&self) -> i32 {
        match self {
            UserServerError::Config(_) | UserServerError::Bind(_) => 1,
            UserServerError::Rejected(_) => 3,
            UserServerError::Unreachable(_) => 4,
            UserServerError::Serve(_) => 5,
        }
    }
}

#[derive(Clone)]
pub struct UserServerConfig {
    pub gateway_url: String,
    pub token: String,
    pub prefix: String,
    pub port: u16,
    pub bind: IpAddr,
    pub advertise_host: String,
    /// How long to keep retrying an unreachable hub.
    pub retry_for: Duration,
}

impl std::fmt::Debug for UserServerConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("UserServerConfig")
            .field("gateway_url", &self.gateway_url)
            .field("prefix", &self.prefix)
            .field("port", &self.port)
            .field("bind", &self.bind)
            .field("advertise_host", &self.advertise_host)
            .finish_non_exhaustive()
    }
}

impl UserServerConfig {
    /// Read `GATEWAY_URL`, `SESSION_TOKEN`, `PATH_PREFIX`, `PORT`,
    /// `BIND_HOST` and `ADVERTISE_HOST` (falling back to `HOSTNAME`).
    pub fn from_env() -> Result<Self, UserServerError> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self, UserServerError> {
        let need = |k: &str| get(k).filter(|v| !v.is_empty()).ok_or_else(|| UserServerError::Config(format!("{k} is not set")));
        let gateway_url = need(ENV_GATEWAY_URL)?.trim_end_matches('/').to_string();
        let token = need(ENV_SESSION_TOKEN)?;
        let prefix = need(ENV_PATH_PREFIX)?.trim_end_matches('/').to_string();
        if !prefix.starts_with("/user/") {
            return Err(UserServerError::Config(format!("{ENV_PATH_PREFIX} must start with /user/")));
        }
        let port = match get(ENV_PORT) {
            Some(p) if !p.is_empty() => p.parse().map_err(|_| UserServerError::Config(format!("bad {ENV_PORT} {p:?}")))?,
            _ => 0,
        };
        let bind = match get("BIND_HOST") {
            Some(b) if !b.is_empty() => b.parse().map_err(|_| UserServerError::Config(format!("bad BIND_HOST {b:?}")))?,
            _ => IpAddr::V4(Ipv4Addr::UNSPECIFIED),
        };
        let advertise_host = get(ENV_ADVERTISE_HOST)
            .or_else(|| get("HOSTNAME"))
            .filter(|h| !h.is_empty())
            .unwrap_or_else(|| "127.0.0.1".to_string());
        Ok(UserServerConfig {
            gateway_url,
            token,
            prefix,
            port,
            bind,
            advertise_host,
            retry_for: Duration::from_secs(60),
        })
    }
}

type HubClient = Client<HttpConnector, Full<Bytes>>;

fn hub_client() -> HubClient {
    Client::builder(TokioExecutor::new()).build(HttpConnector::new())
}

enum PostError {
    Connect(String),
    Other(String),
}

async fn post_json(client: &HubClient, url: &str, body: &Value) -> Result<(StatusCode, Value), PostError> {
    let req = axum::http::Request::post(url)
        .header(header::CONTENT_TYPE, "application/json")
        .body(Full::new(Bytes::from(body.to_string())))
        .map_err(|e| PostError::Other(e.to_string()))?;
    let resp = tokio::time::timeout(Duration::from_secs(30), client.request(req))
        .await
        .map_err(|_| PostError::Connect(format!("{url}: timed out")))?
        .map_err(|e| {
            if e.is_connect() {
                PostError::Connect(format!("{url}: {e}"))
            } else {
                PostError::Other(format!("{url}: {e}"))
            }
        })?;
    let status = resp.status();
    let bytes = resp
        .into_body()
        .collect()
        .await
        .map_err(|e| PostError::Other(e.to_string()))?
        .to_bytes();
    Ok((status, serde_json::from_slice(&bytes).unwrap_or(Value::Null)))
}

/// POST with retries while the hub cannot be reached.
async fn post_retrying(client: &HubClient, url: &str, body: &Value, retry_for: Duration) -> Result<(StatusCode, Value), UserServerError> {
    let deadline = Instant::now() + retry_for;
    let mut delay = Duration::from_millis(100);
    loop {
        match post_json(client, url, body).await {
            Ok(r) => return Ok(r),
            Err(PostError::Connect(e)) if Instant::now() < deadline => {
                warn!("{e}; retrying");
                tokio::time::sleep(delay.min(deadline.saturating_duration_since(Instant::now()))).await;
                delay = (delay * 2).min(Duration::from_secs(2));
            }
            Err(PostError::Connect(e) | PostError::Other(e)) => return Err(UserServerError::Unreachable(e)),
        }
    }
}

struct ServerState {
    cfg: UserServerConfig,
    owner: String,
    client: HubClient,
    /// Introspected foreign tokens: token to (owner, checked at).
    cache: Mutex<HashMap<String, (Option<String>, Instant)>>,
}

const CACHE_TTL: Duration = Duration::from_secs(30);

fn credential(headers: &HeaderMap) -> Option<String> {
    if let Some(token) = crate::auth::bearer(headers) {
        return Some(token.to_string());
    }
    headers
        .get_all(header::COOKIE)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .flat_map(|v| v.split(';'))
        .filter_map(|kv| kv.trim().split_once('='))
        .find(|(k, _)| *k == SESSION_COOKIE)
        .map(|(_, v)| v.to_string())
}

impl ServerState {
    async fn owner_of(&self, token: &str) -> Option<String> {
        if let Some((owner, at)) = self.cache.lock().expect("cache lock").get(token) {
            if at.elapsed() < CACHE_TTL {
                return owner.clone();
            }
        }
        let url = format!("{}/hub/api/introspect", self.cfg.gateway_url);
        let owner = match post_json(&self.client, &url, &json!({"token": token})).await {
            Ok((status, body)) if status.is_success() && body["valid"] == true => body["username"].as_str().map(String::from),
            _ => None,
        };
        self.cache
            .lock()
            .expect("cache lock")
            .insert(token.to_string(), (owner.clone(), Instant::now()));
        owner
    }

    async fn authorized(&self, headers: &HeaderMap) -> bool {
        let Some(token) = credential(headers) else { return false };
        if bool::from(token.as_bytes().ct_eq(self.cfg.token.as_bytes())) {
            return true;
        }
        self.owner_of(&token).await.as_deref() == Some(self.owner.as_str())
    }
}

async fn require_owner(State(state): State<Arc<ServerState>>, req: Request, next: Next) -> Response {
    if state.authorized(req.headers()).await {
        next.run(req).await
    } else {
        (StatusCode::UNAUTHORIZED, "unauthorized\n").into_response()
    }
}

async fn ping() -> &'static str {
    "pong"
}

async fn landing(State(state): State<Arc<ServerState>>) -> Html<String> {
    Html(format!(
        "<!doctype html>\n<html><head><title>{owner}</title></head>\n<body><h1>Session of {owner}</h1>\n<p>Serving {prefix}/ on port {port}.</p></body></html>\n",
        owner = state.owner,
        prefix = state.cfg.prefix,
        port = state.cfg.port,
    ))
}

async fn whoami(State(state): State<Arc<ServerState>>, headers: HeaderMap) -> axum::Json<Value> {
    axum::Json(json!({
        "owner": state.owner,
        "forwarded_for": headers.get("x-forwarded-for").and_then(|v| v.to_str().ok()),
    }))
}

fn router(state: Arc<ServerState>) -> Router {
    let prefix = state.cfg.prefix.clone();
    let pages = Router::new()
        .route(&format!("{prefix}/"), get(landing))
        .route(&format!("{prefix}/ping"), get(ping))
        .route(&format!("{prefix}/api/whoami"), get(whoami))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_owner));
    let slash = format!("{prefix}/");
    pages
        .route(&prefix, get(move || async move { Redirect::permanent(&slash) }))
        .with_state(state)
}

/// Bind, introspect, call back, then serve until `shutdown` resolves.
pub async fn run(
    cfg: UserServerConfig,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), UserServerError> {
    let listener = TcpListener::bind(SocketAddr::new(cfg.bind, cfg.port))
        .await
        .map_err(UserServerError::Bind)?;
    let port = listener.local_addr().map_err(UserServerError::Bind)?.port();
    let client = hub_client();

    let url = format!("{}/hub/api/introspect", cfg.gateway_url);
    let (status, body) = post_retrying(&client, &url, &json!({"token": cfg.token}), cfg.retry_for).await?;
    let owner = match body["username"].as_str() {
        Some(owner) if status.is_success() && body["valid"] == true => owner.to_string(),
        _ => return Err(UserServerError::Rejected(format!("introspection: {status}"))),
    };
    if cfg.prefix != format!("/user/{owner}") {
        return Err(UserServerError::Rejected(format!("token belongs to {owner}, not {}", cfg.prefix)));
    }

    let address = format!("{}:{port}", cfg.advertise_host);
    let url = format!("{}/hub/api/callback", cfg.gateway_url);
    let (status, body) = post_retrying(&client, &url, &json!({"token": cfg.token, "address": address}), cfg.retry_for).await?;
    if !status.is_success() {
        return Err(UserServerError::Rejected(format!("callback: {status} {}", body["error"])));
    }
    info!("serving {} for {owner} on {address}", cfg.prefix);

    let mut cfg = cfg;
    cfg.port = port;
    let state = Arc::new(ServerState {
        cfg,
        owner,
        client,
        cache: Mutex::new(HashMap::new()),
    });
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(UserServerError::Serve)
}
