//! Reverse proxy for `/user/{name}/...`, routed through the hub's table.

use std::net::SocketAddr;
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use axum::body::Body;
use axum::extract::{ConnectInfo, Request, State};
use axum::http::{header, HeaderMap, HeaderName, HeaderValue, StatusCode, Uri};
use axum::response::{IntoResponse, Redirect, Response};
use axum::Json;
use gate_core::normalize_username;
use hyper_util::client::legacy::connect::HttpConnector;
use hyper_util::client::legacy::Client;
use hyper_util::rt::{TokioExecutor, TokioIo};
use serde_json::json;
use tracing::{debug, warn};

use crate::auth::authenticate;
use crate::hub::Hub;

type HttpClient = Client<HttpConnector, Body>;

fn client() -> &'static HttpClient {
    static CLIENT: OnceLock<HttpClient> = OnceLock::new();
    CLIENT.get_or_init(|| {
        let mut connector = HttpConnector::new();
        connector.set_nodelay(true);
        connector.set_connect_timeout(Some(Duration::from_secs(10)));
        Client::builder(TokioExecutor::new()).build(connector)
    })
}

const HOP_BY_HOP: [&str; 8] = [
    "connection",
    "keep-alive",
    "proxy-authenticate",
    "proxy-authorization",
    "te",
    "trailer",
    "transfer-encoding",
    "upgrade",
];

/// Remove hop-by-hop headers, including any named in `Connection`. The
/// upgrade pair is kept when `keep_upgrade` is set.
pub fn strip_hop_by_hop(headers: &mut HeaderMap, keep_upgrade: bool) {
    let listed: Vec<HeaderName> = headers
        .get_all(header::CONNECTION)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .flat_map(|v| v.split(','))
        .filter_map(|name| HeaderName::from_bytes(name.trim().as_bytes()).ok())
        .collect();
    let upgrade = headers.get(header::UPGRADE).cloned();
    for name in listed {
        headers.remove(name);
    }
    for name in HOP_BY_HOP {
        headers.remove(name);
    }
    if keep_upgrade {
        if let Some(proto) = upgrade {
            headers.insert(header::CONNECTION, HeaderValue::from_static("upgrade"));
            headers.insert(header::UPGRADE, proto);
        }
    }
}

fn wants_upgrade(headers: &HeaderMap) -> bool {
    headers.contains_key(header::UPGRADE)
        && headers
            .get_all(header::CONNECTION)
            .iter()
            .filter_map(|v| v.to_str().ok())
            .any(|v| v.split(',').any(|t| t.trim().eq_ignore_ascii_case("upgrade")))
}

fn error(status: StatusCode, name: &str, message: String) -> Response {
    (status, Json(json!({"error": name, "message": message}))).into_response()
}

/// Everything not handled by the hub API.
pub async fn handle(State(hub): State<Arc<Hub>>, ConnectInfo(peer): ConnectInfo<SocketAddr>, req: Request) -> Response {
    let path = req.uri().path().to_string();
    if path == "/" {
        return Redirect::to("/hub/home").into_response();
    }
    let Some(rest) = path.strip_prefix("/user/") else {
        return error(StatusCode::NOT_FOUND, "NotFound", format!("no such page {path}"));
    };
    let owner_raw = rest.split('/').next().unwrap_or_default();
    let Ok(owner) = normalize_username(owner_raw) else {
        return error(StatusCode::NOT_FOUND, "NotFound", format!("no such user {owner_raw:?}"));
    };
    let ctx = match authenticate(&hub, req.headers(), peer.ip()) {
        Ok(ctx) => ctx,
        Err(f) => return f.into_response(&hub.config().sso_url),
    };
    if ctx.username != owner {
        return error(StatusCode::FORBIDDEN, "Forbidden", format!("{} may not access {owner}'s server", ctx.username));
    }
    let (Some(entry), Some(secret)) = (hub.lookup_route(&path), hub.session_secret(&owner)) else {
        let mut resp = error(StatusCode::SERVICE_UNAVAILABLE, "NotRunning", format!("no server is running for {owner}"));
        resp.headers_mut().insert(header::RETRY_AFTER, HeaderValue::from_static("5"));
        return resp;
    };
    forward(req, &entry.target, &secret, peer, hub.config().timeouts.proxy()).await
}

/// Send `req` to `target` and stream the response back. Connection
/// upgrades are spliced once both sides have switched protocols.
pub async fn forward(mut req: Request, target: &str, secret: &str, peer: SocketAddr, timeout: Duration) -> Response {
    let upgrade = wants_upgrade(req.headers());
    let client_upgrade = upgrade.then(|| hyper::upgrade::on(&mut req));
    let (mut parts, body) = req.into_parts();
    let path_and_query = parts.uri.path_and_query().map(|p| p.as_str()).unwrap_or("/");
    parts.uri = match Uri::try_from(format!("http://{target}{path_and_query}")) {
        Ok(uri) => uri,
        Err(e) => return error(StatusCode::BAD_GATEWAY, "BadGateway", format!("bad target {target}: {e}")),
    };
    parts.version = axum::http::Version::HTTP_11;
    let headers = &mut parts.headers;
    strip_hop_by_hop(headers, upgrade);
    let forwarded = match headers.get("x-forwarded-for").and_then(|v| v.to_str().ok()) {
        Some(prior) => format!("{prior}, {}", peer.ip()),
        None => peer.ip().to_string(),
    };
    if let Ok(v) = HeaderValue::from_str(&forwarded) {
        headers.insert("x-forwarded-for", v);
    }
    if let Some(host) = headers.get(header::HOST).cloned() {
        headers.insert("x-forwarded-host", host);
    }
    headers.insert("x-forwarded-proto", HeaderValue::from_static("http"));
    match HeaderValue::from_str(&format!("Bearer {secret}")) {
        Ok(mut v) => {
            v.set_sensitive(true);
            headers.insert(header::AUTHORIZATION, v);
        }
        Err(_) => return error(StatusCode::INTERNAL_SERVER_ERROR, "Internal", "unusable session token".into()),
    }
    let upstream = Request::from_parts(parts, body);
    let mut resp = match tokio::time::timeout(timeout, client().request(upstream)).await {
        Err(_) => {
            return error(StatusCode::GATEWAY_TIMEOUT, "GatewayTimeout", format!("{target} did not answer in time"))
        }
        Ok(Err(e)) => {
            warn!("proxy to {target} failed: {e}");
            return error(StatusCode::BAD_GATEWAY, "BadGateway", format!("cannot reach {target}"));
        }
        Ok(Ok(resp)) => resp,
    };
    if resp.status() == StatusCode::SWITCHING_PROTOCOLS {
        let Some(client_upgrade) = client_upgrade else {
            return error(StatusCode::BAD_GATEWAY, "BadGateway", "unexpected protocol switch".into());
        };
        let upstream_upgrade = hyper::upgrade::on(&mut resp);
        tokio::spawn(async move {
            match (client_upgrade.await, upstream_upgrade.await) {
                (Ok(c), Ok(u)) => {
                    let (mut c, mut u) = (TokioIo::new(c), TokioIo::new(u));
                    if let Err(e) = tokio::io::copy_bidirectional(&mut c, &mut u).await {
                        debug!("upgraded connection closed: {e}");
                    }
                }
                (c, u) => warn!("upgrade failed: client {:?}, upstream {:?}", c.err(), u.err()),
            }
        });
        let (mut parts, _) = resp.into_parts();
        strip_hop_by_hop(&mut parts.headers, true);
        return Response::from_parts(parts, Body::empty());
    }
    let (mut parts, body) = resp.into_parts();
    strip_hop_by_hop(&mut parts.headers, false);
    Response::from_parts(parts, Body::new(body))
}
