//! Request authentication: a trusted front proxy asserts identity through a
//! header; session tokens authenticate servers and scripted clients.

use std::net::IpAddr;

use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use gate_core::{normalize_username, Username};
use serde_json::json;

use crate::hub::Hub;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuthMethod {
    TrustedHeader,
    Token,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuthContext {
    pub username: Username,
    pub method: AuthMethod,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AuthFailure {
    /// The peer may not assert identities.
    UntrustedPeer,
    /// Trusted peer, but no identity header: send the browser to SSO.
    NoIdentity,
    InvalidUsername(String),
}

impl AuthFailure {
    pub fn into_response(self, sso_url: &str) -> Response {
        match self {
            AuthFailure::UntrustedPeer => (
                StatusCode::FORBIDDEN,
                Json(json!({"error": "UntrustedPeer", "message": "identity headers are only accepted from the front proxy"})),
            )
                .into_response(),
            AuthFailure::NoIdentity => (StatusCode::FOUND, [(header::LOCATION, sso_url.to_string())]).into_response(),
            AuthFailure::InvalidUsername(raw) => (
                StatusCode::BAD_REQUEST,
                Json(json!({"error": "InvalidUsername", "message": format!("invalid username {raw:?}")})),
            )
                .into_response(),
        }
    }
}

/// `Bearer` credential from the Authorization header.
pub fn bearer(headers: &HeaderMap) -> Option<&str> {
    let value = headers.get(header::AUTHORIZATION)?.to_str().ok()?;
    let (scheme, token) = value.split_once(' ')?;
    scheme.eq_ignore_ascii_case("bearer").then(|| token.trim()).filter(|t| !t.is_empty())
}

/// Pure decision over the request facts. `token_owner` is the owner of the
/// presented bearer token, if it is valid.
pub fn decide(
    peer: IpAddr,
    trusted: &[IpAddr],
    identity: Option<&[u8]>,
    token_owner: Option<Username>,
) -> Result<AuthContext, AuthFailure> {
    if let Some(username) = token_owner {
        return Ok(AuthContext {
            username,
            method: AuthMethod::Token,
        });
    }
    if !trusted.contains(&peer) {
        return Err(AuthFailure::UntrustedPeer);
    }
    let raw = identity.ok_or(AuthFailure::NoIdentity)?;
    let raw = std::str::from_utf8(raw).map_err(|_| AuthFailure::InvalidUsername(String::from_utf8_lossy(raw).into_owned()))?;
    let username = normalize_username(raw).map_err(|e| AuthFailure::InvalidUsername(e.raw))?;
    Ok(AuthContext {
        username,
        method: AuthMethod::TrustedHeader,
    })
}

pub fn authenticate(hub: &Hub, headers: &HeaderMap, peer: IpAddr) -> Result<AuthContext, AuthFailure> {
    let config = hub.config();
    let owner = bearer(headers).and_then(|t| hub.introspect(t));
    let identity = headers.get(config.auth_header_name.as_str()).map(|v| v.as_bytes());
    let ctx = decide(peer, &config.trusted_proxy_addresses, identity, owner)?;
    hub.ensure_user(&ctx.username);
    Ok(ctx)
}
