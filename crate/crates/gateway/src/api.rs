//! Hub HTTP API under `/hub`.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{ConnectInfo, FromRequestParts, State};
use axum::http::request::Parts;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use gate_core::profiles::{build_options_form, OptionsSelection};
use gate_core::{LifecyclePhase, SessionRecord};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::auth::{authenticate, AuthContext};
use crate::hub::{ApiError, Hub};

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, name) = match &self {
            ApiError::SessionExists(_) => (StatusCode::CONFLICT, "SessionExists"),
            ApiError::UnknownProfile(_) => (StatusCode::BAD_REQUEST, "UnknownProfile"),
            ApiError::NoSession => (StatusCode::NOT_FOUND, "NoSession"),
            ApiError::InvalidToken => (StatusCode::UNAUTHORIZED, "InvalidToken"),
            ApiError::WrongPhase(_) => (StatusCode::CONFLICT, "WrongPhase"),
            ApiError::BadRequest(_) => (StatusCode::BAD_REQUEST, "BadRequest"),
            ApiError::StartFailed(_) => (StatusCode::INTERNAL_SERVER_ERROR, "StartFailed"),
            ApiError::Unavailable(_) => (StatusCode::SERVICE_UNAVAILABLE, "Unavailable"),
        };
        let mut body = json!({"error": name, "message": self.to_string()});
        if let ApiError::SessionExists(rec) = &self {
            body["session"] = serde_json::to_value(SessionView::from(rec.as_ref())).expect("view serializes");
        }
        (status, Json(body)).into_response()
    }
}

/// What a user sees of their session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub username: String,
    pub phase: LifecyclePhase,
    pub profile_id: Option<String>,
    pub address: Option<String>,
    pub url: Option<String>,
    pub failure_reason: Option<String>,
    pub requested_at: Option<DateTime<Utc>>,
    pub started_at: Option<DateTime<Utc>>,
    pub stopped_at: Option<DateTime<Utc>>,
    pub since: DateTime<Utc>,
}

impl From<&SessionRecord> for SessionView {
    fn from(r: &SessionRecord) -> Self {
        SessionView {
            username: r.username.to_string(),
            phase: r.phase,
            profile_id: r.profile_id.clone(),
            address: r.address.clone(),
            url: (r.phase == LifecyclePhase::Running).then(|| format!("/user/{}/", r.username)),
            failure_reason: r.failure_reason.clone(),
            requested_at: r.requested_at,
            started_at: r.started_at,
            stopped_at: r.stopped_at,
            since: r.phase_since,
        }
    }
}

/// An authenticated user; rejects with 403, 302 or 400 otherwise.
pub struct User(pub AuthContext);

impl FromRequestParts<Arc<Hub>> for User {
    type Rejection = Response;

    async fn from_request_parts(parts: &mut Parts, hub: &Arc<Hub>) -> Result<Self, Self::Rejection> {
        let peer = parts
            .extensions
            .get::<ConnectInfo<SocketAddr>>()
            .map(|c| c.0.ip())
            .ok_or_else(|| StatusCode::INTERNAL_SERVER_ERROR.into_response())?;
        authenticate(hub, &parts.headers, peer)
            .map(User)
            .map_err(|f| f.into_response(&hub.config().sso_url))
    }
}

/// An authenticated administrator.
pub struct Admin(pub AuthContext);

impl FromRequestParts<Arc<Hub>> for Admin {
    type Rejection = Response;

    async fn from_request_parts(parts: &mut Parts, hub: &Arc<Hub>) -> Result<Self, Self::Rejection> {
        let User(ctx) = User::from_request_parts(parts, hub).await?;
        if hub.is_admin(&ctx.username) {
            Ok(Admin(ctx))
        } else {
            Err((StatusCode::FORBIDDEN, Json(json!({"error": "Forbidden", "message": "admin only"}))).into_response())
        }
    }
}

pub fn router(hub: Arc<Hub>) -> Router {
    Router::new()
        .route("/hub/home", get(home))
        .route("/hub/api/health", get(health))
        .route("/hub/api/profiles", get(profiles))
        .route("/hub/api/spawn", post(spawn))
        .route("/hub/api/stop", post(stop))
        .route("/hub/api/status", get(status))
        .route("/hub/api/callback", post(callback))
        .route("/hub/api/introspect", post(introspect))
        .route("/hub/api/admin/reload-profiles", post(reload_profiles))
        .route("/hub/api/admin/sessions", get(admin_sessions))
        .route("/hub/api/admin/audit", get(audit))
        .fallback(crate::proxy::handle)
        .with_state(hub)
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({"status": "ok"}))
}

fn session_json(hub: &Hub, ctx: &AuthContext) -> serde_json::Value {
    match hub.session(&ctx.username) {
        Some(rec) => serde_json::to_value(SessionView::from(&rec)).expect("view serializes"),
        None => json!({"username": ctx.username, "phase": LifecyclePhase::Idle}),
    }
}

async fn home(State(hub): State<Arc<Hub>>, User(ctx): User) -> Json<serde_json::Value> {
    Json(json!({
        "user": ctx.username,
        "admin": hub.is_admin(&ctx.username),
        "session": session_json(&hub, &ctx),
        "profiles": build_options_form(&hub.catalog()),
    }))
}

async fn profiles(State(hub): State<Arc<Hub>>, User(_): User) -> Response {
    Json(build_options_form(&hub.catalog())).into_response()
}

async fn spawn(
    State(hub): State<Arc<Hub>>,
    User(ctx): User,
    body: Option<Json<OptionsSelection>>,
) -> Result<Response, ApiError> {
    let selection = body.map(|Json(s)| s).unwrap_or_default();
    let rec = hub.spawn(&ctx.username, &selection)?;
    Ok((StatusCode::ACCEPTED, Json(SessionView::from(&rec))).into_response())
}

async fn stop(State(hub): State<Arc<Hub>>, User(ctx): User) -> Result<Json<SessionView>, ApiError> {
    let rec = hub.stop(&ctx.username).await?;
    Ok(Json(SessionView::from(&rec)))
}

async fn status(State(hub): State<Arc<Hub>>, User(ctx): User) -> Json<serde_json::Value> {
    Json(session_json(&hub, &ctx))
}

#[derive(Debug, Deserialize)]
struct CallbackBody {
    token: String,
    address: String,
}

async fn callback(State(hub): State<Arc<Hub>>, Json(body): Json<CallbackBody>) -> Result<Json<SessionView>, ApiError> {
    let rec = hub.callback(&body.token, &body.address).await?;
    Ok(Json(SessionView::from(&rec)))
}

#[derive(Debug, Deserialize)]
struct IntrospectBody {
    token: String,
}

async fn introspect(State(hub): State<Arc<Hub>>, Json(body): Json<IntrospectBody>) -> Json<serde_json::Value> {
    match hub.introspect(&body.token) {
        Some(user) => Json(json!({"valid": true, "username": user})),
        None => Json(json!({"valid": false})),
    }
}

async fn reload_profiles(State(hub): State<Arc<Hub>>, Admin(_): Admin) -> Result<Json<serde_json::Value>, ApiError> {
    let n = hub.reload_profiles()?;
    Ok(Json(json!({"profiles": n})))
}

async fn admin_sessions(State(hub): State<Arc<Hub>>, Admin(_): Admin) -> Json<Vec<SessionRecord>> {
    Json(hub.state().sessions.values().cloned().collect())
}

async fn audit(State(hub): State<Arc<Hub>>, Admin(_): Admin) -> Response {
    let mut resp = Json(hub.audit()).into_response();
    resp.headers_mut()
        .insert(header::CACHE_CONTROL, header::HeaderValue::from_static("no-store"));
    resp
}
