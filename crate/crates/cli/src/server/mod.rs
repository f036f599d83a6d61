//! HTTP API over persisted sessions.
//!
//! Sessions are selected with the `X-Session-Id` header (default
//! `default`). Mutations accept an `X-Request-Id` header; repeating a
//! request id returns the stored reply without applying the command again.
//! Engine work runs on the blocking pool behind a per-session lock, so
//! mutations on one session are serialized while reads share the lock.

mod error;
mod handlers;

use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{DefaultBodyLimit, FromRequest, FromRequestParts, Query, Request, State};
use axum::http::request::Parts;
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post};
use axum::{Json, Router};
use debias_core::store::valid_session_id;
use debias_core::{Config, FsStore, Outcome, SessionHandle, SessionSettings, TabularDataset};
use tower_http::services::ServeDir;

pub use error::ApiError;

pub const SESSION_HEADER: &str = "x-session-id";
pub const REQUEST_HEADER: &str = "x-request-id";
pub const DEFAULT_SESSION: &str = "default";

pub type Handle = Arc<RwLock<SessionHandle<FsStore>>>;

pub struct AppState {
    pub config: Config,
    sessions: Mutex<HashMap<String, Handle>>,
}

impl AppState {
    pub fn new(config: Config) -> Self {
        Self {
            config,
            sessions: Mutex::new(HashMap::new()),
        }
    }

    /// Loaded session, replaying it from disk on first use.
    pub fn session(&self, id: &str) -> Result<Handle, ApiError> {
        let mut sessions = self
            .sessions
            .lock()
            .map_err(|_| ApiError::internal("session registry poisoned"))?;
        if let Some(h) = sessions.get(id) {
            return Ok(Arc::clone(h));
        }
        if !FsStore::exists(&self.config.data_dir, id) {
            return Err(ApiError::not_found(
                "SESSION_NOT_FOUND",
                format!("no session `{id}`"),
            ));
        }
        let store = FsStore::open(&self.config.data_dir, id)
            .map_err(|e| ApiError::internal(e.to_string()))?;
        let handle = Arc::new(RwLock::new(SessionHandle::open(id, store)?));
        sessions.insert(id.to_string(), Arc::clone(&handle));
        Ok(handle)
    }

    /// Creates and registers a new session. Holds the registry lock so two
    /// creations of one id cannot interleave.
    pub fn create(
        &self,
        id: &str,
        dataset: TabularDataset,
        settings: SessionSettings,
        request_id: Option<String>,
    ) -> Result<Outcome, ApiError> {
        let mut sessions = self
            .sessions
            .lock()
            .map_err(|_| ApiError::internal("session registry poisoned"))?;
        if sessions.contains_key(id) || FsStore::exists(&self.config.data_dir, id) {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "SESSION_EXISTS",
                format!("session `{id}` already exists"),
            ));
        }
        let store = FsStore::open(&self.config.data_dir, id)
            .map_err(|e| ApiError::internal(e.to_string()))?;
        let (handle, outcome) = SessionHandle::create(id, dataset, settings, store, request_id)?;
        sessions.insert(id.to_string(), Arc::new(RwLock::new(handle)));
        Ok(outcome)
    }
}

/// Value of the `X-Session-Id` header.
pub struct SessionId(pub String);

impl<S: Send + Sync> FromRequestParts<S> for SessionId {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, _: &S) -> Result<Self, Self::Rejection> {
        let id = match parts.headers.get(SESSION_HEADER) {
            Some(v) => v
                .to_str()
                .map_err(|_| ApiError::bad_request("X-Session-Id is not valid text"))?
                .to_string(),
            None => DEFAULT_SESSION.to_string(),
        };
        if !valid_session_id(&id) {
            return Err(ApiError::bad_request(format!("invalid session id `{id}`")));
        }
        Ok(SessionId(id))
    }
}

/// Value of the `X-Request-Id` header, if any.
pub struct RequestId(pub Option<String>);

impl<S: Send + Sync> FromRequestParts<S> for RequestId {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, _: &S) -> Result<Self, Self::Rejection> {
        match parts.headers.get(REQUEST_HEADER) {
            None => Ok(RequestId(None)),
            Some(v) => {
                let id = v
                    .to_str()
                    .map_err(|_| ApiError::bad_request("X-Request-Id is not valid text"))?;
                if id.is_empty() || id.len() > 200 {
                    return Err(ApiError::bad_request(
                        "X-Request-Id must be 1 to 200 characters",
                    ));
                }
                Ok(RequestId(Some(id.to_string())))
            }
        }
    }
}

/// JSON body whose rejections use the API error shape.
pub struct ApiJson<T>(pub T);

impl<S, T> FromRequest<S> for ApiJson<T>
where
    Json<T>: FromRequest<S, Rejection = JsonRejection>,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request(request: Request, state: &S) -> Result<Self, Self::Rejection> {
        Json::<T>::from_request(request, state)
            .await
            .map(|Json(v)| ApiJson(v))
            .map_err(|r| ApiError::new(r.status(), "INVALID_BODY", r.body_text()))
    }
}

/// Query string whose rejections use the API error shape.
pub struct ApiQuery<T>(pub T);

impl<S, T> FromRequestParts<S> for ApiQuery<T>
where
    Query<T>: FromRequestParts<S, Rejection = QueryRejection>,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &S) -> Result<Self, Self::Rejection> {
        Query::<T>::from_request_parts(parts, state)
            .await
            .map(|Query(v)| ApiQuery(v))
            .map_err(|r| ApiError::new(r.status(), "INVALID_QUERY", r.body_text()))
    }
}

fn tokens_match(given: &[u8], expected: &[u8]) -> bool {
    given.len() == expected.len()
        && given
            .iter()
            .zip(expected)
            .fold(0u8, |acc, (a, b)| acc | (a ^ b))
            == 0
}

async fn require_token(
    State(state): State<Arc<AppState>>,
    request: Request,
    next: Next,
) -> Response {
    let Some(token) = &state.config.server.token else {
        return next.run(request).await;
    };
    let given = request
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    match given {
        Some(g) if tokens_match(g.as_bytes(), token.as_bytes()) => next.run(request).await,
        _ => ApiError::new(
            StatusCode::UNAUTHORIZED,
            "UNAUTHORIZED",
            "missing or wrong bearer token",
        )
        .into_response(),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/health", get(handlers::health))
        .route("/session", post(handlers::create_session))
        .route("/sessions", get(handlers::list_sessions))
        .route("/overview", get(handlers::overview))
        .route("/variables", get(handlers::variables))
        .route("/variables/{name}", get(handlers::variable))
        .route("/quality", get(handlers::quality))
        .route("/augment/plan", post(handlers::plan))
        .route("/augment", post(handlers::augment))
        .route(
            "/generated",
            get(handlers::generated).delete(handlers::discard),
        )
        .route(
            "/generated/{row_id}",
            patch(handlers::edit)
                .delete(handlers::remove)
                .get(handlers::generated_row),
        )
        .route("/whatif", post(handlers::what_if))
        .route("/drift", get(handlers::drift))
        .route("/retrain", post(handlers::retrain))
        .route("/revert", post(handlers::revert))
        .route("/history", get(handlers::history))
        .fallback(handlers::api_not_found)
        .layer(middleware::from_fn_with_state(
            Arc::clone(&state),
            require_token,
        ))
        .layer(DefaultBodyLimit::max(64 * 1024 * 1024));
    let app = Router::new().nest("/api", api);
    let app = match &state.config.server.static_dir {
        Some(dir) => {
            app.fallback_service(ServeDir::new(dir).append_index_html_on_directories(true))
        }
        None => app,
    };
    app.with_state(state)
}

/// Binds and serves until ctrl-c.
pub async fn serve(config: Config) -> anyhow::Result<()> {
    let addr = std::net::SocketAddr::new(config.server.bind, config.server.port);
    std::fs::create_dir_all(&config.data_dir)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(address = %listener.local_addr()?, data_dir = %config.data_dir.display(), "listening");
    let app = router(Arc::new(AppState::new(config)));
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
