#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use debias_cli::server::{router, AppState};
use debias_core::Config;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

pub const SEVERITY_CSV: &str = include_str!("../fixtures/severity.csv");
pub const SEVERITY_SCHEMA: &str = include_str!("../fixtures/severity.schema.json");

/// Small model and a coverage threshold of 200.
pub fn fast_settings() -> Value {
    json!({
        "bias": { "coverage": 200 },
        "model": { "trees": 5, "max_depth": 2, "min_samples_leaf": 5 }
    })
}

pub fn create_body() -> Value {
    json!({
        "csv": SEVERITY_CSV,
        "schema": serde_json::from_str::<Value>(SEVERITY_SCHEMA).unwrap(),
        "heldout_fraction": 0.5,
        "seed": 3,
        "settings": fast_settings(),
    })
}

pub struct App {
    pub router: Router,
}

impl App {
    pub fn new(config: Config) -> Self {
        Self {
            router: router(Arc::new(AppState::new(config))),
        }
    }

    pub fn in_dir(dir: &Path) -> Self {
        Self::new(Config {
            data_dir: dir.to_path_buf(),
            ..Config::default()
        })
    }

    pub async fn send(&self, request: Request<Body>) -> (StatusCode, Value, Vec<u8>) {
        let response = self.router.clone().oneshot(request).await.unwrap();
        let status = response.status();
        let bytes = response
            .into_body()
            .collect()
            .await
            .unwrap()
            .to_bytes()
            .to_vec();
        let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
        (status, value, bytes)
    }

    pub async fn call(
        &self,
        method: Method,
        path: &str,
        session: Option<&str>,
        request_id: Option<&str>,
        body: Option<Value>,
    ) -> (StatusCode, Value) {
        let mut builder = Request::builder().method(method).uri(path);
        if let Some(s) = session {
            builder = builder.header("x-session-id", s);
        }
        if let Some(r) = request_id {
            builder = builder.header("x-request-id", r);
        }
        let request = match body {
            Some(b) => builder
                .header("content-type", "application/json")
                .body(Body::from(b.to_string()))
                .unwrap(),
            None => builder.body(Body::empty()).unwrap(),
        };
        let (status, value, _) = self.send(request).await;
        (status, value)
    }

    pub async fn get(&self, path: &str) -> (StatusCode, Value) {
        self.call(Method::GET, path, None, None, None).await
    }

    pub async fn post(&self, path: &str, body: Value) -> (StatusCode, Value) {
        self.call(Method::POST, path, None, None, Some(body)).await
    }

    /// Creates the default session from the severity fixture.
    pub async fn seeded(dir: &Path) -> Self {
        let app = Self::in_dir(dir);
        let (status, body) = app.post("/api/session", create_body()).await;
        assert_eq!(status, StatusCode::CREATED, "{body}");
        app
    }
}
