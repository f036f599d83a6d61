use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use debias_core::augment::AugmentError;
use debias_core::curation::CurationError;
use debias_core::{ModelError, SessionError};
use serde::Serialize;
use serde_json::Value;

/// Error body: `{code, message, detail}`.
#[derive(Debug, Clone, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub detail: Value,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            detail: Value::Null,
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "BAD_REQUEST", message)
    }

    pub fn not_found(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, code, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL", message)
    }

    pub fn with_detail(mut self, detail: Value) -> Self {
        self.detail = detail;
        self
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

fn augment_status(e: &AugmentError) -> (StatusCode, &'static str) {
    use StatusCode as S;
    match e {
        AugmentError::UnknownVariable(_) => (S::UNPROCESSABLE_ENTITY, "UNKNOWN_VARIABLE"),
        AugmentError::ConstraintOutOfDomain { .. } => {
            (S::UNPROCESSABLE_ENTITY, "CONSTRAINT_OUT_OF_DOMAIN")
        }
        AugmentError::DuplicateVariable(_) => (S::UNPROCESSABLE_ENTITY, "DUPLICATE_VARIABLE"),
        AugmentError::CapExceeded { .. } => (S::UNPROCESSABLE_ENTITY, "CAP_EXCEEDED"),
        AugmentError::NoMatchingRows(_) => (S::UNPROCESSABLE_ENTITY, "NO_MATCHING_ROWS"),
        AugmentError::InfeasibleJointRegion => (S::UNPROCESSABLE_ENTITY, "INFEASIBLE_JOINT_REGION"),
        AugmentError::Backend(_) => (S::BAD_GATEWAY, "BACKEND_FAILED"),
        AugmentError::BackendOutputInvalid(_) => (S::BAD_GATEWAY, "BACKEND_OUTPUT_INVALID"),
        AugmentError::Model(m) => model_status(m),
        AugmentError::Dataset(_) => (S::UNPROCESSABLE_ENTITY, "DATASET_ERROR"),
    }
}

fn model_status(e: &ModelError) -> (StatusCode, &'static str) {
    match e {
        ModelError::ModelStale { .. } => (StatusCode::CONFLICT, "MODEL_STALE"),
        ModelError::LeakageViolation => (StatusCode::INTERNAL_SERVER_ERROR, "LEAKAGE_VIOLATION"),
        _ => (StatusCode::UNPROCESSABLE_ENTITY, "MODEL_ERROR"),
    }
}

fn curation_status(e: &CurationError) -> (StatusCode, &'static str) {
    match e {
        CurationError::UnknownRow(_) => (StatusCode::NOT_FOUND, "UNKNOWN_ROW"),
        CurationError::UnknownVariable(_) => (StatusCode::UNPROCESSABLE_ENTITY, "UNKNOWN_VARIABLE"),
        CurationError::OutOfDomain { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "OUT_OF_DOMAIN"),
        CurationError::SchemaMismatch(_) => (StatusCode::UNPROCESSABLE_ENTITY, "SCHEMA_MISMATCH"),
        CurationError::Model(m) => model_status(m),
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        use StatusCode as S;
        let (status, code) = match &e {
            SessionError::Dataset(_) => (S::UNPROCESSABLE_ENTITY, "DATASET_ERROR"),
            SessionError::Model(m) => model_status(m),
            SessionError::Metrics(_) => (S::UNPROCESSABLE_ENTITY, "METRICS_ERROR"),
            SessionError::Quality(_) => (S::UNPROCESSABLE_ENTITY, "QUALITY_ERROR"),
            SessionError::Augment(a) => augment_status(a),
            SessionError::Curation(c) => curation_status(c),
            SessionError::NotSplit => (S::UNPROCESSABLE_ENTITY, "NOT_SPLIT"),
            SessionError::NoPendingBatch => (S::CONFLICT, "NO_PENDING_BATCH"),
            SessionError::StaleBatch => (S::CONFLICT, "STALE_BATCH"),
            SessionError::AcknowledgementRequired(_) => (S::CONFLICT, "ACKNOWLEDGEMENT_REQUIRED"),
            SessionError::UnknownHistoryIndex(_) => (S::NOT_FOUND, "UNKNOWN_HISTORY_INDEX"),
            SessionError::LeakageViolation => (S::INTERNAL_SERVER_ERROR, "LEAKAGE_VIOLATION"),
            SessionError::Io(_) => (S::INTERNAL_SERVER_ERROR, "STORAGE_ERROR"),
            SessionError::Corrupt(_) => (S::INTERNAL_SERVER_ERROR, "CORRUPT_SESSION"),
        };
        let detail = match &e {
            SessionError::AcknowledgementRequired(drift) => {
                serde_json::to_value(drift).unwrap_or(Value::Null)
            }
            SessionError::Augment(AugmentError::CapExceeded { requested, cap }) => {
                serde_json::json!({ "requested": requested, "cap": cap })
            }
            _ => Value::Null,
        };
        ApiError::new(status, code, e.to_string()).with_detail(detail)
    }
}
