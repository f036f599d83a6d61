use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::Json;
use debias_core::augment::LowCoverageWarning;
use debias_core::curation::{DriftReport, Ordering, RowFilter, SortKey, WhatIf};
use debias_core::metrics::{Insight, VariableBias};
use debias_core::session::BatchSummary;
use debias_core::{
    BackendSpec, BiasReport, Command, ConstraintSet, FsStore, HistoryEntry, Outcome, QualityReport,
    RowId, Schema, Session, SessionSettings, TabularDataset,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ApiError, ApiJson, ApiQuery, AppState, RequestId, SessionId};
use crate::views::{self, BatchView, Overview, RowView};

type St = State<Arc<AppState>>;

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
}

/// Runs `f` against the session under a shared lock.
async fn read<T: Send + 'static>(
    state: Arc<AppState>,
    id: String,
    f: impl FnOnce(&Session) -> Result<T, ApiError> + Send + 'static,
) -> Result<Json<T>, ApiError> {
    blocking(move || {
        let handle = state.session(&id)?;
        let guard = handle
            .read()
            .map_err(|_| ApiError::internal("session lock poisoned"))?;
        f(guard.session())
    })
    .await
    .map(Json)
}

/// Executes a command under the session's exclusive lock, then lets `f`
/// shape the reply from the outcome and the updated session.
async fn write<T: Send + 'static>(
    state: Arc<AppState>,
    id: String,
    command: Command,
    request_id: Option<String>,
    f: impl FnOnce(Outcome, &Session) -> Result<T, ApiError> + Send + 'static,
) -> Result<Json<T>, ApiError> {
    blocking(move || {
        let handle = state.session(&id)?;
        let mut guard = handle
            .write()
            .map_err(|_| ApiError::internal("session lock poisoned"))?;
        let outcome = guard.execute(&command, request_id)?;
        f(outcome, guard.session())
    })
    .await
    .map(Json)
}

fn parse_row_id(raw: &str) -> Result<RowId, ApiError> {
    raw.parse()
        .map(RowId)
        .map_err(|_| ApiError::bad_request(format!("`{raw}` is not a row id")))
}

fn unexpected(outcome: &Outcome) -> ApiError {
    ApiError::internal(format!("unexpected outcome {outcome:?}"))
}

pub async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

pub async fn api_not_found() -> ApiError {
    ApiError::not_found("NOT_FOUND", "no such endpoint")
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub csv: String,
    pub schema: Value,
    #[serde(default = "default_fraction")]
    pub heldout_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub settings: Option<SessionSettings>,
}

fn default_fraction() -> f64 {
    0.2
}

pub async fn create_session(
    State(state): St,
    SessionId(id): SessionId,
    RequestId(request_id): RequestId,
    ApiJson(body): ApiJson<CreateSession>,
) -> Result<(StatusCode, Json<HistoryEntry>), ApiError> {
    let entry = blocking(move || {
        let schema: Schema = serde_json::from_value(body.schema).map_err(|e| {
            ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "INVALID_SCHEMA",
                e.to_string(),
            )
        })?;
        let dataset = TabularDataset::ingest(body.csv.as_bytes(), schema)
            .and_then(|d| d.split(body.heldout_fraction, body.seed))
            .map_err(|e| {
                ApiError::new(
                    StatusCode::UNPROCESSABLE_ENTITY,
                    "DATASET_ERROR",
                    e.to_string(),
                )
            })?;
        let settings = body
            .settings
            .unwrap_or_else(|| state.config.session.clone());
        match state.create(&id, dataset, settings, request_id)? {
            Outcome::Created { entry } => Ok(entry),
            other => Err(unexpected(&other)),
        }
    })
    .await?;
    Ok((StatusCode::CREATED, Json(entry)))
}

pub async fn list_sessions(State(state): St) -> Result<Json<Vec<String>>, ApiError> {
    let dir = state.config.data_dir.clone();
    blocking(move || FsStore::list(&dir).map_err(|e| ApiError::internal(e.to_string())))
        .await
        .map(Json)
}

pub async fn overview(
    State(state): St,
    SessionId(id): SessionId,
) -> Result<Json<Overview>, ApiError> {
    read(state, id, |s| Ok(views::overview(s))).await
}

pub async fn variables(
    State(state): St,
    SessionId(id): SessionId,
) -> Result<Json<BiasReport>, ApiError> {
    read(state, id, |s| Ok(s.bias_report()?)).await
}

#[derive(Debug, Serialize)]
pub struct VariableDetail {
    pub coverage_threshold: u64,
    #[serde(flatten)]
    pub bias: VariableBias,
    pub insights: Vec<Insight>,
}

pub async fn variable(
    State(state): St,
    SessionId(id): SessionId,
    Path(name): Path<String>,
) -> Result<Json<VariableDetail>, ApiError> {
    read(state, id, move |s| {
        let report = s.bias_report()?;
        let bias = report.variable(&name).cloned().ok_or_else(|| {
            ApiError::not_found("UNKNOWN_VARIABLE", format!("no predictor `{name}`"))
        })?;
        Ok(VariableDetail {
            coverage_threshold: report.coverage_threshold,
            insights: report
                .quick_insights
                .into_iter()
                .filter(|i| i.variable == name)
                .collect(),
            bias,
        })
    })
    .await
}

pub async fn quality(
    State(state): St,
    SessionId(id): SessionId,
) -> Result<Json<QualityReport>, ApiError> {
    read(state, id, |s| Ok(s.quality_report()?)).await
}

#[derive(Debug, Serialize)]
pub struct PlanReply {
    pub batch_size: usize,
    pub warnings: Vec<LowCoverageWarning>,
}

pub async fn plan(
    State(state): St,
    SessionId(id): SessionId,
    ApiJson(constraints): ApiJson<ConstraintSet>,
) -> Result<Json<PlanReply>, ApiError> {
    read(state, id, move |s| {
        Ok(PlanReply {
            warnings: s.plan(&constraints)?,
            batch_size: constraints.batch_size(),
        })
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentRequest {
    pub constraints: ConstraintSet,
    #[serde(default)]
    pub backend: BackendSpec,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Serialize)]
pub struct AugmentReply {
    pub summary: BatchSummary,
    pub batch: BatchView,
}

pub async fn augment(
    State(state): St,
    SessionId(id): SessionId,
    RequestId(request_id): RequestId,
    ApiJson(body): ApiJson<AugmentRequest>,
) -> Result<Json<AugmentReply>, ApiError> {
    if matches!(body.backend, BackendSpec::External { .. })
        && !state.config.server.allow_external_backend
    {
        return Err(ApiError::new(
            StatusCode::FORBIDDEN,
            "BACKEND_NOT_ALLOWED",
            "external backends are disabled on this server",
        ));
    }
    let command = Command::Generate {
        constraints: body.constraints,
        backend: body.backend,
        seed: body.seed,
    };
    write(state, id, command, request_id, |outcome, s| match outcome {
        Outcome::Generated { batch } => Ok(AugmentReply {
            summary: batch,
            batch: views::pending_view(s)?,
        }),
        other => Err(unexpected(&other)),
    })
    .await
}

#[derive(Debug, Deserialize)]
pub struct ViewQuery {
    /// JSON-encoded row filter.
    pub filter: Option<String>,
    /// `row_id`, `confidence`, `predicted` or a variable name.
    pub sort: Option<String>,
    #[serde(default)]
    pub desc: bool,
}

pub async fn generated(
    State(state): St,
    SessionId(id): SessionId,
    ApiQuery(q): ApiQuery<ViewQuery>,
) -> Result<Json<BatchView>, ApiError> {
    let filter: RowFilter = match &q.filter {
        Some(f) => {
            serde_json::from_str(f).map_err(|e| ApiError::bad_request(format!("filter: {e}")))?
        }
        None => RowFilter::All,
    };
    let ordering = q.sort.map(|key| Ordering {
        key: match key.as_str() {
            "row_id" => SortKey::RowId,
            "confidence" => SortKey::Confidence,
            "predicted" => SortKey::Predicted,
            _ => SortKey::Variable(key),
        },
        descending: q.desc,
    });
    read(state, id, move |s| {
        let pending = s
            .pending()
            .ok_or(debias_core::SessionError::NoPendingBatch)?;
        Ok(
            views::batch_view(s.dataset(), pending, &filter, ordering.as_ref())
                .map_err(debias_core::SessionError::from)?,
        )
    })
    .await
}

pub async fn generated_row(
    State(state): St,
    SessionId(id): SessionId,
    Path(row_id): Path<String>,
) -> Result<Json<RowView>, ApiError> {
    let row_id = parse_row_id(&row_id)?;
    read(state, id, move |s| {
        let pending = s
            .pending()
            .ok_or(debias_core::SessionError::NoPendingBatch)?;
        let row = pending.current.row(row_id).ok_or_else(|| {
            ApiError::not_found("UNKNOWN_ROW", format!("no generated row {row_id}"))
        })?;
        Ok(views::row_view(s.dataset(), row))
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditBody {
    pub variable: String,
    pub value: String,
}

pub async fn edit(
    State(state): St,
    SessionId(id): SessionId,
    RequestId(request_id): RequestId,
    Path(row_id): Path<String>,
    ApiJson(body): ApiJson<EditBody>,
) -> Result<Json<WhatIf>, ApiError> {
    let command = Command::Edit {
        row_id: parse_row_id(&row_id)?,
        variable: body.variable,
        value: body.value,
    };
    write(state, id, command, request_id, |outcome, _| match outcome {
        Outcome::Edited { what_if } => Ok(what_if),
        other => Err(unexpected(&other)),
    })
    .await
}

pub async fn remove(
    State(state): St,
    SessionId(id): SessionId,
    RequestId(request_id): RequestId,
    Path(row_id): Path<String>,
) -> Result<Json<Outcome>, ApiError> {
    write(
        state,
        id,
        Command::Remove {
            row_id: parse_row_id(&row_id)?,
        },
        request_id,
        |o, _| Ok(o),
    )
    .await
}

pub async fn discard(
    State(state): St,
    SessionId(id): SessionId,
    RequestId(request_id): RequestId,
) -> Result<Json<Outcome>, ApiError> {
    write(state, id, Command::Discard, request_id, |o, _| Ok(o)).await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WhatIfBody {
    pub row_id: u64,
    pub variable: String,
    pub value: String,
}

pub async fn what_if(
    State(state): St,
    SessionId(id): SessionId,
    ApiJson(body): ApiJson<WhatIfBody>,
) -> Result<Json<WhatIf>, ApiError> {
    read(state, id, move |s| {
        let pending = s
            .pending()
            .ok_or(debias_core::SessionError::NoPendingBatch)?;
        pending
            .what_if(
                s.dataset(),
                s.model(),
                RowId(body.row_id),
                &body.variable,
                &body.value,
            )
            .map_err(|e| debias_core::SessionError::from(e).into())
    })
    .await
}

pub async fn drift(
    State(state): St,
    SessionId(id): SessionId,
) -> Result<Json<DriftReport>, ApiError> {
    read(state, id, |s| Ok(s.drift_preview()?)).await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrainBody {
    #[serde(default)]
    pub acknowledged: bool,
}

pub async fn retrain(
    State(state): St,
    SessionId(id): SessionId,
    RequestId(request_id): RequestId,
    ApiJson(body): ApiJson<RetrainBody>,
) -> Result<Json<HistoryEntry>, ApiError> {
    let command = Command::Retrain {
        acknowledged: body.acknowledged,
    };
    write(state, id, command, request_id, |outcome, _| match outcome {
        Outcome::Retrained { entry } => Ok(entry),
        other => Err(unexpected(&other)),
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RevertBody {
    pub index: usize,
}

pub async fn revert(
    State(state): St,
    SessionId(id): SessionId,
    RequestId(request_id): RequestId,
    ApiJson(body): ApiJson<RevertBody>,
) -> Result<Json<HistoryEntry>, ApiError> {
    write(
        state,
        id,
        Command::Revert { index: body.index },
        request_id,
        |outcome, _| match outcome {
            Outcome::Reverted { entry } => Ok(entry),
            other => Err(unexpected(&other)),
        },
    )
    .await
}

pub async fn history(
    State(state): St,
    SessionId(id): SessionId,
) -> Result<Json<Vec<HistoryEntry>>, ApiError> {
    read(state, id, |s| Ok(s.history().to_vec())).await
}
