use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use soc_core::dataset::DatasetError;
use soc_core::imagery::ImageryError;
use soc_core::pipeline::PipelineError;
use soc_core::predict::{MetricsError, PredictError};
use soc_core::store::StoreError;
use soc_core::PlatformError;

/// Body of every non-2xx response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub status: u16,
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<Map<String, Value>>,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError { status: status.as_u16(), code: code.to_string(), message: message.into(), detail: None }
    }

    pub fn with_detail(mut self, key: &str, value: Value) -> Self {
        self.detail.get_or_insert_with(Map::new).insert(key.to_string(), value);
        self
    }

    pub fn validation(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "validation_error", message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, axum::Json(self)).into_response()
    }
}

use StatusCode as S;

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::InvalidId(_) => ApiError::not_found(e.to_string()),
            _ => ApiError::internal(e.to_string()),
        }
    }
}

impl From<DatasetError> for ApiError {
    fn from(e: DatasetError) -> Self {
        let msg = e.to_string();
        match e {
            DatasetError::EmptyFile => ApiError::new(S::BAD_REQUEST, "empty_file", msg),
            DatasetError::MissingHeader(col) => {
                ApiError::new(S::BAD_REQUEST, "missing_header", msg).with_detail("column", json!(col))
            }
            DatasetError::NoValidRows(rows) => {
                ApiError::new(S::BAD_REQUEST, "no_valid_rows", msg).with_detail("row_errors", json!(rows))
            }
            DatasetError::Malformed(_) | DatasetError::Invalid(_) => ApiError::validation(msg),
            DatasetError::NotFound(_) => ApiError::not_found(msg),
            DatasetError::Forbidden(_) => ApiError::new(S::FORBIDDEN, "forbidden", msg),
            DatasetError::Store(s) => s.into(),
        }
    }
}

impl From<ImageryError> for ApiError {
    fn from(e: ImageryError) -> Self {
        let msg = e.to_string();
        match e {
            ImageryError::Validation { field, .. } => ApiError::validation(msg).with_detail("field", json!(field)),
            ImageryError::UnknownBand(b) => ApiError::new(S::BAD_REQUEST, "unknown_band", msg).with_detail("band", json!(b)),
            ImageryError::BandUnavailable { .. } => ApiError::new(S::BAD_REQUEST, "unknown_band", msg),
            ImageryError::UnknownProvider(_) => ApiError::new(S::BAD_REQUEST, "invalid_config", msg),
            ImageryError::NoImagery => ApiError::new(S::UNPROCESSABLE_ENTITY, "no_imagery", msg),
            ImageryError::RateLimited { wait } => ApiError::new(S::TOO_MANY_REQUESTS, "rate_limited", msg)
                .with_detail("retry_after_ms", json!(wait.as_millis() as u64)),
            ImageryError::ProviderUnavailable(_) => ApiError::new(S::SERVICE_UNAVAILABLE, "provider_unavailable", msg),
            ImageryError::Raster(_) => ApiError::internal(msg),
        }
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let msg = e.to_string();
        match e {
            PipelineError::InvalidConfig(_) => ApiError::new(S::BAD_REQUEST, "invalid_config", msg),
            PipelineError::Cancelled => ApiError::new(S::CONFLICT, "cancelled", msg),
            PipelineError::AllSamplesFailed(_) => ApiError::new(S::SERVICE_UNAVAILABLE, "provider_unavailable", msg),
            PipelineError::Imagery(i) => i.into(),
        }
    }
}

impl From<PredictError> for ApiError {
    fn from(e: PredictError) -> Self {
        let msg = e.to_string();
        match e {
            PredictError::TooFewRows { found, required } => ApiError::new(S::UNPROCESSABLE_ENTITY, "too_few_rows", msg)
                .with_detail("found", json!(found))
                .with_detail("required", json!(required)),
            PredictError::UnknownAlgorithm(_) => ApiError::new(S::BAD_REQUEST, "unknown_algorithm", msg),
            PredictError::InvalidHyperparams(_) | PredictError::InvalidRequest(_) | PredictError::NonFiniteInput => {
                ApiError::validation(msg)
            }
            PredictError::DegenerateFeatures => ApiError::new(S::UNPROCESSABLE_ENTITY, "degenerate_features", msg),
            PredictError::DimensionMismatch { expected, got } => ApiError::new(S::BAD_REQUEST, "dimension_mismatch", msg)
                .with_detail("expected", json!(expected))
                .with_detail("got", json!(got)),
            PredictError::NoCompleteRows => ApiError::new(S::UNPROCESSABLE_ENTITY, "no_complete_rows", msg),
            PredictError::Metrics(MetricsError::ZeroVariance) => {
                ApiError::new(S::UNPROCESSABLE_ENTITY, "degenerate_labels", msg)
            }
            PredictError::Metrics(_) => ApiError::new(S::UNPROCESSABLE_ENTITY, "too_few_rows", msg),
            PredictError::NotFound(_) => ApiError::not_found(msg),
            PredictError::Store(s) => s.into(),
        }
    }
}

impl From<PlatformError> for ApiError {
    fn from(e: PlatformError) -> Self {
        let msg = e.to_string();
        match e {
            PlatformError::Dataset(e) => e.into(),
            PlatformError::Pipeline(e) => e.into(),
            PlatformError::Predict(e) => e.into(),
            PlatformError::Imagery(e) => e.into(),
            PlatformError::Store(e) => e.into(),
            PlatformError::NotFound(_) => ApiError::not_found(msg),
            PlatformError::NotReady(_) => ApiError::new(S::NOT_FOUND, "not_ready", msg),
            PlatformError::Conflict(_) => ApiError::new(S::CONFLICT, "conflict", msg),
            PlatformError::Forbidden(_) => ApiError::new(S::FORBIDDEN, "forbidden", msg),
            PlatformError::MissingReflectance(bands) => {
                ApiError::new(S::UNPROCESSABLE_ENTITY, "missing_reflectance", msg).with_detail("bands", json!(bands))
            }
        }
    }
}
