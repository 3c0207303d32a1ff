//! HTTP/JSON API over [`soc_core::Platform`].
//!
//! Callers identify themselves with the `X-User-Id` header (anonymous when
//! absent). Every error response carries an [`ApiError`] body.

mod error;

pub use error::ApiError;

use axum::extract::{FromRequest, FromRequestParts, Multipart, Path, Query, Request, State};
use axum::http::header::CONTENT_TYPE;
use axum::http::request::Parts;
use axum::http::StatusCode;
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::NaiveDate;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use soc_core::gapfill::{estimate_at, fill_grid, BandSeries};
use soc_core::imagery::generate_evalscript;
use soc_core::pipeline::JobSpec;
use soc_core::{
    BatchSource, GapfillMethod, PipelineConfig, Platform, PointPredictRequest, SampleType, TrainRequest, Visibility,
};
use std::net::SocketAddr;
use std::sync::Arc;

pub const USER_HEADER: &str = "x-user-id";
pub const ANONYMOUS: &str = "anonymous";
const MAX_UPLOAD_BYTES: usize = 64 * 1024 * 1024;

type ApiResult<T> = Result<T, ApiError>;
type AppState = Arc<Platform>;

/// Method, path and purpose of every route, served at `GET /routes`.
pub const ROUTES: &[(&str, &str, &str)] = &[
    ("POST", "/datasets", "upload a SOC CSV (text body or multipart field `file`); ?name=&visibility="),
    ("GET", "/datasets", "datasets visible to the caller, newest first"),
    ("GET", "/datasets/{id}", "dataset with its samples"),
    ("GET", "/datasets/{id}/geojson", "samples as a GeoJSON FeatureCollection"),
    ("POST", "/datasets/{id}/reflectance", "start a reflectance job; 202 {job_id, matrix_id}"),
    ("GET", "/jobs", "the caller's jobs, newest first"),
    ("GET", "/jobs/{id}", "job state and progress"),
    ("POST", "/jobs/{id}/cancel", "cancel a queued or running job"),
    ("GET", "/matrices/{id}", "reflectance matrix as JSON"),
    ("GET", "/matrices/{id}.csv", "reflectance matrix as CSV"),
    ("POST", "/models", "train a model; 201 {model_id, metrics}, or 202 {job_id} with \"async\": true"),
    ("GET", "/models", "model summaries with metrics, newest first"),
    ("GET", "/models/{id}", "one model summary"),
    ("POST", "/models/{id}/predict", "predict from {vector} or {longitude, latitude, date, provider?}"),
    ("POST", "/models/{id}/predict_batch", "batch prediction over {dataset_id} or {matrix_id}; 202 {job_id}"),
    ("GET", "/predictions/{id}", "result of a batch prediction"),
    ("POST", "/gapfill", "estimate a band value at a date from dated observations"),
    ("POST", "/evalscript", "evalscript for {bands, sample_type}"),
    ("GET", "/routes", "this list"),
    ("GET", "/ui", "map interface"),
];

pub fn router(platform: Arc<Platform>) -> Router {
    Router::new()
        .route("/datasets", post(upload_dataset).get(list_datasets))
        .route("/datasets/{id}", get(get_dataset))
        .route("/datasets/{id}/geojson", get(dataset_geojson))
        .route("/datasets/{id}/reflectance", post(start_reflectance))
        .route("/jobs", get(list_jobs))
        .route("/jobs/{id}", get(get_job))
        .route("/jobs/{id}/cancel", post(cancel_job))
        .route("/matrices/{id}", get(get_matrix))
        .route("/models", post(train_model).get(list_models))
        .route("/models/{id}", get(get_model))
        .route("/models/{id}/predict", post(predict))
        .route("/models/{id}/predict_batch", post(predict_batch))
        .route("/predictions/{id}", get(get_prediction))
        .route("/gapfill", post(gapfill))
        .route("/evalscript", post(evalscript))
        .route("/routes", get(routes))
        .route("/ui", get(ui))
        .fallback(|| async { ApiError::not_found("no such route") })
        .method_not_allowed_fallback(|| async {
            ApiError::new(StatusCode::METHOD_NOT_ALLOWED, "method_not_allowed", "method not allowed on this route")
        })
        .layer(axum::extract::DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(platform)
}

/// Serves the API until the process ends.
pub async fn serve(platform: Arc<Platform>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(platform)).await
}

/// Caller id from `X-User-Id`.
pub struct User(pub String);

impl<S: Send + Sync> FromRequestParts<S> for User {
    type Rejection = std::convert::Infallible;

    async fn from_request_parts(parts: &mut Parts, _: &S) -> Result<Self, Self::Rejection> {
        let id = parts
            .headers
            .get(USER_HEADER)
            .and_then(|v| v.to_str().ok())
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .unwrap_or(ANONYMOUS);
        Ok(User(id.to_string()))
    }
}

/// JSON body whose rejections become `validation_error` responses.
pub struct Body<T>(pub T);

impl<T: DeserializeOwned, S: Send + Sync> FromRequest<S> for Body<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(Body(v)),
            Err(e) => Err(ApiError::validation(e.body_text())),
        }
    }
}

/// Runs blocking platform work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

#[derive(Debug, Deserialize)]
struct UploadParams {
    name: Option<String>,
    visibility: Option<String>,
}

async fn upload_dataset(State(p): State<AppState>, User(user): User, req: Request) -> ApiResult<Response> {
    let (parts, body) = req.into_parts();
    let params: UploadParams = match Query::<UploadParams>::try_from_uri(&parts.uri) {
        Ok(Query(q)) => q,
        Err(e) => return Err(ApiError::validation(e.body_text())),
    };
    let visibility: Visibility = match params.visibility.as_deref() {
        Some(v) => v.parse().map_err(|e: String| ApiError::validation(e).with_detail("field", json!("visibility")))?,
        None => Visibility::default(),
    };
    let is_multipart = parts
        .headers
        .get(CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|ct| ct.starts_with("multipart/form-data"));
    let req = Request::from_parts(parts, body);
    let (text, file_name) = if is_multipart {
        let mut mp = Multipart::from_request(req, &()).await.map_err(|e| ApiError::validation(e.body_text()))?;
        let mut found = None;
        while let Some(field) = mp.next_field().await.map_err(|e| ApiError::validation(e.body_text()))? {
            if field.name() == Some("file") || found.is_none() {
                let name = field.file_name().map(str::to_string);
                let text = field.text().await.map_err(|e| ApiError::validation(e.body_text()))?;
                found = Some((text, name));
            }
        }
        found.unwrap_or_default()
    } else {
        let bytes = axum::body::Bytes::from_request(req, &()).await.map_err(|e| ApiError::validation(e.body_text()))?;
        let text = String::from_utf8(bytes.to_vec()).map_err(|_| ApiError::validation("body is not UTF-8 text"))?;
        (text, None)
    };
    let name = params.name.or(file_name).unwrap_or_else(|| "upload".into());
    let (ds, row_errors) = blocking(move || Ok(p.ingest_csv(&text, &name, &user, visibility)?)).await?;
    Ok((
        StatusCode::CREATED,
        Json(json!({"dataset_id": ds.dataset_id, "n_samples": ds.samples.len(), "row_errors": row_errors})),
    )
        .into_response())
}

async fn list_datasets(State(p): State<AppState>, User(user): User) -> Json<Value> {
    Json(json!(p.datasets(&user)))
}

async fn get_dataset(State(p): State<AppState>, User(user): User, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    Ok(Json(json!(p.dataset(&id, &user)?)))
}

async fn dataset_geojson(State(p): State<AppState>, User(user): User, Path(id): Path<String>) -> ApiResult<Response> {
    let ds = p.dataset(&id, &user)?;
    let features: Vec<Value> = ds
        .samples
        .iter()
        .map(|s| {
            json!({
                "type": "Feature",
                "geometry": {"type": "Point", "coordinates": [s.longitude, s.latitude]},
                "properties": {"sample_id": s.sample_id, "soc": s.soc, "date": s.date},
            })
        })
        .collect();
    let body = json!({"type": "FeatureCollection", "features": features});
    Ok(([(CONTENT_TYPE, "application/geo+json")], body.to_string()).into_response())
}

async fn start_reflectance(
    State(p): State<AppState>,
    User(user): User,
    Path(id): Path<String>,
    Body(cfg): Body<PipelineConfig>,
) -> ApiResult<Response> {
    let job = blocking(move || Ok(p.submit_reflectance(&id, cfg, &user)?)).await?;
    let JobSpec::Reflectance { matrix_id, .. } = &job.spec else {
        return Err(ApiError::internal("unexpected job type"));
    };
    Ok((StatusCode::ACCEPTED, Json(json!({"job_id": job.job_id, "matrix_id": matrix_id, "job": job})))
        .into_response())
}

async fn list_jobs(State(p): State<AppState>, User(user): User) -> Json<Value> {
    let jobs: Vec<_> = p.jobs().into_iter().filter(|j| j.owner == user).collect();
    Json(json!(jobs))
}

async fn get_job(State(p): State<AppState>, User(user): User, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    Ok(Json(json!(p.job(&id, &user)?)))
}

async fn cancel_job(State(p): State<AppState>, User(user): User, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    Ok(Json(json!(p.cancel_job(&id, &user)?)))
}

async fn get_matrix(State(p): State<AppState>, User(user): User, Path(id): Path<String>) -> ApiResult<Response> {
    if let Some(id) = id.strip_suffix(".csv") {
        let csv = p.matrix_csv(id, &user)?;
        return Ok(([(CONTENT_TYPE, "text/csv; charset=utf-8")], csv).into_response());
    }
    Ok(Json(json!(p.matrix(&id, &user)?)).into_response())
}

#[derive(Debug, Deserialize)]
struct TrainBody {
    #[serde(flatten)]
    request: TrainRequest,
    #[serde(default, rename = "async")]
    run_async: bool,
}

async fn train_model(State(p): State<AppState>, User(user): User, Body(body): Body<TrainBody>) -> ApiResult<Response> {
    if body.run_async {
        let job = blocking(move || Ok(p.submit_train(body.request, &user)?)).await?;
        let JobSpec::Train { model_id, .. } = &job.spec else {
            return Err(ApiError::internal("unexpected job type"));
        };
        return Ok((StatusCode::ACCEPTED, Json(json!({"job_id": job.job_id, "model_id": model_id}))).into_response());
    }
    let model = blocking(move || Ok(p.train(&body.request, &user)?)).await?;
    Ok((
        StatusCode::CREATED,
        Json(json!({
            "model_id": model.model_id,
            "metrics": model.metrics,
            "algorithm": model.algorithm,
            "hyperparams": model.hyperparams,
            "band_names": model.band_names,
            "n_train": model.n_train,
            "n_dropped": model.n_dropped,
            "warnings": model.warnings,
        })),
    )
        .into_response())
}

async fn list_models(State(p): State<AppState>) -> Json<Value> {
    Json(json!(p.models()))
}

async fn get_model(State(p): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let m = p.model(&id)?;
    let mut v = json!(m.summary());
    v["warnings"] = json!(m.warnings);
    v["seed"] = json!(m.seed);
    v["test_fraction"] = json!(m.test_fraction);
    v["n_dropped"] = json!(m.n_dropped);
    Ok(Json(v))
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum PredictBody {
    Vector { vector: Vec<f64> },
    Point(PointPredictRequest),
}

async fn predict(State(p): State<AppState>, Path(id): Path<String>, Body(body): Body<PredictBody>) -> ApiResult<Json<Value>> {
    match body {
        PredictBody::Vector { vector } => {
            let soc = p.predict_vector(&id, &vector)?;
            Ok(Json(json!({"model_id": id, "soc": soc})))
        }
        PredictBody::Point(req) => {
            let out = blocking(move || Ok(p.predict_at(&id, &req).map(|o| (id, o))?)).await?;
            let (id, o) = out;
            let mut v = json!(o);
            v["model_id"] = json!(id);
            Ok(Json(v))
        }
    }
}

async fn predict_batch(
    State(p): State<AppState>,
    User(user): User,
    Path(id): Path<String>,
    Body(source): Body<BatchSource>,
) -> ApiResult<Response> {
    let job = blocking(move || Ok(p.submit_predict_batch(&id, source, &user)?)).await?;
    let JobSpec::PredictBatch { prediction_id, .. } = &job.spec else {
        return Err(ApiError::internal("unexpected job type"));
    };
    Ok((StatusCode::ACCEPTED, Json(json!({"job_id": job.job_id, "prediction_id": prediction_id}))).into_response())
}

async fn get_prediction(State(p): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    Ok(Json(json!(p.prediction(&id)?)))
}

#[derive(Debug, Deserialize)]
struct Observation {
    date: NaiveDate,
    value: f64,
}

#[derive(Debug, Deserialize)]
struct GapfillBody {
    #[serde(default = "default_band")]
    band: String,
    observations: Vec<Observation>,
    target_date: NaiveDate,
    #[serde(default)]
    method: GapfillMethod,
    /// Also return the daily grid between the series and the target.
    #[serde(default)]
    grid: bool,
}

fn default_band() -> String {
    "band".into()
}

async fn gapfill(Body(body): Body<GapfillBody>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let obs = body.observations.iter().map(|o| (o.date, o.value)).collect();
        let series = BandSeries::new(body.band, obs).map_err(|e| ApiError::validation(e.to_string()))?;
        let est = estimate_at(&series, body.target_date, body.method).map_err(|e| ApiError::validation(e.to_string()))?;
        let mut v = json!({"target_date": body.target_date, "value": est.value, "source": est.source, "variance": est.variance});
        if body.grid {
            let grid = fill_grid(&series, body.target_date, body.target_date, body.method)
                .map_err(|e| ApiError::validation(e.to_string()))?;
            v["grid"] = json!(grid);
        }
        Ok(Json(v))
    })
    .await
}

#[derive(Debug, Deserialize)]
struct EvalscriptBody {
    bands: Vec<String>,
    #[serde(default = "default_sample_type")]
    sample_type: SampleType,
    #[serde(default = "default_provider")]
    provider: String,
}

fn default_sample_type() -> SampleType {
    SampleType::Float32
}

fn default_provider() -> String {
    "synthetic".into()
}

async fn evalscript(State(p): State<AppState>, Body(body): Body<EvalscriptBody>) -> ApiResult<Json<Value>> {
    let provider = p.provider(&body.provider)?;
    let script = generate_evalscript(provider.registry(), &body.bands, body.sample_type)?;
    Ok(Json(json!({"evalscript": script})))
}

#[derive(Serialize)]
struct RouteInfo {
    method: &'static str,
    path: &'static str,
    description: &'static str,
}

async fn routes() -> Json<Vec<RouteInfo>> {
    Json(ROUTES.iter().map(|&(method, path, description)| RouteInfo { method, path, description }).collect())
}

async fn ui() -> Html<&'static str> {
    Html(include_str!("../static/index.html"))
}
