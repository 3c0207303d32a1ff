//! Application layer shared by the service and the CLI: persistent stores,
//! the job queue and provider instances behind one handle.

use crate::dataset::{
    export_matrix_csv, parse_soc_csv, Dataset, DatasetError, DatasetStore, DatasetSummary, ReflectanceMatrix, RowError,
    Visibility,
};
use crate::gapfill::ValueSource;
use crate::imagery::{build_provider, Clock, ImageryError, ImageryProvider, ProviderConfig, SystemClock};
use crate::pipeline::{
    resolve_point, run_points, AcquisitionMode, Job, JobHandle, JobQueue, JobRunner, JobSpec, PipelineConfig, PipelineError,
    PointQuery, RunContext, TiffCache,
};
use crate::predict::{
    train, BatchSource, ModelStore, ModelSummary, PredictError, PredictionSet, PredictorModel, TrainRequest,
};
use crate::store::{new_id, JsonStore, StoreError};
use chrono::{NaiveDate, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::{Arc, Weak};
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlatformError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error(transparent)]
    Imagery(#[from] ImageryError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{0} not found")]
    NotFound(String),
    #[error("{0} is not ready yet")]
    NotReady(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Forbidden(String),
    #[error("no reflectance for bands {}", .0.join(","))]
    MissingReflectance(Vec<String>),
}

pub type Result<T> = std::result::Result<T, PlatformError>;

#[derive(Debug, Clone)]
pub struct PlatformOptions {
    pub data_dir: PathBuf,
    pub providers: ProviderConfig,
    /// Job worker threads.
    pub workers: usize,
    /// Keep fetched GeoTIFFs under `data_dir/tiff_cache`.
    pub tiff_cache: bool,
}

impl PlatformOptions {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        PlatformOptions { data_dir: data_dir.into(), providers: ProviderConfig::default(), workers: 2, tiff_cache: true }
    }
}

/// Coordinates plus date for a single-point prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointPredictRequest {
    pub longitude: f64,
    pub latitude: f64,
    pub date: NaiveDate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acquisition_mode: Option<AcquisitionMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointPrediction {
    pub soc: f64,
    pub band_names: Vec<String>,
    pub vector: Vec<f64>,
    pub source: ValueSource,
    pub resolved_date: NaiveDate,
    pub warnings: Vec<String>,
}

pub struct Platform {
    data_dir: PathBuf,
    datasets: DatasetStore,
    matrices: JsonStore<ReflectanceMatrix>,
    models: ModelStore,
    predictions: JsonStore<PredictionSet>,
    jobs: JobQueue,
    provider_config: ProviderConfig,
    providers: Mutex<HashMap<String, Arc<dyn ImageryProvider>>>,
    cache: Option<TiffCache>,
    clock: Arc<dyn Clock>,
}

impl Platform {
    /// Opens (or creates) the stores under `opts.data_dir` and starts the job
    /// workers.
    pub fn open(opts: PlatformOptions) -> Result<Arc<Self>> {
        let d = &opts.data_dir;
        std::fs::create_dir_all(d).map_err(StoreError::Io)?;
        let platform = Arc::new(Platform {
            datasets: DatasetStore::open(d.join("datasets"))?,
            matrices: JsonStore::open(d.join("matrices"))?,
            models: ModelStore::open(d.join("models"))?,
            predictions: JsonStore::open(d.join("predictions"))?,
            jobs: JobQueue::open(d.join("jobs"))?,
            provider_config: opts.providers,
            providers: Mutex::new(HashMap::new()),
            cache: opts.tiff_cache.then(|| TiffCache::new(d.join("tiff_cache"))),
            clock: Arc::new(SystemClock::new()),
            data_dir: opts.data_dir,
        });
        let weak: Weak<dyn JobRunner> = Arc::downgrade(&platform) as Weak<Platform>;
        platform.jobs.start(weak, opts.workers);
        Ok(platform)
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    /// The named provider, built on first use and shared afterwards so its
    /// rate limiter covers every caller.
    pub fn provider(&self, name: &str) -> Result<Arc<dyn ImageryProvider>> {
        let mut providers = self.providers.lock();
        if let Some(p) = providers.get(name) {
            return Ok(p.clone());
        }
        let p = build_provider(name, &self.provider_config)?;
        providers.insert(name.to_string(), p.clone());
        Ok(p)
    }

    pub fn ingest_csv(&self, text: &str, name: &str, owner: &str, visibility: Visibility) -> Result<(Dataset, Vec<RowError>)> {
        let parsed = parse_soc_csv(text)?;
        let dataset = Dataset::new(name, owner, visibility, parsed.samples);
        self.datasets.store(&dataset)?;
        Ok((dataset, parsed.row_errors))
    }

    pub fn dataset(&self, id: &str, viewer: &str) -> Result<Dataset> {
        Ok(self.datasets.get(id, viewer)?)
    }

    pub fn datasets(&self, viewer: &str) -> Vec<DatasetSummary> {
        self.datasets.list(viewer)
    }

    fn checked_provider(&self, cfg: &PipelineConfig) -> Result<Arc<dyn ImageryProvider>> {
        let provider = self.provider(&cfg.provider_name)?;
        cfg.validate(provider.as_ref())?;
        Ok(provider)
    }

    /// Queues a reflectance job. A second request for the same dataset and
    /// config while the first is in flight is a conflict.
    pub fn submit_reflectance(&self, dataset_id: &str, cfg: PipelineConfig, owner: &str) -> Result<Job> {
        self.dataset(dataset_id, owner)?;
        self.checked_provider(&cfg)?;
        let spec = JobSpec::Reflectance { dataset_id: dataset_id.to_string(), config: cfg.clone(), matrix_id: new_id("mat") };
        let same = |j: &Job| matches!(&j.spec, JobSpec::Reflectance { dataset_id: d, config: c, .. } if d == dataset_id && *c == cfg);
        match self.jobs.submit_unique(owner, spec, same)? {
            Ok(job) => Ok(job),
            Err(existing) => Err(PlatformError::Conflict(format!(
                "job {} is already computing reflectance for this dataset and config",
                existing.job_id
            ))),
        }
    }

    /// Resolves every sample of `dataset` without storing the result.
    pub fn compute_matrix(
        &self,
        dataset: &Dataset,
        cfg: &PipelineConfig,
        matrix_id: String,
        cancel: &AtomicBool,
        on_done: &(dyn Fn() + Sync),
    ) -> Result<ReflectanceMatrix> {
        let provider = self.checked_provider(cfg)?;
        let ctx = RunContext { provider: provider.as_ref(), config: cfg, cache: self.cache.as_ref(), clock: self.clock.as_ref(), cancel };
        let points: Vec<PointQuery> = dataset.samples.iter().map(PointQuery::from).collect();
        let out = run_points(&ctx, &points, on_done)?;
        Ok(ReflectanceMatrix {
            matrix_id,
            dataset_id: dataset.dataset_id.clone(),
            band_names: cfg.bands.clone(),
            rows: out.rows,
            provider_name: cfg.provider_name.clone(),
            window_days: cfg.window_days,
            gapfill_method: cfg.gapfill_method,
            warnings: out.warnings,
            created_at: Utc::now(),
        })
    }

    /// Runs the reflectance pipeline in the calling thread and stores the
    /// matrix.
    pub fn run_reflectance(&self, dataset_id: &str, cfg: &PipelineConfig, owner: &str) -> Result<ReflectanceMatrix> {
        let dataset = self.dataset(dataset_id, owner)?;
        let m = self.compute_matrix(&dataset, cfg, new_id("mat"), &AtomicBool::new(false), &|| {})?;
        self.matrices.put(&m.matrix_id, &m)?;
        Ok(m)
    }

    pub fn matrix(&self, id: &str, viewer: &str) -> Result<ReflectanceMatrix> {
        let Some(m) = self.matrices.get(id) else {
            let pending = self.jobs.find(|j| {
                !j.state.is_terminal() && matches!(&j.spec, JobSpec::Reflectance { matrix_id, .. } if matrix_id == id)
            });
            return Err(match pending {
                Some(_) => PlatformError::NotReady(format!("matrix {id}")),
                None => PlatformError::NotFound(format!("matrix {id}")),
            });
        };
        match self.datasets.get(&m.dataset_id, viewer) {
            Err(DatasetError::Forbidden(_)) => Err(PlatformError::Forbidden(format!("matrix {id} belongs to a private dataset"))),
            _ => Ok(m),
        }
    }

    /// The matrix as CSV, with a soc column when its dataset is readable.
    pub fn matrix_csv(&self, id: &str, viewer: &str) -> Result<String> {
        let m = self.matrix(id, viewer)?;
        let labels = self.datasets.get(&m.dataset_id, viewer).ok();
        Ok(export_matrix_csv(&m, labels.as_ref().map(|d| d.samples.as_slice())))
    }

    /// Stores a matrix built elsewhere, such as one imported from CSV.
    pub fn put_matrix(&self, m: &ReflectanceMatrix) -> Result<()> {
        m.validate()?;
        Ok(self.matrices.put(&m.matrix_id, m)?)
    }

    pub fn job(&self, id: &str, viewer: &str) -> Result<Job> {
        let job = self.jobs.get(id).ok_or_else(|| PlatformError::NotFound(format!("job {id}")))?;
        if job.owner != viewer {
            return Err(PlatformError::Forbidden(format!("job {id} belongs to another user")));
        }
        Ok(job)
    }

    pub fn cancel_job(&self, id: &str, viewer: &str) -> Result<Job> {
        self.job(id, viewer)?;
        self.jobs.cancel(id)?.ok_or_else(|| PlatformError::NotFound(format!("job {id}")))
    }

    /// Every job, newest first.
    pub fn jobs(&self) -> Vec<Job> {
        self.jobs.list()
    }

    pub fn wait_job(&self, id: &str, timeout: Duration) -> Option<Job> {
        self.jobs.wait(id, timeout)
    }

    fn train_as(&self, req: &TrainRequest, owner: &str, model_id: String) -> Result<PredictorModel> {
        let m = self.matrix(&req.matrix_id, owner)?;
        let dataset_id = req.dataset_id.as_deref().unwrap_or(&m.dataset_id);
        let labels = self.dataset(dataset_id, owner)?;
        let model = train(&m, &labels, req, model_id)?;
        self.models.put(&model)?;
        Ok(model)
    }

    pub fn train(&self, req: &TrainRequest, owner: &str) -> Result<PredictorModel> {
        self.train_as(req, owner, new_id("mdl"))
    }

    pub fn submit_train(&self, req: TrainRequest, owner: &str) -> Result<Job> {
        self.matrix(&req.matrix_id, owner)?;
        req.algorithm.parse::<crate::predict::Algorithm>()?;
        Ok(self.jobs.submit(owner, JobSpec::Train { request: req, model_id: new_id("mdl") })?)
    }

    pub fn model(&self, id: &str) -> Result<PredictorModel> {
        Ok(self.models.get(id)?)
    }

    pub fn models(&self) -> Vec<ModelSummary> {
        self.models.list()
    }

    pub fn predict_vector(&self, model_id: &str, v: &[f64]) -> Result<f64> {
        Ok(self.model(model_id)?.predict(v)?)
    }

    /// Pipeline settings matching the model's training matrix, so predictions
    /// see features resolved the same way.
    fn config_for(&self, model: &PredictorModel, provider: Option<&str>, mode: Option<AcquisitionMode>) -> PipelineConfig {
        let mut cfg = PipelineConfig::new(model.band_names.clone());
        if let Some(m) = self.matrices.get(&model.trained_on.matrix_id) {
            cfg.provider_name = m.provider_name;
            cfg.window_days = m.window_days;
            cfg.gapfill_method = m.gapfill_method;
        }
        if let Some(p) = provider {
            cfg.provider_name = p.to_string();
        }
        cfg.acquisition_mode = mode.unwrap_or(AcquisitionMode::ServerSide);
        cfg
    }

    /// Resolves reflectance at the coordinates and date, then predicts.
    pub fn predict_at(&self, model_id: &str, req: &PointPredictRequest) -> Result<PointPrediction> {
        let model = self.model(model_id)?;
        let cfg = self.config_for(&model, req.provider.as_deref(), req.acquisition_mode);
        let provider = self.checked_provider(&cfg)?;
        let cancel = AtomicBool::new(false);
        let ctx = RunContext {
            provider: provider.as_ref(),
            config: &cfg,
            cache: self.cache.as_ref(),
            clock: self.clock.as_ref(),
            cancel: &cancel,
        };
        let q = PointQuery { sample_id: "query".into(), longitude: req.longitude, latitude: req.latitude, date: req.date };
        let (rec, warnings) = resolve_point(&ctx, &q)?;
        let Some(vector) = rec.complete_values() else {
            let missing = cfg.bands.iter().zip(&rec.values).filter(|(_, v)| v.is_none()).map(|(b, _)| b.clone()).collect();
            return Err(PlatformError::MissingReflectance(missing));
        };
        let soc = model.predict(&vector)?;
        Ok(PointPrediction { soc, band_names: cfg.bands, vector, source: rec.source, resolved_date: rec.resolved_date, warnings })
    }

    pub fn submit_predict_batch(&self, model_id: &str, source: BatchSource, owner: &str) -> Result<Job> {
        self.model(model_id)?;
        match &source {
            BatchSource::Dataset { dataset_id } => drop(self.dataset(dataset_id, owner)?),
            BatchSource::Matrix { matrix_id } => drop(self.matrix(matrix_id, owner)?),
        }
        let spec = JobSpec::PredictBatch { model_id: model_id.to_string(), source, prediction_id: new_id("prd") };
        Ok(self.jobs.submit(owner, spec)?)
    }

    /// Predicts every complete row of the source. A dataset source is first
    /// run through the pipeline with the model's training settings.
    pub fn run_predict_batch(
        &self,
        model_id: &str,
        source: &BatchSource,
        prediction_id: String,
        owner: &str,
        cancel: &AtomicBool,
        on_done: &(dyn Fn() + Sync),
    ) -> Result<PredictionSet> {
        let model = self.model(model_id)?;
        let m = match source {
            BatchSource::Matrix { matrix_id } => self.matrix(matrix_id, owner)?,
            BatchSource::Dataset { dataset_id } => {
                let dataset = self.dataset(dataset_id, owner)?;
                let cfg = self.config_for(&model, None, None);
                self.compute_matrix(&dataset, &cfg, new_id("mat"), cancel, on_done)?
            }
        };
        let (predictions, skipped) = model.predict_matrix(&m)?;
        let set = PredictionSet {
            prediction_id,
            model_id: model_id.to_string(),
            source: source.clone(),
            predictions,
            skipped,
            created_at: Utc::now(),
        };
        self.predictions.put(&set.prediction_id, &set)?;
        Ok(set)
    }

    pub fn prediction(&self, id: &str) -> Result<PredictionSet> {
        self.predictions.get(id).ok_or_else(|| PlatformError::NotFound(format!("prediction {id}")))
    }
}

impl JobRunner for Platform {
    fn run(&self, job: &Job, handle: &JobHandle) -> std::result::Result<String, String> {
        let outcome = match &job.spec {
            JobSpec::Reflectance { dataset_id, config, matrix_id } => (|| {
                let dataset = self.dataset(dataset_id, &job.owner)?;
                handle.set_total(dataset.samples.len() as u64);
                let m = self.compute_matrix(&dataset, config, matrix_id.clone(), handle.cancel_flag(), &|| handle.advance())?;
                self.matrices.put(&m.matrix_id, &m)?;
                Ok(m.matrix_id)
            })(),
            JobSpec::Train { request, model_id } => {
                handle.set_total(1);
                self.train_as(request, &job.owner, model_id.clone()).map(|m| m.model_id)
            }
            JobSpec::PredictBatch { model_id, source, prediction_id } => {
                if let BatchSource::Dataset { dataset_id } = source {
                    if let Ok(d) = self.dataset(dataset_id, &job.owner) {
                        handle.set_total(d.samples.len() as u64);
                    }
                }
                self.run_predict_batch(model_id, source, prediction_id.clone(), &job.owner, handle.cancel_flag(), &|| {
                    handle.advance()
                })
                .map(|p| p.prediction_id)
            }
        };
        outcome.map_err(|e: PlatformError| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::JobState;

    const CSV: &str = "id,longitude,latitude,date,soc\n\
        a,10.10,45.10,2020-06-15,1.2\n\
        b,10.20,45.20,2020-06-20,1.4\n\
        c,10.30,45.15,2020-07-02,0.9\n";

    fn open(dir: &Path) -> Arc<Platform> {
        Platform::open(PlatformOptions::new(dir)).unwrap()
    }

    #[test]
    fn reflectance_job_produces_matrix() {
        let dir = tempfile::tempdir().unwrap();
        let p = open(dir.path());
        let (ds, errs) = p.ingest_csv(CSV, "t", "alice", Visibility::Private).unwrap();
        assert!(errs.is_empty());
        let cfg = PipelineConfig::new(vec!["B04".into(), "B08".into()]);
        let job = p.submit_reflectance(&ds.dataset_id, cfg, "alice").unwrap();
        let JobSpec::Reflectance { matrix_id, .. } = &job.spec else { panic!() };
        let done = p.wait_job(&job.job_id, Duration::from_secs(30)).unwrap();
        assert_eq!(done.state, JobState::Done, "{:?}", done.error);
        assert_eq!((done.progress.done_items, done.progress.total_items), (3, 3));
        let m = p.matrix(matrix_id, "alice").unwrap();
        assert_eq!(m.rows.len(), 3);
        assert!(matches!(p.matrix(matrix_id, "bob"), Err(PlatformError::Forbidden(_))));
        assert!(p.matrix_csv(matrix_id, "alice").unwrap().starts_with("id,longitude,latitude,date,soc,B04,B08,source"));
        assert!(matches!(p.job(&job.job_id, "bob"), Err(PlatformError::Forbidden(_))));
    }

    #[test]
    fn invalid_config_and_unknown_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let p = open(dir.path());
        let (ds, _) = p.ingest_csv(CSV, "t", "alice", Visibility::Private).unwrap();
        let bad = PipelineConfig::new(vec!["B99".into()]);
        assert!(matches!(
            p.submit_reflectance(&ds.dataset_id, bad, "alice"),
            Err(PlatformError::Pipeline(PipelineError::Imagery(ImageryError::UnknownBand(_))))
        ));
        let cfg = PipelineConfig::new(vec!["B04".into()]);
        assert!(matches!(
            p.submit_reflectance("ds_missing", cfg, "alice"),
            Err(PlatformError::Dataset(DatasetError::NotFound(_)))
        ));
        assert!(matches!(p.matrix("mat_missing", "alice"), Err(PlatformError::NotFound(_))));
    }

    #[test]
    fn sync_reflectance_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let p = open(dir.path());
        let (ds, _) = p.ingest_csv(CSV, "t", "alice", Visibility::Public).unwrap();
        let cfg = PipelineConfig::new(vec!["B04".into(), "B08".into(), "B11".into()]);
        let a = p.run_reflectance(&ds.dataset_id, &cfg, "alice").unwrap();
        let b = p.run_reflectance(&ds.dataset_id, &cfg, "bob").unwrap();
        assert_eq!(a.rows, b.rows);
        assert_ne!(a.matrix_id, b.matrix_id);
    }
}
