//! Per-point reflectance extraction: catalog search, acquisition through
//! either per-band GeoTIFFs or server-side sampling, temporal gap filling, and
//! matrix assembly.

mod jobs;

pub use jobs::{Job, JobHandle, JobKind, JobQueue, JobRunner, JobSpec, JobState, Progress};

use crate::dataset::{ReflectanceRecord, RowWarning, SocSample};
use crate::gapfill::{estimate_at, BandSeries, GapfillMethod, ValueSource};
use crate::imagery::{
    fetch_band_raster, BBox, Clock, DateWindow, Geometry, ImageCatalogEntry, ImageRequest, ImageryError,
    ImageryProvider,
};
use crate::raster::{decode_geotiff, encode_geotiff, sample_reflectance, RasterError, RasterGrid, SampleType};
use chrono::NaiveDate;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::Duration;
use thiserror::Error;

pub const DEFAULT_WINDOW_DAYS: u32 = 30;
pub const DEFAULT_CLOUD_THRESHOLD: f64 = 0.8;
pub const DEFAULT_MAX_CONCURRENCY: u32 = 4;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("cancelled")]
    Cancelled,
    #[error("every sample failed; first error: {0}")]
    AllSamplesFailed(String),
    #[error(transparent)]
    Imagery(#[from] ImageryError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AcquisitionMode {
    #[default]
    PerBandTiff,
    ServerSide,
}

impl AcquisitionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AcquisitionMode::PerBandTiff => "per_band_tiff",
            AcquisitionMode::ServerSide => "server_side",
        }
    }
}

impl fmt::Display for AcquisitionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AcquisitionMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "per_band_tiff" => Ok(AcquisitionMode::PerBandTiff),
            "server_side" => Ok(AcquisitionMode::ServerSide),
            other => Err(format!("unknown acquisition mode '{other}'")),
        }
    }
}

fn default_provider() -> String {
    "synthetic".into()
}
fn default_window() -> u32 {
    DEFAULT_WINDOW_DAYS
}
fn default_concurrency() -> u32 {
    DEFAULT_MAX_CONCURRENCY
}
fn default_cloud_threshold() -> f64 {
    DEFAULT_CLOUD_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default = "default_provider", alias = "provider")]
    pub provider_name: String,
    pub bands: Vec<String>,
    #[serde(default = "default_window")]
    pub window_days: u32,
    #[serde(default)]
    pub acquisition_mode: AcquisitionMode,
    #[serde(default)]
    pub gapfill_method: GapfillMethod,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: u32,
    /// Acquisitions cloudier than this are left out of the series.
    #[serde(default = "default_cloud_threshold")]
    pub cloud_threshold: f64,
}

impl PipelineConfig {
    pub fn new(bands: Vec<String>) -> Self {
        PipelineConfig {
            provider_name: default_provider(),
            bands,
            window_days: DEFAULT_WINDOW_DAYS,
            acquisition_mode: AcquisitionMode::default(),
            gapfill_method: GapfillMethod::default(),
            max_concurrency: DEFAULT_MAX_CONCURRENCY,
            cloud_threshold: DEFAULT_CLOUD_THRESHOLD,
        }
    }

    pub fn validate(&self, provider: &dyn ImageryProvider) -> Result<()> {
        if self.bands.is_empty() {
            return Err(PipelineError::InvalidConfig("bands must not be empty".into()));
        }
        if let Some(b) = self.bands.iter().enumerate().find_map(|(i, b)| self.bands[..i].contains(b).then_some(b)) {
            return Err(PipelineError::InvalidConfig(format!("band {b} listed twice")));
        }
        provider.registry().check(&self.bands)?;
        if self.window_days < 1 {
            return Err(PipelineError::InvalidConfig("window_days must be at least 1".into()));
        }
        if self.max_concurrency < 1 {
            return Err(PipelineError::InvalidConfig("max_concurrency must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.cloud_threshold) {
            return Err(PipelineError::InvalidConfig("cloud_threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// On-disk store of fetched GeoTIFFs, keyed by image, band and request.
pub struct TiffCache {
    dir: PathBuf,
}

impl TiffCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        TiffCache { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, provider: &str, entry: &ImageCatalogEntry, band: &str, r: &ImageRequest) -> PathBuf {
        let clean = |s: &str| s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect::<String>();
        let b = r.bbox;
        let key = format!(
            "{}_{}_{}x{}_{}_{:016x}{:016x}{:016x}{:016x}.tif",
            clean(&entry.image_id),
            clean(band),
            r.width,
            r.height,
            r.sample_type.as_str(),
            b.lon_min.to_bits(),
            b.lat_min.to_bits(),
            b.lon_max.to_bits(),
            b.lat_max.to_bits()
        );
        self.dir.join(clean(provider)).join(key)
    }

    fn load(&self, path: &Path) -> Option<RasterGrid> {
        let bytes = fs::read(path).ok()?;
        decode_geotiff(&bytes).ok()
    }

    fn store(&self, path: &Path, grid: &RasterGrid) {
        let Ok(bytes) = encode_geotiff(grid, grid.sample_type) else { return };
        let Some(parent) = path.parent() else { return };
        if fs::create_dir_all(parent).is_err() {
            return;
        }
        let tmp = parent.join(format!(".{}.tmp", uuid::Uuid::new_v4().simple()));
        if fs::write(&tmp, bytes).is_ok() && fs::rename(&tmp, path).is_err() {
            let _ = fs::remove_file(&tmp);
        }
    }
}

/// Shared state for processing the samples of one run.
pub struct RunContext<'a> {
    pub provider: &'a dyn ImageryProvider,
    pub config: &'a PipelineConfig,
    pub cache: Option<&'a TiffCache>,
    pub clock: &'a dyn Clock,
    pub cancel: &'a AtomicBool,
}

const MAX_BACKOFF_SLICE: Duration = Duration::from_millis(200);

impl RunContext<'_> {
    /// Runs a provider call, waiting out rate limits until it goes through.
    fn call<T>(&self, mut f: impl FnMut() -> std::result::Result<T, ImageryError>) -> Result<T> {
        loop {
            if self.cancel.load(Ordering::SeqCst) {
                return Err(PipelineError::Cancelled);
            }
            match f() {
                Err(ImageryError::RateLimited { wait }) => {
                    let mut left = wait;
                    while !left.is_zero() && !self.cancel.load(Ordering::SeqCst) {
                        let slice = left.min(MAX_BACKOFF_SLICE);
                        self.clock.sleep(slice);
                        left -= slice;
                    }
                }
                other => return other.map_err(PipelineError::from),
            }
        }
    }

    fn fetch_raster(&self, entry: &ImageCatalogEntry, band: &str, request: &ImageRequest) -> Result<RasterGrid> {
        let path = self.cache.map(|c| (c, c.path(self.provider.name(), entry, band, request)));
        if let Some(grid) = path.as_ref().and_then(|(c, p)| c.load(p)) {
            return Ok(grid);
        }
        let grid = self.call(|| fetch_band_raster(self.provider, entry, band, request))?;
        if let Some((c, p)) = &path {
            c.store(p, &grid);
        }
        Ok(grid)
    }
}

/// A 3×3 native-pixel request centred on the pixel containing the point.
pub fn point_request(provider: &dyn ImageryProvider, lon: f64, lat: f64, date: NaiveDate, bands: &[String]) -> ImageRequest {
    let res = provider.native_resolution();
    let west = (lon / res).floor() * res;
    let north = (lat / res).ceil() * res;
    ImageRequest {
        bbox: BBox { lon_min: west - res, lat_min: north - 2.0 * res, lon_max: west + 2.0 * res, lat_max: north + res },
        width: 3,
        height: 3,
        bands: bands.to_vec(),
        sample_type: SampleType::Float32,
        date_window: DateWindow { from: date, to: date },
    }
}

/// Location and date to resolve.
#[derive(Debug, Clone, PartialEq)]
pub struct PointQuery {
    pub sample_id: String,
    pub longitude: f64,
    pub latitude: f64,
    pub date: NaiveDate,
}

impl From<&SocSample> for PointQuery {
    fn from(s: &SocSample) -> Self {
        PointQuery { sample_id: s.sample_id.clone(), longitude: s.longitude, latitude: s.latitude, date: s.date }
    }
}

fn missing_record(q: &PointQuery, n_bands: usize, method: GapfillMethod) -> ReflectanceRecord {
    ReflectanceRecord {
        sample_id: q.sample_id.clone(),
        longitude: q.longitude,
        latitude: q.latitude,
        resolved_date: q.date,
        values: vec![None; n_bands],
        source: method_source(method),
        cloud_fraction: None,
    }
}

fn method_source(method: GapfillMethod) -> ValueSource {
    match method {
        GapfillMethod::Linear => ValueSource::LinearInterpolated,
        GapfillMethod::KalmanEm => ValueSource::KalmanSmoothed,
    }
}

/// Resolves the reflectance vector of one point at its date. Problems with
/// single bands or acquisitions become missing cells plus warnings.
pub fn resolve_point(ctx: &RunContext<'_>, q: &PointQuery) -> Result<(ReflectanceRecord, Vec<String>)> {
    let cfg = ctx.config;
    let window = DateWindow::around(q.date, cfg.window_days);
    let geometry = Geometry::Point { lon: q.longitude, lat: q.latitude };
    let entries: Vec<ImageCatalogEntry> = ctx
        .call(|| ctx.provider.search_catalog(&geometry, &window))?
        .into_iter()
        .filter(|e| e.cloud_fraction <= cfg.cloud_threshold)
        .collect();

    let mut warnings = Vec::new();
    let mut series: Vec<Vec<(NaiveDate, f64)>> = vec![Vec::new(); cfg.bands.len()];
    match cfg.acquisition_mode {
        AcquisitionMode::PerBandTiff => {
            for e in &entries {
                for (b, band) in cfg.bands.iter().enumerate() {
                    if !e.bands_available.contains(band) {
                        continue;
                    }
                    let req = point_request(ctx.provider, q.longitude, q.latitude, e.acquisition_date, &cfg.bands);
                    let grid = match ctx.fetch_raster(e, band, &req) {
                        Ok(g) => g,
                        Err(PipelineError::Imagery(err)) => {
                            warnings.push(format!("{band} on {}: {err}", e.acquisition_date));
                            continue;
                        }
                        Err(err) => return Err(err),
                    };
                    match sample_reflectance(&grid, 0, q.longitude, q.latitude) {
                        Ok(v) => series[b].push((e.acquisition_date, v)),
                        Err(RasterError::MissingValue) => {}
                        Err(err) => warnings.push(format!("{band} on {}: {err}", e.acquisition_date)),
                    }
                }
            }
        }
        AcquisitionMode::ServerSide => {
            for e in &entries {
                let day = DateWindow { from: e.acquisition_date, to: e.acquisition_date };
                match ctx.call(|| ctx.provider.sample_point_server_side(q.longitude, q.latitude, &day, &cfg.bands)) {
                    Ok(p) => {
                        for (b, v) in p.values.into_iter().enumerate() {
                            if v.is_finite() {
                                series[b].push((p.resolved_date, v));
                            }
                        }
                    }
                    Err(PipelineError::Imagery(err)) => warnings.push(format!("{}: {err}", e.acquisition_date)),
                    Err(err) => return Err(err),
                }
            }
        }
    }

    let mut record = missing_record(q, cfg.bands.len(), cfg.gapfill_method);
    let mut sources = Vec::new();
    for (b, obs) in series.into_iter().enumerate() {
        let band = &cfg.bands[b];
        if obs.is_empty() {
            warnings.push(format!("{band}: no usable acquisitions within ±{} days", cfg.window_days));
            continue;
        }
        let s = match BandSeries::new(band.clone(), obs) {
            Ok(s) => s,
            Err(err) => {
                warnings.push(format!("{band}: {err}"));
                continue;
            }
        };
        let mut method = cfg.gapfill_method;
        if method == GapfillMethod::KalmanEm && s.len() < 3 && s.value_on(q.date).is_none() {
            warnings.push(format!("{band}: {} acquisitions are too few for kalman_em, used linear", s.len()));
            method = GapfillMethod::Linear;
        }
        match estimate_at(&s, q.date, method) {
            Ok(est) => {
                record.values[b] = Some(est.value.clamp(0.0, 1.0));
                sources.push(est.source);
            }
            Err(err) => warnings.push(format!("{band}: {err}")),
        }
    }
    if !sources.is_empty() {
        record.source = if sources.iter().all(|s| *s == ValueSource::Observed) {
            ValueSource::Observed
        } else if sources.contains(&ValueSource::KalmanSmoothed) {
            ValueSource::KalmanSmoothed
        } else {
            ValueSource::LinearInterpolated
        };
    }
    if record.source == ValueSource::Observed {
        record.cloud_fraction = entries.iter().find(|e| e.acquisition_date == q.date).map(|e| e.cloud_fraction);
    }
    Ok((record, warnings))
}

/// Rows and warnings of a finished run, in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub rows: Vec<ReflectanceRecord>,
    pub warnings: Vec<RowWarning>,
}

/// Resolves every point with up to `max_concurrency` workers. `on_done` is
/// called once per finished point.
pub fn run_points(ctx: &RunContext<'_>, points: &[PointQuery], on_done: &(dyn Fn() + Sync)) -> Result<RunOutput> {
    let results: Mutex<BTreeMap<usize, Result<(ReflectanceRecord, Vec<String>)>>> = Mutex::new(BTreeMap::new());
    let next = AtomicUsize::new(0);
    let workers = (ctx.config.max_concurrency as usize).clamp(1, points.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= points.len() || ctx.cancel.load(Ordering::SeqCst) {
                    break;
                }
                let r = resolve_point(ctx, &points[i]);
                results.lock().insert(i, r);
                on_done();
            });
        }
    });
    if ctx.cancel.load(Ordering::SeqCst) {
        return Err(PipelineError::Cancelled);
    }

    let mut rows = Vec::with_capacity(points.len());
    let mut warnings = Vec::new();
    let mut first_error = None;
    for (i, r) in results.into_inner() {
        let q = &points[i];
        match r {
            Ok((rec, ws)) => {
                rows.push(rec);
                warnings.extend(ws.into_iter().map(|message| RowWarning { sample_id: q.sample_id.clone(), message }));
            }
            Err(PipelineError::Cancelled) => return Err(PipelineError::Cancelled),
            Err(err) => {
                let message = err.to_string();
                first_error.get_or_insert_with(|| message.clone());
                rows.push(missing_record(q, ctx.config.bands.len(), ctx.config.gapfill_method));
                warnings.push(RowWarning { sample_id: q.sample_id.clone(), message });
            }
        }
    }
    if let Some(e) = first_error {
        if !points.is_empty() && rows.iter().all(|r| r.values.iter().all(Option::is_none)) {
            return Err(PipelineError::AllSamplesFailed(e));
        }
    }
    Ok(RunOutput { rows, warnings })
}
