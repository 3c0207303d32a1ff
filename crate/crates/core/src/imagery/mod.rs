//! Satellite imagery providers behind one contract: catalog search, per-band
//! GeoTIFF fetch, server-side point sampling, evalscripts and rate limiting.

mod ratelimit;
mod remote;
mod synthetic;

pub use ratelimit::{Clock, ManualClock, RateLimitedProvider, RateLimiter, RateLimiterState, SystemClock};
pub use remote::{GeeProvider, SentinelHubProvider};
pub use synthetic::SyntheticProvider;

use crate::raster::{decode_geotiff, RasterError, RasterGrid, SampleType};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Duration;
use thiserror::Error;

pub const MAX_IMAGE_DIM: u32 = 2500;
pub const DEFAULT_REQUESTS_PER_MINUTE: u32 = 60;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ImageryError {
    #[error("invalid {field}: {reason}")]
    Validation { field: String, reason: String },
    #[error("unknown band '{0}'")]
    UnknownBand(String),
    #[error("band {band} is not available in image {image_id}")]
    BandUnavailable { band: String, image_id: String },
    #[error("no imagery in the requested window")]
    NoImagery,
    #[error("rate limited, retry in {} ms", .wait.as_millis())]
    RateLimited { wait: Duration },
    #[error("provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("unknown provider '{0}'")]
    UnknownProvider(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

impl ImageryError {
    fn invalid(field: &str, reason: impl Into<String>) -> Self {
        ImageryError::Validation { field: field.to_string(), reason: reason.into() }
    }

    pub fn is_retriable(&self) -> bool {
        matches!(self, ImageryError::RateLimited { .. })
    }
}

pub type Result<T> = std::result::Result<T, ImageryError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub lon_min: f64,
    pub lat_min: f64,
    pub lon_max: f64,
    pub lat_max: f64,
}

impl BBox {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.lon_min, self.lat_min, self.lon_max, self.lat_max].iter().all(|v| v.is_finite());
        if !finite || !(self.lon_min < self.lon_max) || !(self.lat_min < self.lat_max) {
            return Err(ImageryError::invalid("bbox", "needs lon_min < lon_max and lat_min < lat_max"));
        }
        if self.lon_min < -180.0 || self.lon_max > 180.0 || self.lat_min < -90.0 || self.lat_max > 90.0 {
            return Err(ImageryError::invalid("bbox", "outside WGS84 bounds"));
        }
        Ok(())
    }

    pub fn contains_point(&self, lon: f64, lat: f64) -> bool {
        (self.lon_min..=self.lon_max).contains(&lon) && (self.lat_min..=self.lat_max).contains(&lat)
    }

    pub fn contains_bbox(&self, other: &BBox) -> bool {
        self.contains_point(other.lon_min, other.lat_min) && self.contains_point(other.lon_max, other.lat_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Geometry {
    Point { lon: f64, lat: f64 },
    BBox(BBox),
}

impl Geometry {
    pub fn within(&self, footprint: &BBox) -> bool {
        match self {
            Geometry::Point { lon, lat } => footprint.contains_point(*lon, *lat),
            Geometry::BBox(b) => footprint.contains_bbox(b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateWindow {
    pub from: NaiveDate,
    pub to: NaiveDate,
}

impl DateWindow {
    pub fn new(from: NaiveDate, to: NaiveDate) -> Result<Self> {
        let w = DateWindow { from, to };
        w.validate()?;
        Ok(w)
    }

    /// Symmetric window of `half_width` days around `center`.
    pub fn around(center: NaiveDate, half_width: u32) -> Self {
        let d = chrono::Days::new(half_width.into());
        DateWindow { from: center - d, to: center + d }
    }

    pub fn validate(&self) -> Result<()> {
        if self.from > self.to {
            return Err(ImageryError::invalid("date_window", "from is after to"));
        }
        Ok(())
    }

    pub fn contains(&self, d: NaiveDate) -> bool {
        self.from <= d && d <= self.to
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageCatalogEntry {
    pub image_id: String,
    pub acquisition_date: NaiveDate,
    pub cloud_fraction: f64,
    pub bands_available: Vec<String>,
    pub footprint: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRequest {
    pub bbox: BBox,
    pub width: u32,
    pub height: u32,
    pub bands: Vec<String>,
    pub sample_type: SampleType,
    pub date_window: DateWindow,
}

/// Checks every request invariant and reports the first violated field.
pub fn validate_request(r: &ImageRequest) -> Result<()> {
    for (field, v) in [("width", r.width), ("height", r.height)] {
        if !(1..=MAX_IMAGE_DIM).contains(&v) {
            return Err(ImageryError::invalid(field, format!("{v} is outside 1..={MAX_IMAGE_DIM}")));
        }
    }
    r.bbox.validate()?;
    if r.bands.is_empty() {
        return Err(ImageryError::invalid("bands", "at least one band is required"));
    }
    r.date_window.validate()
}

/// Result of a server-side point query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSample {
    pub image_id: String,
    pub resolved_date: NaiveDate,
    pub values: Vec<f64>,
    pub cloud_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandRegistry {
    bands: Vec<String>,
}

impl BandRegistry {
    pub fn new(bands: impl IntoIterator<Item = impl Into<String>>) -> Self {
        BandRegistry { bands: bands.into_iter().map(Into::into).collect() }
    }

    /// Sentinel-2 MSI bands.
    pub fn sentinel2() -> Self {
        Self::new([
            "B01", "B02", "B03", "B04", "B05", "B06", "B07", "B08", "B8A", "B09", "B10", "B11", "B12",
        ])
    }

    pub fn names(&self) -> &[String] {
        &self.bands
    }

    pub fn index_of(&self, band: &str) -> Option<usize> {
        self.bands.iter().position(|b| b == band)
    }

    pub fn check(&self, bands: &[String]) -> Result<()> {
        match bands.iter().find(|b| self.index_of(b).is_none()) {
            Some(b) => Err(ImageryError::UnknownBand(b.clone())),
            None => Ok(()),
        }
    }
}

impl Default for BandRegistry {
    fn default() -> Self {
        Self::sentinel2()
    }
}

/// Sentinel-Hub style evalscript returning `bands` in order.
pub fn generate_evalscript(registry: &BandRegistry, bands: &[String], sample_type: SampleType) -> Result<String> {
    if bands.is_empty() {
        return Err(ImageryError::invalid("bands", "at least one band is required"));
    }
    registry.check(bands)?;
    let quoted: Vec<String> = bands.iter().map(|b| format!("\"{b}\"")).collect();
    let samples: Vec<String> = bands.iter().map(|b| format!("sample.{b}")).collect();
    let mut s = String::new();
    s.push_str("//VERSION=3\n");
    s.push_str("function setup() {\n  return {\n");
    let _ = writeln!(s, "    input: [{}],", quoted.join(", "));
    let _ = writeln!(s, "    output: {{ bands: {}, sampleType: \"{}\" }}", bands.len(), sample_type.as_str());
    s.push_str("  };\n}\n\n");
    s.push_str("function evaluatePixel(sample) {\n");
    let _ = writeln!(s, "  return [{}];", samples.join(", "));
    s.push_str("}\n");
    Ok(s)
}

pub trait ImageryProvider: Send + Sync {
    fn name(&self) -> &str;

    /// Pixel size in degrees of the provider's native grid.
    fn native_resolution(&self) -> f64;

    fn registry(&self) -> &BandRegistry;

    /// Entries whose footprint contains `geometry` and whose date lies in
    /// `window`, ascending by date.
    fn search_catalog(&self, geometry: &Geometry, window: &DateWindow) -> Result<Vec<ImageCatalogEntry>>;

    /// GeoTIFF bytes for one band of one image. Callers go through
    /// [`fetch_band_raster`], which validates first.
    fn fetch_band_tiff(&self, entry: &ImageCatalogEntry, band: &str, request: &ImageRequest) -> Result<Vec<u8>>;

    /// Reflectance of `bands` at a point from the least cloudy image in
    /// `window`, without transferring rasters.
    fn sample_point_server_side(&self, lon: f64, lat: f64, window: &DateWindow, bands: &[String]) -> Result<PointSample>;
}

/// Validates `request`, checks band availability, fetches and decodes.
pub fn fetch_band_raster(
    provider: &dyn ImageryProvider,
    entry: &ImageCatalogEntry,
    band: &str,
    request: &ImageRequest,
) -> Result<RasterGrid> {
    validate_request(request)?;
    if !entry.bands_available.iter().any(|b| b == band) {
        return Err(ImageryError::BandUnavailable { band: band.to_string(), image_id: entry.image_id.clone() });
    }
    let bytes = provider.fetch_band_tiff(entry, band, request)?;
    Ok(decode_geotiff(&bytes)?)
}

/// Least cloudy entry; ties go to the earliest acquisition.
pub fn select_min_cloud(entries: &[ImageCatalogEntry]) -> Option<&ImageCatalogEntry> {
    entries.iter().min_by(|a, b| {
        a.cloud_fraction
            .total_cmp(&b.cloud_fraction)
            .then(a.acquisition_date.cmp(&b.acquisition_date))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub synthetic_seed: u64,
    /// Requests per minute; `None` leaves the synthetic provider unlimited.
    pub synthetic_rate_limit: Option<u32>,
    pub remote_rate_limit: u32,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            synthetic_seed: synthetic::DEFAULT_SEED,
            synthetic_rate_limit: None,
            remote_rate_limit: DEFAULT_REQUESTS_PER_MINUTE,
        }
    }
}

pub const PROVIDER_NAMES: [&str; 3] = ["synthetic", "sentinelhub", "gee"];

/// Builds a provider by name; remote ones read credentials from the
/// environment and sit behind a per-provider rate limiter.
pub fn build_provider(name: &str, cfg: &ProviderConfig) -> Result<Arc<dyn ImageryProvider>> {
    let clock: Arc<dyn Clock> = Arc::new(SystemClock::new());
    let limited = |p: Arc<dyn ImageryProvider>, rpm: u32| -> Arc<dyn ImageryProvider> {
        Arc::new(RateLimitedProvider::new(p, Arc::new(RateLimiter::per_minute(rpm, clock.clone()))))
    };
    match name {
        "synthetic" => {
            let p: Arc<dyn ImageryProvider> = Arc::new(SyntheticProvider::new(cfg.synthetic_seed));
            Ok(match cfg.synthetic_rate_limit {
                Some(rpm) => limited(p, rpm),
                None => p,
            })
        }
        "sentinelhub" => Ok(limited(Arc::new(SentinelHubProvider::from_env()), cfg.remote_rate_limit)),
        "gee" => Ok(limited(Arc::new(GeeProvider::from_env()), cfg.remote_rate_limit)),
        other => Err(ImageryError::UnknownProvider(other.to_string())),
    }
}
