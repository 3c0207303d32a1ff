//! Georeferenced raster grids: GeoTIFF codec, world-to-pixel mapping and
//! reflectance sampling.
//!
//! Grids hold raw pixel values (as `f64`, which represents every supported
//! storage type exactly) together with the sample type they were declared
//! with. Coordinates are geographic WGS84 degrees; rows run southward from the
//! upper-left tiepoint.

mod tiff;

pub use tiff::{decode_geotiff, encode_geotiff};

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RasterError {
    #[error("malformed TIFF: {0}")]
    MalformedTiff(String),
    #[error("missing GeoTIFF tag {0}")]
    MissingGeoTags(&'static str),
    #[error("unsupported TIFF layout: {0}")]
    UnsupportedLayout(String),
    #[error("point ({lon}, {lat}) lies outside the raster footprint")]
    OutOfFootprint { lon: f64, lat: f64 },
    #[error("band index {index} out of range ({bands} bands)")]
    BandIndexOutOfRange { index: u32, bands: usize },
    #[error("pixel holds the nodata value")]
    MissingValue,
    #[error("value {value} is not representable as {sample_type}")]
    RangeOverflow { value: f64, sample_type: SampleType },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
}

pub type Result<T> = std::result::Result<T, RasterError>;

/// Pixel storage encodings offered by imagery providers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SampleType {
    Int8,
    Uint8,
    Int16,
    Uint16,
    Float32,
    /// Reflectance in [0, 1] stretched onto [0, 255] and stored as UINT8.
    Auto,
}

impl SampleType {
    pub const ALL: [SampleType; 6] = [
        SampleType::Int8,
        SampleType::Uint8,
        SampleType::Int16,
        SampleType::Uint16,
        SampleType::Float32,
        SampleType::Auto,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SampleType::Int8 => "INT8",
            SampleType::Uint8 => "UINT8",
            SampleType::Int16 => "INT16",
            SampleType::Uint16 => "UINT16",
            SampleType::Float32 => "FLOAT32",
            SampleType::Auto => "AUTO",
        }
    }

    /// Inclusive range of raw values the type can store.
    pub fn value_range(self) -> (f64, f64) {
        match self {
            SampleType::Int8 => (i8::MIN as f64, i8::MAX as f64),
            SampleType::Uint8 | SampleType::Auto => (0.0, u8::MAX as f64),
            SampleType::Int16 => (i16::MIN as f64, i16::MAX as f64),
            SampleType::Uint16 => (0.0, u16::MAX as f64),
            SampleType::Float32 => (f32::MIN as f64, f32::MAX as f64),
        }
    }

    /// Whether `v` can be stored verbatim under this type.
    pub fn can_store(self, v: f64) -> bool {
        if self == SampleType::Float32 {
            return v.is_nan() || (v as f32) as f64 == v;
        }
        let (lo, hi) = self.value_range();
        v.is_finite() && v.fract() == 0.0 && v >= lo && v <= hi
    }
}

impl fmt::Display for SampleType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SampleType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        SampleType::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown sample type '{s}'"))
    }
}

/// Affine georeferencing of a north-up grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform {
    /// Longitude of the upper-left corner.
    pub origin_lon: f64,
    /// Latitude of the upper-left corner.
    pub origin_lat: f64,
    /// Degrees of longitude per pixel column.
    pub pixel_scale_x: f64,
    /// Degrees of latitude per pixel row (applied southward).
    pub pixel_scale_y: f64,
}

impl GeoTransform {
    pub fn validate(&self) -> Result<()> {
        let scale_ok = |s: f64| s.is_finite() && s > 0.0;
        if !scale_ok(self.pixel_scale_x) || !scale_ok(self.pixel_scale_y) {
            return Err(RasterError::InvalidGrid(format!(
                "pixel scales must be finite and positive, got ({}, {})",
                self.pixel_scale_x, self.pixel_scale_y
            )));
        }
        if !(-180.0..=180.0).contains(&self.origin_lon) || !(-90.0..=90.0).contains(&self.origin_lat)
        {
            return Err(RasterError::InvalidGrid(format!(
                "origin ({}, {}) outside WGS84 bounds",
                self.origin_lon, self.origin_lat
            )));
        }
        Ok(())
    }

    /// World coordinates of the center of pixel `(row, col)`.
    pub fn pixel_center(&self, row: u32, col: u32) -> (f64, f64) {
        (
            self.origin_lon + (col as f64 + 0.5) * self.pixel_scale_x,
            self.origin_lat - (row as f64 + 0.5) * self.pixel_scale_y,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandPlane {
    /// Row-major raw values, `width * height` of them.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterGrid {
    pub width: u32,
    pub height: u32,
    pub bands: Vec<BandPlane>,
    pub sample_type: SampleType,
    pub geo: GeoTransform,
    /// Raw value marking missing pixels, shared by all bands.
    pub nodata: Option<f64>,
}

impl RasterGrid {
    pub fn new(
        width: u32,
        height: u32,
        bands: Vec<BandPlane>,
        sample_type: SampleType,
        geo: GeoTransform,
        nodata: Option<f64>,
    ) -> Result<Self> {
        let grid = RasterGrid {
            width,
            height,
            bands,
            sample_type,
            geo,
            nodata,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(RasterError::InvalidGrid(format!(
                "dimensions must be at least 1x1, got {}x{}",
                self.width, self.height
            )));
        }
        if self.bands.is_empty() {
            return Err(RasterError::InvalidGrid("grid has no bands".into()));
        }
        let n = self.pixel_count();
        if let Some(i) = self.bands.iter().position(|b| b.values.len() != n) {
            return Err(RasterError::InvalidGrid(format!(
                "band {i} holds {} values, expected {n}",
                self.bands[i].values.len()
            )));
        }
        self.geo.validate()
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn value(&self, band: usize, row: u32, col: u32) -> f64 {
        self.bands[band].values[row as usize * self.width as usize + col as usize]
    }

    pub fn world_to_pixel(&self, lon: f64, lat: f64) -> Result<(u32, u32)> {
        world_to_pixel(&self.geo, (self.width, self.height), lon, lat)
    }
}

/// Maps a world coordinate to the `(row, col)` of the pixel containing it.
///
/// Uses floor semantics, so a point on a pixel's west or north edge belongs to
/// that pixel.
pub fn world_to_pixel(
    geo: &GeoTransform,
    (width, height): (u32, u32),
    lon: f64,
    lat: f64,
) -> Result<(u32, u32)> {
    let out = RasterError::OutOfFootprint { lon, lat };
    if !lon.is_finite() || !lat.is_finite() {
        return Err(out);
    }
    let col = ((lon - geo.origin_lon) / geo.pixel_scale_x).floor();
    let row = ((geo.origin_lat - lat) / geo.pixel_scale_y).floor();
    if col < 0.0 || row < 0.0 || col >= width as f64 || row >= height as f64 {
        return Err(out);
    }
    Ok((row as u32, col as u32))
}

/// Converts a raw stored value into unitless reflectance in [0, 1].
pub fn normalize_raw(sample_type: SampleType, raw: f64) -> Option<f64> {
    if raw.is_nan() {
        return None;
    }
    let v = match sample_type {
        SampleType::Float32 => raw.clamp(0.0, 1.0),
        SampleType::Uint8 | SampleType::Auto => raw.clamp(0.0, 255.0) / 255.0,
        SampleType::Uint16 => raw.clamp(0.0, 65535.0) / 65535.0,
        SampleType::Int8 => raw.clamp(0.0, 127.0) / 127.0,
        SampleType::Int16 => raw.clamp(0.0, 32767.0) / 32767.0,
    };
    Some(v)
}

/// Nearest-pixel reflectance of one band at a world coordinate.
pub fn sample_reflectance(grid: &RasterGrid, band_index: u32, lon: f64, lat: f64) -> Result<f64> {
    if band_index as usize >= grid.bands.len() {
        return Err(RasterError::BandIndexOutOfRange {
            index: band_index,
            bands: grid.bands.len(),
        });
    }
    let (row, col) = grid.world_to_pixel(lon, lat)?;
    let raw = grid.value(band_index as usize, row, col);
    if grid.nodata.is_some_and(|nd| nd == raw || (nd.is_nan() && raw.is_nan())) {
        return Err(RasterError::MissingValue);
    }
    normalize_raw(grid.sample_type, raw).ok_or(RasterError::MissingValue)
}

/// Stretch applied to AUTO rasters: `round_half_up(clamp(v, 0, 1) * 255)`.
pub fn auto_stretch(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}
