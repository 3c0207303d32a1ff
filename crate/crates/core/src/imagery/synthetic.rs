use super::{
    select_min_cloud, BBox, BandRegistry, DateWindow, Geometry, ImageCatalogEntry, ImageRequest, ImageryError,
    ImageryProvider, PointSample, Result,
};
use crate::raster::{encode_geotiff, BandPlane, GeoTransform, RasterGrid, SampleType};
use chrono::{Datelike, NaiveDate};
use std::f64::consts::PI;

pub(crate) const DEFAULT_SEED: u64 = 42;
/// Revisit interval of the synthetic constellation, in days.
pub const REVISIT_DAYS: i64 = 5;
/// Cells per degree of the native grid (2^13, so cell edges are exact in f64).
const CELLS_PER_DEGREE: f64 = 8192.0;

fn schedule_epoch() -> NaiveDate {
    NaiveDate::from_ymd_opt(2015, 6, 23).expect("valid date")
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash(parts: &[u64]) -> u64 {
    parts.iter().fold(0x9e37_79b9_7f4a_7c15, |acc, &p| mix(acc ^ mix(p)))
}

/// Uniform in [0, 1).
fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Deterministic imagery: a seasonal sinusoid per band plus a seeded
/// per-cell texture, observed every [`REVISIT_DAYS`] over 1°×1° tiles.
pub struct SyntheticProvider {
    seed: u64,
    registry: BandRegistry,
}

impl SyntheticProvider {
    pub fn new(seed: u64) -> Self {
        SyntheticProvider { seed, registry: BandRegistry::sentinel2() }
    }

    pub fn with_registry(seed: u64, registry: BandRegistry) -> Self {
        SyntheticProvider { seed, registry }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn cell(lon: f64, lat: f64) -> (i64, i64) {
        // columns use floor and rows use ceil - 1, matching raster floor semantics
        ((lon * CELLS_PER_DEGREE).floor() as i64, (lat * CELLS_PER_DEGREE).ceil() as i64 - 1)
    }

    fn band_index(&self, band: &str) -> Result<usize> {
        self.registry.index_of(band).ok_or_else(|| ImageryError::UnknownBand(band.to_string()))
    }

    fn field_at_cell(&self, band_idx: usize, (cx, cy): (i64, i64), date: NaiveDate) -> f64 {
        let n = self.registry.names().len() as f64;
        let phase = 2.0 * PI * band_idx as f64 / n;
        let seasonal = 0.25 * (2.0 * PI * date.ordinal() as f64 / 365.0 + phase).sin();
        let texture = 2.0 * unit(hash(&[self.seed, cx as u64, cy as u64, band_idx as u64])) - 1.0;
        (0.5 + seasonal + 0.2 * texture).clamp(0.0, 1.0)
    }

    /// Surface reflectance of `band` at a point on `date`, in [0, 1].
    pub fn field(&self, band: &str, lon: f64, lat: f64, date: NaiveDate) -> Result<f64> {
        Ok(self.field_at_cell(self.band_index(band)?, Self::cell(lon, lat), date))
    }

    /// Acquisition dates of the schedule inside `window`.
    pub fn acquisition_dates(window: &DateWindow) -> Vec<NaiveDate> {
        let epoch = schedule_epoch();
        let first = (window.from - epoch).num_days().div_euclid(REVISIT_DAYS)
            + i64::from((window.from - epoch).num_days().rem_euclid(REVISIT_DAYS) != 0);
        (first..)
            .map(|k| epoch + chrono::TimeDelta::days(k * REVISIT_DAYS))
            .take_while(|d| *d <= window.to)
            .collect()
    }

    fn tile_of(lon: f64, lat: f64) -> (i64, i64) {
        ((lon.floor() as i64).clamp(-180, 179), (lat.floor() as i64).clamp(-90, 89))
    }

    fn entry(&self, (tx, ty): (i64, i64), date: NaiveDate) -> ImageCatalogEntry {
        let day = (date - schedule_epoch()).num_days();
        ImageCatalogEntry {
            image_id: format!("syn_{}_{tx}_{ty}", date.format("%Y%m%d")),
            acquisition_date: date,
            cloud_fraction: unit(hash(&[self.seed, 0xc10d, tx as u64, ty as u64, day as u64])),
            bands_available: self.registry.names().to_vec(),
            footprint: BBox {
                lon_min: tx as f64,
                lat_min: ty as f64,
                lon_max: (tx + 1) as f64,
                lat_max: (ty + 1) as f64,
            },
        }
    }

    /// Raw stored value for reflectance `v` in a given sample type.
    fn to_raw(v: f64, sample_type: SampleType) -> f64 {
        match sample_type {
            SampleType::Float32 => v as f32 as f64,
            SampleType::Auto => v,
            SampleType::Uint8 => (v * 255.0).round(),
            SampleType::Uint16 => (v * 65535.0).round(),
            SampleType::Int8 => (v * 127.0).round(),
            SampleType::Int16 => (v * 32767.0).round(),
        }
    }
}

impl ImageryProvider for SyntheticProvider {
    fn name(&self) -> &str {
        "synthetic"
    }

    fn native_resolution(&self) -> f64 {
        1.0 / CELLS_PER_DEGREE
    }

    fn registry(&self) -> &BandRegistry {
        &self.registry
    }

    fn search_catalog(&self, geometry: &Geometry, window: &DateWindow) -> Result<Vec<ImageCatalogEntry>> {
        window.validate()?;
        let tile = match geometry {
            Geometry::Point { lon, lat } => Self::tile_of(*lon, *lat),
            Geometry::BBox(b) => {
                b.validate()?;
                Self::tile_of(b.lon_min, b.lat_min)
            }
        };
        Ok(Self::acquisition_dates(window)
            .into_iter()
            .map(|d| self.entry(tile, d))
            .filter(|e| geometry.within(&e.footprint))
            .collect())
    }

    fn fetch_band_tiff(&self, entry: &ImageCatalogEntry, band: &str, request: &ImageRequest) -> Result<Vec<u8>> {
        let band_idx = self.band_index(band)?;
        let b = request.bbox;
        let geo = GeoTransform {
            origin_lon: b.lon_min,
            origin_lat: b.lat_max,
            pixel_scale_x: (b.lon_max - b.lon_min) / request.width as f64,
            pixel_scale_y: (b.lat_max - b.lat_min) / request.height as f64,
        };
        let mut values = Vec::with_capacity(request.width as usize * request.height as usize);
        for row in 0..request.height {
            for col in 0..request.width {
                let (lon, lat) = geo.pixel_center(row, col);
                let v = self.field_at_cell(band_idx, Self::cell(lon, lat), entry.acquisition_date);
                values.push(Self::to_raw(v, request.sample_type));
            }
        }
        let grid = RasterGrid::new(
            request.width,
            request.height,
            vec![BandPlane { values }],
            request.sample_type,
            geo,
            None,
        )?;
        Ok(encode_geotiff(&grid, request.sample_type)?)
    }

    fn sample_point_server_side(&self, lon: f64, lat: f64, window: &DateWindow, bands: &[String]) -> Result<PointSample> {
        self.registry.check(bands)?;
        let entries = self.search_catalog(&Geometry::Point { lon, lat }, window)?;
        let best = select_min_cloud(&entries).ok_or(ImageryError::NoImagery)?;
        let cell = Self::cell(lon, lat);
        let values = bands
            .iter()
            .map(|b| Ok(self.field_at_cell(self.band_index(b)?, cell, best.acquisition_date)))
            .collect::<Result<Vec<_>>>()?;
        Ok(PointSample {
            image_id: best.image_id.clone(),
            resolved_date: best.acquisition_date,
            values,
            cloud_fraction: best.cloud_fraction,
        })
    }
}
