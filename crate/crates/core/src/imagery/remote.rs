//! Clients for hosted imagery platforms. They assemble the request documents
//! each platform expects, but this build carries no HTTP transport, so every
//! call ends in `ProviderUnavailable`.

use super::{
    generate_evalscript, validate_request, BandRegistry, DateWindow, Geometry, ImageCatalogEntry, ImageRequest,
    ImageryError, ImageryProvider, PointSample, Result,
};
use crate::raster::SampleType;
use serde_json::{json, Value};

const NO_TRANSPORT: &str = "no network transport in this build";

fn env(name: &str) -> Option<String> {
    std::env::var(name).ok().filter(|v| !v.is_empty())
}

fn missing(vars: &[&str]) -> ImageryError {
    ImageryError::ProviderUnavailable(format!("credentials not configured (set {})", vars.join(", ")))
}

/// Sentinel-Hub style backend: OAuth client credentials, catalog search and
/// the process API with evalscripts.
pub struct SentinelHubProvider {
    client_id: Option<String>,
    client_secret: Option<String>,
    registry: BandRegistry,
}

impl SentinelHubProvider {
    pub const ENV_CLIENT_ID: &'static str = "SOC_PROVIDER_SENTINELHUB_CLIENT_ID";
    pub const ENV_CLIENT_SECRET: &'static str = "SOC_PROVIDER_SENTINELHUB_CLIENT_SECRET";

    pub fn from_env() -> Self {
        SentinelHubProvider {
            client_id: env(Self::ENV_CLIENT_ID),
            client_secret: env(Self::ENV_CLIENT_SECRET),
            registry: BandRegistry::sentinel2(),
        }
    }

    fn unavailable(&self) -> ImageryError {
        if self.client_id.is_none() || self.client_secret.is_none() {
            return missing(&[Self::ENV_CLIENT_ID, Self::ENV_CLIENT_SECRET]);
        }
        ImageryError::ProviderUnavailable(NO_TRANSPORT.into())
    }

    pub fn token_request(&self) -> Vec<(&'static str, String)> {
        vec![
            ("grant_type", "client_credentials".into()),
            ("client_id", self.client_id.clone().unwrap_or_default()),
            ("client_secret", self.client_secret.clone().unwrap_or_default()),
        ]
    }

    pub fn catalog_request(geometry: &Geometry, window: &DateWindow) -> Value {
        let bbox = match geometry {
            Geometry::Point { lon, lat } => [*lon, *lat, *lon, *lat],
            Geometry::BBox(b) => [b.lon_min, b.lat_min, b.lon_max, b.lat_max],
        };
        json!({
            "collections": ["sentinel-2-l2a"],
            "bbox": bbox,
            "datetime": format!("{}T00:00:00Z/{}T23:59:59Z", window.from, window.to),
            "fields": {"include": ["id", "properties.datetime", "properties.eo:cloud_cover"]},
        })
    }

    /// Body for the process API fetching one band as an uncompressed GeoTIFF.
    pub fn process_request(&self, entry: &ImageCatalogEntry, band: &str, r: &ImageRequest) -> Result<Value> {
        validate_request(r)?;
        let script = generate_evalscript(&self.registry, &[band.to_string()], r.sample_type)?;
        let day = entry.acquisition_date;
        Ok(json!({
            "input": {
                "bounds": {
                    "bbox": [r.bbox.lon_min, r.bbox.lat_min, r.bbox.lon_max, r.bbox.lat_max],
                    "properties": {"crs": "http://www.opengis.net/def/crs/EPSG/0/4326"},
                },
                "data": [{
                    "type": "sentinel-2-l2a",
                    "dataFilter": {"timeRange": {"from": format!("{day}T00:00:00Z"), "to": format!("{day}T23:59:59Z")}},
                }],
            },
            "output": {
                "width": r.width,
                "height": r.height,
                "responses": [{"identifier": "default", "format": {"type": "image/tiff"}}],
            },
            "evalscript": script,
        }))
    }
}

impl ImageryProvider for SentinelHubProvider {
    fn name(&self) -> &str {
        "sentinelhub"
    }

    fn native_resolution(&self) -> f64 {
        // 10 m at the equator
        10.0 / 111_320.0
    }

    fn registry(&self) -> &BandRegistry {
        &self.registry
    }

    fn search_catalog(&self, geometry: &Geometry, window: &DateWindow) -> Result<Vec<ImageCatalogEntry>> {
        window.validate()?;
        let _body = Self::catalog_request(geometry, window);
        Err(self.unavailable())
    }

    fn fetch_band_tiff(&self, entry: &ImageCatalogEntry, band: &str, request: &ImageRequest) -> Result<Vec<u8>> {
        let _body = self.process_request(entry, band, request)?;
        Err(self.unavailable())
    }

    fn sample_point_server_side(&self, _lon: f64, _lat: f64, window: &DateWindow, bands: &[String]) -> Result<PointSample> {
        window.validate()?;
        self.registry.check(bands)?;
        Err(ImageryError::ProviderUnavailable(
            "sentinelhub has no server-side point sampling; use per_band_tiff".into(),
        ))
    }
}

/// Earth-Engine style backend: project credential, server-side reduction.
pub struct GeeProvider {
    project: Option<String>,
    key_file: Option<String>,
    registry: BandRegistry,
}

impl GeeProvider {
    pub const ENV_PROJECT: &'static str = "SOC_PROVIDER_GEE_PROJECT";
    pub const ENV_KEY_FILE: &'static str = "SOC_PROVIDER_GEE_KEY_FILE";

    pub fn from_env() -> Self {
        GeeProvider {
            project: env(Self::ENV_PROJECT),
            key_file: env(Self::ENV_KEY_FILE),
            registry: BandRegistry::sentinel2(),
        }
    }

    fn unavailable(&self) -> ImageryError {
        if self.project.is_none() || self.key_file.is_none() {
            return missing(&[Self::ENV_PROJECT, Self::ENV_KEY_FILE]);
        }
        ImageryError::ProviderUnavailable(NO_TRANSPORT.into())
    }

    /// Expression selecting the least cloudy harmonized scene and reducing it
    /// at the point.
    pub fn point_expression(lon: f64, lat: f64, window: &DateWindow, bands: &[String]) -> Value {
        json!({
            "collection": "COPERNICUS/S2_SR_HARMONIZED",
            "filterBounds": {"type": "Point", "coordinates": [lon, lat]},
            "filterDate": [window.from.to_string(), window.to.succ_opt().unwrap_or(window.to).to_string()],
            "sort": {"property": "CLOUDY_PIXEL_PERCENTAGE", "ascending": true},
            "first": true,
            "select": bands,
            "reduceRegion": {"reducer": "first", "scale": 10, "divide": 10000},
        })
    }
}

impl ImageryProvider for GeeProvider {
    fn name(&self) -> &str {
        "gee"
    }

    fn native_resolution(&self) -> f64 {
        10.0 / 111_320.0
    }

    fn registry(&self) -> &BandRegistry {
        &self.registry
    }

    fn search_catalog(&self, _geometry: &Geometry, window: &DateWindow) -> Result<Vec<ImageCatalogEntry>> {
        window.validate()?;
        Err(self.unavailable())
    }

    fn fetch_band_tiff(&self, _entry: &ImageCatalogEntry, _band: &str, request: &ImageRequest) -> Result<Vec<u8>> {
        validate_request(request)?;
        if request.sample_type == SampleType::Auto {
            return Err(ImageryError::Validation {
                field: "sample_type".into(),
                reason: "gee exports do not support AUTO".into(),
            });
        }
        Err(self.unavailable())
    }

    fn sample_point_server_side(&self, lon: f64, lat: f64, window: &DateWindow, bands: &[String]) -> Result<PointSample> {
        window.validate()?;
        self.registry.check(bands)?;
        let _expr = Self::point_expression(lon, lat, window, bands);
        Err(self.unavailable())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagery::BBox;

    #[test]
    fn calls_fail_as_unavailable() {
        let p = SentinelHubProvider { client_id: None, client_secret: None, registry: BandRegistry::sentinel2() };
        let d = "2020-06-01".parse().unwrap();
        let w = DateWindow { from: d, to: d };
        let err = p.search_catalog(&Geometry::Point { lon: 0.0, lat: 0.0 }, &w).unwrap_err();
        assert!(matches!(&err, ImageryError::ProviderUnavailable(m) if m.contains("SOC_PROVIDER_SENTINELHUB_CLIENT_ID")));
        let g = GeeProvider { project: Some("p".into()), key_file: Some("k".into()), registry: BandRegistry::sentinel2() };
        let err = g.sample_point_server_side(0.0, 0.0, &w, &["B04".into()]).unwrap_err();
        assert_eq!(err, ImageryError::ProviderUnavailable(NO_TRANSPORT.into()));
    }

    #[test]
    fn process_request_carries_evalscript_and_size() {
        let p = SentinelHubProvider::from_env();
        let d = "2020-06-01".parse().unwrap();
        let entry = ImageCatalogEntry {
            image_id: "x".into(),
            acquisition_date: d,
            cloud_fraction: 0.1,
            bands_available: vec!["B04".into()],
            footprint: BBox { lon_min: 0.0, lat_min: 0.0, lon_max: 1.0, lat_max: 1.0 },
        };
        let req = ImageRequest {
            bbox: BBox { lon_min: 0.1, lat_min: 0.1, lon_max: 0.2, lat_max: 0.2 },
            width: 4,
            height: 3,
            bands: vec!["B04".into()],
            sample_type: SampleType::Uint16,
            date_window: DateWindow { from: d, to: d },
        };
        let body = p.process_request(&entry, "B04", &req).unwrap();
        assert_eq!(body["output"]["width"], 4);
        assert!(body["evalscript"].as_str().unwrap().contains("sampleType: \"UINT16\""));
        let bad = ImageRequest { width: 0, ..req };
        assert!(matches!(p.process_request(&entry, "B04", &bad), Err(ImageryError::Validation { .. })));
    }
}
