//! SOC sample datasets: CSV ingestion, persistence with visibility rules, and
//! reflectance matrices.

mod matrix;

pub use matrix::{
    export_matrix_csv, import_matrix_csv, ImportedMatrix, ReflectanceMatrix, ReflectanceRecord,
    RowWarning,
};

use crate::store::{new_id, JsonStore, StoreError};
use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("CSV file is empty")]
    EmptyFile,
    #[error("CSV header is missing required column '{0}'")]
    MissingHeader(String),
    #[error("CSV contains no valid rows ({} rejected)", .0.len())]
    NoValidRows(Vec<RowError>),
    #[error("malformed CSV: {0}")]
    Malformed(String),
    #[error("{0} not found")]
    NotFound(String),
    #[error("dataset {0} is private to its owner")]
    Forbidden(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SocSample {
    pub sample_id: String,
    pub longitude: f64,
    pub latitude: f64,
    pub date: NaiveDate,
    /// Soil organic carbon in g/cm³.
    pub soc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Visibility {
    #[default]
    Private,
    Shared,
    Public,
}

impl FromStr for Visibility {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "private" => Ok(Visibility::Private),
            "shared" => Ok(Visibility::Shared),
            "public" => Ok(Visibility::Public),
            other => Err(format!("unknown visibility '{other}'")),
        }
    }
}

impl fmt::Display for Visibility {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Visibility::Private => "private",
            Visibility::Shared => "shared",
            Visibility::Public => "public",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub dataset_id: String,
    pub name: String,
    pub owner: String,
    pub visibility: Visibility,
    pub samples: Vec<SocSample>,
    pub created_at: DateTime<Utc>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, owner: impl Into<String>, visibility: Visibility, samples: Vec<SocSample>) -> Self {
        Dataset {
            dataset_id: new_id("ds"),
            name: name.into(),
            owner: owner.into(),
            visibility,
            samples,
            created_at: Utc::now(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(DatasetError::Invalid("dataset has no samples".into()));
        }
        let mut seen = HashSet::new();
        for s in &self.samples {
            if !seen.insert(s.sample_id.as_str()) {
                return Err(DatasetError::Invalid(format!("duplicate sample id '{}'", s.sample_id)));
            }
            if let Err(reason) = check_sample(s) {
                return Err(DatasetError::Invalid(format!("sample '{}': {reason}", s.sample_id)));
            }
        }
        Ok(())
    }

    pub fn visible_to(&self, viewer: &str) -> bool {
        self.owner == viewer || self.visibility != Visibility::Private
    }

    pub fn summary(&self) -> DatasetSummary {
        DatasetSummary {
            dataset_id: self.dataset_id.clone(),
            name: self.name.clone(),
            owner: self.owner.clone(),
            visibility: self.visibility,
            n_samples: self.samples.len(),
            created_at: self.created_at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub dataset_id: String,
    pub name: String,
    pub owner: String,
    pub visibility: Visibility,
    pub n_samples: usize,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowError {
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedCsv {
    pub samples: Vec<SocSample>,
    pub row_errors: Vec<RowError>,
}

fn check_sample(s: &SocSample) -> std::result::Result<(), String> {
    if !s.longitude.is_finite() || !(-180.0..=180.0).contains(&s.longitude) {
        return Err("longitude out of range".into());
    }
    if !s.latitude.is_finite() || !(-90.0..=90.0).contains(&s.latitude) {
        return Err("latitude out of range".into());
    }
    if !s.soc.is_finite() {
        return Err("soc is not a finite number".into());
    }
    if s.soc < 0.0 {
        return Err("soc is negative".into());
    }
    Ok(())
}

struct Columns {
    id: Option<usize>,
    longitude: usize,
    latitude: usize,
    date: usize,
    soc: usize,
}

impl Columns {
    fn locate(header: &csv::StringRecord) -> Result<Self> {
        let find = |names: &[&str]| {
            header
                .iter()
                .position(|h| names.iter().any(|n| h.trim().eq_ignore_ascii_case(n)))
        };
        let require = |names: &[&str]| find(names).ok_or_else(|| DatasetError::MissingHeader(names[0].to_string()));
        Ok(Columns {
            id: find(&["id", "sample_id", "point_id"]),
            longitude: require(&["longitude", "lon", "gps_long"])?,
            latitude: require(&["latitude", "lat", "gps_lat"])?,
            date: require(&["date", "survey_date"])?,
            soc: require(&["soc", "oc"])?,
        })
    }
}

fn parse_number(record: &csv::StringRecord, idx: usize, name: &str) -> std::result::Result<f64, String> {
    let raw = record.get(idx).ok_or_else(|| format!("missing {name}"))?;
    if raw.is_empty() {
        return Err(format!("missing {name}"));
    }
    raw.parse::<f64>().map_err(|_| format!("invalid {name} '{raw}'"))
}

/// 1-based line of the first non-terminator byte at or after `byte`. The csv
/// reader reports CRLF records as starting on the preceding `\n`.
pub(crate) fn line_of(text: &str, byte: u64) -> u64 {
    let bytes = text.as_bytes();
    let mut at = (byte as usize).min(bytes.len());
    while at < bytes.len() && matches!(bytes[at], b'\r' | b'\n') {
        at += 1;
    }
    1 + bytes[..at].iter().filter(|&&b| b == b'\n').count() as u64
}

/// Parses a SOC sample CSV (header with `longitude,latitude,date,soc` and an
/// optional `id`; LUCAS names `POINT_ID,GPS_LONG,GPS_LAT,SURVEY_DATE,OC` also
/// work). Rows failing validation are reported with their line
/// number; the valid rows are returned.
pub fn parse_soc_csv(text: &str) -> Result<ParsedCsv> {
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    if text.trim().is_empty() {
        return Err(DatasetError::EmptyFile);
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| DatasetError::Malformed(e.to_string()))?.clone();
    let cols = Columns::locate(&header)?;

    let mut samples = Vec::new();
    let mut row_errors = Vec::new();
    let mut seen = HashSet::new();
    let mut row_no = 0u64;
    let mut record = csv::StringRecord::new();
    let line_at = |byte: u64| line_of(text, byte);
    loop {
        let line = line_at(reader.position().byte());
        match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                row_errors.push(RowError {
                    line: e.position().map_or(line, |p| line_at(p.byte())),
                    reason: format!("unreadable row: {e}"),
                });
                continue;
            }
        }
        if record.iter().all(str::is_empty) {
            continue;
        }
        row_no += 1;
        let line = record.position().map_or(line, |p| line_at(p.byte()));
        let parsed = (|| {
            let sample_id = match cols.id {
                Some(i) => match record.get(i) {
                    Some(id) if !id.is_empty() => id.to_string(),
                    _ => return Err("missing id".to_string()),
                },
                None => format!("row-{row_no}"),
            };
            let longitude = parse_number(&record, cols.longitude, "longitude")?;
            let latitude = parse_number(&record, cols.latitude, "latitude")?;
            let raw_date = record.get(cols.date).unwrap_or_default();
            let date = NaiveDate::parse_from_str(raw_date, "%Y-%m-%d")
                .map_err(|_| format!("invalid date '{raw_date}' (expected YYYY-MM-DD)"))?;
            let soc = parse_number(&record, cols.soc, "soc")?;
            let sample = SocSample { sample_id, longitude, latitude, date, soc };
            check_sample(&sample)?;
            if !seen.insert(sample.sample_id.clone()) {
                return Err(format!("duplicate id '{}'", sample.sample_id));
            }
            Ok(sample)
        })();
        match parsed {
            Ok(s) => samples.push(s),
            Err(reason) => row_errors.push(RowError { line, reason }),
        }
    }

    if samples.is_empty() {
        return Err(DatasetError::NoValidRows(row_errors));
    }
    Ok(ParsedCsv { samples, row_errors })
}

pub struct DatasetStore {
    records: JsonStore<Dataset>,
}

impl DatasetStore {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        Ok(DatasetStore { records: JsonStore::open(dir)? })
    }

    pub fn store(&self, dataset: &Dataset) -> Result<String> {
        dataset.validate()?;
        self.records.put(&dataset.dataset_id, dataset)?;
        Ok(dataset.dataset_id.clone())
    }

    pub fn get(&self, id: &str, viewer: &str) -> Result<Dataset> {
        let d = self.records.get(id).ok_or_else(|| DatasetError::NotFound(format!("dataset {id}")))?;
        if !d.visible_to(viewer) {
            return Err(DatasetError::Forbidden(id.to_string()));
        }
        Ok(d)
    }

    /// Datasets the viewer owns plus every shared or public one, newest first.
    pub fn list(&self, viewer: &str) -> Vec<DatasetSummary> {
        let mut out: Vec<_> = self
            .records
            .values()
            .into_iter()
            .filter(|d| d.visible_to(viewer))
            .map(|d| d.summary())
            .collect();
        out.sort_by(|a, b| b.created_at.cmp(&a.created_at).then_with(|| a.dataset_id.cmp(&b.dataset_id)));
        out
    }
}
