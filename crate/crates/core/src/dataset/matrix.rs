use super::{DatasetError, Result, SocSample};
use crate::gapfill::{GapfillMethod, ValueSource};
use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectanceRecord {
    pub sample_id: String,
    pub longitude: f64,
    pub latitude: f64,
    pub resolved_date: NaiveDate,
    /// One entry per matrix band; `None` is a missing cell.
    pub values: Vec<Option<f64>>,
    pub source: ValueSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cloud_fraction: Option<f64>,
}

impl ReflectanceRecord {
    pub fn is_complete(&self) -> bool {
        self.values.iter().all(Option::is_some)
    }

    pub fn complete_values(&self) -> Option<Vec<f64>> {
        self.values.iter().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowWarning {
    pub sample_id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectanceMatrix {
    pub matrix_id: String,
    pub dataset_id: String,
    pub band_names: Vec<String>,
    pub rows: Vec<ReflectanceRecord>,
    pub provider_name: String,
    pub window_days: u32,
    /// Gap filling used to resolve the rows.
    #[serde(default)]
    pub gapfill_method: GapfillMethod,
    #[serde(default)]
    pub warnings: Vec<RowWarning>,
    pub created_at: DateTime<Utc>,
}

impl ReflectanceMatrix {
    pub fn validate(&self) -> Result<()> {
        if self.band_names.is_empty() {
            return Err(DatasetError::Invalid("matrix has no bands".into()));
        }
        for r in &self.rows {
            if r.values.len() != self.band_names.len() {
                return Err(DatasetError::Invalid(format!(
                    "row '{}' has {} values for {} bands",
                    r.sample_id,
                    r.values.len(),
                    self.band_names.len()
                )));
            }
        }
        Ok(())
    }

    pub fn band_index(&self, band: &str) -> Option<usize> {
        self.band_names.iter().position(|b| b == band)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Renders a matrix as CSV. With `labels`, a `soc` column is joined by sample
/// id; samples without a label get an empty cell.
pub fn export_matrix_csv(m: &ReflectanceMatrix, labels: Option<&[SocSample]>) -> String {
    let soc: Option<HashMap<&str, f64>> =
        labels.map(|ls| ls.iter().map(|s| (s.sample_id.as_str(), s.soc)).collect());
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let mut header: Vec<&str> = vec!["id", "longitude", "latitude", "date"];
    if soc.is_some() {
        header.push("soc");
    }
    header.extend(m.band_names.iter().map(String::as_str));
    header.push("source");
    w.write_record(&header).expect("in-memory write");
    for r in &m.rows {
        let mut row = vec![
            r.sample_id.clone(),
            r.longitude.to_string(),
            r.latitude.to_string(),
            r.resolved_date.to_string(),
        ];
        if let Some(soc) = &soc {
            row.push(fmt_opt(soc.get(r.sample_id.as_str()).copied()));
        }
        row.extend(r.values.iter().map(|v| fmt_opt(*v)));
        row.push(r.source.as_str().to_string());
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}

/// Rows recovered from an exported matrix CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportedMatrix {
    pub band_names: Vec<String>,
    pub rows: Vec<ReflectanceRecord>,
    /// Present when the CSV carried a `soc` column.
    pub labels: Option<Vec<Option<f64>>>,
}

impl ImportedMatrix {
    pub fn into_matrix(self, matrix_id: String, dataset_id: String, provider_name: String, window_days: u32) -> ReflectanceMatrix {
        ReflectanceMatrix {
            matrix_id,
            dataset_id,
            band_names: self.band_names,
            rows: self.rows,
            provider_name,
            window_days,
            gapfill_method: GapfillMethod::default(),
            warnings: Vec::new(),
            created_at: Utc::now(),
        }
    }
}

/// Parses CSV produced by [`export_matrix_csv`]. Cloud fractions are not part
/// of the CSV schema and come back as `None`.
pub fn import_matrix_csv(text: &str) -> Result<ImportedMatrix> {
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    if text.trim().is_empty() {
        return Err(DatasetError::EmptyFile);
    }
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| DatasetError::Malformed(e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    for (i, name) in ["id", "longitude", "latitude", "date"].iter().enumerate() {
        if header.get(i).map(String::as_str) != Some(*name) {
            return Err(DatasetError::MissingHeader(name.to_string()));
        }
    }
    if header.last().map(String::as_str) != Some("source") {
        return Err(DatasetError::MissingHeader("source".into()));
    }
    let has_soc = header.get(4).map(String::as_str) == Some("soc");
    let first_band = if has_soc { 5 } else { 4 };
    let band_names: Vec<String> = header[first_band..header.len() - 1].to_vec();
    if band_names.is_empty() {
        return Err(DatasetError::Malformed("no band columns".into()));
    }

    let mut rows = Vec::new();
    let mut labels = has_soc.then(Vec::new);
    for rec in reader.records() {
        let rec = rec.map_err(|e| DatasetError::Malformed(e.to_string()))?;
        let line = rec.position().map_or(0, |p| super::line_of(text, p.byte()));
        let bad = |what: &str| DatasetError::Malformed(format!("line {line}: invalid {what}"));
        let num = |i: usize, what: &str| -> Result<Option<f64>> {
            match &rec[i] {
                "" => Ok(None),
                s => s.parse().map(Some).map_err(|_| bad(what)),
            }
        };
        let longitude = num(1, "longitude")?.ok_or_else(|| bad("longitude"))?;
        let latitude = num(2, "latitude")?.ok_or_else(|| bad("latitude"))?;
        let resolved_date = rec[3].parse().map_err(|_| bad("date"))?;
        if let Some(labels) = labels.as_mut() {
            labels.push(num(4, "soc")?);
        }
        let values = (first_band..first_band + band_names.len())
            .map(|i| num(i, &header[i]))
            .collect::<Result<Vec<_>>>()?;
        let source = rec[header.len() - 1].parse().map_err(|_| bad("source"))?;
        rows.push(ReflectanceRecord {
            sample_id: rec[0].to_string(),
            longitude,
            latitude,
            resolved_date,
            values,
            source,
            cloud_fraction: None,
        });
    }
    Ok(ImportedMatrix { band_names, rows, labels })
}
