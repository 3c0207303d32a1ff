//! SOC regressors over reflectance matrices: k-NN, ridge and random forest,
//! with a seeded train/test split and test-set metrics.

mod forest;
mod knn;
mod linear;
mod metrics;

pub use forest::{ForestModel, ForestParams, TreeArrays};
pub use knn::KnnModel;
pub use linear::RidgeModel;
pub use metrics::{compute_metrics, EvalMetrics, MetricsError};

use crate::dataset::{Dataset, ReflectanceMatrix};
use crate::store::{JsonStore, StoreError};
use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const MIN_TRAIN_ROWS: usize = 5;
pub const DEFAULT_TEST_FRACTION: f64 = 0.2;

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("{found} complete labelled rows, at least {required} required")]
    TooFewRows { found: usize, required: usize },
    #[error("unknown algorithm '{0}' (expected knn, linear or forest)")]
    UnknownAlgorithm(String),
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparams(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("every band is constant across the training rows")]
    DegenerateFeatures,
    #[error("expected {expected} values, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("input contains a non-finite value")]
    NonFiniteInput,
    #[error("no row has a complete reflectance vector")]
    NoCompleteRows,
    #[error("test metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("{0} not found")]
    NotFound(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T> = std::result::Result<T, PredictError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Knn,
    Linear,
    Forest,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Knn => "knn",
            Algorithm::Linear => "linear",
            Algorithm::Forest => "forest",
        }
    }

    fn allowed_keys(self) -> &'static [&'static str] {
        match self {
            Algorithm::Knn => &["k"],
            Algorithm::Linear => &["lambda"],
            Algorithm::Forest => &["n_trees", "max_features", "min_samples_leaf"],
        }
    }

    /// Fills defaults and checks ranges. `d` is the feature count.
    pub fn resolve_hyperparams(self, given: &BTreeMap<String, f64>, d: usize) -> Result<BTreeMap<String, f64>> {
        if let Some(k) = given.keys().find(|k| !self.allowed_keys().contains(&k.as_str())) {
            return Err(PredictError::InvalidHyperparams(format!("'{k}' is not a {} hyperparameter", self.as_str())));
        }
        let mut out = given.clone();
        let defaults: &[(&str, f64)] = match self {
            Algorithm::Knn => &[("k", 5.0)],
            Algorithm::Linear => &[("lambda", 1e-3)],
            Algorithm::Forest => &[("n_trees", 100.0), ("max_features", (d as f64).sqrt().ceil()), ("min_samples_leaf", 2.0)],
        };
        for (k, v) in defaults {
            out.entry(k.to_string()).or_insert(*v);
        }
        for (k, &v) in &out {
            let ok = match k.as_str() {
                "lambda" => v.is_finite() && v >= 0.0,
                "n_trees" => v.fract() == 0.0 && (1.0..=10_000.0).contains(&v),
                _ => v.fract() == 0.0 && (1.0..=1e9).contains(&v),
            };
            if !ok {
                return Err(PredictError::InvalidHyperparams(format!("{k} = {v}")));
            }
        }
        Ok(out)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = PredictError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "knn" => Ok(Algorithm::Knn),
            "linear" => Ok(Algorithm::Linear),
            "forest" => Ok(Algorithm::Forest),
            _ => Err(PredictError::UnknownAlgorithm(s.to_string())),
        }
    }
}

fn default_test_fraction() -> f64 {
    DEFAULT_TEST_FRACTION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRequest {
    pub matrix_id: String,
    /// Dataset supplying the labels; defaults to the matrix's own dataset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_id: Option<String>,
    pub algorithm: String,
    #[serde(default)]
    pub hyperparams: BTreeMap<String, f64>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

impl TrainRequest {
    pub fn new(matrix_id: impl Into<String>, algorithm: impl Into<String>) -> Self {
        TrainRequest {
            matrix_id: matrix_id.into(),
            dataset_id: None,
            algorithm: algorithm.into(),
            hyperparams: BTreeMap::new(),
            test_fraction: DEFAULT_TEST_FRACTION,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BatchSource {
    Dataset { dataset_id: String },
    Matrix { matrix_id: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainedOn {
    pub matrix_id: String,
    pub dataset_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelParams {
    Knn(KnnModel),
    Linear(RidgeModel),
    Forest(ForestModel),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorModel {
    pub format_version: u32,
    pub model_id: String,
    pub algorithm: Algorithm,
    pub hyperparams: BTreeMap<String, f64>,
    pub band_names: Vec<String>,
    pub trained_on: TrainedOn,
    pub metrics: EvalMetrics,
    pub created_at: DateTime<Utc>,
    pub seed: u64,
    pub test_fraction: f64,
    pub n_train: usize,
    /// Matrix rows left out for a missing cell or label.
    pub n_dropped: usize,
    #[serde(default)]
    pub warnings: Vec<String>,
    pub params: ModelParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model_id: String,
    pub algorithm: Algorithm,
    pub hyperparams: BTreeMap<String, f64>,
    pub band_names: Vec<String>,
    pub trained_on: TrainedOn,
    pub metrics: EvalMetrics,
    pub n_train: usize,
    pub created_at: DateTime<Utc>,
}

impl PredictorModel {
    pub fn summary(&self) -> ModelSummary {
        ModelSummary {
            model_id: self.model_id.clone(),
            algorithm: self.algorithm,
            hyperparams: self.hyperparams.clone(),
            band_names: self.band_names.clone(),
            trained_on: self.trained_on.clone(),
            metrics: self.metrics,
            n_train: self.n_train,
            created_at: self.created_at,
        }
    }

    pub fn predict(&self, v: &[f64]) -> Result<f64> {
        if v.len() != self.band_names.len() {
            return Err(PredictError::DimensionMismatch { expected: self.band_names.len(), got: v.len() });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(PredictError::NonFiniteInput);
        }
        Ok(self.params.predict(v))
    }

    /// Predicts every row of `m` whose model bands are all present; the rest
    /// are reported as skipped.
    pub fn predict_matrix(&self, m: &ReflectanceMatrix) -> Result<(Vec<SocPrediction>, Vec<SkippedRow>)> {
        let cols = self
            .band_names
            .iter()
            .map(|b| m.band_index(b).ok_or_else(|| PredictError::InvalidRequest(format!("matrix has no band {b}"))))
            .collect::<Result<Vec<_>>>()?;
        let mut predictions = Vec::new();
        let mut skipped = Vec::new();
        for r in &m.rows {
            let v: Option<Vec<f64>> = cols.iter().map(|&c| r.values[c].filter(|x| x.is_finite())).collect();
            match v {
                Some(v) => predictions.push(SocPrediction { sample_id: r.sample_id.clone(), soc: self.params.predict(&v) }),
                None => {
                    let missing: Vec<&str> = cols
                        .iter()
                        .zip(&self.band_names)
                        .filter(|(&c, _)| r.values[c].is_none_or(|x| !x.is_finite()))
                        .map(|(_, b)| b.as_str())
                        .collect();
                    skipped.push(SkippedRow {
                        sample_id: r.sample_id.clone(),
                        reason: format!("missing reflectance for {}", missing.join(",")),
                    });
                }
            }
        }
        if predictions.is_empty() {
            return Err(PredictError::NoCompleteRows);
        }
        Ok((predictions, skipped))
    }
}

impl ModelParams {
    fn predict(&self, v: &[f64]) -> f64 {
        match self {
            ModelParams::Knn(m) => m.predict(v),
            ModelParams::Linear(m) => m.predict(v),
            ModelParams::Forest(m) => m.predict(v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SocPrediction {
    pub sample_id: String,
    pub soc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedRow {
    pub sample_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub prediction_id: String,
    pub model_id: String,
    pub source: BatchSource,
    pub predictions: Vec<SocPrediction>,
    pub skipped: Vec<SkippedRow>,
    pub created_at: DateTime<Utc>,
}

/// Seeded split of `n` rows into (train, test) index lists, each ascending.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut Xoshiro256PlusPlus::seed_from_u64(seed));
    let n_test = ((n as f64 * test_fraction).round() as usize).max(2).min(n.saturating_sub(1));
    let mut test = idx[..n_test].to_vec();
    let mut train = idx[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    (train, test)
}

/// Complete, labelled rows of `m` joined to `labels` by sample id.
/// Returns (sample ids, features, labels, number dropped).
pub fn training_table(m: &ReflectanceMatrix, labels: &Dataset) -> (Vec<String>, Vec<Vec<f64>>, Vec<f64>, usize) {
    let soc: HashMap<&str, f64> = labels.samples.iter().map(|s| (s.sample_id.as_str(), s.soc)).collect();
    let (mut ids, mut x, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for r in &m.rows {
        let (Some(v), Some(&label)) = (r.complete_values(), soc.get(r.sample_id.as_str())) else { continue };
        if v.iter().all(|a| a.is_finite()) {
            ids.push(r.sample_id.clone());
            x.push(v);
            y.push(label);
        }
    }
    let dropped = m.rows.len() - ids.len();
    (ids, x, y, dropped)
}

/// Fits `req.algorithm` on the seeded training split of `m` (labels from
/// `labels`) and scores it on the held-out rows.
pub fn train(m: &ReflectanceMatrix, labels: &Dataset, req: &TrainRequest, model_id: String) -> Result<PredictorModel> {
    let algorithm: Algorithm = req.algorithm.parse()?;
    if !(req.test_fraction > 0.0 && req.test_fraction <= 0.5) {
        return Err(PredictError::InvalidRequest(format!("test_fraction {} outside (0, 0.5]", req.test_fraction)));
    }
    if m.band_names.is_empty() {
        return Err(PredictError::InvalidRequest("matrix has no bands".into()));
    }
    let d = m.band_names.len();
    let hyperparams = algorithm.resolve_hyperparams(&req.hyperparams, d)?;
    let (_, x, y, n_dropped) = training_table(m, labels);
    if x.len() < MIN_TRAIN_ROWS {
        return Err(PredictError::TooFewRows { found: x.len(), required: MIN_TRAIN_ROWS });
    }
    let (train_idx, test_idx) = split_indices(x.len(), req.test_fraction, req.seed);
    let xt: Vec<Vec<f64>> = train_idx.iter().map(|&i| x[i].clone()).collect();
    let yt: Vec<f64> = train_idx.iter().map(|&i| y[i]).collect();

    let constant: Vec<&str> = (0..d)
        .filter(|&j| xt.iter().all(|r| r[j] == xt[0][j]))
        .map(|j| m.band_names[j].as_str())
        .collect();
    if constant.len() == d {
        return Err(PredictError::DegenerateFeatures);
    }
    let mut warnings: Vec<String> = constant.iter().map(|b| format!("band {b} is constant on the training rows")).collect();
    if n_dropped > 0 {
        warnings.push(format!("{n_dropped} rows dropped for missing reflectance or label"));
    }

    let hp = |k: &str| hyperparams[k];
    let params = match algorithm {
        Algorithm::Knn => {
            let k = hp("k") as usize;
            if k > xt.len() {
                warnings.push(format!("k={k} exceeds the {} training rows; all rows are used", xt.len()));
            }
            ModelParams::Knn(KnnModel::fit(k, xt, yt))
        }
        Algorithm::Linear => ModelParams::Linear(
            RidgeModel::fit(hp("lambda"), &xt, &yt).ok_or(PredictError::DegenerateFeatures)?,
        ),
        Algorithm::Forest => ModelParams::Forest(ForestModel::fit(
            &ForestParams {
                n_trees: hp("n_trees") as usize,
                max_features: hp("max_features") as usize,
                min_samples_leaf: hp("min_samples_leaf") as usize,
                seed: req.seed,
            },
            &xt,
            &yt,
        )),
    };
    let ytest: Vec<f64> = test_idx.iter().map(|&i| y[i]).collect();
    let yhat: Vec<f64> = test_idx.iter().map(|&i| params.predict(&x[i])).collect();
    let metrics = compute_metrics(&ytest, &yhat)?;

    Ok(PredictorModel {
        format_version: MODEL_FORMAT_VERSION,
        model_id,
        algorithm,
        hyperparams,
        band_names: m.band_names.clone(),
        trained_on: TrainedOn { matrix_id: m.matrix_id.clone(), dataset_id: labels.dataset_id.clone() },
        metrics,
        created_at: Utc::now(),
        seed: req.seed,
        test_fraction: req.test_fraction,
        n_train: train_idx.len(),
        n_dropped,
        warnings,
        params,
    })
}

pub struct ModelStore {
    records: JsonStore<PredictorModel>,
}

impl ModelStore {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        Ok(ModelStore { records: JsonStore::open(dir)? })
    }

    pub fn put(&self, m: &PredictorModel) -> Result<()> {
        Ok(self.records.put(&m.model_id, m)?)
    }

    pub fn get(&self, id: &str) -> Result<PredictorModel> {
        self.records.get(id).ok_or_else(|| PredictError::NotFound(format!("model {id}")))
    }

    /// Newest first.
    pub fn list(&self) -> Vec<ModelSummary> {
        let mut out: Vec<ModelSummary> = self.records.values().iter().map(PredictorModel::summary).collect();
        out.sort_by(|a, b| b.created_at.cmp(&a.created_at).then_with(|| a.model_id.cmp(&b.model_id)));
        out
    }
}
