//! Core library of the SOC inference platform.

pub mod dataset;
pub mod gapfill;
pub mod imagery;
pub mod platform;
pub mod pipeline;
pub mod predict;
pub mod raster;
pub mod store;

pub use dataset::{Dataset, DatasetSummary, ReflectanceMatrix, ReflectanceRecord, SocSample, Visibility};
pub use gapfill::{BandSeries, GapfillMethod, StateSpaceParams, ValueSource};
pub use imagery::{ImageryProvider, ProviderConfig};
pub use pipeline::{AcquisitionMode, Job, JobKind, JobState, PipelineConfig};
pub use platform::{Platform, PlatformError, PlatformOptions, PointPredictRequest, PointPrediction};
pub use predict::{Algorithm, BatchSource, EvalMetrics, ModelSummary, PredictionSet, PredictorModel, TrainRequest};
pub use raster::{RasterGrid, SampleType};
