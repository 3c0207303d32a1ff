//! `soc`: run every platform stage from the command line.
//!
//! Exit status is 0 on success, 1 on a usage or input error and 2 on an
//! internal failure.

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use soc_core::gapfill::{estimate_at, fill_grid, BandSeries};
use soc_core::{
    AcquisitionMode, GapfillMethod, PipelineConfig, Platform, PlatformError, PlatformOptions, PointPredictRequest,
    TrainRequest, Visibility,
};
use soc_service::ApiError;
use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

#[derive(Parser)]
#[command(name = "soc", version, about = "Soil organic carbon inference platform")]
struct Cli {
    /// Directory holding datasets, matrices, models and jobs.
    #[arg(long, global = true, env = "SOC_DATA_DIR", default_value = "soc-data")]
    data_dir: PathBuf,
    /// Acting user, as the X-User-Id header would name it.
    #[arg(long, global = true, env = "SOC_USER", default_value = soc_service::ANONYMOUS)]
    user: String,
    /// Do not keep fetched GeoTIFFs under the data directory.
    #[arg(long, global = true)]
    no_cache: bool,
    /// Print the API's JSON body instead of a table.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a SOC sample CSV (id, longitude, latitude, date, soc).
    Ingest {
        csv: PathBuf,
        #[arg(long)]
        name: Option<String>,
        #[arg(long, default_value = "private")]
        visibility: Visibility,
    },
    /// Resolve reflectance vectors for every sample of a dataset.
    Reflectance(ReflectanceArgs),
    /// Estimate a value from a date,value series at a target date.
    Gapfill {
        series: PathBuf,
        #[arg(long)]
        target_date: NaiveDate,
        #[arg(long, default_value = "linear")]
        method: GapfillMethod,
        /// Emit the daily grid as date,mean,variance CSV.
        #[arg(long)]
        grid: bool,
    },
    /// Train a predictor on a reflectance matrix.
    Train(TrainArgs),
    /// Predict SOC from a reflectance vector or a location and date.
    Predict(PredictArgs),
    /// Serve the REST API and map UI.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
    },
}

#[derive(Args)]
struct ReflectanceArgs {
    dataset_id: String,
    #[arg(long, default_value = "synthetic")]
    provider: String,
    /// Comma-separated band names.
    #[arg(long, value_delimiter = ',', required = true)]
    bands: Vec<String>,
    #[arg(long, default_value_t = 30)]
    window_days: u32,
    #[arg(long, default_value = "per_band_tiff")]
    mode: AcquisitionMode,
    #[arg(long, default_value = "linear")]
    gapfill: GapfillMethod,
}

#[derive(Args)]
struct TrainArgs {
    matrix_id: String,
    #[arg(long, default_value = "linear")]
    algorithm: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    /// Labels come from this dataset instead of the matrix's own.
    #[arg(long)]
    dataset_id: Option<String>,
    /// Hyperparameter as key=value; repeatable.
    #[arg(long = "hyperparam", value_parser = parse_hyperparam)]
    hyperparams: Vec<(String, f64)>,
}

#[derive(Args)]
#[command(group(clap::ArgGroup::new("input").required(true).args(["vector", "lon"])))]
struct PredictArgs {
    model_id: String,
    /// Comma-separated reflectance values in the model's band order.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, conflicts_with_all = ["lon", "lat", "date"])]
    vector: Option<Vec<f64>>,
    #[arg(long, allow_hyphen_values = true, requires_all = ["lat", "date"])]
    lon: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    lat: Option<f64>,
    #[arg(long)]
    date: Option<NaiveDate>,
    #[arg(long)]
    provider: Option<String>,
    #[arg(long)]
    mode: Option<AcquisitionMode>,
}

fn parse_hyperparam(s: &str) -> Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got '{s}'"))?;
    let v: f64 = v.trim().parse().map_err(|_| format!("'{v}' is not a number"))?;
    Ok((k.trim().to_string(), v))
}

enum Failure {
    User(String),
    Internal(String),
}

impl From<ApiError> for Failure {
    fn from(e: ApiError) -> Self {
        let msg = format!("{}: {}", e.code, e.message);
        if e.status >= 500 {
            Failure::Internal(msg)
        } else {
            Failure::User(msg)
        }
    }
}

impl From<PlatformError> for Failure {
    fn from(e: PlatformError) -> Self {
        ApiError::from(e).into()
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::User(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn open(cli: &Cli) -> Result<Arc<Platform>, Failure> {
    let mut opts = PlatformOptions::new(&cli.data_dir);
    opts.tiff_cache = !cli.no_cache;
    Ok(Platform::open(opts)?)
}

fn read(path: &PathBuf) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::User(format!("cannot read {}: {e}", path.display())))
}

fn run(cli: Cli) -> Outcome {
    match &cli.command {
        Command::Ingest { csv, name, visibility } => {
            let text = read(csv)?;
            let name = name.clone().unwrap_or_else(|| csv.file_stem().map_or("upload".into(), |s| s.to_string_lossy().into()));
            let (ds, row_errors) = open(&cli)?.ingest_csv(&text, &name, &cli.user, *visibility)?;
            if cli.json {
                emit(json!({"dataset_id": ds.dataset_id, "n_samples": ds.samples.len(), "row_errors": row_errors}));
            } else {
                println!("dataset {} ({} samples)", ds.dataset_id, ds.samples.len());
                for e in &row_errors {
                    println!("skipped line {}: {}", e.line, e.reason);
                }
            }
        }
        Command::Reflectance(a) => {
            let cfg = PipelineConfig {
                provider_name: a.provider.clone(),
                window_days: a.window_days,
                acquisition_mode: a.mode,
                gapfill_method: a.gapfill,
                ..PipelineConfig::new(a.bands.clone())
            };
            let m = open(&cli)?.run_reflectance(&a.dataset_id, &cfg, &cli.user)?;
            if cli.json {
                emit(json!(m));
            } else {
                println!("matrix {}", m.matrix_id);
                let mut header = vec!["sample_id".to_string(), "date".into(), "source".into()];
                header.extend(m.band_names.iter().cloned());
                let rows = m
                    .rows
                    .iter()
                    .map(|r| {
                        let mut row = vec![r.sample_id.clone(), r.resolved_date.to_string(), r.source.to_string()];
                        row.extend(r.values.iter().map(|v| v.map_or("-".into(), num)));
                        row
                    })
                    .collect();
                table(header, rows);
                for w in &m.warnings {
                    println!("warning: {}: {}", w.sample_id, w.message);
                }
            }
        }
        Command::Gapfill { series, target_date, method, grid } => gapfill(&cli, series, *target_date, *method, *grid)?,
        Command::Train(a) => {
            let req = TrainRequest {
                dataset_id: a.dataset_id.clone(),
                hyperparams: a.hyperparams.iter().cloned().collect::<BTreeMap<_, _>>(),
                test_fraction: a.test_fraction,
                seed: a.seed,
                ..TrainRequest::new(&a.matrix_id, &a.algorithm)
            };
            let model = open(&cli)?.train(&req, &cli.user)?;
            if cli.json {
                emit(json!({
                    "model_id": model.model_id,
                    "metrics": model.metrics,
                    "algorithm": model.algorithm,
                    "hyperparams": model.hyperparams,
                    "band_names": model.band_names,
                    "n_train": model.n_train,
                    "n_dropped": model.n_dropped,
                    "warnings": model.warnings,
                }));
            } else {
                let m = &model.metrics;
                println!("model {} ({}, trained on {} rows)", model.model_id, model.algorithm.as_str(), model.n_train);
                table(
                    ["rmse", "mae", "r2", "pearson", "n_test"].map(String::from).to_vec(),
                    vec![vec![num(m.rmse), num(m.mae), num(m.r2), num(m.pearson), m.n_test.to_string()]],
                );
                for w in &model.warnings {
                    println!("warning: {w}");
                }
            }
        }
        Command::Predict(a) => {
            let p = open(&cli)?;
            if let Some(v) = &a.vector {
                let soc = p.predict_vector(&a.model_id, v)?;
                if cli.json {
                    emit(json!({"model_id": a.model_id, "soc": soc}));
                } else {
                    println!("{}", num(soc));
                }
            } else {
                let (Some(longitude), Some(latitude), Some(date)) = (a.lon, a.lat, a.date) else {
                    return Err(Failure::User("--lon, --lat and --date go together".into()));
                };
                let req = PointPredictRequest { longitude, latitude, date, provider: a.provider.clone(), acquisition_mode: a.mode };
                let out = p.predict_at(&a.model_id, &req)?;
                if cli.json {
                    let mut v = json!(out);
                    v["model_id"] = json!(a.model_id);
                    emit(v);
                } else {
                    println!("soc {} ({} on {})", num(out.soc), out.source, out.resolved_date);
                    let values = out.vector.iter().map(|&x| num(x)).collect();
                    table(out.band_names.clone(), vec![values]);
                    for w in &out.warnings {
                        println!("warning: {w}");
                    }
                }
            }
        }
        Command::Serve { port, host } => {
            let platform = open(&cli)?;
            let addr = SocketAddr::new(*host, *port);
            let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::Internal(e.to_string()))?;
            eprintln!("listening on http://{addr} (map at /ui)");
            rt.block_on(soc_service::serve(platform, addr))
                .map_err(|e| Failure::Internal(format!("server on {addr}: {e}")))?;
        }
    }
    Ok(())
}

fn gapfill(cli: &Cli, path: &PathBuf, target: NaiveDate, method: GapfillMethod, grid: bool) -> Outcome {
    let text = read(path)?;
    let mut rd = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut obs = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let line = i + 1;
        let rec = rec.map_err(|e| Failure::User(format!("line {line}: {e}")))?;
        let (Some(d), Some(v)) = (rec.get(0), rec.get(1)) else {
            return Err(Failure::User(format!("line {line}: expected date,value")));
        };
        match (d.parse::<NaiveDate>(), v.parse::<f64>()) {
            (Ok(d), Ok(v)) => obs.push((d, v)),
            _ if line == 1 => continue, // header
            _ => return Err(Failure::User(format!("line {line}: cannot parse '{d},{v}' as date,value"))),
        }
    }
    let series = BandSeries::new("series", obs).map_err(|e| Failure::User(e.to_string()))?;
    let est = estimate_at(&series, target, method).map_err(|e| Failure::User(e.to_string()))?;
    let points = if grid {
        Some(fill_grid(&series, target, target, method).map_err(|e| Failure::User(e.to_string()))?)
    } else {
        None
    };
    if cli.json {
        let mut v = json!({"target_date": target, "value": est.value, "source": est.source, "variance": est.variance});
        if let Some(g) = &points {
            v["grid"] = json!(g);
        }
        emit(v);
    } else if let Some(g) = points {
        println!("date,mean,variance");
        for p in g {
            println!("{},{},{}", p.date, p.mean, p.variance.map_or(String::new(), |v| v.to_string()));
        }
    } else {
        println!("{}", num(est.value));
    }
    Ok(())
}

fn emit(v: Value) {
    println!("{}", serde_json::to_string_pretty(&v).expect("JSON values serialize"));
}

/// Six decimals with trailing zeros dropped.
fn num(v: f64) -> String {
    let s = format!("{v:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

fn table(header: Vec<String>, rows: Vec<Vec<String>>) {
    let mut widths: Vec<usize> = header.iter().map(String::len).collect();
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: &[String]| {
        let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        println!("{}", parts.join("  ").trim_end());
    };
    line(&header);
    for row in &rows {
        line(row);
    }
}
