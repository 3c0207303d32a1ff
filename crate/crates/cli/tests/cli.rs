use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};

fn soc(data_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_soc"))
        .args(args)
        .env("SOC_DATA_DIR", data_dir)
        .env_remove("SOC_USER")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json_of(o: &Output) -> Value {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", stdout(o)))
}

#[test]
fn gapfill_midpoint_prints_value() {
    let dir = tempfile::tempdir().unwrap();
    let series = dir.path().join("series.csv");
    std::fs::write(&series, "date,value\n2020-06-10,0.2\n2020-06-20,0.4\n").unwrap();
    let s = series.to_str().unwrap();
    let o = soc(dir.path(), &["gapfill", s, "--target-date", "2020-06-15", "--method", "linear"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "0.3");

    let o = soc(dir.path(), &["gapfill", s, "--target-date", "2020-06-22", "--grid"]);
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "date,mean,variance");
    assert_eq!(lines.len(), 1 + 13);
    assert_eq!(lines[13], "2020-06-22,0.4,");

    let o = soc(dir.path(), &["gapfill", s, "--target-date", "2020-06-15", "--method", "kalman_em"]);
    assert_eq!(o.status.code(), Some(1), "EM needs three observations");
}

#[test]
fn gapfill_bad_input_is_a_user_error() {
    let dir = tempfile::tempdir().unwrap();
    let series = dir.path().join("series.csv");
    std::fs::write(&series, "2020-06-10,0.2\n2020-06-11,abc\n").unwrap();
    let o = soc(dir.path(), &["gapfill", series.to_str().unwrap(), "--target-date", "2020-06-15"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
}

#[test]
fn unknown_subcommand_exits_one_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    let o = soc(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("frobnicate") && err.contains("Usage"), "{err}");

    let o = soc(dir.path(), &["train", "mat_x", "--test-fraction"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--test-fraction"));
}

#[test]
fn ingest_reflectance_train_predict() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let csv = dir.path().join("samples.csv");
    let mut text = String::from("id,longitude,latitude,date,soc\n");
    for i in 0..20 {
        text += &format!("s{i},{:.3},{:.3},2020-06-{:02},{:.2}\n", 10.1 + 0.03 * i as f64, 45.2 + 0.02 * i as f64, 1 + i, 1.0 + 0.1 * i as f64);
    }
    std::fs::write(&csv, text).unwrap();

    let v = json_of(&soc(&data, &["--json", "ingest", csv.to_str().unwrap()]));
    assert_eq!(v["n_samples"], 20);
    let ds = v["dataset_id"].as_str().unwrap().to_string();

    let m = json_of(&soc(&data, &["--json", "reflectance", &ds, "--bands", "B04,B08", "--mode", "server_side"]));
    let uncached = json_of(&soc(&data, &["--json", "--no-cache", "reflectance", &ds, "--bands", "B04,B08"]));
    assert!(!data.join("tiff_cache").exists() || std::fs::read_dir(data.join("tiff_cache")).unwrap().next().is_none());
    assert_eq!(uncached["rows"].as_array().unwrap().len(), 20);
    assert_eq!(m["rows"].as_array().unwrap().len(), 20);
    let matrix = m["matrix_id"].as_str().unwrap().to_string();

    let train = ["train", &matrix, "--algorithm", "knn", "--seed", "4", "--hyperparam", "k=3"];
    let first = soc(&data, &train);
    let second = soc(&data, &train);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    // the first line names the new model; the metrics table follows
    let table = |o: &Output| stdout(o).lines().skip(1).collect::<Vec<_>>().join("\n");
    assert_eq!(table(&first), table(&second));
    assert!(table(&first).starts_with("rmse"));

    let v = json_of(&soc(&data, &["--json", "train", &matrix, "--seed", "4"]));
    let model = v["model_id"].as_str().unwrap().to_string();
    for k in ["rmse", "mae", "r2", "pearson", "n_test"] {
        assert!(v["metrics"][k].is_number());
    }
    let v = json_of(&soc(&data, &["--json", "predict", &model, "--vector", "0.3,0.5"]));
    assert!(v["soc"].is_number());
    let v = json_of(&soc(&data, &["--json", "predict", &model, "--lon", "10.2", "--lat", "45.3", "--date", "2020-06-09"]));
    assert_eq!(v["band_names"].as_array().unwrap().len(), 2);

    let o = soc(&data, &["predict", &model, "--vector", "0.3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("dimension_mismatch"));
    let o = soc(&data, &["predict", "mdl_missing", "--vector", "0.3,0.5"]);
    assert_eq!(o.status.code(), Some(1));
}
