use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use soc_core::{Platform, PlatformOptions, ProviderConfig};
use soc_service::router;
use std::sync::Arc;
use std::time::Duration;
use tempfile::TempDir;
use tower::ServiceExt;

struct Api {
    app: Router,
    _dir: TempDir,
}

struct Reply {
    status: StatusCode,
    content_type: String,
    text: String,
}

impl Reply {
    fn json(&self) -> Value {
        serde_json::from_str(&self.text).unwrap_or_else(|e| panic!("not JSON ({e}): {}", self.text))
    }
}

impl Api {
    fn with(providers: ProviderConfig) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut opts = PlatformOptions::new(dir.path());
        opts.providers = providers;
        let platform: Arc<Platform> = Platform::open(opts).unwrap();
        Api { app: router(platform), _dir: dir }
    }

    fn new() -> Self {
        Api::with(ProviderConfig::default())
    }

    async fn send(&self, method: &str, path: &str, user: &str, content_type: Option<&str>, body: String) -> Reply {
        let mut req = Request::builder().method(method).uri(path).header("x-user-id", user);
        if let Some(ct) = content_type {
            req = req.header("content-type", ct);
        }
        let res = self.app.clone().oneshot(req.body(Body::from(body)).unwrap()).await.unwrap();
        let status = res.status();
        let content_type =
            res.headers().get("content-type").map(|v| v.to_str().unwrap().to_string()).unwrap_or_default();
        let bytes = res.into_body().collect().await.unwrap().to_bytes();
        let reply = Reply { status, content_type, text: String::from_utf8(bytes.to_vec()).unwrap() };
        if !status.is_success() {
            assert_api_error(&reply);
        }
        reply
    }

    async fn get(&self, path: &str, user: &str) -> Reply {
        self.send("GET", path, user, None, String::new()).await
    }

    async fn post(&self, path: &str, user: &str, body: Value) -> Reply {
        self.send("POST", path, user, Some("application/json"), body.to_string()).await
    }

    async fn upload(&self, csv: &str, user: &str, query: &str) -> Reply {
        self.send("POST", &format!("/datasets{query}"), user, Some("text/csv"), csv.to_string()).await
    }

    async fn wait_done(&self, job_id: &str, user: &str) -> Value {
        for _ in 0..3000 {
            let job = self.get(&format!("/jobs/{job_id}"), user).await.json();
            if job["state"] == "done" || job["state"] == "failed" {
                return job;
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
        panic!("job {job_id} did not finish");
    }
}

/// Error bodies carry exactly status, code, message and an optional detail
/// object, with status equal to the HTTP status.
fn assert_api_error(r: &Reply) {
    assert!(r.content_type.starts_with("application/json"), "{}", r.content_type);
    let v = r.json();
    let obj = v.as_object().expect("error body is an object");
    assert_eq!(obj["status"].as_u64(), Some(r.status.as_u16() as u64), "{v}");
    assert!(obj["code"].as_str().is_some_and(|c| !c.is_empty()), "{v}");
    assert!(obj["message"].is_string(), "{v}");
    for k in obj.keys() {
        assert!(["status", "code", "message", "detail"].contains(&k.as_str()), "unexpected key {k}");
    }
    if let Some(d) = obj.get("detail") {
        assert!(d.is_object());
    }
}

fn assert_error(r: &Reply, status: u16, code: &str) {
    assert_eq!(r.status.as_u16(), status, "{}", r.text);
    assert_eq!(r.json()["code"], code, "{}", r.text);
}

fn csv(n: usize) -> String {
    let mut s = String::from("id,longitude,latitude,date,soc\n");
    for i in 0..n {
        s += &format!("p{i},{:.4},{:.4},2020-0{}-{:02},{:.3}\n", 10.05 + 0.031 * i as f64, 45.1 + 0.017 * i as f64, 5 + i % 3, 3 + 2 * i % 25, 1.0 + 0.1 * i as f64);
    }
    s
}

#[tokio::test]
async fn dataset_upload_and_reads() {
    let api = Api::new();
    let r = api.upload(&csv(3), "alice", "?name=three").await;
    assert_eq!(r.status, StatusCode::CREATED);
    let v = r.json();
    assert_eq!(v["n_samples"], 3);
    assert_eq!(v["row_errors"], json!([]));
    let id = v["dataset_id"].as_str().unwrap().to_string();

    let bad = "id,longitude,latitude,date,soc\na,10,45,2020-01-01,1\nb,200,45,2020-01-01,1\nc,10,45,2020-01-02,0.5\n";
    let v = api.upload(bad, "alice", "").await.json();
    assert_eq!((v["n_samples"].as_u64(), v["row_errors"].as_array().unwrap().len()), (Some(2), 1));
    assert!(v["row_errors"][0]["line"].is_number() && v["row_errors"][0]["reason"].is_string());

    assert_error(&api.upload("", "alice", "").await, 400, "empty_file");
    assert_error(&api.upload("id,longitude,date,soc\na,1,2020-01-01,1\n", "alice", "").await, 400, "missing_header");
    assert_error(&api.upload("id,longitude,latitude,date,soc\na,1,95,2020-01-01,1\n", "alice", "").await, 400, "no_valid_rows");
    assert_error(&api.upload(&csv(2), "alice", "?visibility=secret").await, 400, "validation_error");

    let list = api.get("/datasets", "alice").await.json();
    assert_eq!(list.as_array().unwrap().len(), 2);
    assert!(list[0]["n_samples"].is_number());
    assert_eq!(api.get("/datasets", "bob").await.json(), json!([]));

    let d = api.get(&format!("/datasets/{id}"), "alice").await.json();
    assert_eq!(d["samples"].as_array().unwrap().len(), 3);
    assert_error(&api.get(&format!("/datasets/{id}"), "bob").await, 403, "forbidden");
    assert_error(&api.get("/datasets/ds_nope", "alice").await, 404, "not_found");
    assert_error(&api.get("/datasets/ds_nope/geojson", "alice").await, 404, "not_found");
}

#[tokio::test]
async fn multipart_upload() {
    let api = Api::new();
    let boundary = "XyZ";
    let body = format!(
        "--{boundary}\r\nContent-Disposition: form-data; name=\"file\"; filename=\"pts.csv\"\r\nContent-Type: text/csv\r\n\r\n{}\r\n--{boundary}--\r\n",
        csv(4)
    );
    let r = api.send("POST", "/datasets", "alice", Some(&format!("multipart/form-data; boundary={boundary}")), body).await;
    assert_eq!(r.status, StatusCode::CREATED, "{}", r.text);
    assert_eq!(r.json()["n_samples"], 4);
    assert_eq!(api.get("/datasets", "alice").await.json()[0]["name"], "pts.csv");
}

#[tokio::test]
async fn geojson_feature_collection() {
    let api = Api::new();
    let id = api.upload(include_str!("../../../fixtures/ten_points.csv"), "alice", "?visibility=public").await.json()["dataset_id"].as_str().unwrap().to_string();
    let r = api.get(&format!("/datasets/{id}/geojson"), "bob").await;
    assert_eq!(r.status, StatusCode::OK);
    assert!(r.content_type.starts_with("application/geo+json"));
    let fc = r.json();
    assert_eq!(fc["type"], "FeatureCollection");
    let features = fc["features"].as_array().unwrap();
    assert_eq!(features.len(), 10);
    for f in features {
        assert_eq!(f["geometry"]["type"], "Point");
        assert_eq!(f["geometry"]["coordinates"].as_array().unwrap().len(), 2);
        assert!(f["properties"]["soc"].is_number());
        assert!(f["properties"]["sample_id"].is_string() && f["properties"]["date"].is_string());
    }
}

#[tokio::test]
async fn reflectance_job_and_matrix() {
    let api = Api::new();
    let id = api.upload(&csv(10), "alice", "").await.json()["dataset_id"].as_str().unwrap().to_string();
    let r = api.post(&format!("/datasets/{id}/reflectance"), "alice", json!({"provider": "synthetic", "bands": ["B04", "B08"], "window_days": 30, "acquisition_mode": "per_band_tiff", "gapfill_method": "linear"})).await;
    assert_eq!(r.status, StatusCode::ACCEPTED, "{}", r.text);
    let v = r.json();
    let job_id = v["job_id"].as_str().unwrap().to_string();
    let matrix_id = v["matrix_id"].as_str().unwrap().to_string();

    let job = api.wait_done(&job_id, "alice").await;
    assert_eq!(job["state"], "done", "{job}");
    assert_eq!(job["progress"], json!({"done_items": 10, "total_items": 10}));
    assert_eq!(job["result_ref"], matrix_id);
    assert_eq!(job["kind"], "reflectance");

    let m = api.get(&format!("/matrices/{matrix_id}"), "alice").await.json();
    assert_eq!(m["rows"].as_array().unwrap().len(), 10);
    assert_eq!(m["band_names"], json!(["B04", "B08"]));
    let r = api.get(&format!("/matrices/{matrix_id}.csv"), "alice").await;
    assert!(r.content_type.starts_with("text/csv"));
    assert_eq!(r.text.lines().next().unwrap(), "id,longitude,latitude,date,soc,B04,B08,source");
    assert_eq!(r.text.lines().count(), 11);

    assert_error(&api.get(&format!("/jobs/{job_id}"), "bob").await, 403, "forbidden");
    assert_error(&api.get("/jobs/job_nope", "alice").await, 404, "not_found");
    assert_error(&api.get("/matrices/mat_nope", "alice").await, 404, "not_found");
    assert_eq!(api.get("/jobs", "alice").await.json().as_array().unwrap().len(), 1);

    let url = format!("/datasets/{id}/reflectance");
    assert_error(&api.post(&url, "alice", json!({"bands": ["B99"]})).await, 400, "unknown_band");
    assert_error(&api.post(&url, "alice", json!({"bands": []})).await, 400, "invalid_config");
    assert_error(&api.post(&url, "alice", json!({"bands": ["B04"], "window_days": 0})).await, 400, "invalid_config");
    assert_error(&api.post(&url, "alice", json!({"bands": ["B04"], "provider": "nasa"})).await, 400, "invalid_config");
    assert_error(&api.post(&url, "alice", json!({"bands": "B04"})).await, 400, "validation_error");
    assert_error(&api.post("/datasets/ds_nope/reflectance", "alice", json!({"bands": ["B04"]})).await, 404, "not_found");
}

#[tokio::test]
async fn in_flight_duplicate_not_ready_and_cancel() {
    // one request a minute keeps the first job waiting on the limiter
    let api = Api::with(ProviderConfig { synthetic_rate_limit: Some(1), ..ProviderConfig::default() });
    let id = api.upload(&csv(3), "alice", "").await.json()["dataset_id"].as_str().unwrap().to_string();
    let url = format!("/datasets/{id}/reflectance");
    let cfg = json!({"bands": ["B04"]});
    let v = api.post(&url, "alice", cfg.clone()).await.json();
    let (job_id, matrix_id) = (v["job_id"].as_str().unwrap().to_string(), v["matrix_id"].as_str().unwrap().to_string());

    assert_error(&api.post(&url, "alice", cfg.clone()).await, 409, "conflict");
    assert_error(&api.get(&format!("/matrices/{matrix_id}"), "alice").await, 404, "not_ready");

    let r = api.post(&format!("/jobs/{job_id}/cancel"), "alice", json!({})).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!((r.json()["state"].as_str(), r.json()["error"].as_str()), (Some("failed"), Some("cancelled")));
    let job = api.wait_done(&job_id, "alice").await;
    assert_eq!(job["error"], "cancelled");
    assert_error(&api.get(&format!("/matrices/{matrix_id}"), "alice").await, 404, "not_found");
}

/// Dataset whose labels are an exact affine function of the resolved B04 and
/// B08 values. Returns (matrix_id, labelled dataset_id).
async fn planted_matrix(api: &Api, n: usize) -> (String, String) {
    let id = api.upload(&csv(n), "alice", "").await.json()["dataset_id"].as_str().unwrap().to_string();
    let v = api.post(&format!("/datasets/{id}/reflectance"), "alice", json!({"bands": ["B04", "B08"]})).await.json();
    let job = api.wait_done(v["job_id"].as_str().unwrap(), "alice").await;
    assert_eq!(job["state"], "done", "{job}");
    let matrix_id = v["matrix_id"].as_str().unwrap().to_string();
    let m = api.get(&format!("/matrices/{matrix_id}"), "alice").await.json();
    let mut labelled = String::from("id,longitude,latitude,date,soc\n");
    for r in m["rows"].as_array().unwrap() {
        let (b4, b8) = (r["values"][0].as_f64().unwrap(), r["values"][1].as_f64().unwrap());
        labelled += &format!(
            "{},{},{},{},{}\n",
            r["sample_id"].as_str().unwrap(),
            r["longitude"],
            r["latitude"],
            r["resolved_date"].as_str().unwrap(),
            2.0 * b4 + b8 + 0.5
        );
    }
    let ds = api.upload(&labelled, "alice", "").await.json()["dataset_id"].as_str().unwrap().to_string();
    (matrix_id, ds)
}

#[tokio::test]
async fn models_train_list_predict() {
    let api = Api::new();
    let (matrix_id, ds) = planted_matrix(&api, 40).await;

    let r = api.post("/models", "alice", json!({"matrix_id": matrix_id, "dataset_id": ds, "algorithm": "linear", "hyperparams": {}, "test_fraction": 0.25, "seed": 3})).await;
    assert_eq!(r.status, StatusCode::CREATED, "{}", r.text);
    let v = r.json();
    assert!(v["metrics"]["r2"].as_f64().unwrap() > 0.99, "{v}");
    for k in ["rmse", "mae", "r2", "pearson", "n_test"] {
        assert!(v["metrics"][k].is_number(), "{k}");
    }
    let linear = v["model_id"].as_str().unwrap().to_string();

    let r = api.post("/models", "alice", json!({"matrix_id": matrix_id, "dataset_id": ds, "algorithm": "knn", "hyperparams": {"k": 3}})).await;
    assert_eq!(r.status, StatusCode::CREATED);
    let knn = r.json()["model_id"].as_str().unwrap().to_string();

    let list = api.get("/models", "bob").await.json();
    let list = list.as_array().unwrap();
    assert_eq!(list.len(), 2);
    assert_eq!(list[0]["model_id"], knn);
    for m in list {
        for k in ["rmse", "mae", "r2", "pearson"] {
            assert!(m["metrics"][k].is_number());
        }
    }
    let m = api.get(&format!("/models/{linear}"), "alice").await.json();
    assert_eq!(m["algorithm"], "linear");
    assert_eq!(m["hyperparams"]["lambda"], 1e-3);
    assert_error(&api.get("/models/mdl_nope", "alice").await, 404, "not_found");

    let r = api.post(&format!("/models/{linear}/predict"), "alice", json!({"vector": [0.1, 0.3]})).await;
    assert_eq!(r.status, StatusCode::OK);
    assert!((r.json()["soc"].as_f64().unwrap() - 1.0).abs() < 1e-3);
    let r = api.post(&format!("/models/{linear}/predict"), "alice", json!({"vector": [0.1, 0.3, 0.2]})).await;
    assert_error(&r, 400, "dimension_mismatch");
    assert_eq!(r.json()["detail"], json!({"expected": 2, "got": 3}));
    assert_error(&api.post("/models/mdl_nope/predict", "alice", json!({"vector": [0.1, 0.3]})).await, 404, "not_found");
    assert_error(&api.post(&format!("/models/{linear}/predict"), "alice", json!({"foo": 1})).await, 400, "validation_error");

    let r = api.post(&format!("/models/{linear}/predict"), "alice", json!({"longitude": 10.2, "latitude": 45.3, "date": "2020-06-11", "provider": "synthetic"})).await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.text);
    let v = r.json();
    let vec: Vec<f64> = v["vector"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert!((v["soc"].as_f64().unwrap() - (2.0 * vec[0] + vec[1] + 0.5)).abs() < 1e-3);
    assert_eq!(v["band_names"], json!(["B04", "B08"]));

    let r = api.post(&format!("/models/{knn}/predict_batch"), "alice", json!({"matrix_id": matrix_id})).await;
    assert_eq!(r.status, StatusCode::ACCEPTED, "{}", r.text);
    let v = r.json();
    let job = api.wait_done(v["job_id"].as_str().unwrap(), "alice").await;
    assert_eq!(job["state"], "done", "{job}");
    let p = api.get(&format!("/predictions/{}", v["prediction_id"].as_str().unwrap()), "alice").await.json();
    assert_eq!(p["predictions"].as_array().unwrap().len(), 40);
    assert_eq!(p["skipped"], json!([]));

    let r = api.post(&format!("/models/{linear}/predict_batch"), "alice", json!({"dataset_id": ds})).await;
    let job = api.wait_done(r.json()["job_id"].as_str().unwrap(), "alice").await;
    assert_eq!(job["state"], "done", "{job}");
    assert_error(&api.get("/predictions/prd_nope", "alice").await, 404, "not_found");
    assert_error(&api.post(&format!("/models/{knn}/predict_batch"), "alice", json!({"dataset_id": "ds_nope"})).await, 404, "not_found");
}

#[tokio::test]
async fn training_errors_and_async_training() {
    let api = Api::new();
    let (matrix_id, ds) = planted_matrix(&api, 4).await;
    let r = api.post("/models", "alice", json!({"matrix_id": matrix_id, "dataset_id": ds, "algorithm": "linear"})).await;
    assert_error(&r, 422, "too_few_rows");
    assert_eq!(r.json()["detail"]["required"], 5);
    let r = api.post("/models", "alice", json!({"matrix_id": matrix_id, "algorithm": "svr"})).await;
    assert_error(&r, 400, "unknown_algorithm");
    assert_error(&api.post("/models", "alice", json!({"matrix_id": "mat_nope", "algorithm": "knn"})).await, 404, "not_found");
    assert_error(&api.post("/models", "alice", json!({"algorithm": "knn"})).await, 400, "validation_error");

    let (matrix_id, ds) = planted_matrix(&api, 12).await;
    let r = api.post("/models", "alice", json!({"matrix_id": matrix_id, "dataset_id": ds, "algorithm": "forest", "hyperparams": {"n_trees": 10}, "async": true})).await;
    assert_eq!(r.status, StatusCode::ACCEPTED, "{}", r.text);
    let v = r.json();
    let job = api.wait_done(v["job_id"].as_str().unwrap(), "alice").await;
    assert_eq!(job["state"], "done", "{job}");
    assert_eq!(job["result_ref"], v["model_id"]);
    assert_eq!(api.get(&format!("/models/{}", v["model_id"].as_str().unwrap()), "alice").await.status, StatusCode::OK);
}

#[tokio::test]
async fn gapfill_evalscript_and_misc_routes() {
    let api = Api::new();
    let obs = json!([{"date": "2020-06-10", "value": 0.2}, {"date": "2020-06-20", "value": 0.4}]);
    let v = api.post("/gapfill", "a", json!({"observations": obs, "target_date": "2020-06-15", "method": "linear"})).await.json();
    assert!((v["value"].as_f64().unwrap() - 0.3).abs() < 1e-15);
    assert_eq!(v["source"], "linear_interpolated");
    let v = api.post("/gapfill", "a", json!({"observations": obs, "target_date": "2020-06-20", "grid": true})).await.json();
    assert_eq!(v["source"], "observed");
    assert_eq!(v["grid"].as_array().unwrap().len(), 11);
    assert_error(&api.post("/gapfill", "a", json!({"observations": [], "target_date": "2020-06-15"})).await, 400, "validation_error");
    assert_error(&api.post("/gapfill", "a", json!({"observations": obs, "target_date": "2020-06-15", "method": "kalman_em"})).await, 400, "validation_error");

    let v = api.post("/evalscript", "a", json!({"bands": ["B04"], "sample_type": "FLOAT32"})).await.json();
    let script = v["evalscript"].as_str().unwrap();
    assert!(script.starts_with("//VERSION=3"));
    assert!(script.contains("sampleType: \"FLOAT32\""));
    assert_error(&api.post("/evalscript", "a", json!({"bands": ["B99"]})).await, 400, "unknown_band");

    let routes = api.get("/routes", "a").await.json();
    assert!(routes.as_array().unwrap().iter().any(|r| r["path"] == "/datasets/{id}/geojson"));
    let ui = api.get("/ui", "a").await;
    assert_eq!(ui.status, StatusCode::OK);
    assert!(ui.content_type.starts_with("text/html") && ui.text.contains("/geojson"));

    assert_error(&api.get("/nowhere", "a").await, 404, "not_found");
    assert_error(&api.send("DELETE", "/models", "a", None, String::new()).await, 405, "method_not_allowed");
    assert_error(&api.send("POST", "/models", "a", Some("application/json"), "{not json".into()).await, 400, "validation_error");
}
