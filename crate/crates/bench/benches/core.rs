use chrono::{Days, NaiveDate};
use criterion::{criterion_group, criterion_main, Criterion};
use soc_core::gapfill::{em_fit, kalman_smooth, BandSeries};
use soc_core::predict::{ForestModel, ForestParams, KnnModel};
use soc_core::raster::{decode_geotiff, encode_geotiff, BandPlane, GeoTransform};
use soc_core::{RasterGrid, SampleType, StateSpaceParams};
use std::hint::black_box;

// cheap deterministic noise so the benches need no RNG crate
fn wave(i: usize) -> f64 {
    ((i as f64 * 12.9898).sin() * 43758.5453).fract().abs()
}

fn grid(side: u32) -> RasterGrid {
    let values = (0..(side * side) as usize).map(|i| wave(i) as f32 as f64).collect();
    let geo = GeoTransform { origin_lon: 10.0, origin_lat: 46.0, pixel_scale_x: 1e-4, pixel_scale_y: 1e-4 };
    RasterGrid::new(side, side, vec![BandPlane { values }], SampleType::Float32, geo, None).unwrap()
}

fn tiff(c: &mut Criterion) {
    let g = grid(256);
    let bytes = encode_geotiff(&g, SampleType::Float32).unwrap();
    c.bench_function("geotiff_encode_256", |b| b.iter(|| encode_geotiff(black_box(&g), SampleType::Float32).unwrap()));
    c.bench_function("geotiff_decode_256", |b| b.iter(|| decode_geotiff(black_box(&bytes)).unwrap()));
}

fn series(n: usize, step: u64) -> BandSeries {
    let base = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
    let obs = (0..n).map(|i| (base + Days::new(i as u64 * step), 0.3 + 0.1 * wave(i))).collect();
    BandSeries::new("B08", obs).unwrap()
}

fn kalman(c: &mut Criterion) {
    let s = series(73, 5);
    let p = StateSpaceParams { q: 1e-4, r: 1e-3, ..StateSpaceParams::initial_for(&s) };
    c.bench_function("kalman_smooth_year", |b| b.iter(|| kalman_smooth(black_box(&s), &p).unwrap()));
    c.bench_function("em_fit_year", |b| b.iter(|| em_fit(black_box(&s), StateSpaceParams::initial_for(&s), 50, 1e-6).unwrap()));
}

fn table(n: usize, d: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let x: Vec<Vec<f64>> = (0..n).map(|i| (0..d).map(|j| wave(i * d + j)).collect()).collect();
    let y = x.iter().map(|r| 2.0 * r[0] + r[1] + 0.5).collect();
    (x, y)
}

fn predictors(c: &mut Criterion) {
    let (x, y) = table(2000, 13);
    let knn = KnnModel::fit(5, x.clone(), y.clone());
    let q = vec![0.5; 13];
    c.bench_function("knn_predict_2000x13", |b| b.iter(|| knn.predict(black_box(&q))));
    let (x, y) = table(500, 13);
    let params = ForestParams { n_trees: 20, max_features: 4, min_samples_leaf: 2, seed: 1 };
    c.bench_function("forest_fit_500x13_20_trees", |b| b.iter(|| ForestModel::fit(&params, black_box(&x), &y)));
}

criterion_group!(benches, tiff, kalman, predictors);
criterion_main!(benches);
