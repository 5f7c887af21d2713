//! Criterion benchmarks for the estimation pipeline.
//!
//! `fit` runs at J = 30, 60 and 120 so the cost of doubling the panel
//! length can be read off directly.

use criterion::{BenchmarkId, Criterion, Throughput};
use smpca_core::filters::estimate_filter_bank;
use smpca_core::scores::{build_design, build_whittle_precision, map_scores};
use smpca_core::smoothing::{estimate_autocov_fields, estimate_means, SmoothingConfig};
use smpca_core::spectral::{bartlett_spectral, eigendecompose_per_frequency, marginal_spectral, select_h_max, FieldScope};
use smpca_core::tasks::{fit_vars, forecast, impute};
use smpca_core::{fit, gen_panel, FitConfig, FrequencyGrid, Method, NRange, ObservationSet, SimConfig, TimeGrid};
use std::hint::black_box;

pub fn panel(j: usize, nrange: NRange) -> ObservationSet {
    gen_panel(&SimConfig { j, nrange, seed: 7, ..SimConfig::default() }).expect("default generator settings are valid").observations
}

fn bench_fit(c: &mut Criterion) {
    let cfg = FitConfig::default();
    let mut g = c.benchmark_group("fit");
    g.sample_size(10);
    for j in [30, 60, 120] {
        let obs = panel(j, NRange::MEDIUM);
        g.throughput(Throughput::Elements(j as u64));
        for method in [Method::SpectralMpca, Method::IndividualSpectral] {
            g.bench_with_input(BenchmarkId::new(method.name(), j), &obs, |b, obs| {
                b.iter(|| fit(black_box(obs), &cfg, method).unwrap())
            });
        }
    }
    g.finish();
}

fn bench_stages(c: &mut Criterion) {
    let cfg = FitConfig::default();
    let obs = panel(60, NRange::MEDIUM);
    let sm = SmoothingConfig::default();
    let tgrid = TimeGrid::uniform(cfg.grid.m_t).unwrap();
    let fgrid = FrequencyGrid::with_whittle(cfg.grid.m_omega, obs.j()).unwrap();
    let h_max = select_h_max(obs.j(), obs.mean_count());
    let mut g = c.benchmark_group("stages");
    g.sample_size(10);

    g.bench_function("means", |b| b.iter(|| estimate_means(black_box(&obs), &tgrid, &sm).unwrap()));
    let means = estimate_means(&obs, &tgrid, &sm).unwrap();
    g.bench_function("autocov", |b| {
        b.iter(|| estimate_autocov_fields(black_box(&obs), &means, h_max - 1, &tgrid, &sm).unwrap())
    });
    let fields = estimate_autocov_fields(&obs, &means, h_max - 1, &tgrid, &sm).unwrap();
    let subjects: Vec<_> = fields
        .iter()
        .enumerate()
        .map(|(i, f)| bartlett_spectral(f, h_max, &tgrid, &fgrid, FieldScope::Subject(i)).unwrap())
        .collect();
    let marginal = marginal_spectral(&subjects).unwrap();
    g.bench_function("eigendecompose", |b| {
        b.iter(|| eigendecompose_per_frequency(black_box(&marginal), cfg.selection.k_max).unwrap())
    });
    let eig = eigendecompose_per_frequency(&marginal, cfg.selection.k_max).unwrap();
    g.bench_function("filters", |b| {
        b.iter(|| estimate_filter_bank(black_box(&eig), 1, cfg.selection.l_max, cfg.selection.epsilon).unwrap())
    });
    g.finish();
}

fn bench_tasks(c: &mut Criterion) {
    let cfg = FitConfig::default();
    let obs = panel(60, NRange::MEDIUM);
    let model = fit(&obs, &cfg, Method::SpectralMpca).unwrap();
    let (a, y, w) = build_design(&obs, &model.filters, &model.means, &model.noise.values).unwrap();
    let q = build_whittle_precision(&model.eta, obs.j(), model.filters.lags()).unwrap();
    let mut g = c.benchmark_group("tasks");
    g.bench_function("map_solve", |b| b.iter(|| map_scores(black_box(&a), &y, &w, &q).unwrap()));
    g.bench_function("impute", |b| b.iter(|| impute(black_box(&model))));
    let vars = fit_vars(&model, None).unwrap();
    g.bench_function("forecast_5", |b| b.iter(|| forecast(black_box(&model), &vars, 5).unwrap()));
    g.finish();
}

pub fn benchmarks(c: &mut Criterion) {
    bench_fit(c);
    bench_stages(c);
    bench_tasks(c);
}
