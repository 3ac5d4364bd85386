use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use spatial_synth::baselines::{run_gmerror, run_ols, run_s2sls, run_spatialplus};
use spatial_synth::gmrf::{sample_residual_field, GmrfSampler};
use spatial_synth::graph::{morans_i, Connectivity, SpatialGraph};
use spatial_synth::rng;
use spatial_synth::split::{spatial_split, SplitParams};
use spatial_synth_bench::{lattice_dataset, rough_field};

fn gmrf(c: &mut Criterion) {
    let mut group = c.benchmark_group("gmrf");
    group.sample_size(10);
    for g in [100usize, 300] {
        let graph = SpatialGraph::grid(g, g, Connectivity::Rook);
        group.bench_with_input(BenchmarkId::new("factor", g * g), &graph, |b, graph| {
            b.iter(|| GmrfSampler::new(graph, 0.9).unwrap())
        });
        let sampler = GmrfSampler::new(&graph, 0.9).unwrap();
        let mut r = rng::stream(0, "bench");
        group.bench_with_input(BenchmarkId::new("draw", g * g), &sampler, |b, s| {
            b.iter(|| s.draw_unscaled(&mut r))
        });
        let target = rough_field(g * g, g);
        group.bench_with_input(BenchmarkId::new("residual_field", g * g), &graph, |b, graph| {
            b.iter(|| sample_residual_field(graph, 0.9, &target, 1).unwrap())
        });
    }
    group.finish();
}

fn graph_kernels(c: &mut Criterion) {
    let g = 300;
    let graph = SpatialGraph::grid(g, g, Connectivity::Queen);
    let field = rough_field(g * g, g);
    c.bench_function("morans_i/90000", |b| b.iter(|| morans_i(&graph, &field).unwrap()));
    c.bench_function("spatial_split/90000", |b| {
        b.iter(|| spatial_split(&graph, &SplitParams::with_seed(3)).unwrap())
    });
}

fn baselines(c: &mut Criterion) {
    let ds = lattice_dataset(40);
    let mut group = c.benchmark_group("baselines_1600");
    group.sample_size(10);
    group.bench_function("ols", |b| b.iter(|| run_ols(&ds).unwrap()));
    group.bench_function("s2sls", |b| b.iter(|| run_s2sls(&ds).unwrap()));
    group.bench_function("gmerror", |b| b.iter(|| run_gmerror(&ds).unwrap()));
    group.bench_function("spatialplus", |b| b.iter(|| run_spatialplus(&ds, 0.01, 0.01, 0).unwrap()));
    group.finish();
}

criterion_group!(benches, gmrf, graph_kernels, baselines);
criterion_main!(benches);
