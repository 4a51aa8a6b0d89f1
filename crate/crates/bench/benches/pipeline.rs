use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion, Throughput};
use mobexp_bench::*;

fn geo(c: &mut Criterion) {
    let pts: Vec<GeoPoint> = (0..10_000)
        .map(|i| {
            let f = i as f64;
            GeoPoint { lat: 41.0 + (f * 0.618).fract(), lon: -73.7 + 1.9 * (f * 0.414).fract() }
        })
        .collect();
    let q = GeoPoint { lat: 41.5, lon: -72.7 };
    let mut g = c.benchmark_group("geo");
    g.throughput(Throughput::Elements(pts.len() as u64));
    g.bench_function("haversine_10k", |b| b.iter(|| pts.iter().map(|&p| haversine_m(black_box(q), p)).sum::<f64>()));
    let grid = SpatialGrid::new(pts.clone(), 0.02).unwrap();
    g.bench_function("nearest_other_10k", |b| {
        b.iter(|| (0..pts.len()).filter_map(|i| grid.nearest(pts[i], Some(i))).count())
    });
    g.finish();
}

fn gibbs(c: &mut Criterion) {
    let (mut spec, z, x) = toy_problem(10, 744, 15.0).unwrap();
    spec.mcmc = McmcSettings { burn_in: 1, keep: 10, latent_thin: 10, seed: 1 };
    let mut g = c.benchmark_group("gibbs");
    g.sample_size(10);
    g.throughput(Throughput::Elements(11));
    g.bench_function("10_sites_744_hours_11_iterations", |b| b.iter(|| gibbs_fit(&spec, &z, &x).unwrap()));
    g.finish();
}

fn mobility_exposure(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let fx = Fixture::generate(dir.path(), 400, 5_000).unwrap();
    let clock = fx.clock;
    let mut g = c.benchmark_group("mobility");
    g.sample_size(10);
    g.throughput(Throughput::Elements(fx.handoffs.len() as u64));
    g.bench_function("trajectories", |b| b.iter(|| build_trajectories(&fx.handoffs, clock.window, None).unwrap()));
    let set = build_trajectories(&fx.handoffs, clock.window, None).unwrap();
    g.bench_function("night_profiles", |b| b.iter(|| night_profiles(&set, clock.night, clock.utc_offset, &fx.towers)));
    let night: Vec<Option<u32>> =
        night_profiles(&set, clock.night, clock.utc_offset, &fx.towers).iter().map(|p| p.night_tower).collect();
    let index = FieldIndex::new(&fx.field, &fx.towers, &clock).unwrap();
    let opts = ExposureOptions { write_hourly: false, ..ExposureOptions::default() };
    let outs = ExposureOutputs { hourly: None, daily: None, bias: None };
    g.throughput(Throughput::Elements(set.len() as u64));
    g.bench_function("exposure", |b| b.iter(|| assess(&set, &night, &index, &fx.towers, &clock, &opts, &outs).unwrap()));
    g.finish();
}

criterion_group!(benches, geo, gibbs, mobility_exposure);
criterion_main!(benches);
