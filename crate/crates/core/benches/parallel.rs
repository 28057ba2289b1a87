//! Sequential vs rayon execution of the hot paths. Build without the
//! `parallel` feature and `Exec::Parallel` falls back to the sequential path.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use sanet::data::{encode_regions, normalize_case, synth_phantom};
use sanet::inference::{plan_windows, sliding_window};
use sanet::metrics::hd95_with;
use sanet::network::{Model, NetworkConfig, SaNet};
use sanet::Exec;

const POLICIES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn config() -> NetworkConfig {
    NetworkConfig {
        base_width: 8,
        patch_size: 32,
        ..NetworkConfig::default()
    }
}

fn forward(c: &mut Criterion) {
    let model = Model::<SaNet, f32>::init(SaNet::new(config()).unwrap(), 0);
    let x = normalize_case(&synth_phantom(1, 32).unwrap()).image_tensor();
    let mut group = c.benchmark_group("forward_32");
    group.sample_size(10);
    for (name, exec) in POLICIES {
        let m = model.clone().with_exec(exec);
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| m.forward(&x).unwrap()));
    }
    group.finish();
}

fn windows(c: &mut Criterion) {
    let cfg = NetworkConfig {
        patch_size: 16,
        ..config()
    };
    let model = Model::<SaNet, f32>::init(SaNet::new(cfg).unwrap(), 0);
    let case = normalize_case(&synth_phantom(2, 48).unwrap());
    let image = case.image_tensor();
    let dims = case.dims();
    let plan = plan_windows([(0, dims[0]), (0, dims[1]), (0, dims[2])], dims, 16).unwrap();
    let mut group = c.benchmark_group("sliding_window_48");
    group.sample_size(10);
    for (name, exec) in POLICIES {
        let m = model.clone().with_exec(exec);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| sliding_window(exec, &m, &image, &plan).unwrap())
        });
    }
    group.finish();
}

fn surface_distance(c: &mut Criterion) {
    let a = encode_regions(synth_phantom(3, 96).unwrap().labels.as_ref().unwrap()).unwrap();
    let b = encode_regions(synth_phantom(4, 96).unwrap().labels.as_ref().unwrap()).unwrap();
    let mut group = c.benchmark_group("hd95_96");
    for (name, exec) in POLICIES {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| hd95_with(exec, a.wt(), b.wt(), [1.0; 3]).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, forward, windows, surface_distance);
criterion_main!(benches);
