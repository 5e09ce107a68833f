use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgnet::experiment::{prepare, train_step, ExperimentConfig};
use sgnet::layers::{conv3d_backward, conv3d_forward};
use sgnet::metrics::asd;
use sgnet::network::{Network, NetworkConfig};
use sgnet::optim::Adam;
use sgnet::phantom::{generate_phantom, PhantomConfig};
use sgnet::sg::{sg_backward, sg_forward_traced, ChannelGateParams, FusionMode, SgModuleParams, SpatialGateParams};
use sgnet::volume::{FeatureVolume, Spacing};
use std::hint::black_box;

fn volume(rng: &mut ChaCha8Rng, shape: [usize; 5]) -> FeatureVolume<f32> {
    let n = shape.iter().product();
    FeatureVolume::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("conv3d");
    for (cin, cout) in [(1, 8), (8, 8), (16, 16)] {
        let x = volume(&mut rng, [1, cin, 32, 32, 16]);
        let w: Vec<f32> = (0..cout * cin * 27).map(|_| rng.random_range(-0.1..0.1)).collect();
        let b = vec![0.0f32; cout];
        let id = format!("{cin}->{cout}");
        group.bench_function(BenchmarkId::new("forward", &id), |bench| {
            bench.iter(|| conv3d_forward(black_box(&x), &w, Some(&b), cout, 3).unwrap())
        });
        let g = volume(&mut rng, [1, cout, 32, 32, 16]);
        group.bench_function(BenchmarkId::new("backward", &id), |bench| {
            bench.iter(|| conv3d_backward(black_box(&x), &w, cout, 3, &g, true).unwrap())
        });
    }
    group.finish();
}

fn sg_module(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let k = 8;
    let mut v = |n: usize| (0..n).map(|_| rng.random_range(-0.5f32..0.5)).collect::<Vec<_>>();
    let channel = ChannelGateParams::new(k, v(2 * k * k), v(k), v(k * k), v(k)).unwrap();
    let spatial = SpatialGateParams::new(v(2 * k), 0.0).unwrap();
    let params = SgModuleParams::new(channel, spatial, FusionMode::Concatenate).unwrap();
    let s = volume(&mut rng, [2, k, 32, 32, 16]);
    let d = volume(&mut rng, [2, k, 32, 32, 16]);
    c.bench_function("sg_forward", |b| b.iter(|| sg_forward_traced(black_box(&s), &d, &params).unwrap()));
    let (out, trace) = sg_forward_traced(&s, &d, &params).unwrap();
    let g = out.map(|x| x * 0.5);
    c.bench_function("sg_backward", |b| b.iter(|| sg_backward(black_box(&trace), &params, &g).unwrap()));
}

fn training_step(c: &mut Criterion) {
    let cfg = ExperimentConfig::default();
    let sample =
        generate_phantom(&PhantomConfig { volume_shape: [32, 32, 16], seed: 3, ..PhantomConfig::default() }).unwrap();
    let prepared = prepare(&[sample], &cfg).unwrap();
    let mut net = Network::<f32>::build(NetworkConfig::default(), 0).unwrap();
    let mut adam = Adam::new(&cfg.optim, net.params());
    let batch = [&prepared[0]];
    c.bench_function("train_step_32x32x16", |b| {
        b.iter(|| train_step(&mut net, &mut adam, &batch, &cfg.losses, 1e-4).unwrap())
    });
}

fn surface_distance(c: &mut Criterion) {
    let a = generate_phantom(&PhantomConfig { seed: 4, ..PhantomConfig::default() }).unwrap().label;
    let b = generate_phantom(&PhantomConfig { seed: 5, ..PhantomConfig::default() }).unwrap().label;
    let spacing = Spacing([1.0; 3]);
    c.bench_function("asd_64x64x16", |bench| bench.iter(|| asd(black_box(&a), &b, 3, &spacing).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv, sg_module, training_step, surface_distance
}
criterion_main!(benches);
