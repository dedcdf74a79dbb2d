use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lungseg_core::metrics::confusion;
use lungseg_core::segnet::{self, NetConfig};
use lungseg_core::tensor::{conv2d_backward, conv2d_forward, ConvKernel};
use lungseg_core::volume::BinaryMask;
use lungseg_core::Tensor4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("conv3x3_16ch_74x54");
    let x = Tensor4::from_vec([1, 16, 74, 54], random(&mut rng, 16 * 74 * 54)).unwrap();
    for d in [1, 2, 4] {
        let k = ConvKernel::new([16, 16, 3, 3], random(&mut rng, 16 * 16 * 9), d, Some(vec![0.0; 16])).unwrap();
        let out = conv2d_forward(&x, &k).unwrap();
        group.bench_with_input(BenchmarkId::new("forward", d), &d, |b, _| b.iter(|| conv2d_forward(&x, &k).unwrap()));
        group.bench_with_input(BenchmarkId::new("backward", d), &d, |b, _| {
            b.iter(|| conv2d_backward(&x, &k, &out).unwrap())
        });
    }
    group.finish();
}

fn network(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut group = c.benchmark_group("network");
    group.sample_size(10);
    for widths in [[4, 4, 4], [16, 32, 64]] {
        let params = segnet::build(&NetConfig { group_channels: widths, ..NetConfig::default() }).unwrap();
        let x = Tensor4::from_vec([1, 1, 296, 216], random(&mut rng, 296 * 216)).unwrap();
        let id = format!("{}-{}-{}", widths[0], widths[1], widths[2]);
        group.bench_function(BenchmarkId::new("infer_296x216", &id), |b| b.iter(|| segnet::infer(&params, &x).unwrap()));
        group.bench_function(BenchmarkId::new("train_step_296x216", &id), |b| {
            b.iter(|| {
                let mut p = params.clone();
                let (probs, tape) = segnet::forward_train(&mut p, &x).unwrap();
                segnet::backward(&p, &tape, &probs).unwrap()
            })
        });
    }
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dims = [216, 296, 24];
    let n = dims.iter().product();
    let mask = |rng: &mut ChaCha8Rng| BinaryMask::new(dims, (0..n).map(|_| rng.random::<bool>()).collect(), [1.0; 3]).unwrap();
    let (r, p, d) = (mask(&mut rng), mask(&mut rng), mask(&mut rng));
    c.bench_function("confusion_216x296x24", |b| b.iter(|| confusion(&r, &p, &d).unwrap()));
}

criterion_group!(benches, conv, network, metrics);
criterion_main!(benches);
