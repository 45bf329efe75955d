//! One-thread rayon pool against the default pool on the hot kernels.
//! Build with `--no-default-features` for the purely sequential code path.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rayon::ThreadPoolBuilder;

use ttawpca::bench::{evaluate, prepare, BenchConfig, CorruptionKind, Method};
use ttawpca::network::{MapShape, Model};
use ttawpca::tensor::{matmul, FeatureShape, Matrix, Tensor4};

fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let default = ThreadPoolBuilder::new().build().unwrap();
    let label = if cfg!(feature = "parallel") { "rayon" } else { "sequential-build" };
    vec![
        ("1-thread".to_string(), ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
        (format!("{label}-{}", default.current_num_threads()), default),
    ]
}

fn kernels(c: &mut Criterion) {
    let a = Matrix::from_fn(256, 288, |i, j| ((i * 31 + j * 7) % 17) as f64 / 17.0);
    let b = Matrix::from_fn(288, 64, |i, j| ((i * 13 + j * 5) % 11) as f64 / 11.0 - 0.5);
    let model = Model::reference(MapShape::new(3, 8, 8), 4, 0).unwrap();
    let n = 128;
    let x = Tensor4::new(FeatureShape::new(n, 3, 8, 8), (0..n * 192).map(|i| (i % 97) as f64 / 97.0).collect()).unwrap();

    let mut group = c.benchmark_group("kernels");
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::new("matmul_256x288x64", &name), |bch| {
            bch.iter(|| pool.install(|| matmul(&a, &b).unwrap()))
        });
        group.bench_function(BenchmarkId::new("forward_128", &name), |bch| {
            bch.iter(|| pool.install(|| model.logits(&x).unwrap()))
        });
    }
    group.finish();
}

fn cells(c: &mut Criterion) {
    let mut cfg = BenchConfig::default();
    cfg.dataset.n_train = 400;
    cfg.dataset.n_test = 256;
    cfg.train.epochs = 2;
    cfg.corruptions = vec![CorruptionKind::GaussianNoise, CorruptionKind::Contrast];
    let prep = prepare(&cfg, 0, None).unwrap();
    let methods = [Method::NoAdapt, Method::Tent, Method::TtawpcaExp];

    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::new("3_methods_x_2_corruptions", &name), |bch| {
            bch.iter(|| pool.install(|| evaluate(&prep, &prep.basis, &cfg, &cfg.adapt, &methods, &[5]).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, kernels, cells);
criterion_main!(benches);
