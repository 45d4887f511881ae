use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use shnd_core::ode;
use shnd_core::par;
use shnd_core::pendulum::PendulumParams;
use shnd_core::tensor::Tensor;

fn matmul_rows<'a>(a: &'a Tensor, b: &'a Tensor) -> impl Fn(usize, &mut [f64]) + Sync + Send + 'a {
    move |i, row| {
        for (k, &aik) in a.row_slice(i).iter().enumerate() {
            for (o, &bkj) in row.iter_mut().zip(b.row_slice(k)) {
                *o += aik * bkj;
            }
        }
    }
}

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64usize, 256] {
        let a = Tensor::from_fn(n, 128, |i, j| ((i * 7 + j) as f64).sin());
        let b = Tensor::from_fn(128, 128, |i, j| ((i + 3 * j) as f64).cos());
        let work = n * 128 * 128;
        group.bench_with_input(BenchmarkId::new("parallel", n), &n, |bench, _| {
            bench.iter(|| {
                let mut out = vec![0.0; n * 128];
                par::for_each_row(&mut out, 128, work, matmul_rows(&a, &b));
                black_box(out)
            })
        });
        group.bench_with_input(BenchmarkId::new("sequential", n), &n, |bench, _| {
            bench.iter(|| {
                let mut out = vec![0.0; n * 128];
                par::sequential::for_each_row(&mut out, 128, matmul_rows(&a, &b));
                black_box(out)
            })
        });
    }
    group.finish();
}

fn bench_pendulum(c: &mut Criterion) {
    let p = PendulumParams::default();
    let starts: Vec<[f64; 4]> = (0..16).map(|i| [0.1 * i as f64, -0.05 * i as f64, 0.0, 0.0]).collect();
    let simulate = |x0: &[f64; 4]| {
        let traj = ode::simulate(|x: &[f64]| Ok(p.field(x).to_vec()), x0, 0.01, 2.0).unwrap();
        traj.last()[0]
    };
    let mut group = c.benchmark_group("pendulum_trajectories");
    group.bench_function("parallel", |b| b.iter(|| black_box(par::map_slice(&starts, simulate))));
    group.bench_function("sequential", |b| b.iter(|| black_box(par::sequential::map_slice(&starts, simulate))));
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_pendulum);
criterion_main!(benches);
