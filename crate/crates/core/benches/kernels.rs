//! Kernels and one outer iteration on the global rayon pool against a
//! single-thread pool. Build with `--no-default-features` to time the
//! sequential fallback instead; both groups then run the same code.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use lease::autodiff::kernels::{conv2d_backward, conv2d_forward, matmul, Conv2dGeom};
use lease::harness::gradcheck::TinyProblem;
use lease::lease::{lease_iteration, Hyperparams, Mode};
use lease::par;
use lease::searchspace::CandidateOp;

fn ramp(n: usize) -> Vec<f64> {
    (0..n).map(|i| ((i * 7919) % 1000) as f64 / 1000.0 - 0.5).collect()
}

fn pools<F: Fn() + Sync + Send>(c: &mut Criterion, group: &str, f: F) {
    let mut g = c.benchmark_group(group);
    g.bench_function(BenchmarkId::new("pool", "default"), |b| b.iter(&f));
    g.bench_function(BenchmarkId::new("pool", "one_thread"), |b| par::with_threads(1, || b.iter(&f)));
    g.finish();
}

fn conv(c: &mut Criterion) {
    let g = Conv2dGeom { n: 32, c: 8, h: 8, w: 8, o: 8, kh: 3, kw: 3, stride: 1, pad: 1 };
    let x = ramp(g.n * g.c * g.h * g.w);
    let k = ramp(g.o * g.c * g.kh * g.kw);
    let dy = ramp(g.n * g.o * g.out_h() * g.out_w());
    pools(c, "conv2d_forward", || {
        black_box(conv2d_forward(black_box(&x), &k, &g));
    });
    pools(c, "conv2d_backward", || {
        black_box(conv2d_backward(black_box(&x), &k, &dy, &g));
    });
}

fn dense(c: &mut Criterion) {
    let (m, k, n) = (64, 128, 64);
    let a = ramp(m * k);
    let b = ramp(k * n);
    pools(c, "matmul", || {
        black_box(matmul(black_box(&a), &b, m, k, n));
    });
}

fn iteration(c: &mut Criterion) {
    let tiny = TinyProblem::new(0, &CandidateOp::ALL).unwrap();
    let p = tiny.problem();
    let hp = Hyperparams::default();
    pools(c, "lease_iteration", || {
        let mut st = tiny.state(0).unwrap();
        black_box(lease_iteration(&p, &mut st, &hp, Mode::Lease).unwrap());
    });
}

criterion_group!(benches, conv, dense, iteration);
criterion_main!(benches);
