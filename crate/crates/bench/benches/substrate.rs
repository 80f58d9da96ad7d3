use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use minivla_core::substrate::{Op, OpCommand, Substrate, View};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("substrate_matmul");
    for dim in [32usize, 64, 128] {
        let mut sub = Substrate::new();
        let data: Vec<f32> = (0..dim * dim).map(|i| (i % 17) as f32 * 0.01).collect();
        let a = sub.alloc_from(&[dim, dim], &data).unwrap();
        let b = sub.alloc_from(&[dim, dim], &data).unwrap();
        let out = sub.alloc(&[dim, dim]).unwrap();
        let m = View::matrix(dim, dim);
        let op = Op::MatMul {
            lhs: m,
            rhs: m,
            out: m,
            transpose_rhs: false,
        };
        group.bench_with_input(BenchmarkId::from_parameter(dim), &dim, |bench, _| {
            bench.iter(|| black_box(sub.dispatch(OpCommand::new(op.clone(), vec![a, b], out)).unwrap()))
        });
    }
    group.finish();
}

fn replay_vs_eager(c: &mut Criterion) {
    let dim = 16;
    let layers = 32;
    let mut sub = Substrate::new().with_dispatch_overhead(Duration::from_micros(5));
    let x = sub.alloc_from(&[dim, dim], &vec![0.5; dim * dim]).unwrap();
    let y = sub.alloc(&[dim, dim]).unwrap();
    let m = View::matrix(dim, dim);
    let commands: Vec<OpCommand> = (0..layers)
        .map(|i| {
            let (src, dst) = if i % 2 == 0 { (x, y) } else { (y, x) };
            OpCommand::new(
                Op::MatMul {
                    lhs: m,
                    rhs: m,
                    out: m,
                    transpose_rhs: true,
                },
                vec![src, src],
                dst,
            )
        })
        .collect();
    let token = sub.begin_capture().unwrap();
    for cmd in &commands {
        sub.dispatch(cmd.clone()).unwrap();
    }
    let graph = sub.end_capture(token).unwrap();

    let mut group = c.benchmark_group("substrate_small_ops");
    group.bench_function("eager", |bench| {
        bench.iter(|| {
            for cmd in &commands {
                sub.dispatch(cmd.clone()).unwrap();
            }
        })
    });
    group.bench_function("replay", |bench| bench.iter(|| sub.replay(&graph).unwrap()));
    group.finish();
}

criterion_group!(benches, matmul, replay_vs_eager);
criterion_main!(benches);
