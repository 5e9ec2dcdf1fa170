use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use dsgkd::distill::{pool_attention, pool_hidden, PoolingPlan};
use dsgkd::metrics::{auprc, auroc};
use dsgkd::textprep::KnowledgeMask;
use dsgkd::Graph;
use dsgkd_bench::{id_batch, random_scores, random_tensor};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [32usize, 64, 128] {
        let a = random_tensor(&[32, n, n], 1);
        let b = random_tensor(&[n, n], 2);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut g = Graph::new();
                let (x, y) = (g.param(a.clone()), g.param(b.clone()));
                let z = g.matmul(x, y).unwrap();
                let s = g.sum(z);
                g.backward(s).unwrap();
                black_box(g.grad(x).map(|v| v[0]))
            })
        });
    }
    group.finish();
}

fn pooling(c: &mut Criterion) {
    let (_, masks) = id_batch(32, 64, 3);
    let refs: Vec<&KnowledgeMask> = masks.iter().collect();
    let plan = PoolingPlan::new(&refs, 64).unwrap();
    let h = random_tensor(&[32, 64, 64], 4);
    let a = random_tensor(&[32, 4, 64, 64], 5);
    c.bench_function("pool_hidden b32 l64 d64", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let v = g.constant(h.clone());
            black_box(pool_hidden(&mut g, v, &plan).unwrap())
        })
    });
    c.bench_function("pool_attention b32 h4 l64", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let v = g.constant(a.clone());
            black_box(pool_attention(&mut g, v, &plan).unwrap())
        })
    });
}

fn rank_metrics(c: &mut Criterion) {
    let (s, y) = random_scores(10_000, 6);
    c.bench_function("auroc 10k", |b| b.iter(|| auroc(black_box(&s), &y).unwrap()));
    c.bench_function("auprc 10k", |b| b.iter(|| auprc(black_box(&s), &y).unwrap()));
}

criterion_group!(benches, matmul, pooling, rank_metrics);
criterion_main!(benches);
