use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use knnue::calibration::{knnue_weight, scaled_softmax, KnnUeParams};
use knnue_bench::Fixture;

const K: usize = 32;

fn search(c: &mut Criterion) {
    let fx = Fixture::new(20_000, 128, 64, 1);
    let mut group = c.benchmark_group("search");
    group.throughput(Throughput::Elements(fx.queries.len() as u64));
    for (name, index) in fx.indexes() {
        group.bench_function(BenchmarkId::new(name, K), |b| {
            b.iter(|| {
                for q in &fx.queries {
                    black_box(index.search(q, K).unwrap());
                }
            })
        });
    }
    group.finish();
}

fn scoring(c: &mut Criterion) {
    let fx = Fixture::new(5_000, 64, 256, 2);
    let index = &fx.indexes()[0].1;
    let labels = fx.ds.labels();
    let neighborhoods: Vec<_> = fx.queries.iter().map(|q| index.search(q, K).unwrap()).collect();
    let params = KnnUeParams { alpha: 1.0, tau: 50.0, lambda: 1.0, b: 0.0, k: K };
    let logits: Vec<f32> = (0..10).map(|i| i as f32 * 0.3).collect();
    c.bench_function("knnue_weight_and_softmax", |b| {
        b.iter(|| {
            for nb in &neighborhoods {
                let w = knnue_weight(nb, 0, labels, &params).unwrap();
                black_box(scaled_softmax(&logits, w).unwrap());
            }
        })
    });
}

criterion_group!(benches, search, scoring);
criterion_main!(benches);
