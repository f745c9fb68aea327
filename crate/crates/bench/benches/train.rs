use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use lbsplat_bench::{body, fresh_state};
use lbsplat_core::train::step;
use lbsplat_core::TrainConfig;

fn train_step(c: &mut Criterion) {
    let b = body(2000, 128);
    let data = b.dataset().unwrap();
    let cfg = TrainConfig::default();
    let state = fresh_state(&b);
    let mut group = c.benchmark_group("train");
    group.sample_size(20);
    group.bench_function("step/2000@128", |bench| {
        bench.iter_batched(|| state.clone(), |mut s| step(&mut s, &data, &cfg).unwrap(), BatchSize::LargeInput)
    });
    group.finish();
}

criterion_group!(benches, train_step);
criterion_main!(benches);
