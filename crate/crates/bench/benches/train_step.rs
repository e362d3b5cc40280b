use criterion::{criterion_group, criterion_main, Criterion};
use finedeep::model::{TrainOptions, Trainer};
use finedeep::LmModel;
use finedeep_bench::{tokens, toy};
use std::hint::black_box;

fn bench_train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    group.sample_size(20);
    for (label, m, k) in [("dense", 0, 1), ("M2K8", 2, 8)] {
        let cfg = toy(m, k);
        let corpus = tokens(20_000, cfg.vocab_size);
        let opts = TrainOptions { steps: 1_000_000, record_time: false };
        let mut trainer = Trainer::<f32>::new(LmModel::init(&cfg).unwrap(), opts).unwrap();
        group.bench_function(label, |bench| bench.iter(|| trainer.step(black_box(&corpus)).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, bench_train_step);
criterion_main!(benches);
