use criterion::{criterion_group, criterion_main, Criterion};

use onetrans_bench::fixture;
use onetrans_core::train::{next_batch_loop, EvalLedger, OptimizerState, TrainConfig};

fn train_pass(c: &mut Criterion) {
    let (model, requests) = fixture(8, true).unwrap();
    let config = TrainConfig::desk_scale();
    c.bench_function("next_batch_pass", |b| {
        b.iter(|| {
            let mut model = model.clone();
            let mut state = OptimizerState::new(&model, config.optimizer.clone()).unwrap();
            let mut ledger = EvalLedger::default();
            next_batch_loop(requests.iter().cloned().map(Ok), &mut model, &mut state, &mut ledger, &config).unwrap()
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = train_pass
}
criterion_main!(benches);
