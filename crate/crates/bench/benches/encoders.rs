use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xcsrl::{Graph, Mode, Variant};
use xcsrl_bench::{model_for, toy_data};

fn forward_backward(c: &mut Criterion) {
    let data = toy_data();
    let sample = &data.samples[0];
    let frame = &sample.frames[0];
    let mut group = c.benchmark_group("csrl");
    for variant in [Variant::Standard, Variant::Mtrans] {
        let model = model_for(&data, variant);
        let ctx = model.context(&sample.dialogue, frame).unwrap();
        group.bench_with_input(BenchmarkId::new("forward", format!("{variant:?}")), &ctx, |b, ctx| {
            b.iter(|| {
                let mut g = Graph::new(Mode::Eval);
                model.csrl_logits(&mut g, ctx).unwrap()
            })
        });
        group.bench_function(BenchmarkId::new("forward_backward", format!("{variant:?}")), |b| {
            b.iter(|| {
                let mut g = Graph::training(ChaCha8Rng::seed_from_u64(1));
                let loss = model.csrl_loss(&mut g, &sample.dialogue, frame).unwrap();
                g.backward(loss)
            })
        });
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = forward_backward
}
criterion_main!(benches);
