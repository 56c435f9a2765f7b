use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;
use steerdec::data::tokenize;
use steerdec::decode::{combine, generate_k, steer_step, top_p_subset, truncate};
use steerdec::lm::{NeuralArch, NeuralWindowLM};
use steerdec::{Direction, LanguageModel, SteeringConfig};
use steerdec_bench::small_testbed;

fn bench_step(c: &mut Criterion) {
    let tb = small_testbed();
    let ctx = tokenize(&tb.data.prompts.prompts()[0].text, &tb.data.vocab);
    let pg = tb.generator.next_dist(&ctx);
    let pd = tb.detoxifier.next_dist(&ctx);
    let cfg = SteeringConfig::with_seed(0);

    c.bench_function("top_p_subset", |b| b.iter(|| top_p_subset(black_box(&pg), 0.9).unwrap()));
    let subset = top_p_subset(&pg, 0.9).unwrap();
    let (tg, td) = (truncate(pg.probs(), &subset), truncate(pd.probs(), &subset));
    c.bench_function("combine", |b| {
        b.iter(|| combine(black_box(&tg), black_box(&td), 5.0, Direction::Suppress).unwrap())
    });
    c.bench_function("steer_step", |b| b.iter(|| steer_step(black_box(&pg), Some(black_box(&pd)), &cfg).unwrap()));
}

fn bench_models(c: &mut Criterion) {
    let tb = small_testbed();
    let ctx = tokenize(&tb.data.prompts.prompts()[0].text, &tb.data.vocab);
    c.bench_function("ngram_next_dist", |b| b.iter(|| tb.generator.next_dist(black_box(&ctx))));
    let neural = NeuralWindowLM::init(tb.data.vocab.clone(), NeuralArch::default(), 0).unwrap();
    c.bench_function("neural_next_dist", |b| b.iter(|| neural.next_dist(black_box(&ctx))));
}

fn bench_generate(c: &mut Criterion) {
    let tb = small_testbed();
    let prompt = &tb.data.prompts.prompts()[0];
    let ctx = tokenize(&prompt.text, &tb.data.vocab);
    let cfg = SteeringConfig::with_seed(0).set_k_samples(5).unwrap();
    c.bench_function("generate_k5_steered", |b| {
        b.iter_batched(
            || ctx.clone(),
            |ctx| generate_k(&tb.generator, Some(&tb.detoxifier), &prompt.id, &ctx, &cfg).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, bench_step, bench_models, bench_generate);
criterion_main!(benches);
