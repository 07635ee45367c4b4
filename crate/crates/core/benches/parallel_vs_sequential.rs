use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use ewe_core::config::RunConfig;
use ewe_core::curriculum::{build_tokenizer, training_examples};
use ewe_core::eval::{run_benchmark, BenchContext, System};
use ewe_core::memory::{encode_units, FeedbackKind, WorkingMemory};
use ewe_core::model::{mean_loss, train, TransformerWeights};
use ewe_core::par::Execution;
use ewe_core::pipeline::model_config;
use ewe_core::toyworld::{generate_world, render_corpus, render_prompts, WorldSpec};

const MODES: [Execution; 2] = [Execution::Sequential, Execution::Parallel];

fn setup() -> (RunConfig, ewe_core::toyworld::World) {
    let mut cfg = RunConfig::default();
    cfg.model.d_model = 32;
    cfg.model.d_ff = 64;
    cfg.generation.max_steps = 48;
    let world = generate_world(&WorldSpec {
        n_entities: 12,
        ..WorldSpec::default()
    })
    .unwrap();
    (cfg, world)
}

fn bench(c: &mut Criterion) {
    let (cfg, world) = setup();
    let tokenizer = build_tokenizer(&world);
    let weights = TransformerWeights::init(model_config(&cfg, &tokenizer)).unwrap();
    let corpus = training_examples(&world, &tokenizer, &cfg.curriculum()).unwrap();
    let passages = render_corpus(&world);
    let prompts = render_prompts(&world, 6).unwrap();
    let texts: Vec<(String, Option<String>)> = passages.iter().take(32).map(|p| (p.text.clone(), None)).collect();

    let mut g = c.benchmark_group("loss");
    for exec in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &e| {
            b.iter(|| mean_loss(&weights, &corpus, e).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("train_5_steps");
    g.sample_size(10);
    for exec in MODES {
        let mut tc = cfg.train;
        tc.steps = 5;
        tc.batch_size = 32;
        tc.execution = exec;
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &tc, |b, tc| {
            b.iter(|| train(&weights, &corpus, tc).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("encode_units");
    for exec in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &e| {
            b.iter(|| {
                let mut memory = WorkingMemory::new(texts.len(), 0);
                encode_units(&weights, &tokenizer, &mut memory, &texts, FeedbackKind::Retrieval, 0, 16, e)
            })
        });
    }
    g.finish();

    let ctx = BenchContext::new(&weights, &tokenizer, &world, &passages);
    let mut g = c.benchmark_group("benchmark");
    g.sample_size(10);
    for exec in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &e| {
            b.iter(|| run_benchmark(&ctx, &cfg.generation, &[System::EweFull], &prompts, &[0], e).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
