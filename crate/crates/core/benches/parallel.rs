//! Parallel vs sequential execution of the hot paths.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use omnitft::evalkit::forecast_all;
use omnitft::ingest::{generate_synthetic, prepare, synthetic_schema, PrepConfig, SynthConfig};
use omnitft::labeler::DeltaTable;
use omnitft::model::{ModelConfig, Normalizer, OmniTft};
use omnitft::par::Execution;
use omnitft::penalties::PenaltyWeights;
use omnitft::sampler::WindowSample;
use omnitft::trainer::{batch_objective, build_windows, estimate_deltas};

const MODES: [(&str, Execution); 2] = [
    ("parallel", Execution::Parallel),
    ("sequential", Execution::Sequential),
];

fn fixture() -> (OmniTft, Vec<WindowSample>) {
    let schema = synthetic_schema(24, 6);
    let cfg = SynthConfig {
        n_patients: 12,
        steps_per_patient: 60,
        drop_prob: 0.0,
        seed: 3,
        ..SynthConfig::default()
    };
    let data = generate_synthetic(&schema, &cfg);
    let deltas = estimate_deltas(&data.series, &schema, &DeltaTable::default()).unwrap();
    let windows = build_windows(&data.series, &schema, &deltas, 3).unwrap();
    let config = ModelConfig {
        hidden: 32,
        heads: 4,
        attention_blocks: 2,
        lstm_layers: 1,
        dropout: 0.1,
        ..ModelConfig::default()
    };
    let model = OmniTft::new(
        schema.clone(),
        config,
        Normalizer::fit(&data.series, &schema),
    )
    .unwrap();
    (model, windows)
}

fn bench_objective(c: &mut Criterion) {
    let (model, windows) = fixture();
    let batch: Vec<&WindowSample> = windows.iter().take(64).collect();
    let seeds: Vec<u64> = (0..batch.len() as u64).collect();
    let weights = PenaltyWeights::default();
    let mut g = c.benchmark_group("batch_objective_64");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| batch_objective(&model, &batch, Some(&seeds), &weights, true, exec).unwrap())
        });
    }
    g.finish();
}

fn bench_eval(c: &mut Criterion) {
    let (model, windows) = fixture();
    let mut g = c.benchmark_group("forecast_all");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| forecast_all(&model, &windows, exec).unwrap())
        });
    }
    g.finish();
}

fn bench_prepare(c: &mut Criterion) {
    let schema = synthetic_schema(24, 6);
    let cfg = SynthConfig {
        n_patients: 200,
        seed: 5,
        ..SynthConfig::default()
    };
    let events = generate_synthetic(&schema, &cfg).to_events(&schema);
    let mut g = c.benchmark_group("prepare_200_patients");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| prepare(events.clone(), &schema, &PrepConfig::default(), None, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_objective, bench_eval, bench_prepare);
criterion_main!(benches);
