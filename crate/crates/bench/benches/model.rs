use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use ringflow_bench::{model, ring_fixture};
use ringflow_core::generative::sample_unchecked;
use ringflow_core::vector_field::{forward, loss_and_gradients, FlowSample};
use ringflow_core::{ModelConfig, SampleConfig};

fn field(c: &mut Criterion) {
    let params = model(ModelConfig::default());
    let mut group = c.benchmark_group("field");
    for n in 5..=8 {
        let f = ring_fixture(n, 2);
        group.bench_with_input(BenchmarkId::new("forward", n), &f, |b, f| {
            b.iter(|| forward(&f.spec, black_box(&f.cp[0]), 0.5, &params, &f.table).unwrap())
        });
        let batch = [FlowSample {
            spec: &f.spec,
            x0: f.cp[0].clone(),
            x1: f.cp[1].clone(),
            t: 0.5,
        }];
        group.bench_with_input(BenchmarkId::new("loss_and_gradients", n), &f, |b, f| {
            b.iter(|| loss_and_gradients(black_box(&batch), &params, &f.table).unwrap())
        });
    }
    group.finish();
}

fn sampling(c: &mut Criterion) {
    let params = model(ModelConfig::default());
    let f = ring_fixture(6, 1);
    let mut group = c.benchmark_group("sample_chain");
    for steps in [5, 30] {
        let config = SampleConfig {
            steps,
            ..SampleConfig::default()
        };
        group.bench_with_input(BenchmarkId::from_parameter(steps), &config, |b, config| {
            b.iter(|| sample_unchecked(&f.spec, &params, &f.table, config, 1).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, field, sampling);
criterion_main!(benches);
