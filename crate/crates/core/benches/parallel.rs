// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sequential versus rayon execution of the data-parallel hot paths.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mamba_lrp::baselines::{integrated_gradients, BaselineSpec};
use mamba_lrp::eval::{conservation_scatter, faithfulness, Replacement};
use mamba_lrp::lrp::{attribute_mambalrp, RuleConfig};
use mamba_lrp::methods::Method;
use mamba_lrp::model::{MambaModel, ModelConfig};
use mamba_lrp::par::Execution;
use mamba_lrp::tasks::{generate, TaskSpec};

fn fixture() -> (MambaModel, Vec<Vec<usize>>) {
    let spec = TaskSpec::keyword(1);
    let model = MambaModel::new(ModelConfig::small(spec.vocab_size, 2), 1).unwrap();
    let data = generate(&spec, 32, Execution::Sequential).unwrap();
    (model, data.into_iter().map(|e| e.tokens).collect())
}

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn bench(c: &mut Criterion) {
    let (model, data) = fixture();
    let rules = RuleConfig::default();

    let mut g = c.benchmark_group("conservation_scatter");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| conservation_scatter(&data, |_, t| attribute_mambalrp(&model, t, 0, &rules), exec).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("faithfulness");
    g.sample_size(10);
    let method = Method::MambaLrp(rules.clone());
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| faithfulness(&model, &data[..8], &method, 11, Replacement::Zero, exec).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("integrated_gradients");
    g.sample_size(10);
    for (name, exec) in MODES {
        let spec = BaselineSpec {
            samples: 64,
            execution: exec,
            ..BaselineSpec::default()
        };
        g.bench_with_input(BenchmarkId::from_parameter(name), &spec, |b, spec| {
            b.iter(|| integrated_gradients(&model, &data[0], 0, spec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
