use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use pimsim::config::{builtin_model, ArchVariant, HardwareConfig, ModelConfig, RunConfig};
use pimsim::engine::{sweep_with, Execution, SweepPoint};

fn points() -> Vec<SweepPoint> {
    let model = ModelConfig {
        num_layers: 1,
        ..builtin_model("llama2-7b").unwrap()
    };
    let hw = HardwareConfig::default();
    ArchVariant::ALL
        .iter()
        .flat_map(|&v| [1u32, 4, 16, 64].map(move |b| (v, b)))
        .flat_map(|(v, b)| [1024u32, 4096].map(move |s| (v, b, s)))
        .map(|(arch_variant, batch, prompt_len)| SweepPoint {
            model: model.clone(),
            run: RunConfig {
                batch,
                prompt_len,
                gen_len: 4,
                arch_variant,
                ..Default::default()
            },
            hw: hw.clone(),
        })
        .collect()
}

fn bench(c: &mut Criterion) {
    let pts = points();
    // Warm the per-hardware calibration cache outside the measurement.
    sweep_with(&pts, Execution::Sequential);
    let mut g = c.benchmark_group("sweep");
    g.sample_size(20);
    for (name, exec) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
        g.bench_with_input(BenchmarkId::new(name, pts.len()), &exec, |b, &e| b.iter(|| sweep_with(&pts, e)));
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
