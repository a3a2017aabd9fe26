use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use promptground::harness::{detect_dataset, synth_dataset, BankSet, SynthSpec};
use promptground::{DetectionConfig, ExecPolicy, Mode, ModelWeights};

fn detect(c: &mut Criterion) {
    let config = DetectionConfig::default();
    let weights = ModelWeights::seeded(&config).unwrap();
    let spec = SynthSpec::from_fixture("polyp", 8, 32, 0).unwrap();
    let out = synth_dataset(&spec, &weights).unwrap();
    let banks = BankSet::build(&spec.prompt_bank(), &["polyp"], &weights, &config).unwrap();

    let mut group = c.benchmark_group("detect_dataset");
    group.sample_size(10);
    for mode in [Mode::Structural, Mode::Baseline] {
        let cfg = DetectionConfig { mode, ..config.clone() };
        for (name, policy) in [("sequential", ExecPolicy::Sequential), ("parallel", ExecPolicy::Parallel)] {
            group.bench_with_input(BenchmarkId::new(format!("{mode:?}"), name), &policy, |b, &policy| {
                b.iter(|| detect_dataset(&out.corpus, &banks, &weights, &cfg, policy).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, detect);
criterion_main!(benches);
