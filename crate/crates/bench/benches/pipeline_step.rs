use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use famdiff_bench::StepFixture;
use famdiff_core::pipeline::denoise_guided;
use famdiff_core::GuidanceMode;

// Short chains keep the per-iteration cost low; time per step is the total / STEPS.
const STEPS: usize = 10;

fn guided_chain(c: &mut Criterion) {
    let mut group = c.benchmark_group("denoise_guided");
    for native in [(16, 16), (32, 32)] {
        let fx = StepFixture::new(native, 2, STEPS).unwrap();
        let id = format!("{}x{}@2/{STEPS}", native.0, native.1);
        for (name, mode) in [
            ("none", GuidanceMode::None),
            ("fm", GuidanceMode::FrequencyModulation),
        ] {
            let cfg = fx.config_with(mode);
            group.bench_with_input(BenchmarkId::new(name, &id), &(), |b, _| {
                b.iter(|| denoise_guided(&fx.seq, &cfg, fx.denoiser.as_ref(), None).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = guided_chain
}
criterion_main!(benches);
