use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spoofprobe::audio::{logmel, LogMelConfig};
use spoofprobe::{Waveform, CLIP_SAMPLES, SAMPLE_RATE};

fn bench_logmel(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let samples: Vec<f32> = (0..CLIP_SAMPLES).map(|_| rng.gen_range(-0.1..0.1)).collect();
    let clip = Waveform::new(samples, SAMPLE_RATE, "noise");
    c.bench_function("logmel/5s_clip", |b| {
        b.iter(|| logmel(black_box(&clip), LogMelConfig::default()).unwrap())
    });
}

criterion_group!(benches, bench_logmel);
criterion_main!(benches);
