use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use span_bench::random_map;
use span_core::attention::{attention_forward, build_attention_rulebook, AttnParams, Shift};
use span_core::conv::{build_conv_rulebook, sac_forward, ConvParams, ConvSpec};
use span_core::model::{loss_and_grad, ModelConfig, ModelParams};
use span_core::oracles::{dense_conv_oracle, DenseTensor};
use span_core::synth::{generate, SyntheticTaskSpec};
use std::hint::black_box;

const SIDE: usize = 128;

fn conv(c: &mut Criterion) {
    let spec = ConvSpec::new(2, 2, 1, 16, 16).unwrap();
    let params = ConvParams::<f32>::random(spec.kernel_volume(), 16, 16, &mut ChaCha8Rng::seed_from_u64(1));
    let mut g = c.benchmark_group("conv_128");
    for occ in [0.05, 0.25, 1.0] {
        let map = random_map(SIDE, occ, 16, 0);
        let rb = build_conv_rulebook(map.coords(), &spec).unwrap();
        let dense = DenseTensor::from_map(&map, SIDE, SIDE).unwrap();
        g.bench_with_input(BenchmarkId::new("rulebook", occ), &map, |b, m| {
            b.iter(|| build_conv_rulebook(black_box(m.coords()), &spec).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("sparse", occ), &map, |b, m| b.iter(|| sac_forward(black_box(m), &rb, &params).unwrap()));
        g.bench_with_input(BenchmarkId::new("dense_oracle", occ), &dense, |b, d| {
            b.iter(|| dense_conv_oracle(black_box(d), &spec, &params).unwrap())
        });
    }
    g.finish();
}

fn attention(c: &mut Criterion) {
    let mut g = c.benchmark_group("attention");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for w in [2, 4] {
        let map = random_map(32, 0.5, 32, 3);
        let params = AttnParams::<f32>::random(32, 2, w, &mut rng);
        let rb = build_attention_rulebook(map.coords(), w, Shift::Half, 0).unwrap();
        g.bench_function(BenchmarkId::new("rulebook", w), |b| {
            b.iter(|| build_attention_rulebook(black_box(map.coords()), w, Shift::Half, 0).unwrap())
        });
        g.bench_function(BenchmarkId::new("forward", w), |b| {
            b.iter(|| attention_forward(black_box(map.features().view()), map.coords(), &rb, &params).unwrap())
        });
    }
    g.finish();
}

fn training_step(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let params = ModelParams::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let bag = generate(&SyntheticTaskSpec { num_maps: 1, ..Default::default() }).unwrap().remove(0).cast::<f32>();
    c.bench_function("mil_step", |b| b.iter(|| loss_and_grad(&cfg, &params, black_box(&bag.map), &bag.target).unwrap()));
}

criterion_group!(benches, conv, attention, training_step);
criterion_main!(benches);
