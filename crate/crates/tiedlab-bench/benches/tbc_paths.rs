//! Direct vs folded tied-convolution timings, plus the untied baseline.
//!
//! The folded path runs one thin convolution over the block-folded batch
//! instead of B separate per-block convolutions, so its advantage grows with
//! the block count even though both paths perform the same MACs.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use tiedlab_bench::tbc_fixture;
use tiedlab_core::ops::{conv2d, ConvSpec, ConvWeights};
use tiedlab_core::tensor::Tensor4;
use tiedlab_core::tied::{tbc_forward_direct, tbc_forward_fast};
use tiedlab_core::Rng;

const C: usize = 64;
const HW: usize = 16;

fn bench_tbc_paths(c: &mut Criterion) {
    let mut group = c.benchmark_group("tbc_paths");
    for blocks in [1usize, 2, 4, 8] {
        let fx = tbc_fixture(C, HW, blocks, 42);
        group.bench_with_input(BenchmarkId::new("direct", blocks), &fx, |b, fx| {
            b.iter(|| black_box(tbc_forward_direct(&fx.input, &fx.spec, &fx.weights).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("fast", blocks), &fx, |b, fx| {
            b.iter(|| black_box(tbc_forward_fast(&fx.input, &fx.spec, &fx.weights).unwrap()))
        });
    }
    group.finish();
}

fn bench_untied_baseline(c: &mut Criterion) {
    let spec = ConvSpec::standard(C, C, 3, 1, 1, false);
    let mut rng = Rng::seeded(42);
    let input = Tensor4::random(1, C, HW, HW, 1.0, &mut rng);
    let weights = ConvWeights::init(&spec, &mut rng).unwrap();
    c.bench_function("conv2d_baseline", |b| {
        b.iter(|| black_box(conv2d(&input, &spec, &weights).unwrap()))
    });
}

criterion_group!(benches, bench_tbc_paths, bench_untied_baseline);
criterion_main!(benches);
