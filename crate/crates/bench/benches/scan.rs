use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use galite_bench::{inputs, scan_elements, warmed};
use galite_core::scan::{scan_parallel, scan_sequential};
use galite_core::{HeadConfig, Vector};
use std::hint::black_box;

fn affine_scan(c: &mut Criterion) {
    let mut group = c.benchmark_group("affine_scan");
    for len in [64usize, 1024, 16_384] {
        let elems = scan_elements(len, 32);
        let h0 = Vector::zeros(32);
        group.bench_with_input(BenchmarkId::new("sequential", len), &len, |b, _| {
            b.iter(|| scan_sequential(black_box(&elems), &h0).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("parallel", len), &len, |b, _| {
            b.iter(|| scan_parallel(black_box(&elems), &h0).unwrap())
        });
    }
    group.finish();
}

fn head_sequence(c: &mut Criterion) {
    let mut group = c.benchmark_group("galite_sequence");
    group.sample_size(20);
    for len in [16usize, 256] {
        let (head, state, _) = warmed(HeadConfig::galite(2), 0);
        let xs = inputs(len);
        group.bench_with_input(BenchmarkId::new("scan", len), &len, |b, _| {
            b.iter(|| head.forward_sequence(black_box(&xs), &state).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("steps", len), &len, |b, _| {
            b.iter(|| head.forward_steps(black_box(&xs), &state).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, affine_scan, head_sequence);
criterion_main!(benches);
