use criterion::{criterion_group, criterion_main, Criterion};

use transducer_lab::check;
use transducer_lab::par;

fn oracle_sweep(c: &mut Criterion) {
    let mut group = c.benchmark_group("oracle_sweep");
    group.bench_function("seq", |b| {
        b.iter(|| {
            let diffs = par::map_range_seq(64, |i| check::oracle_trial(i as u64).unwrap());
            diffs.into_iter().fold(0.0f64, f64::max)
        })
    });
    group.bench_function("par", |b| {
        b.iter(|| {
            let diffs = par::map_range(64, |i| check::oracle_trial(i as u64).unwrap());
            diffs.into_iter().fold(0.0f64, f64::max)
        })
    });
    group.finish();
}

criterion_group!(benches, oracle_sweep);
criterion_main!(benches);
