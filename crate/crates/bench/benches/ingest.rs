use std::time::Duration;

use criterion::{criterion_group, criterion_main, Criterion, Throughput};

use bondledger::harness::bench::{run_bench, SigMode};
use bondledger_bench::sweep;

fn ingest(c: &mut Criterion) {
    let mut group = c.benchmark_group("ingest");
    group.sample_size(10);
    for (label, cfg) in sweep(5_000) {
        // Signed modes are far slower; keep their runs short.
        let cfg = if cfg.sig == SigMode::None { cfg } else { bondledger::harness::bench::BenchConfig { events: 1_000, ..cfg } };
        group.throughput(Throughput::Elements((cfg.events * cfg.shards) as u64));
        group.bench_function(label, |b| {
            // Only the ingest phase is timed; draft signing is setup.
            b.iter_custom(|iters| {
                (0..iters).map(|_| Duration::from_secs_f64(run_bench(&cfg).expect("bench runs").elapsed_ms / 1e3)).sum()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, ingest);
criterion_main!(benches);
