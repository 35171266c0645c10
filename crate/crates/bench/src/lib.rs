//! Configurations swept by the ingest benchmarks.

use bondledger::harness::bench::{BenchConfig, SigMode};

/// Shard counts measured for every signature mode.
pub const SHARDS: [usize; 3] = [1, 2, 4];

/// One labelled configuration per signature mode and shard count, with
/// `events` events per shard.
pub fn sweep(events: usize) -> Vec<(String, BenchConfig)> {
    let mut out = Vec::new();
    for sig in [SigMode::None, SigMode::Each, SigMode::Batch] {
        for shards in SHARDS {
            let label = format!("{}/{shards}", format!("{sig:?}").to_lowercase());
            out.push((label, BenchConfig { events, sig, shards, ..BenchConfig::default() }));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_covers_every_mode_and_shard_count() {
        let s = sweep(10);
        assert_eq!(s.len(), 9);
        assert_eq!(s[4].0, "each/2");
    }
}
