//! Samples a running store to estimate per-component writer demand.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use anyhow::Result;
use tierkv_core::profiler::ConcurrencyDemand;
use tierkv_lsm::Store;

use crate::harness::{run_experiment, RunOptions, RunReport};
use crate::workload::WorkloadSpec;

#[derive(Debug, Clone, Default)]
struct Tally {
    samples: u64,
    flush_active: u64,
    /// Per output level: samples with at least one compaction running, and
    /// the sum of running compactions over those samples.
    levels: BTreeMap<u32, (u64, u64)>,
    max_bytes: BTreeMap<u32, u64>,
}

impl Tally {
    fn observe(&mut self, store: &Store) {
        let a = store.activity();
        self.samples += 1;
        if a.flushing {
            self.flush_active += 1;
        }
        for (l, n) in a.compactions {
            let e = self.levels.entry(l).or_default();
            e.0 += 1;
            e.1 += n as u64;
        }
        for (l, b) in store.level_bytes().into_iter().enumerate() {
            let m = self.max_bytes.entry(l as u32).or_default();
            *m = (*m).max(b);
        }
    }

    /// Demand of a component is its mean writer count while it is active.
    fn demand(&self, writes: bool) -> ConcurrencyDemand {
        ConcurrencyDemand {
            wal: if writes { 1.0 } else { 0.0 },
            flush: if writes || self.flush_active > 0 { 1.0 } else { 0.0 },
            per_level: self
                .levels
                .iter()
                .map(|(&l, &(active, sum))| (l, sum as f64 / active as f64))
                .collect(),
            level_size: self.max_bytes.clone(),
        }
    }
}

/// Runs `spec` against `store` while sampling its background activity
/// every `interval`.
pub fn profile_lsm(
    spec: &WorkloadSpec,
    store: &Store,
    opts: &RunOptions,
    interval: Duration,
) -> Result<(ConcurrencyDemand, RunReport)> {
    let done = AtomicBool::new(false);
    let mut tally = Tally::default();
    let report = std::thread::scope(|s| {
        let sampler = s.spawn(|| {
            let mut t = Tally::default();
            let mut next = Instant::now();
            while !done.load(Ordering::Acquire) {
                t.observe(store);
                next += interval;
                std::thread::sleep(next.saturating_duration_since(Instant::now()));
            }
            t
        });
        let r = run_experiment(spec, store, opts);
        done.store(true, Ordering::Release);
        tally = sampler.join().expect("sampler thread");
        r
    })?;
    tally.observe(store);
    Ok((tally.demand(spec.mix.write_fraction() > 0.0), report))
}
