//! Load phase, closed-loop experiment runner and per-second metrics.

use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use hdrhistogram::Histogram;
use parking_lot::Mutex;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tierkv_core::hierarchy::TaskStats;
use tierkv_core::PlacementScheme;
use tierkv_lsm::Store;

use crate::workload::{key_name, Keyspace, Op, OpStream, WorkloadSpec};

/// Tiers reported individually in the CSV; deeper tiers are left out.
pub const CSV_TIERS: usize = 3;

pub const CSV_HEADER: &str = "ts_s,ops,reads_t0,reads_t1,reads_t2,writes_t0,writes_t1,writes_t2,hit_ratio_t0,stall_ms,writers_t0,cache_tasks,migr_tasks";

/// One reporting interval. Counts are deltas over the interval; the hit
/// ratio and writer count are instantaneous.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub ts_s: f64,
    pub ops: u64,
    pub reads_t0: u64,
    pub reads_t1: u64,
    pub reads_t2: u64,
    pub writes_t0: u64,
    pub writes_t1: u64,
    pub writes_t2: u64,
    /// NaN while the tier-0 window is empty.
    pub hit_ratio_t0: f64,
    pub stall_ms: u64,
    pub writers_t0: u32,
    pub cache_tasks: u64,
    pub migr_tasks: u64,
}

impl Sample {
    pub fn reads(&self, t: usize) -> u64 {
        [self.reads_t0, self.reads_t1, self.reads_t2].get(t).copied().unwrap_or(0)
    }

    pub fn writes(&self, t: usize) -> u64 {
        [self.writes_t0, self.writes_t1, self.writes_t2].get(t).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub ops: u64,
    pub duration_s: f64,
    /// Wall-clock rate.
    pub throughput_kops: f64,
    pub p50_us: u64,
    pub p99_us: u64,
    pub errors: u64,
    pub cap_samples: u64,
    pub cap_violations: u64,
}

impl Summary {
    /// Throughput and op count recomputed from a series.
    pub fn from_series(series: &[Sample]) -> Summary {
        let ops = series.iter().map(|s| s.ops).sum();
        let duration_s = series.last().map_or(0.0, |s| s.ts_s);
        Summary {
            ops,
            duration_s,
            throughput_kops: if duration_s > 0.0 {
                ops as f64 / duration_s / 1000.0
            } else {
                0.0
            },
            ..Summary::default()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunReport {
    pub workload: String,
    pub series: Vec<Sample>,
    pub summary: Summary,
    /// The run stopped early on a store error.
    pub partial: bool,
    pub error: Option<String>,
}

impl RunReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv(&self.series, path)
    }
}

pub fn write_csv(series: &[Sample], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("create {}", path.display()))?;
    if series.is_empty() {
        w.write_record(CSV_HEADER.split(','))?;
    }
    for s in series {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<Sample>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("open {}", path.display()))?;
    let header = r.headers()?.iter().collect::<Vec<_>>().join(",");
    anyhow::ensure!(header == CSV_HEADER, "unexpected CSV header {header:?}");
    r.deserialize()
        .collect::<std::result::Result<Vec<Sample>, _>>()
        .context("parse CSV rows")
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Stop after this long even if the op budget is not spent.
    pub duration: Option<Duration>,
    pub interval: Duration,
    /// Installed on the store's file system before the run.
    pub scheme: Option<PlacementScheme>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            duration: None,
            interval: Duration::from_secs(1),
            scheme: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadReport {
    pub records: u64,
    pub elapsed: Duration,
    pub quiesced: bool,
}

/// Inserts `record_count` keys single-threaded in a shuffled order, then
/// waits for flushes and compactions to settle.
pub fn load_phase(spec: &WorkloadSpec, store: &Store, settle: Duration) -> Result<LoadReport> {
    let start = Instant::now();
    let mut ids: Vec<u64> = (0..spec.record_count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x10ad));
    ids.shuffle(&mut rng);
    let mut value = vec![0u8; spec.value_bytes];
    for id in ids {
        rng.fill_bytes(&mut value);
        store.put(&key_name(id), &value)?;
    }
    let quiesced = if spec.record_count > 0 {
        store.flush()?;
        store.wait_idle(settle)?
    } else {
        true
    };
    Ok(LoadReport {
        records: spec.record_count,
        elapsed: start.elapsed(),
        quiesced,
    })
}

#[derive(Debug, Clone, Copy)]
struct Snapshot {
    ops: u64,
    reads: [u64; CSV_TIERS],
    writes: [u64; CSV_TIERS],
    stall_ms: u64,
    cache: u64,
    migr: u64,
}

fn snapshot(store: &Store, ops: u64) -> Snapshot {
    let h = store.fs().hierarchy();
    let c = &h.counters;
    let mut reads = [0; CSV_TIERS];
    let mut writes = [0; CSV_TIERS];
    for t in 0..CSV_TIERS {
        reads[t] = c.reads(t);
        writes[t] = c.writes(t);
    }
    Snapshot {
        ops,
        reads,
        writes,
        stall_ms: store.stats().stall_ms(),
        cache: TaskStats::get(&h.stats.cache_done),
        migr: TaskStats::get(&h.stats.migr_done) + TaskStats::get(&h.stats.moves_done),
    }
}

fn sample(store: &Store, prev: &Snapshot, now: &Snapshot, ts_s: f64) -> Sample {
    let h = store.fs().hierarchy();
    Sample {
        ts_s,
        ops: now.ops - prev.ops,
        reads_t0: now.reads[0] - prev.reads[0],
        reads_t1: now.reads[1] - prev.reads[1],
        reads_t2: now.reads[2] - prev.reads[2],
        writes_t0: now.writes[0] - prev.writes[0],
        writes_t1: now.writes[1] - prev.writes[1],
        writes_t2: now.writes[2] - prev.writes[2],
        hit_ratio_t0: h.window(0).ratio().unwrap_or(f64::NAN),
        stall_ms: now.stall_ms.saturating_sub(prev.stall_ms),
        writers_t0: h.registry().counts(0).total(),
        cache_tasks: now.cache - prev.cache,
        migr_tasks: now.migr - prev.migr,
    }
}

fn apply(store: &Store, s: &mut OpStream, op: &Op) -> tierkv_lsm::Result<()> {
    match *op {
        Op::Read(k) => store.get(&key_name(k)).map(drop),
        Op::Update(k) | Op::Insert(k) => {
            let v = s.value();
            store.put(&key_name(k), &v)
        }
        Op::Scan(k, n) => store.scan(&key_name(k), n).map(drop),
        Op::ReadModifyWrite(k) => {
            let key = key_name(k);
            store.get(&key)?;
            let v = s.value();
            store.put(&key, &v)
        }
    }
}

fn new_histogram() -> Histogram<u64> {
    Histogram::new_with_bounds(1, 60_000_000, 3).expect("histogram bounds")
}

/// Runs `spec.client_threads` closed-loop clients until the op budget or
/// the duration runs out, sampling metrics every `opts.interval`.
pub fn run_experiment(spec: &WorkloadSpec, store: &Store, opts: &RunOptions) -> Result<RunReport> {
    spec.validate()?;
    if let Some(scheme) = &opts.scheme {
        store.fs().hierarchy().set_scheme(scheme.clone())?;
    }
    let mut report = RunReport {
        workload: spec.name.clone(),
        ..RunReport::default()
    };
    if spec.operation_count == 0 {
        return Ok(report);
    }
    let keys = Keyspace::new(spec.record_count);
    let budget = AtomicU64::new(spec.operation_count);
    let done_ops = AtomicU64::new(0);
    let stop = AtomicBool::new(false);
    let failure: Mutex<Option<String>> = Mutex::new(None);
    let hist = Mutex::new(new_histogram());
    let auditor = store.fs().auditor();
    let audit0 = auditor.as_ref().map(|a| a.stats()).unwrap_or_default();
    let mut streams = (0..spec.client_threads)
        .map(|i| OpStream::new(spec, i as u64, keys.clone()))
        .collect::<Result<Vec<_>>>()?;
    let start = Instant::now();
    let deadline = opts.duration.map(|d| start + d);

    let running = AtomicUsize::new(streams.len());
    let mut series = Vec::new();
    let mut prev = snapshot(store, 0);
    std::thread::scope(|scope| {
        for mut stream in streams.drain(..) {
            let (budget, done_ops, stop, failure, hist, running) =
                (&budget, &done_ops, &stop, &failure, &hist, &running);
            scope.spawn(move || {
                let mut local = new_histogram();
                while !stop.load(Ordering::Relaxed) {
                    if budget
                        .fetch_update(Ordering::AcqRel, Ordering::Acquire, |b| b.checked_sub(1))
                        .is_err()
                    {
                        break;
                    }
                    let op = stream.next_op();
                    let t = Instant::now();
                    if let Err(e) = apply(store, &mut stream, &op) {
                        failure.lock().get_or_insert_with(|| e.to_string());
                        stop.store(true, Ordering::Relaxed);
                        break;
                    }
                    local.saturating_record(t.elapsed().as_micros() as u64);
                    done_ops.fetch_add(1, Ordering::Relaxed);
                }
                hist.lock().add(&local).expect("same histogram bounds");
                running.fetch_sub(1, Ordering::AcqRel);
            });
        }

        let mut tick = 1u32;
        loop {
            let next = start + opts.interval * tick;
            let end = deadline.map_or(next, |d| d.min(next));
            while running.load(Ordering::Acquire) > 0 && Instant::now() < end {
                std::thread::sleep(Duration::from_millis(5).min(end.saturating_duration_since(Instant::now())));
            }
            if running.load(Ordering::Acquire) == 0 || deadline.is_some_and(|d| Instant::now() >= d) {
                stop.store(true, Ordering::Relaxed);
                break;
            }
            let now = snapshot(store, done_ops.load(Ordering::Acquire));
            series.push(sample(store, &prev, &now, start.elapsed().as_secs_f64()));
            prev = now;
            tick += 1;
        }
    });
    let now = snapshot(store, done_ops.load(Ordering::Acquire));
    series.push(sample(store, &prev, &now, start.elapsed().as_secs_f64()));
    let h = hist.into_inner();
    let mut summary = Summary::from_series(&series);
    if !h.is_empty() {
        summary.p50_us = h.value_at_quantile(0.50);
        summary.p99_us = h.value_at_quantile(0.99);
    }
    let err = failure.into_inner();
    summary.errors = err.iter().count() as u64;
    if let Some(a) = &auditor {
        let s = a.stats();
        summary.cap_samples = s.samples - audit0.samples;
        summary.cap_violations = s.violations - audit0.violations;
    }
    report.series = series;
    report.summary = summary;
    report.partial = err.is_some();
    report.error = err;
    Ok(report)
}
