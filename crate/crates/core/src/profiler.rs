//! Offline concurrency profiling: device throughput curves and the
//! placement scheme derived from per-level writer demand.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Barrier};
use std::time::{Duration, Instant};

use crate::device::{Curve, DeviceProfile, Locator, Tier, BLOCK};
use crate::error::{Error, Result};
use crate::placement::PlacementScheme;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Read,
    Write,
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "read" => Ok(Direction::Read),
            "write" => Ok(Direction::Write),
            other => Err(Error::Parse(format!("unknown direction {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfilePoint {
    pub threads: u32,
    /// Aggregate 4 KiB ops/s in device time.
    pub ops_per_sec: f64,
    pub ops: u64,
    pub low_confidence: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceReport {
    pub tier: usize,
    pub direction: Direction,
    pub points: Vec<ProfilePoint>,
    pub stopped_early: bool,
}

impl DeviceReport {
    /// Measured peak; ties go to the smaller thread count.
    pub fn knee(&self) -> u32 {
        let mut best = &self.points[0];
        for p in &self.points[1..] {
            if p.ops_per_sec > best.ops_per_sec {
                best = p;
            }
        }
        best.threads
    }

    pub fn curve(&self) -> Result<Curve> {
        Curve::new(self.points.iter().map(|p| (p.threads, p.ops_per_sec)))
    }

    pub fn low_confidence(&self) -> bool {
        self.points.iter().any(|p| p.low_confidence)
    }
}

#[derive(Debug, Clone)]
pub struct DeviceProfilerOptions {
    pub duration: Duration,
    /// Stop after this many consecutive points below the running max.
    pub early_stop: Option<u32>,
    /// Fraction below the running max that counts as degraded.
    pub degradation: f64,
    /// Bytes each worker cycles through.
    pub region_bytes: u64,
    /// Points with fewer completed ops are flagged low confidence.
    pub min_ops: u64,
}

impl Default for DeviceProfilerOptions {
    fn default() -> Self {
        DeviceProfilerOptions {
            duration: Duration::from_millis(500),
            early_stop: Some(2),
            degradation: 0.10,
            region_bytes: 256 * 1024,
            min_ops: 200,
        }
    }
}

/// Closed-loop 4 KiB sequential I/O against `tier`, `n` workers per point,
/// each on its own file. The tier must be otherwise idle.
pub fn profile_device(
    tier: &Arc<Tier>,
    thread_counts: &[u32],
    dir: Direction,
    opts: &DeviceProfilerOptions,
) -> Result<DeviceReport> {
    if thread_counts.is_empty() || thread_counts.contains(&0) {
        return Err(Error::InvalidArgument("thread counts must be positive".into()));
    }
    let dilation = tier.write_model().dilation();
    let mut points = Vec::new();
    let mut best = 0.0f64;
    let mut below = 0;
    let mut stopped_early = false;
    for &n in thread_counts {
        let (ops, elapsed) = run_point(tier, n, dir, opts)?;
        let rate = ops as f64 / elapsed.as_secs_f64() * dilation;
        points.push(ProfilePoint {
            threads: n,
            ops_per_sec: rate,
            ops,
            low_confidence: ops < opts.min_ops,
        });
        if rate > best {
            best = rate;
            below = 0;
        } else if rate < best * (1.0 - opts.degradation) {
            below += 1;
        } else {
            below = 0;
        }
        if opts.early_stop.is_some_and(|k| below >= k) {
            stopped_early = n != *thread_counts.last().unwrap();
            break;
        }
    }
    Ok(DeviceReport {
        tier: tier.id(),
        direction: dir,
        points,
        stopped_early,
    })
}

fn run_point(
    tier: &Arc<Tier>,
    n: u32,
    dir: Direction,
    opts: &DeviceProfilerOptions,
) -> Result<(u64, Duration)> {
    let blocks = (opts.region_bytes / BLOCK).max(1);
    let locs: Vec<Locator> = (0..n).map(|i| Locator::data(format!("__profile.{i}"))).collect();
    for loc in &locs {
        if tier.exists(loc) {
            tier.delete(loc)?;
        }
        tier.create(loc)?;
    }
    let result = (|| {
        if dir == Direction::Read {
            let was = tier.read_model().enabled();
            tier.write_model().set_enabled(false);
            let fill = vec![0x5au8; (blocks * BLOCK) as usize];
            let r = locs.iter().try_for_each(|l| tier.write(l, 0, &fill).map(|_| ()));
            tier.write_model().set_enabled(was);
            r?;
        }
        let stop = Arc::new(AtomicBool::new(false));
        let total = Arc::new(AtomicU64::new(0));
        let barrier = Arc::new(Barrier::new(n as usize + 1));
        let failed: Arc<parking_lot::Mutex<Option<Error>>> = Default::default();
        let handles: Vec<_> = locs
            .iter()
            .cloned()
            .map(|loc| {
                let (tier, stop, total, barrier, failed) = (
                    tier.clone(),
                    stop.clone(),
                    total.clone(),
                    barrier.clone(),
                    failed.clone(),
                );
                std::thread::spawn(move || {
                    let buf = vec![0xa5u8; BLOCK as usize];
                    barrier.wait();
                    let mut k = 0u64;
                    while !stop.load(Ordering::Relaxed) {
                        let off = (k % blocks) * BLOCK;
                        let r = match dir {
                            Direction::Write => tier.write(&loc, off, &buf).map(|_| ()),
                            Direction::Read => tier.read(&loc, off, BLOCK as usize).map(|_| ()),
                        };
                        if let Err(e) = r {
                            *failed.lock() = Some(e);
                            break;
                        }
                        k += 1;
                        total.fetch_add(1, Ordering::Relaxed);
                    }
                })
            })
            .collect();
        barrier.wait();
        let start = Instant::now();
        std::thread::sleep(opts.duration);
        let ops = total.load(Ordering::Relaxed);
        let elapsed = start.elapsed();
        stop.store(true, Ordering::Relaxed);
        for h in handles {
            let _ = h.join();
        }
        if let Some(e) = failed.lock().take() {
            return Err(e);
        }
        Ok((ops, elapsed))
    })();
    for loc in &locs {
        let _ = tier.delete(loc);
    }
    result
}

/// Mean concurrent writers observed per destination, plus level sizes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConcurrencyDemand {
    pub wal: f64,
    pub flush: f64,
    /// Mean compaction writers into each level.
    pub per_level: BTreeMap<u32, f64>,
    /// Mean resident bytes per level.
    pub level_size: BTreeMap<u32, u64>,
}

impl ConcurrencyDemand {
    pub fn level(&self, l: u32) -> f64 {
        self.per_level.get(&l).copied().unwrap_or(0.0)
    }

    pub fn size(&self, l: u32) -> u64 {
        self.level_size.get(&l).copied().unwrap_or(0)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "wal={}", self.wal);
        let _ = writeln!(s, "flush={}", self.flush);
        for (l, d) in &self.per_level {
            let _ = writeln!(s, "L{l}={d}");
        }
        for (l, b) in &self.level_size {
            let _ = writeln!(s, "size.L{l}={b}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut d = ConcurrencyDemand::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::Parse(format!("demand line {}: {line:?}", i + 1));
            let (k, v) = line.split_once('=').ok_or_else(bad)?;
            let (k, v) = (k.trim(), v.trim());
            let real = |v: &str| -> Result<f64> {
                let x: f64 = v.parse().map_err(|_| bad())?;
                if x.is_finite() && x >= 0.0 {
                    Ok(x)
                } else {
                    Err(bad())
                }
            };
            match k {
                "wal" => d.wal = real(v)?,
                "flush" => d.flush = real(v)?,
                _ => {
                    if let Some(l) = k.strip_prefix("size.L") {
                        d.level_size
                            .insert(l.parse().map_err(|_| bad())?, v.parse().map_err(|_| bad())?);
                    } else if let Some(l) = k.strip_prefix('L') {
                        d.per_level.insert(l.parse().map_err(|_| bad())?, real(v)?);
                    } else {
                        return Err(bad());
                    }
                }
            }
        }
        Ok(d)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone)]
pub struct SchemeOptions {
    /// Share of tier-0 capacity kept free of levels.
    pub reserve_fraction: f64,
    pub num_levels: usize,
    /// Size ratio used to estimate levels the demand does not cover.
    pub fanout: u64,
}

impl Default for SchemeOptions {
    fn default() -> Self {
        SchemeOptions {
            reserve_fraction: 0.2,
            num_levels: 7,
            fanout: 10,
        }
    }
}

/// Level sizes with unmeasured deep levels extrapolated by the fanout.
fn estimated_sizes(d: &ConcurrencyDemand, levels: usize, fanout: u64) -> Vec<u64> {
    let mut v = Vec::with_capacity(levels);
    for l in 0..levels as u32 {
        let s = match d.level_size.get(&l) {
            Some(&s) => s,
            None if l >= 2 => v.last().copied().unwrap_or(0u64).saturating_mul(fanout),
            None => 0,
        };
        v.push(s);
    }
    v
}

/// Greedy scheme: the WAL, L0 and L1 on tier 0, then further levels while
/// tier 0's writer demand and capacity allow; the rest by capacity across
/// slower tiers. Unassigned space becomes cache budget.
pub fn generate_scheme(
    demand: &ConcurrencyDemand,
    tiers: &[DeviceProfile],
    opts: &SchemeOptions,
) -> Result<PlacementScheme> {
    if tiers.is_empty() {
        return Err(Error::Config("no tiers".into()));
    }
    for (i, t) in tiers.iter().enumerate() {
        if t.tier_id != i {
            return Err(Error::Config("tiers must be sorted fastest first".into()));
        }
    }
    if !(0.0..1.0).contains(&opts.reserve_fraction) {
        return Err(Error::Config("reserve_fraction must be in [0, 1)".into()));
    }
    let levels = opts.num_levels.max(2);
    let sizes = estimated_sizes(demand, levels, opts.fanout);
    let usable = |t: usize| (tiers[t].capacity_bytes as f64 * (1.0 - opts.reserve_fraction)) as u64;
    let p0 = tiers[0].max_write_parallelism as f64;

    let mut cum_demand = demand.wal + demand.flush + demand.level(0) + demand.level(1);
    let mut cum_size = sizes[0] + sizes[1];
    if cum_size > usable(0) {
        return Err(Error::Config(format!(
            "tier 0 cannot hold the WAL, L0 and L1: {cum_size} bytes needed, {} usable",
            usable(0)
        )));
    }
    if cum_demand > p0 {
        return Err(Error::Config(format!(
            "WAL, flush and L1 writers ({cum_demand}) exceed tier 0 parallelism {p0}"
        )));
    }
    let mut level_tier = vec![0usize; levels];
    let mut next = 2;
    while next < levels && tiers.len() > 1 {
        let d = demand.level(next as u32);
        if cum_demand + d > p0 || cum_size + sizes[next] > usable(0) {
            break;
        }
        cum_demand += d;
        cum_size += sizes[next];
        next += 1;
    }
    let mut assigned = vec![0u64; tiers.len()];
    assigned[0] = cum_size;
    let mut t = 1.min(tiers.len() - 1);
    for l in next..levels {
        while t + 1 < tiers.len() && assigned[t] + sizes[l] > usable(t) {
            t += 1;
        }
        level_tier[l] = t;
        assigned[t] += sizes[l];
    }
    let cache_budget = (0..tiers.len())
        .map(|t| {
            if t + 1 == tiers.len() {
                0
            } else {
                tiers[t].capacity_bytes.saturating_sub(assigned[t])
            }
        })
        .collect();
    let mut prov = BTreeMap::new();
    prov.insert("source".to_string(), "generated".to_string());
    prov.insert("tier0_parallelism".to_string(), format!("{p0}"));
    prov.insert("tier0_demand".to_string(), format!("{cum_demand}"));
    prov.insert("reserve_fraction".to_string(), format!("{}", opts.reserve_fraction));
    for (i, t) in tiers.iter().enumerate() {
        prov.insert(format!("tier{i}.capacity"), t.capacity_bytes.to_string());
        prov.insert(format!("tier{i}.write_knee"), t.max_write_parallelism.to_string());
    }
    prov.insert(
        "demand".to_string(),
        demand.to_text().lines().collect::<Vec<_>>().join(";"),
    );
    Ok(PlacementScheme {
        wal_tier: 0,
        level_tier,
        cache_budget,
        generated_from: prov,
    })
}

/// Checks a generated scheme against every placement invariant, including
/// the tier-0 writer budget.
pub fn validate_generated(
    scheme: &PlacementScheme,
    demand: &ConcurrencyDemand,
    tiers: &[DeviceProfile],
) -> Result<()> {
    scheme.validate(tiers.len())?;
    scheme.validate_critical()?;
    let on0: f64 = scheme
        .levels_on(0)
        .into_iter()
        .map(|l| demand.level(l))
        .sum::<f64>()
        + demand.wal
        + demand.flush;
    if tiers.len() > 1 && on0 > tiers[0].max_write_parallelism as f64 + 1e-9 {
        return Err(Error::InvalidScheme(format!(
            "tier 0 writer demand {on0} exceeds parallelism {}",
            tiers[0].max_write_parallelism
        )));
    }
    Ok(())
}
