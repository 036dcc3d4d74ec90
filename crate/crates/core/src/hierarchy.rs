//! State shared by the facade, the placement path and the background
//! cache/migration workers.

use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

use crossbeam_channel::{Receiver, Sender};
use parking_lot::{Mutex, RwLock};

use crate::cache::{CacheCopyTask, HitRatioWindow, MigrationTask, WriterRegistry};
use crate::config::MiddlewareConfig;
use crate::context::ContextKind;
use crate::device::{DeviceProfile, Tier};
use crate::error::{Error, Result};
use crate::namespace::{Namespace, RecoveryReport};
use crate::placement::{PlacementScheme, TierSpace};
use crate::TierId;

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    /// Free space fell under the upper threshold and background
    /// migrations were enqueued.
    BackgroundMigration { tasks: usize },
    /// Brackets one synchronous episode, which may move several files.
    ForcedMigrationStart,
    ForcedMigrationEnd,
    /// A creation was redirected from `target` to the event's tier.
    Spill { target: TierId },
    CacheCopied,
    CacheAborted,
    Evicted,
    Migrated { from: TierId },
    MigrationSkipped,
    AllocationFailure,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub seq: u64,
    pub kind: EventKind,
    pub tier: TierId,
    /// Free fraction of `tier` when the event was logged.
    pub free_fraction: f64,
    pub path: Option<String>,
}

#[derive(Debug, Default)]
pub struct EventLog {
    seq: AtomicU64,
    events: Mutex<Vec<Event>>,
}

impl EventLog {
    const CAP: usize = 1 << 16;

    pub fn snapshot(&self) -> Vec<Event> {
        self.events.lock().clone()
    }

    pub fn clear(&self) {
        self.events.lock().clear();
    }

    fn push(&self, kind: EventKind, tier: TierId, free_fraction: f64, path: Option<String>) {
        let seq = self.seq.fetch_add(1, Ordering::Relaxed);
        let mut ev = self.events.lock();
        if ev.len() >= Self::CAP {
            ev.drain(..Self::CAP / 2);
        }
        ev.push(Event {
            seq,
            kind,
            tier,
            free_fraction,
            path,
        });
    }
}

/// Facade-level operation counters.
#[derive(Debug)]
pub struct Counters {
    pub reads: Vec<AtomicU64>,
    pub writes: Vec<AtomicU64>,
    pub created: [AtomicU64; 7],
    pub opened: AtomicU64,
    pub closed: AtomicU64,
}

impl Counters {
    fn new(n: usize) -> Self {
        Counters {
            reads: (0..n).map(|_| AtomicU64::new(0)).collect(),
            writes: (0..n).map(|_| AtomicU64::new(0)).collect(),
            created: Default::default(),
            opened: AtomicU64::new(0),
            closed: AtomicU64::new(0),
        }
    }

    pub fn created(&self, kind: ContextKind) -> u64 {
        self.created[kind.index()].load(Ordering::Relaxed)
    }

    pub fn reads(&self, tier: TierId) -> u64 {
        self.reads.get(tier).map_or(0, |c| c.load(Ordering::Relaxed))
    }

    pub fn writes(&self, tier: TierId) -> u64 {
        self.writes.get(tier).map_or(0, |c| c.load(Ordering::Relaxed))
    }
}

/// Background task counters.
#[derive(Debug, Default)]
pub struct TaskStats {
    pub cache_enqueued: AtomicU64,
    pub cache_done: AtomicU64,
    pub cache_aborted: AtomicU64,
    pub evictions: AtomicU64,
    pub migr_enqueued: AtomicU64,
    pub migr_done: AtomicU64,
    pub migr_skipped: AtomicU64,
    pub forced: AtomicU64,
    pub moves_done: AtomicU64,
    pub spills: AtomicU64,
}

impl TaskStats {
    pub fn get(c: &AtomicU64) -> u64 {
        c.load(Ordering::Relaxed)
    }
}

pub(crate) struct Queues {
    pub cache_tx: Sender<CacheCopyTask>,
    pub cache_rx: Receiver<CacheCopyTask>,
    pub migr_tx: Sender<MigrationTask>,
    pub migr_rx: Receiver<MigrationTask>,
    pub move_tx: Sender<MigrationTask>,
    pub move_rx: Receiver<MigrationTask>,
    pub wake_tx: Sender<TierId>,
    pub wake_rx: Receiver<TierId>,
}

pub struct Hierarchy {
    pub(crate) tiers: Vec<Arc<Tier>>,
    pub(crate) ns: Namespace,
    scheme: RwLock<Arc<PlacementScheme>>,
    pub(crate) registry: Arc<WriterRegistry>,
    pub(crate) windows: Vec<HitRatioWindow>,
    pub(crate) cfg: MiddlewareConfig,
    pub counters: Counters,
    pub events: EventLog,
    pub stats: TaskStats,
    pub(crate) force_locks: Vec<Mutex<()>>,
    pub(crate) queues: Queues,
    pub(crate) cache_inflight: Vec<AtomicUsize>,
    pub(crate) pending_migration: Vec<AtomicU64>,
    pub(crate) running: AtomicBool,
    pub(crate) shutdown: AtomicBool,
    recovery: RecoveryReport,
}

impl std::fmt::Debug for Hierarchy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Hierarchy")
            .field("tiers", &self.tiers.len())
            .field("files", &self.ns.len())
            .finish()
    }
}

impl Hierarchy {
    /// Opens every tier and rebuilds the namespace from what is on disk.
    pub fn open(
        profiles: Vec<DeviceProfile>,
        scheme: PlacementScheme,
        cfg: MiddlewareConfig,
    ) -> Result<Arc<Self>> {
        cfg.validate()?;
        if profiles.is_empty() {
            return Err(Error::Config("at least one tier is required".into()));
        }
        for (i, p) in profiles.iter().enumerate() {
            if p.tier_id != i {
                return Err(Error::Config(format!(
                    "tier profiles must be ordered fastest first with ids 0..n; position {i} has id {}",
                    p.tier_id
                )));
            }
        }
        scheme.validate(profiles.len())?;
        let n = profiles.len();
        let parallelism: Vec<u32> = profiles.iter().map(|p| p.max_write_parallelism).collect();
        let tiers = profiles
            .into_iter()
            .map(|p| Tier::open(p, cfg.interpolation, cfg.dilation, cfg.fsync_real).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        let (ns, recovery) = Namespace::ns_recover(tiers.clone(), cfg.exec)?;
        let (cache_tx, cache_rx) = crossbeam_channel::unbounded();
        let (migr_tx, migr_rx) = crossbeam_channel::unbounded();
        let (move_tx, move_rx) = crossbeam_channel::unbounded();
        let (wake_tx, wake_rx) = crossbeam_channel::bounded(64);
        Ok(Arc::new(Hierarchy {
            registry: WriterRegistry::new(&parallelism),
            windows: (0..n)
                .map(|t| HitRatioWindow::new(t, cfg.cache_window, cfg.cache_threshold))
                .collect(),
            force_locks: (0..n).map(|_| Mutex::new(())).collect(),
            cache_inflight: (0..n).map(|_| AtomicUsize::new(0)).collect(),
            pending_migration: (0..n).map(|_| AtomicU64::new(0)).collect(),
            counters: Counters::new(n),
            events: EventLog::default(),
            stats: TaskStats::default(),
            queues: Queues {
                cache_tx,
                cache_rx,
                migr_tx,
                migr_rx,
                move_tx,
                move_rx,
                wake_tx,
                wake_rx,
            },
            running: AtomicBool::new(false),
            shutdown: AtomicBool::new(false),
            scheme: RwLock::new(Arc::new(scheme)),
            tiers,
            ns,
            cfg,
            recovery,
        }))
    }

    pub fn tiers(&self) -> &[Arc<Tier>] {
        &self.tiers
    }

    pub fn tier(&self, t: TierId) -> &Arc<Tier> {
        &self.tiers[t]
    }

    pub fn num_tiers(&self) -> usize {
        self.tiers.len()
    }

    pub fn is_last(&self, t: TierId) -> bool {
        t + 1 == self.tiers.len()
    }

    pub fn namespace(&self) -> &Namespace {
        &self.ns
    }

    pub fn registry(&self) -> &Arc<WriterRegistry> {
        &self.registry
    }

    pub fn window(&self, t: TierId) -> &HitRatioWindow {
        &self.windows[t]
    }

    pub fn config(&self) -> &MiddlewareConfig {
        &self.cfg
    }

    pub fn recovery_report(&self) -> &RecoveryReport {
        &self.recovery
    }

    pub fn scheme(&self) -> Arc<PlacementScheme> {
        self.scheme.read().clone()
    }

    /// Replaces the scheme; creations already in flight keep the old one.
    pub fn set_scheme(&self, scheme: PlacementScheme) -> Result<()> {
        scheme.validate(self.tiers.len())?;
        *self.scheme.write() = Arc::new(scheme);
        Ok(())
    }

    pub fn space(&self) -> Vec<TierSpace> {
        self.tiers
            .iter()
            .map(|t| TierSpace {
                capacity: t.capacity(),
                used: t.used(),
            })
            .collect()
    }

    pub fn set_delay(&self, on: bool) {
        for t in &self.tiers {
            t.set_delay(on);
        }
    }

    pub fn upper_bytes(&self, t: TierId) -> u64 {
        (self.tiers[t].capacity() as f64 * self.cfg.upper_pct / 100.0) as u64
    }

    pub fn lower_bytes(&self, t: TierId) -> u64 {
        (self.tiers[t].capacity() as f64 * self.cfg.lower_pct / 100.0) as u64
    }

    pub(crate) fn log(&self, kind: EventKind, tier: TierId, path: Option<&str>) {
        let ff = self.tiers[tier].free_fraction();
        self.events.push(kind, tier, ff, path.map(str::to_string));
    }

    /// Nudges the monitor threads.
    pub fn wake(&self, t: TierId) {
        let _ = self.queues.wake_tx.try_send(t);
    }

    pub fn background_running(&self) -> bool {
        self.running.load(Ordering::Acquire)
    }

    pub fn is_shutting_down(&self) -> bool {
        self.shutdown.load(Ordering::Acquire)
    }

    /// Simulated power loss on every tier.
    pub fn crash(&self) {
        self.shutdown.store(true, Ordering::Release);
        for t in &self.tiers {
            t.crash();
        }
    }
}
