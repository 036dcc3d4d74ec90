//! The store: write path, read path, recovery and the flush and
//! compaction threads.

use std::collections::{BTreeMap, HashSet};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex, RwLock};
use tierkv_core::{scoped, IoContext, OpenFlags, TieredFs};

use crate::cache::BlockCache;
use crate::config::LsmConfig;
use crate::error::{Error, Result};
use crate::format::{decode_entries, encode_entry, frame, unframe, Entry};
use crate::manifest::{manifest_name, read_file, Edit, Manifest, ManifestState, MANIFEST_PREFIX};
use crate::memtable::{Memtable, Value};
use crate::merge::{MergeIter, Source};
use crate::sst::{sst_name, ReadMode, SstBuilder, SstMeta, Table};
use crate::version::Version;

pub fn wal_name(number: u64) -> String {
    format!("{number:06}.log")
}

fn file_number(name: &str) -> Option<u64> {
    name.strip_suffix(".sst")
        .or_else(|| name.strip_suffix(".log"))
        .or_else(|| name.strip_prefix(MANIFEST_PREFIX))
        .and_then(|n| n.parse().ok())
}

#[derive(Debug, Default)]
pub struct LsmStats {
    pub puts: AtomicU64,
    pub deletes: AtomicU64,
    pub gets: AtomicU64,
    pub scans: AtomicU64,
    pub flushes: AtomicU64,
    pub compactions: AtomicU64,
    pub trivial_moves: AtomicU64,
    pub compaction_failures: AtomicU64,
    pub stall_ns: AtomicU64,
    pub bytes_flushed: AtomicU64,
    pub bytes_compacted: AtomicU64,
}

impl LsmStats {
    pub fn stall_ms(&self) -> u64 {
        self.stall_ns.load(Ordering::Relaxed) / 1_000_000
    }

    fn add_stall(&self, since: Instant) {
        self.stall_ns
            .fetch_add(since.elapsed().as_nanos() as u64, Ordering::Relaxed);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RecoveryInfo {
    pub manifest: Option<u64>,
    pub wal_files: usize,
    pub wal_records: usize,
    pub torn_wal_tails: usize,
    pub orphans_deleted: usize,
    pub level_fixups: usize,
}

/// Background work in progress, for the concurrency-demand sampler.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Activity {
    pub flushing: bool,
    /// Running merge compactions by output level.
    pub compactions: BTreeMap<u32, u32>,
}

struct Pending {
    key: Vec<u8>,
    value: Value,
    result: Mutex<Option<Result<()>>>,
}

struct WalState {
    fd: u64,
    number: u64,
}

struct MemState {
    active: Memtable,
    imm: Option<Arc<Memtable>>,
    imm_wal: u64,
    active_wal: u64,
}

struct Job {
    id: u64,
    level: usize,
    inputs: Vec<Arc<Table>>,
    next: Vec<Arc<Table>>,
    min: Vec<u8>,
    max: Vec<u8>,
    trivial: bool,
    drop_tombstones: bool,
}

struct Inflight {
    id: u64,
    out: usize,
    min: Vec<u8>,
    max: Vec<u8>,
    trivial: bool,
}

#[derive(Default)]
struct Sched {
    busy: HashSet<u64>,
    inflight: Vec<Inflight>,
    cursors: Vec<Vec<u8>>,
    l0_running: bool,
    flushing: bool,
    next_id: u64,
}

struct Inner {
    fs: Arc<TieredFs>,
    cfg: LsmConfig,
    writer: Mutex<WalState>,
    pending: Mutex<Vec<Arc<Pending>>>,
    mem: RwLock<MemState>,
    version: RwLock<Arc<Version>>,
    manifest: Mutex<Manifest>,
    next_file: AtomicU64,
    last_seq: AtomicU64,
    cache: Arc<BlockCache>,
    stats: LsmStats,
    sched: Mutex<Sched>,
    signal: Mutex<()>,
    cv: Condvar,
    shutdown: AtomicBool,
    bg_error: Mutex<Option<String>>,
}

pub struct Store {
    inner: Arc<Inner>,
    handles: Mutex<Vec<JoinHandle<()>>>,
    recovery: RecoveryInfo,
    closed: AtomicBool,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store")
            .field("files", &self.inner.version.read().num_files())
            .finish()
    }
}

impl Store {
    /// Opens the store on `fs`, recovering from the newest manifest and
    /// replaying any WALs it does not cover.
    pub fn open(fs: Arc<TieredFs>, cfg: LsmConfig) -> Result<Self> {
        cfg.validate()?;
        let mut info = RecoveryInfo::default();
        let (old_manifest, mut st) = match Manifest::load(&fs)? {
            Some((n, st)) => (Some(n), st),
            None => (None, ManifestState::default()),
        };
        info.manifest = old_manifest;
        let names = fs.list();
        let max_seen = names.iter().filter_map(|n| file_number(n)).max().unwrap_or(0);
        let next_file = AtomicU64::new(st.next_file.max(max_seen + 1).max(1));

        let mut version = Version::new(cfg.num_levels);
        for meta in st.files.values() {
            let l = meta.level as usize;
            if l >= cfg.num_levels {
                return Err(Error::corrupt("manifest", format!("table {} on level {l}", meta.number)));
            }
            version.levels[l].push(Table::open(fs.clone(), meta.clone())?);
        }
        version.sort();
        version.check().map_err(|m| Error::corrupt("manifest", m))?;

        for name in &names {
            if let (Some(n), true) = (file_number(name), name.ends_with(".sst")) {
                if !st.files.contains_key(&n) {
                    fs.unlink(name)?;
                    info.orphans_deleted += 1;
                }
            }
        }

        let mut wals: Vec<u64> = names
            .iter()
            .filter(|n| n.ends_with(".log"))
            .filter_map(|n| file_number(n))
            .collect();
        wals.sort_unstable();
        let mut mem = Memtable::new();
        let mut last_seq = st.last_seq;
        for &w in &wals {
            if w < st.log_number {
                fs.unlink(&wal_name(w))?;
                info.orphans_deleted += 1;
                continue;
            }
            info.wal_files += 1;
            let buf = read_file(&fs, &wal_name(w))?;
            let (recs, clean) = unframe(&buf);
            if !clean {
                info.torn_wal_tails += 1;
            }
            for r in recs {
                let entries = decode_entries(r).ok_or_else(|| Error::corrupt(wal_name(w), "bad record"))?;
                for e in entries {
                    last_seq = last_seq.max(e.seq);
                    if mem.get(&e.key).map_or(true, |(s, _)| s < e.seq) {
                        mem.insert(e.key, e.seq, e.value);
                    }
                    info.wal_records += 1;
                }
            }
        }

        let wal_no = next_file.fetch_add(1, Ordering::SeqCst);
        let wal_fd = fs.open(&wal_name(wal_no), OpenFlags::CREATE, Some(IoContext::WalWrite))?;
        let man_no = next_file.fetch_add(1, Ordering::SeqCst);
        st.next_file = next_file.load(Ordering::SeqCst);
        st.last_seq = last_seq;
        let manifest = Manifest::create(fs.clone(), man_no, &st)?;

        let inner = Arc::new(Inner {
            cache: Arc::new(BlockCache::new(cfg.block_cache_bytes)),
            sched: Mutex::new(Sched {
                cursors: vec![Vec::new(); cfg.num_levels],
                ..Default::default()
            }),
            pending: Mutex::new(Vec::new()),
            writer: Mutex::new(WalState {
                fd: wal_fd,
                number: wal_no,
            }),
            mem: RwLock::new(MemState {
                active: Memtable::new(),
                imm: None,
                imm_wal: 0,
                active_wal: wal_no,
            }),
            version: RwLock::new(Arc::new(version)),
            manifest: Mutex::new(manifest),
            next_file,
            last_seq: AtomicU64::new(last_seq),
            stats: LsmStats::default(),
            signal: Mutex::new(()),
            cv: Condvar::new(),
            shutdown: AtomicBool::new(false),
            bg_error: Mutex::new(None),
            fs: fs.clone(),
            cfg,
        });

        if !mem.is_empty() {
            inner.flush_memtable(Arc::new(mem), wal_no)?;
        } else {
            inner.manifest.lock().append(&Edit {
                log_number: Some(wal_no),
                ..Default::default()
            })?;
        }
        for &w in wals.iter().filter(|&&w| w >= st.log_number) {
            fs.unlink(&wal_name(w))?;
        }
        for name in fs.list() {
            if name.starts_with(MANIFEST_PREFIX) && name != manifest_name(man_no) {
                fs.unlink(&name)?;
            }
        }
        let ns = fs.hierarchy().namespace();
        for (l, files) in inner.version.read().levels.iter().enumerate() {
            for t in files {
                let recorded = ns.lookup(&t.name()).and_then(|e| e.state().level);
                if recorded != Some(l as u32) {
                    fs.set_level(&t.name(), l as u32)?;
                    info.level_fixups += 1;
                }
            }
        }

        let mut handles = Vec::new();
        let i = inner.clone();
        handles.push(
            std::thread::Builder::new()
                .name("lsm-flush".into())
                .spawn(move || i.flush_loop())
                .expect("spawn flush thread"),
        );
        for n in 0..inner.cfg.threads {
            let i = inner.clone();
            handles.push(
                std::thread::Builder::new()
                    .name(format!("lsm-compact-{n}"))
                    .spawn(move || i.compaction_loop())
                    .expect("spawn compaction thread"),
            );
        }
        Ok(Store {
            inner,
            handles: Mutex::new(handles),
            recovery: info,
            closed: AtomicBool::new(false),
        })
    }

    pub fn config(&self) -> &LsmConfig {
        &self.inner.cfg
    }

    pub fn fs(&self) -> &Arc<TieredFs> {
        &self.inner.fs
    }

    pub fn stats(&self) -> &LsmStats {
        &self.inner.stats
    }

    pub fn block_cache(&self) -> &BlockCache {
        &self.inner.cache
    }

    pub fn recovery_info(&self) -> &RecoveryInfo {
        &self.recovery
    }

    pub fn put(&self, key: &[u8], value: &[u8]) -> Result<()> {
        self.inner.write(key, Value::Put(value.to_vec()))?;
        self.inner.stats.puts.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    pub fn delete(&self, key: &[u8]) -> Result<()> {
        self.inner.write(key, Value::Delete)?;
        self.inner.stats.deletes.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    pub fn get(&self, key: &[u8]) -> Result<Option<Vec<u8>>> {
        self.inner.check_open()?;
        self.inner.stats.gets.fetch_add(1, Ordering::Relaxed);
        self.inner.get(key)
    }

    /// Up to `count` live pairs with keys at or after `start`, in order.
    pub fn scan(&self, start: &[u8], count: usize) -> Result<Vec<(Vec<u8>, Vec<u8>)>> {
        self.inner.check_open()?;
        self.inner.stats.scans.fetch_add(1, Ordering::Relaxed);
        self.inner.scan(start, count)
    }

    /// Seals the active memtable and waits for it to reach level 0.
    pub fn flush(&self) -> Result<()> {
        let inner = &self.inner;
        inner.check_open()?;
        {
            let _ctx = scoped(IoContext::WalWrite);
            let mut w = inner.writer.lock();
            if !inner.mem.read().active.is_empty() {
                inner.rotate(&mut w)?;
            }
        }
        inner.wait_until(None, || inner.mem.read().imm.is_none())
    }

    /// Waits until no flush or compaction is running or needed.
    pub fn wait_idle(&self, timeout: Duration) -> Result<bool> {
        let inner = &self.inner;
        let deadline = Instant::now() + timeout;
        loop {
            inner.check_bg()?;
            let idle = inner.mem.read().imm.is_none() && {
                let s = inner.sched.lock();
                s.inflight.is_empty() && !s.flushing
            } && inner.max_score(&inner.version.read()) < 1.0;
            if idle {
                return Ok(true);
            }
            if Instant::now() >= deadline {
                return Ok(false);
            }
            let mut g = inner.signal.lock();
            inner.cv.wait_for(&mut g, Duration::from_millis(10));
        }
    }

    pub fn level_files(&self) -> Vec<usize> {
        self.inner.version.read().levels.iter().map(Vec::len).collect()
    }

    pub fn level_bytes(&self) -> Vec<u64> {
        let v = self.inner.version.read();
        (0..v.levels.len()).map(|l| v.level_bytes(l)).collect()
    }

    /// Live tables by level.
    pub fn tables(&self) -> Vec<Vec<SstMeta>> {
        self.inner
            .version
            .read()
            .levels
            .iter()
            .enumerate()
            .map(|(l, f)| {
                f.iter()
                    .map(|t| SstMeta {
                        level: l as u32,
                        ..t.meta.clone()
                    })
                    .collect()
            })
            .collect()
    }

    /// Structural invariants: level disjointness and every live table
    /// present in the file system at its level.
    pub fn check_invariants(&self) -> Result<()> {
        let _m = self.inner.manifest.lock();
        let v = self.inner.version.read().clone();
        v.check().map_err(|m| Error::corrupt("version", m))?;
        let ns = self.inner.fs.hierarchy().namespace();
        for (l, files) in v.levels.iter().enumerate() {
            for t in files {
                let e = ns
                    .lookup(&t.name())
                    .ok_or_else(|| Error::corrupt(t.name(), "live table missing"))?;
                if e.state().level != Some(l as u32) {
                    return Err(Error::corrupt(t.name(), format!("namespace level differs from {l}")));
                }
            }
        }
        Ok(())
    }

    pub fn activity(&self) -> Activity {
        let s = self.inner.sched.lock();
        let mut a = Activity {
            flushing: s.flushing,
            compactions: BTreeMap::new(),
        };
        for j in s.inflight.iter().filter(|j| !j.trivial) {
            *a.compactions.entry(j.out as u32).or_default() += 1;
        }
        a
    }

    pub fn last_sequence(&self) -> u64 {
        self.inner.last_seq.load(Ordering::SeqCst)
    }

    fn stop_threads(&self) {
        self.inner.shutdown.store(true, Ordering::SeqCst);
        self.inner.cv.notify_all();
        for h in self.handles.lock().drain(..) {
            let _ = h.join();
        }
    }

    /// Flushes the memtable, stops background threads and removes the
    /// empty WAL, so that reopening replays nothing.
    pub fn close(&self) -> Result<()> {
        if self.closed.swap(true, Ordering::SeqCst) {
            return Ok(());
        }
        let r = (|| {
            {
                let _ctx = scoped(IoContext::WalWrite);
                let mut w = self.inner.writer.lock();
                if !self.inner.mem.read().active.is_empty() {
                    self.inner.rotate(&mut w)?;
                }
            }
            self.inner.wait_until(None, || self.inner.mem.read().imm.is_none())
        })();
        self.stop_threads();
        r?;
        let w = self.inner.writer.lock();
        self.inner.fs.close(w.fd)?;
        self.inner.fs.unlink(&wal_name(w.number))?;
        Ok(())
    }

    /// Simulated power loss of the whole hierarchy.
    pub fn crash(&self) {
        self.closed.store(true, Ordering::SeqCst);
        self.inner.fs.crash();
        self.stop_threads();
    }
}

impl Drop for Store {
    fn drop(&mut self) {
        if let Err(e) = self.close() {
            tracing::warn!("close on drop failed: {e}");
        }
    }
}

fn union(tables: &[&Arc<Table>]) -> (Vec<u8>, Vec<u8>) {
    let min = tables.iter().map(|t| &t.meta.min_key).min().cloned().unwrap_or_default();
    let max = tables.iter().map(|t| &t.meta.max_key).max().cloned().unwrap_or_default();
    (min, max)
}

impl Inner {
    fn check_bg(&self) -> Result<()> {
        match &*self.bg_error.lock() {
            Some(e) => Err(Error::Background(e.clone())),
            None => Ok(()),
        }
    }

    fn check_open(&self) -> Result<()> {
        if self.shutdown.load(Ordering::SeqCst) {
            return Err(Error::Closed);
        }
        self.check_bg()
    }

    fn notify(&self) {
        let _g = self.signal.lock();
        self.cv.notify_all();
    }

    /// Blocks until `done` holds; adds the wait to `stall` when given.
    fn wait_until(&self, stall: Option<&LsmStats>, done: impl Fn() -> bool) -> Result<()> {
        let start = Instant::now();
        while !done() {
            self.check_bg()?;
            if self.shutdown.load(Ordering::SeqCst) {
                return Err(Error::Closed);
            }
            let mut g = self.signal.lock();
            self.cv.wait_for(&mut g, Duration::from_millis(10));
        }
        if let Some(s) = stall {
            s.add_stall(start);
        }
        Ok(())
    }

    fn throttle(&self) -> Result<()> {
        let l0 = || self.version.read().levels[0].len();
        let n = l0();
        if n >= self.cfg.l0_stop {
            self.wait_until(Some(&self.stats), || l0() < self.cfg.l0_stop)?;
        } else if n >= self.cfg.l0_slowdown {
            let start = Instant::now();
            std::thread::sleep(self.cfg.slowdown_delay);
            self.stats.add_stall(start);
        }
        Ok(())
    }

    /// Group commit: the thread that takes the WAL lock writes every queued
    /// record in one frame and completes the other writers' requests.
    fn write(&self, key: &[u8], value: Value) -> Result<()> {
        self.check_open()?;
        self.throttle()?;
        let _ctx = scoped(IoContext::WalWrite);
        let me = Arc::new(Pending {
            key: key.to_vec(),
            value,
            result: Mutex::new(None),
        });
        self.pending.lock().push(me.clone());
        let mut w = self.writer.lock();
        if let Some(r) = me.result.lock().take() {
            return r;
        }
        let batch = std::mem::take(&mut *self.pending.lock());
        let r = self.commit(&mut w, &batch);
        for p in batch.iter().filter(|p| !Arc::ptr_eq(p, &me)) {
            *p.result.lock() = Some(match &r {
                Ok(()) => Ok(()),
                Err(e) => Err(Error::Batch(e.to_string())),
            });
        }
        r
    }

    fn commit(&self, w: &mut WalState, batch: &[Arc<Pending>]) -> Result<()> {
        if self.mem.read().active.size_bytes() >= self.cfg.memtable_bytes {
            self.rotate(w)?;
        }
        let first = self.last_seq.load(Ordering::SeqCst) + 1;
        let mut rec = Vec::with_capacity(batch.iter().map(|p| p.key.len() + 32 + p.value.as_put().map_or(0, <[u8]>::len)).sum());
        for (i, p) in batch.iter().enumerate() {
            encode_entry(&mut rec, &p.key, first + i as u64, &p.value);
        }
        self.fs.append(w.fd, &frame(&rec))?;
        if self.cfg.strict_durability {
            self.fs.fsync(w.fd)?;
        }
        let mut m = self.mem.write();
        for (i, p) in batch.iter().enumerate() {
            m.active.insert(p.key.clone(), first + i as u64, p.value.clone());
        }
        self.last_seq.store(first + batch.len() as u64 - 1, Ordering::SeqCst);
        Ok(())
    }

    /// Seals the active memtable behind a new WAL. Waits for the previous
    /// immutable memtable to flush first.
    fn rotate(&self, w: &mut WalState) -> Result<()> {
        self.wait_until(Some(&self.stats), || self.mem.read().imm.is_none())?;
        self.fs.fsync(w.fd)?;
        let number = self.next_file.fetch_add(1, Ordering::SeqCst);
        let fd = self
            .fs
            .open(&wal_name(number), OpenFlags::CREATE, Some(IoContext::WalWrite))?;
        self.fs.close(w.fd)?;
        let old = std::mem::replace(w, WalState { fd, number });
        {
            let mut m = self.mem.write();
            let full = std::mem::take(&mut m.active);
            m.imm = Some(Arc::new(full));
            m.imm_wal = old.number;
            m.active_wal = number;
        }
        self.notify();
        Ok(())
    }

    fn get(&self, key: &[u8]) -> Result<Option<Vec<u8>>> {
        let _ctx = scoped(IoContext::Foreground);
        {
            let m = self.mem.read();
            if let Some((_, v)) = m.active.get(key) {
                return Ok(v.as_put().map(<[u8]>::to_vec));
            }
            if let Some((_, v)) = m.imm.as_ref().and_then(|i| i.get(key)) {
                return Ok(v.as_put().map(<[u8]>::to_vec));
            }
        }
        let v = self.version.read().clone();
        for t in &v.levels[0] {
            if let Some((_, val)) = t.get(key, &self.cache)? {
                return Ok(val.as_put().map(<[u8]>::to_vec));
            }
        }
        for l in 1..v.levels.len() {
            if let Some(t) = v.find(l, key) {
                if let Some((_, val)) = t.get(key, &self.cache)? {
                    return Ok(val.as_put().map(<[u8]>::to_vec));
                }
            }
        }
        Ok(None)
    }

    fn scan(&self, start: &[u8], count: usize) -> Result<Vec<(Vec<u8>, Vec<u8>)>> {
        if count == 0 {
            return Ok(Vec::new());
        }
        let _ctx = scoped(IoContext::Foreground);
        // Memtable entries up to the `count`-th live key; nothing past it
        // can make the result.
        let (mem, v) = {
            let m = self.mem.read();
            let mut a = m.active.range_from(start).peekable();
            let mut b = m.imm.as_ref().map(|i| i.range_from(start).peekable());
            let mut out = Vec::new();
            let mut live = 0;
            while live < count {
                let take_a = match (a.peek(), b.as_mut().and_then(|b| b.peek())) {
                    (None, None) => break,
                    (Some(_), None) => true,
                    (None, Some(_)) => false,
                    (Some(x), Some(y)) => x.key <= y.key,
                };
                let e: Entry = if take_a {
                    let e = a.next().unwrap();
                    if let Some(b) = b.as_mut() {
                        if b.peek().is_some_and(|y| y.key == e.key) {
                            b.next();
                        }
                    }
                    e
                } else {
                    b.as_mut().unwrap().next().unwrap()
                };
                if matches!(e.value, Value::Put(_)) {
                    live += 1;
                }
                out.push(e);
            }
            (out, self.version.read().clone())
        };
        let mut sources = vec![Source::Entries(mem.into_iter())];
        for t in &v.levels[0] {
            if t.meta.max_key.as_slice() >= start {
                sources.push(Source::Table(crate::sst::TableIter::new(
                    t.clone(),
                    Some(start),
                    ReadMode::Cached,
                    self.cache.clone(),
                )));
            }
        }
        for l in 1..v.levels.len() {
            let tables = v.from_key(l, start);
            if !tables.is_empty() {
                sources.push(Source::level(tables, Some(start), ReadMode::Cached, self.cache.clone()));
            }
        }
        let mut it = MergeIter::new(sources)?;
        let mut out = Vec::with_capacity(count.min(1024));
        while out.len() < count {
            let Some(e) = it.next_newest()? else { break };
            if let Value::Put(val) = e.value {
                out.push((e.key, val));
            }
        }
        Ok(out)
    }

    /// Installs an edit in the manifest and the in-memory version together,
    /// then unlinks the files it made obsolete.
    fn install(&self, edit: Edit, added: Vec<(usize, Arc<Table>)>, obsolete: &[String]) -> Result<()> {
        self.install_with(edit, added, obsolete, || Ok(()))
    }

    /// [`Self::install`] running `then` before the manifest lock drops.
    fn install_with(
        &self,
        mut edit: Edit,
        added: Vec<(usize, Arc<Table>)>,
        obsolete: &[String],
        then: impl FnOnce() -> Result<()>,
    ) -> Result<()> {
        let m = self.manifest.lock();
        edit.next_file = Some(self.next_file.load(Ordering::SeqCst));
        m.append(&edit)?;
        let deleted: Vec<u64> = edit.deleted.iter().map(|(_, n)| *n).collect();
        {
            let mut v = self.version.write();
            *v = Arc::new(v.apply(&deleted, added));
        }
        for name in obsolete {
            if let Err(e) = self.fs.unlink(name) {
                tracing::warn!("removing obsolete {name}: {e}");
            }
        }
        then()
    }

    /// Writes `mem` as a level-0 table and records `log_number` as the
    /// oldest WAL still needed.
    fn flush_memtable(&self, mem: Arc<Memtable>, log_number: u64) -> Result<()> {
        let _ctx = scoped(IoContext::Flush);
        let mut edit = Edit {
            log_number: Some(log_number),
            last_seq: Some(mem.max_seq()),
            ..Default::default()
        };
        let mut added = Vec::new();
        if !mem.is_empty() {
            let number = self.next_file.fetch_add(1, Ordering::SeqCst);
            let mut b = SstBuilder::create(&self.fs, number, 0, IoContext::Flush, self.cfg.block_size)?;
            let built = (|| {
                for (k, s, v) in mem.iter() {
                    b.add(k, s, v)?;
                }
                Ok::<_, Error>(())
            })();
            if let Err(e) = built {
                b.abandon();
                return Err(e);
            }
            let meta = b.finish()?;
            self.stats.bytes_flushed.fetch_add(meta.size, Ordering::Relaxed);
            let t = Table::open(self.fs.clone(), meta.clone())?;
            edit.added.push(meta);
            added.push((0, t));
        }
        self.install(edit, added, &[])?;
        self.stats.flushes.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    fn flush_loop(self: Arc<Self>) {
        loop {
            let job = {
                let mut g = self.signal.lock();
                loop {
                    if self.shutdown.load(Ordering::SeqCst) {
                        return;
                    }
                    let m = self.mem.read();
                    if let Some(imm) = &m.imm {
                        break (imm.clone(), m.imm_wal, m.active_wal);
                    }
                    drop(m);
                    self.cv.wait_for(&mut g, Duration::from_millis(50));
                }
            };
            let (imm, old_wal, log_number) = job;
            self.sched.lock().flushing = true;
            let r = self.flush_memtable(imm, log_number);
            self.sched.lock().flushing = false;
            match r {
                Ok(()) => {
                    self.mem.write().imm = None;
                    if let Err(e) = self.fs.unlink(&wal_name(old_wal)) {
                        tracing::warn!("removing flushed WAL {old_wal}: {e}");
                    }
                }
                Err(e) => {
                    if !self.shutdown.load(Ordering::SeqCst) {
                        tracing::error!("flush failed: {e}");
                        *self.bg_error.lock() = Some(format!("flush: {e}"));
                    }
                    self.notify();
                    return;
                }
            }
            self.notify();
        }
    }

    fn level_score(&self, v: &Version, l: usize, busy: &HashSet<u64>) -> f64 {
        if l == 0 {
            return v.levels[0].len() as f64 / self.cfg.l0_trigger as f64;
        }
        let bytes: u64 = v.levels[l]
            .iter()
            .filter(|t| !busy.contains(&t.meta.number))
            .map(|t| t.meta.size)
            .sum();
        bytes as f64 / self.cfg.level_target(l) as f64
    }

    fn max_score(&self, v: &Version) -> f64 {
        (0..v.levels.len() - 1)
            .map(|l| self.level_score(v, l, &HashSet::new()))
            .fold(0.0, f64::max)
    }

    fn conflicts(s: &Sched, out: usize, min: &[u8], max: &[u8]) -> bool {
        s.inflight
            .iter()
            .any(|j| j.out == out && j.min.as_slice() <= max && min <= j.max.as_slice())
    }

    fn pick(&self, s: &mut Sched) -> Option<Job> {
        let v = self.version.read().clone();
        let last = v.levels.len() - 1;
        let mut scores: Vec<(f64, usize)> = (0..last)
            .map(|l| (self.level_score(&v, l, &s.busy), l))
            .filter(|(sc, _)| *sc >= 1.0)
            .collect();
        scores.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for (_, l) in scores {
            if let Some(job) = self.pick_level(&v, l, s) {
                s.busy
                    .extend(job.inputs.iter().chain(&job.next).map(|t| t.meta.number));
                s.inflight.push(Inflight {
                    id: job.id,
                    out: l + 1,
                    min: job.min.clone(),
                    max: job.max.clone(),
                    trivial: job.trivial,
                });
                if l == 0 {
                    s.l0_running = true;
                }
                return Some(job);
            }
        }
        None
    }

    fn pick_level(&self, v: &Version, l: usize, s: &mut Sched) -> Option<Job> {
        let out = l + 1;
        let (inputs, next) = if l == 0 {
            if s.l0_running || v.levels[0].is_empty() {
                return None;
            }
            let inputs = v.levels[0].clone();
            let (min, max) = union(&inputs.iter().collect::<Vec<_>>());
            let next = v.overlapping(out, &min, &max);
            if next.iter().any(|t| s.busy.contains(&t.meta.number)) {
                return None;
            }
            (inputs, next)
        } else {
            let files = &v.levels[l];
            let start = files.partition_point(|t| t.meta.min_key <= s.cursors[l]);
            let mut found = None;
            for k in 0..files.len() {
                let f = &files[(start + k) % files.len()];
                if s.busy.contains(&f.meta.number) {
                    continue;
                }
                let next = v.overlapping(out, &f.meta.min_key, &f.meta.max_key);
                if next.iter().any(|t| s.busy.contains(&t.meta.number)) {
                    continue;
                }
                let mut all: Vec<&Arc<Table>> = next.iter().collect();
                all.push(f);
                let (min, max) = union(&all);
                if Self::conflicts(s, out, &min, &max) {
                    continue;
                }
                found = Some((vec![f.clone()], next));
                break;
            }
            let (inputs, next) = found?;
            s.cursors[l] = inputs[0].meta.max_key.clone();
            (inputs, next)
        };
        let all: Vec<&Arc<Table>> = inputs.iter().chain(&next).collect();
        let (min, max) = union(&all);
        if Self::conflicts(s, out, &min, &max) {
            return None;
        }
        let drop_tombstones = (out + 1..v.levels.len()).all(|d| v.overlapping(d, &min, &max).is_empty());
        s.next_id += 1;
        Some(Job {
            id: s.next_id,
            level: l,
            trivial: next.is_empty() && inputs.len() == 1,
            inputs,
            next,
            min,
            max,
            drop_tombstones,
        })
    }

    fn compaction_loop(self: Arc<Self>) {
        while !self.shutdown.load(Ordering::SeqCst) {
            if self.bg_error.lock().is_some() {
                return;
            }
            let job = self.pick(&mut self.sched.lock());
            let Some(job) = job else {
                let mut g = self.signal.lock();
                self.cv.wait_for(&mut g, Duration::from_millis(50));
                continue;
            };
            let r = if job.trivial {
                self.trivial_move(&job)
            } else {
                self.compact(&job)
            };
            {
                let mut s = self.sched.lock();
                for t in job.inputs.iter().chain(&job.next) {
                    s.busy.remove(&t.meta.number);
                }
                s.inflight.retain(|j| j.id != job.id);
                if job.level == 0 {
                    s.l0_running = false;
                }
            }
            if let Err(e) = r {
                if self.shutdown.load(Ordering::SeqCst) {
                    return;
                }
                self.stats.compaction_failures.fetch_add(1, Ordering::Relaxed);
                tracing::warn!(level = job.level, "compaction failed: {e}");
                if matches!(e, Error::Storage(tierkv_core::Error::Crashed(_))) {
                    *self.bg_error.lock() = Some(format!("compaction: {e}"));
                    self.notify();
                    return;
                }
                std::thread::sleep(Duration::from_millis(20));
            }
            self.notify();
        }
    }

    fn trivial_move(&self, job: &Job) -> Result<()> {
        let t = &job.inputs[0];
        let out = job.level + 1;
        let edit = Edit {
            deleted: vec![(job.level as u32, t.meta.number)],
            added: vec![SstMeta {
                level: out as u32,
                ..t.meta.clone()
            }],
            ..Default::default()
        };
        let ns = self.fs.hierarchy().namespace();
        self.install_with(edit, vec![(out, t.clone())], &[], || {
            Ok(ns.set_level(&t.name(), Some(out as u32))?)
        })?;
        // moves the file if the new level lives on a slower tier
        self.fs.set_level(&t.name(), out as u32)?;
        self.stats.trivial_moves.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    fn compact(&self, job: &Job) -> Result<()> {
        let out = job.level + 1;
        let ctx = IoContext::Compaction {
            from: job.level as u32,
            to: out as u32,
        };
        let _ctx = scoped(ctx);
        let mut outputs: Vec<SstMeta> = Vec::new();
        let mut builder: Option<SstBuilder<'_>> = None;
        let r = (|| {
            let mode = ReadMode::Bulk(self.cfg.compaction_readahead);
            let mut sources: Vec<Source> = job
                .inputs
                .iter()
                .map(|t| Source::Table(crate::sst::TableIter::new(t.clone(), None, mode, self.cache.clone())))
                .collect();
            if !job.next.is_empty() {
                sources.push(Source::level(job.next.clone(), None, mode, self.cache.clone()));
            }
            let mut it = MergeIter::new(sources)?;
            let mut n = 0u64;
            while let Some(e) = it.next_newest()? {
                n += 1;
                if n % 256 == 0 && self.shutdown.load(Ordering::SeqCst) {
                    return Err(Error::Closed);
                }
                if e.value == Value::Delete && job.drop_tombstones {
                    continue;
                }
                if builder.is_none() {
                    let number = self.next_file.fetch_add(1, Ordering::SeqCst);
                    builder = Some(SstBuilder::create(&self.fs, number, out as u32, ctx, self.cfg.block_size)?);
                }
                let b = builder.as_mut().unwrap();
                b.add(&e.key, e.seq, &e.value)?;
                if b.estimated_size() >= self.cfg.target_file_bytes {
                    outputs.push(builder.take().unwrap().finish()?);
                }
            }
            if let Some(b) = builder.take() {
                outputs.push(b.finish()?);
            }
            Ok(())
        })();
        let cleanup = |outputs: &[SstMeta]| {
            for m in outputs {
                let _ = self.fs.unlink(&sst_name(m.number));
            }
        };
        if let Err(e) = r {
            if let Some(b) = builder.take() {
                b.abandon();
            }
            cleanup(&outputs);
            return Err(e);
        }
        let mut added = Vec::new();
        for m in &outputs {
            match Table::open(self.fs.clone(), m.clone()) {
                Ok(t) => added.push((out, t)),
                Err(e) => {
                    cleanup(&outputs);
                    return Err(e);
                }
            }
        }
        let deleted: Vec<(u32, u64)> = job
            .inputs
            .iter()
            .map(|t| (job.level as u32, t.meta.number))
            .chain(job.next.iter().map(|t| (out as u32, t.meta.number)))
            .collect();
        let written: u64 = outputs.iter().map(|m| m.size).sum();
        let edit = Edit {
            deleted,
            added: outputs.clone(),
            ..Default::default()
        };
        let obsolete: Vec<String> = job.inputs.iter().chain(&job.next).map(|t| t.name()).collect();
        if let Err(e) = self.install(edit, added, &obsolete) {
            cleanup(&outputs);
            return Err(e);
        }
        self.stats.compactions.fetch_add(1, Ordering::Relaxed);
        self.stats.bytes_compacted.fetch_add(written, Ordering::Relaxed);
        Ok(())
    }
}
