//! Logical-to-physical mapping of every KVS file and the logical fd table.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use dashmap::mapref::entry::Entry;
use dashmap::DashMap;
use parking_lot::{Mutex, MutexGuard};

use crate::cache::WriterGuard;
use crate::context::IoContext;
use crate::device::{Area, Locator, Tier};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::TierId;

pub const MIGRATING_SUFFIX: &str = ".migrating";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FileClass {
    Wal,
    Sst,
    Manifest,
    Other,
}

impl FileClass {
    pub fn of(name: &str) -> Self {
        if name.ends_with(".log") {
            FileClass::Wal
        } else if name.ends_with(".sst") {
            FileClass::Sst
        } else if name.starts_with("MANIFEST") {
            FileClass::Manifest
        } else {
            FileClass::Other
        }
    }
}

/// One physical copy of a file. The backing file is deleted when a doomed
/// replica's last reference goes away.
#[derive(Debug)]
pub struct Replica {
    tier: Arc<Tier>,
    loc: Locator,
    doomed: AtomicBool,
}

impl Replica {
    pub fn new(tier: Arc<Tier>, loc: Locator) -> Arc<Self> {
        Arc::new(Replica {
            tier,
            loc,
            doomed: AtomicBool::new(false),
        })
    }

    pub fn tier_id(&self) -> TierId {
        self.tier.id()
    }

    pub fn tier(&self) -> &Arc<Tier> {
        &self.tier
    }

    pub fn locator(&self) -> &Locator {
        &self.loc
    }

    pub fn doom(&self) {
        self.doomed.store(true, Ordering::Release);
    }

    pub fn is_doomed(&self) -> bool {
        self.doomed.load(Ordering::Acquire)
    }

    pub fn read(&self, offset: u64, len: usize) -> Result<Vec<u8>> {
        self.tier.read(&self.loc, offset, len)
    }
}

impl Drop for Replica {
    fn drop(&mut self) {
        if self.is_doomed() && !self.tier.is_crashed() {
            if let Err(e) = self.tier.delete(&self.loc) {
                if !e.is_not_found() {
                    tracing::warn!(tier = self.tier.id(), name = %self.loc.name, "deferred delete failed: {e}");
                }
            }
        }
    }
}

#[derive(Debug)]
pub struct EntryState {
    pub level: Option<u32>,
    pub home: Arc<Replica>,
    pub cached: Option<Arc<Replica>>,
    pub size: u64,
    pub pinned: bool,
    pub sealed: bool,
    pub unlinked: bool,
    pub writers: u32,
    pub generation: u64,
}

#[derive(Debug)]
pub struct FileEntry {
    path: String,
    class: FileClass,
    state: Mutex<EntryState>,
    access: AtomicU64,
    last_access: AtomicU64,
}

impl FileEntry {
    fn new(path: String, class: FileClass, state: EntryState) -> Arc<Self> {
        Arc::new(FileEntry {
            path,
            class,
            state: Mutex::new(state),
            access: AtomicU64::new(0f64.to_bits()),
            last_access: AtomicU64::new(0),
        })
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    pub fn class(&self) -> FileClass {
        self.class
    }

    pub fn state(&self) -> MutexGuard<'_, EntryState> {
        self.state.lock()
    }

    pub fn access_count(&self) -> f64 {
        f64::from_bits(self.access.load(Ordering::Acquire))
    }

    pub fn last_access(&self) -> u64 {
        self.last_access.load(Ordering::Acquire)
    }

    pub(crate) fn touch(&self, tick: u64) {
        self.update_access(|c| c + 1.0);
        self.last_access.fetch_max(tick, Ordering::AcqRel);
    }

    pub(crate) fn set_access_count(&self, v: f64) {
        self.access.store(v.max(0.0).to_bits(), Ordering::Release);
    }

    pub(crate) fn update_access(&self, f: impl Fn(f64) -> f64) -> f64 {
        let prev = self
            .access
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |bits| {
                Some(f(f64::from_bits(bits)).max(0.0).to_bits())
            })
            .unwrap();
        f(f64::from_bits(prev)).max(0.0)
    }

    /// Tries to mark the file as owned by a background task.
    pub fn try_pin(&self) -> bool {
        let mut st = self.state();
        if st.pinned || st.unlinked {
            return false;
        }
        st.pinned = true;
        true
    }

    pub fn unpin(&self) {
        self.state().pinned = false;
    }

    pub fn record(&self, fd: Option<u64>) -> FileRecord {
        let st = self.state();
        FileRecord {
            logical_fd: fd,
            logical_path: self.path.clone(),
            file_class: self.class,
            level: st.level,
            tier_id: st.home.tier_id(),
            physical_locator: st.home.tier().path_of(st.home.locator()),
            size_bytes: st.size,
            access_count: self.access_count(),
            last_access: self.last_access(),
            cached_copy_tier: st.cached.as_ref().map(|c| c.tier_id()),
            pinned: st.pinned,
            sealed: st.sealed,
        }
    }
}

/// Point-in-time view of one file.
#[derive(Debug, Clone, PartialEq)]
pub struct FileRecord {
    pub logical_fd: Option<u64>,
    pub logical_path: String,
    pub file_class: FileClass,
    pub level: Option<u32>,
    pub tier_id: TierId,
    pub physical_locator: PathBuf,
    pub size_bytes: u64,
    pub access_count: f64,
    pub last_access: u64,
    pub cached_copy_tier: Option<TierId>,
    pub pinned: bool,
    pub sealed: bool,
}

pub struct OpenFile {
    pub fd: u64,
    pub entry: Arc<FileEntry>,
    pub writable: bool,
    pub ctx: IoContext,
    pub(crate) writer: Mutex<Option<WriterGuard>>,
}

impl std::fmt::Debug for OpenFile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OpenFile")
            .field("fd", &self.fd)
            .field("path", &self.entry.path())
            .field("writable", &self.writable)
            .field("ctx", &self.ctx)
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relocation {
    Moved,
    /// The file was unlinked or changed while the copy was being made.
    Skipped,
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct RecoveryReport {
    pub files: usize,
    pub cache_removed: Vec<(TierId, String)>,
    pub partial_migrations_removed: Vec<(TierId, String)>,
    pub duplicates_removed: Vec<(TierId, String)>,
}

#[derive(Debug)]
pub struct Namespace {
    tiers: Vec<Arc<Tier>>,
    files: DashMap<String, Arc<FileEntry>>,
    fds: DashMap<u64, Arc<OpenFile>>,
    next_fd: AtomicU64,
    tick: AtomicU64,
}

impl Namespace {
    pub fn new(tiers: Vec<Arc<Tier>>) -> Self {
        Namespace {
            tiers,
            files: DashMap::new(),
            fds: DashMap::new(),
            next_fd: AtomicU64::new(3),
            tick: AtomicU64::new(1),
        }
    }

    pub fn tiers(&self) -> &[Arc<Tier>] {
        &self.tiers
    }

    pub fn tier(&self, id: TierId) -> Result<&Arc<Tier>> {
        self.tiers
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("no tier {id}")))
    }

    pub fn next_tick(&self) -> u64 {
        self.tick.fetch_add(1, Ordering::AcqRel)
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    pub fn lookup(&self, path: &str) -> Option<Arc<FileEntry>> {
        self.files.get(path).map(|e| e.value().clone())
    }

    pub fn entries(&self) -> Vec<Arc<FileEntry>> {
        self.files.iter().map(|e| e.value().clone()).collect()
    }

    /// Paths of all live files in sorted order.
    pub fn paths(&self) -> Vec<String> {
        let mut v: Vec<String> = self.files.iter().map(|e| e.key().clone()).collect();
        v.sort();
        v
    }

    pub fn snapshot(&self) -> Vec<FileRecord> {
        let mut v: Vec<FileRecord> = self.entries().iter().map(|e| e.record(None)).collect();
        v.sort_by(|a, b| a.logical_path.cmp(&b.logical_path));
        v
    }

    /// Creates the physical file on `tier_id` and inserts its record.
    pub fn register(
        &self,
        logical_path: &str,
        class: FileClass,
        level: Option<u32>,
        tier_id: TierId,
        loc: Locator,
    ) -> Result<Arc<FileEntry>> {
        let tier = self.tier(tier_id)?.clone();
        match self.files.entry(logical_path.to_string()) {
            Entry::Occupied(_) => Err(Error::Conflict(logical_path.to_string())),
            Entry::Vacant(v) => {
                tier.create(&loc)?;
                if let Err(e) = tier.sidecar_append(&loc.name, level, 0) {
                    let _ = tier.delete(&loc);
                    return Err(e);
                }
                let entry = FileEntry::new(
                    logical_path.to_string(),
                    class,
                    EntryState {
                        level,
                        home: Replica::new(tier, loc),
                        cached: None,
                        size: 0,
                        pinned: false,
                        sealed: false,
                        unlinked: false,
                        writers: 0,
                        generation: 0,
                    },
                );
                v.insert(entry.clone());
                Ok(entry)
            }
        }
    }

    pub(crate) fn open_fd(
        &self,
        entry: Arc<FileEntry>,
        writable: bool,
        ctx: IoContext,
        writer: Option<WriterGuard>,
    ) -> u64 {
        let fd = self.next_fd.fetch_add(1, Ordering::AcqRel);
        if writable {
            entry.state().writers += 1;
        }
        self.fds.insert(
            fd,
            Arc::new(OpenFile {
                fd,
                entry,
                writable,
                ctx,
                writer: Mutex::new(writer),
            }),
        );
        fd
    }

    /// Registers a new file and opens it for writing.
    pub fn ns_register(
        &self,
        logical_path: &str,
        class: FileClass,
        level: Option<u32>,
        tier_id: TierId,
        loc: Locator,
    ) -> Result<u64> {
        let entry = self.register(logical_path, class, level, tier_id, loc)?;
        Ok(self.open_fd(entry, true, IoContext::Unknown, None))
    }

    pub fn fd(&self, fd: u64) -> Result<Arc<OpenFile>> {
        self.fds
            .get(&fd)
            .map(|f| f.value().clone())
            .ok_or(Error::BadFd(fd))
    }

    pub fn open_fds(&self) -> usize {
        self.fds.len()
    }

    pub(crate) fn close_fd(&self, fd: u64) -> Result<Arc<OpenFile>> {
        let (_, of) = self.fds.remove(&fd).ok_or(Error::BadFd(fd))?;
        if of.writable {
            let mut st = of.entry.state();
            st.writers = st.writers.saturating_sub(1);
            if st.writers == 0 {
                st.sealed = true;
            }
        }
        of.writer.lock().take();
        Ok(of)
    }

    /// Replica that serves reads for `fd`: the cached copy when present.
    pub fn ns_resolve(&self, fd: u64) -> Result<(TierId, Arc<Replica>)> {
        let of = self.fd(fd)?;
        let st = of.entry.state();
        let r = st.cached.clone().unwrap_or_else(|| st.home.clone());
        Ok((r.tier_id(), r))
    }

    /// Switches the home of `logical_path` to an already-written replica on
    /// `new_tier`. The previous home and any cached copy are deleted once
    /// their in-flight readers finish.
    pub fn ns_relocate(
        &self,
        logical_path: &str,
        new_tier: TierId,
        new_loc: Locator,
        expected_generation: Option<u64>,
    ) -> Result<Relocation> {
        let replica = Replica::new(self.tier(new_tier)?.clone(), new_loc);
        let Some(entry) = self.lookup(logical_path) else {
            replica.doom();
            return Ok(Relocation::Skipped);
        };
        let (old_home, old_cached, level, size) = {
            let mut st = entry.state();
            if st.unlinked || expected_generation.is_some_and(|g| g != st.generation) {
                replica.doom();
                return Ok(Relocation::Skipped);
            }
            let old_home = std::mem::replace(&mut st.home, replica.clone());
            let old_cached = st.cached.take();
            st.generation += 1;
            (old_home, old_cached, st.level, st.size)
        };
        old_home.doom();
        if let Some(c) = &old_cached {
            c.doom();
        }
        replica
            .tier()
            .sidecar_append(&replica.locator().name, level, size)?;
        Ok(Relocation::Moved)
    }

    pub fn ns_unlink(&self, logical_path: &str) -> Result<()> {
        let (_, entry) = self
            .files
            .remove(logical_path)
            .ok_or_else(|| Error::NotFound(logical_path.to_string()))?;
        let cached = {
            let mut st = entry.state();
            st.unlinked = true;
            st.generation += 1;
            st.home.doom();
            st.cached.take()
        };
        if let Some(c) = cached {
            c.doom();
        }
        Ok(())
    }

    /// Renames a live file on its home tier. Any cached copy is dropped.
    pub fn rename(&self, from: &str, to: &str) -> Result<()> {
        if self.files.contains_key(to) {
            return Err(Error::Conflict(to.to_string()));
        }
        let (_, old) = self
            .files
            .remove(from)
            .ok_or_else(|| Error::NotFound(from.to_string()))?;
        let mut st = old.state();
        let tier = st.home.tier().clone();
        let new_loc = Locator::data(to);
        if let Err(e) = tier.rename(st.home.locator(), &new_loc) {
            drop(st);
            self.files.insert(from.to_string(), old);
            return Err(e);
        }
        if let Some(c) = st.cached.take() {
            c.doom();
        }
        st.unlinked = true;
        st.generation += 1;
        let entry = FileEntry::new(
            to.to_string(),
            FileClass::of(to),
            EntryState {
                level: st.level,
                home: Replica::new(tier.clone(), new_loc),
                cached: None,
                size: st.size,
                pinned: false,
                sealed: st.sealed,
                unlinked: false,
                writers: 0,
                generation: 0,
            },
        );
        entry.set_access_count(old.access_count());
        let level = st.level;
        let size = st.size;
        drop(st);
        self.files.insert(to.to_string(), entry);
        tier.sidecar_append(to, level, size)?;
        Ok(())
    }

    pub fn set_level(&self, logical_path: &str, level: Option<u32>) -> Result<()> {
        let entry = self
            .lookup(logical_path)
            .ok_or_else(|| Error::NotFound(logical_path.to_string()))?;
        let (tier, name, size) = {
            let mut st = entry.state();
            st.level = level;
            (st.home.tier().clone(), st.home.locator().name.clone(), st.size)
        };
        tier.sidecar_append(&name, level, size)
    }

    /// Installs a finished cache copy unless the file changed meanwhile.
    pub fn set_cached(
        &self,
        entry: &FileEntry,
        replica: Arc<Replica>,
        generation: u64,
    ) -> bool {
        let mut st = entry.state();
        if st.unlinked
            || st.generation != generation
            || st.cached.is_some()
            || replica.tier_id() >= st.home.tier_id()
        {
            drop(st);
            replica.doom();
            return false;
        }
        st.cached = Some(replica);
        true
    }

    /// Drops the cached copy, if any. Returns its size.
    pub fn drop_cached(&self, entry: &FileEntry) -> Option<u64> {
        let c = entry.state().cached.take()?;
        let size = c.tier().size(c.locator()).unwrap_or(0);
        c.doom();
        Some(size)
    }

    /// Rebuilds the namespace from the tiers' `data/` directories.
    ///
    /// Leftover cache copies and partial migrations are deleted. A file found
    /// on two tiers keeps the copy on the slower tier.
    pub fn ns_recover(tiers: Vec<Arc<Tier>>, exec: Exec) -> Result<(Self, RecoveryReport)> {
        let ns = Namespace::new(tiers.clone());
        let mut report = RecoveryReport::default();

        let scans = exec.map(tiers.clone(), |t| -> Result<_> {
            let mut cache_removed = Vec::new();
            for name in t.list(Area::Cache) {
                t.delete(&Locator::cache(name.clone()))?;
                cache_removed.push((t.id(), name));
            }
            let mut partial = Vec::new();
            let mut live = Vec::new();
            for name in t.list(Area::Data) {
                if name.ends_with(MIGRATING_SUFFIX) {
                    t.delete(&Locator::data(name.clone()))?;
                    partial.push((t.id(), name));
                } else {
                    live.push(name);
                }
            }
            let levels = t.sidecar_levels()?;
            Ok((cache_removed, partial, live, levels))
        });

        let mut homes: BTreeMap<String, TierId> = BTreeMap::new();
        let mut levels: Vec<HashMap<String, Option<u32>>> = Vec::new();
        for (tid, scan) in scans.into_iter().enumerate() {
            let (cache_removed, partial, live, lv) = scan?;
            report.cache_removed.extend(cache_removed);
            report.partial_migrations_removed.extend(partial);
            levels.push(lv);
            for name in live {
                if let Some(prev) = homes.insert(name.clone(), tid) {
                    tiers[prev].delete(&Locator::data(name.clone()))?;
                    report.duplicates_removed.push((prev, name));
                }
            }
        }

        let mut sidecars: Vec<Vec<(String, Option<u32>, u64)>> = vec![Vec::new(); tiers.len()];
        for (name, tid) in homes {
            let tier = tiers[tid].clone();
            let loc = Locator::data(name.clone());
            let size = tier.size(&loc)?;
            let level = levels[tid]
                .get(&name)
                .copied()
                .or_else(|| levels.iter().find_map(|m| m.get(&name).copied()))
                .flatten();
            sidecars[tid].push((name.clone(), level, size));
            let entry = FileEntry::new(
                name.clone(),
                FileClass::of(&name),
                EntryState {
                    level,
                    home: Replica::new(tier, loc),
                    cached: None,
                    size,
                    pinned: false,
                    sealed: true,
                    unlinked: false,
                    writers: 0,
                    generation: 0,
                },
            );
            ns.files.insert(name, entry);
        }
        for (tid, entries) in sidecars.iter().enumerate() {
            tiers[tid].sidecar_rewrite(entries)?;
        }
        report.files = ns.len();
        for (tier, name) in &report.cache_removed {
            tracing::info!(tier, name = %name, "removed cache residue");
        }
        Ok((ns, report))
    }
}
