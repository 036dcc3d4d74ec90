//! The storage facade: a POSIX-like file API over the tier hierarchy where
//! `open` also carries the KVS operation that created the file.

use std::sync::atomic::Ordering;
use std::sync::Arc;

use parking_lot::Mutex;

use crate::cache::{CapAuditor, Manager, WriterSource};
use crate::config::MiddlewareConfig;
use crate::context::{self, IoContext};
use crate::device::{DeviceProfile, Locator};
use crate::error::{Error, Result};
use crate::hierarchy::{EventKind, Hierarchy};
use crate::namespace::{FileClass, MIGRATING_SUFFIX};
use crate::placement::{place, Placement, PlacementScheme};
use crate::TierId;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpenFlags {
    pub create: bool,
    pub read_only: bool,
    pub append: bool,
}

impl OpenFlags {
    pub const READ: OpenFlags = OpenFlags {
        create: false,
        read_only: true,
        append: false,
    };
    pub const CREATE: OpenFlags = OpenFlags {
        create: true,
        read_only: false,
        append: true,
    };
    pub const WRITE: OpenFlags = OpenFlags {
        create: false,
        read_only: false,
        append: true,
    };
}

#[derive(Debug)]
pub struct TieredFs {
    h: Arc<Hierarchy>,
    manager: Mutex<Option<Manager>>,
}

impl TieredFs {
    /// Opens the hierarchy, recovering whatever is on disk, and starts the
    /// background threads unless `cfg.background` is off.
    pub fn mount(
        profiles: Vec<DeviceProfile>,
        scheme: PlacementScheme,
        cfg: MiddlewareConfig,
    ) -> Result<Self> {
        let background = cfg.background;
        let h = Hierarchy::open(profiles, scheme, cfg)?;
        let fs = TieredFs {
            h,
            manager: Mutex::new(None),
        };
        if background {
            fs.start_background();
        }
        Ok(fs)
    }

    pub fn hierarchy(&self) -> &Arc<Hierarchy> {
        &self.h
    }

    pub fn start_background(&self) {
        let mut m = self.manager.lock();
        if m.is_none() {
            *m = Some(Manager::start(self.h.clone()));
        }
    }

    pub fn stop_background(&self) {
        if let Some(mut m) = self.manager.lock().take() {
            m.stop();
        }
    }

    /// The writer-cap auditor of the running background threads.
    pub fn auditor(&self) -> Option<Arc<CapAuditor>> {
        self.manager.lock().as_ref().map(|m| m.auditor().clone())
    }

    /// Stops background work. Files stay on disk.
    pub fn shutdown(&self) {
        self.stop_background();
    }

    /// Simulated power loss: unsynced bytes are lost and every further
    /// operation fails.
    pub fn crash(&self) {
        self.h.crash();
        self.stop_background();
    }

    pub fn ctx_set(&self, ctx: IoContext) {
        context::ctx_set(ctx);
    }

    pub fn ctx_get(&self) -> IoContext {
        context::ctx_get()
    }

    fn check_name(path: &str) -> Result<()> {
        if path.is_empty()
            || path.contains('/')
            || path == "."
            || path == ".."
            || path.ends_with(MIGRATING_SUFFIX)
        {
            return Err(Error::InvalidArgument(format!("bad file name {path:?}")));
        }
        Ok(())
    }

    /// Chooses the creation tier. A spill first tries to make room on the
    /// scheme's tier with a forced migration.
    fn choose_tier(&self, ctx: IoContext) -> Result<Placement> {
        let scheme = self.h.scheme();
        let lower = self.h.cfg.lower_pct;
        let p = match place(ctx, &scheme, &self.h.space(), lower) {
            Ok(p) => p,
            Err(e) => {
                if matches!(e, Error::AllocationFailure(_)) {
                    self.h.log(EventKind::AllocationFailure, self.h.num_tiers() - 1, None);
                }
                return Err(e);
            }
        };
        if !p.spilled() {
            return Ok(p);
        }
        if let Err(e) = self.h.force_free(p.target) {
            tracing::debug!(tier = p.target, "forced migration before create: {e}");
        }
        let p = place(ctx, &scheme, &self.h.space(), lower)?;
        if p.spilled() {
            self.h.stats.spills.fetch_add(1, Ordering::Relaxed);
            self.h.log(EventKind::Spill { target: p.target }, p.tier, None);
            self.h.wake(p.target);
        }
        Ok(p)
    }

    /// Opens or creates `path`. `ctx` overrides the caller's ambient context.
    pub fn open(&self, path: &str, flags: OpenFlags, ctx: Option<IoContext>) -> Result<u64> {
        let ctx = ctx.unwrap_or_else(context::ctx_get);
        if ctx.is_internal() {
            return Err(Error::InvalidContext(format!(
                "{ctx} is reserved for the cache and migration manager"
            )));
        }
        Self::check_name(path)?;
        let ns = &self.h.ns;
        if let Some(entry) = ns.lookup(path) {
            let writable = !flags.read_only;
            if writable {
                let st = entry.state();
                if st.sealed || st.cached.is_some() {
                    return Err(Error::ReadOnly(path.to_string()));
                }
            }
            self.h.counters.opened.fetch_add(1, Ordering::Relaxed);
            return Ok(ns.open_fd(entry, writable, ctx, None));
        }
        if !flags.create {
            return Err(Error::NotFound(path.to_string()));
        }
        if flags.read_only {
            return Err(Error::InvalidArgument("create requires write access".into()));
        }
        let class = FileClass::of(path);
        let level = match class {
            FileClass::Sst => ctx.to_level(),
            _ => None,
        };
        let p = self.choose_tier(ctx)?;
        let entry = ns.register(path, class, level, p.tier, Locator::data(path))?;
        self.h.counters.created[ctx.kind().index()].fetch_add(1, Ordering::Relaxed);
        self.h.counters.opened.fetch_add(1, Ordering::Relaxed);
        let src = match (class, ctx) {
            (FileClass::Wal, IoContext::WalWrite) => Some(WriterSource::Wal),
            (FileClass::Sst, IoContext::Flush) => Some(WriterSource::Flush),
            (FileClass::Sst, IoContext::Compaction { .. }) => Some(WriterSource::Compaction),
            _ => None,
        };
        let guard = src.map(|s| self.h.registry.register(p.tier, s));
        Ok(ns.open_fd(entry, true, ctx, guard))
    }

    pub fn read(&self, fd: u64, offset: u64, len: usize) -> Result<Vec<u8>> {
        let of = self.h.ns.fd(fd)?;
        let (tier, replica) = self.h.ns.ns_resolve(fd)?;
        let data = replica.read(offset, len)?;
        self.h.counters.reads[tier].fetch_add(1, Ordering::Relaxed);
        if of.entry.class() == FileClass::Sst && context::ctx_get() == IoContext::Foreground {
            self.h.record_access(&of.entry, tier);
        }
        Ok(data)
    }

    fn admit(&self, t: TierId, extra: u64) {
        if self.h.is_last(t) {
            return;
        }
        let free = self.h.tiers[t].free();
        if free.saturating_sub(extra) < self.h.lower_bytes(t) {
            if let Err(e) = self.h.force_free(t) {
                tracing::debug!(tier = t, "forced migration before write: {e}");
            }
        }
    }

    pub fn write(&self, fd: u64, offset: u64, data: &[u8]) -> Result<usize> {
        let of = self.h.ns.fd(fd)?;
        if !of.writable {
            return Err(Error::ReadOnly(of.entry.path().to_string()));
        }
        let (home, size) = {
            let st = of.entry.state();
            if st.sealed || st.cached.is_some() {
                return Err(Error::ReadOnly(of.entry.path().to_string()));
            }
            (st.home.clone(), st.size)
        };
        let t = home.tier_id();
        let tier = home.tier();
        let extra = (offset + data.len() as u64).saturating_sub(size);
        self.admit(t, extra);
        let n = match tier.write(home.locator(), offset, data) {
            Err(Error::TierFull { .. }) if !self.h.is_last(t) => {
                self.h.force_free(t)?;
                tier.write(home.locator(), offset, data)?
            }
            r => r?,
        };
        let new_size = tier.size(home.locator())?;
        of.entry.state().size = new_size;
        self.h.counters.writes[t].fetch_add(1, Ordering::Relaxed);
        if tier.free() < self.h.upper_bytes(t) {
            self.h.wake(t);
        }
        Ok(n)
    }

    /// Writes at the current end of file and returns the offset used.
    pub fn append(&self, fd: u64, data: &[u8]) -> Result<u64> {
        let of = self.h.ns.fd(fd)?;
        let off = of.entry.state().size;
        self.write(fd, off, data)?;
        Ok(off)
    }

    pub fn fsync(&self, fd: u64) -> Result<()> {
        let of = self.h.ns.fd(fd)?;
        let home = of.entry.state().home.clone();
        home.tier().fsync(home.locator())
    }

    /// Closes `fd`. Closing the last writer seals the file.
    pub fn close(&self, fd: u64) -> Result<()> {
        let of = self.h.ns.close_fd(fd)?;
        self.h.counters.closed.fetch_add(1, Ordering::Relaxed);
        if of.writable {
            let (tier, name, level, size) = {
                let st = of.entry.state();
                if st.unlinked {
                    return Ok(());
                }
                (st.home.tier().clone(), st.home.locator().name.clone(), st.level, st.size)
            };
            tier.sidecar_append(&name, level, size)?;
        }
        Ok(())
    }

    pub fn unlink(&self, path: &str) -> Result<()> {
        self.h.ns.ns_unlink(path)
    }

    pub fn rename(&self, from: &str, to: &str) -> Result<()> {
        Self::check_name(to)?;
        self.h.ns.rename(from, to)
    }

    /// Live logical paths, sorted.
    pub fn list(&self) -> Vec<String> {
        let mut v = self.h.ns.paths();
        v.sort();
        v
    }

    pub fn size(&self, path: &str) -> Result<u64> {
        self.h
            .ns
            .lookup(path)
            .map(|e| e.state().size)
            .ok_or_else(|| Error::NotFound(path.to_string()))
    }

    pub fn exists(&self, path: &str) -> bool {
        self.h.ns.lookup(path).is_some()
    }

    /// Records a new level for a file. If the scheme maps that level to a
    /// slower tier than the file's home, the file is moved there.
    pub fn set_level(&self, path: &str, level: u32) -> Result<()> {
        self.h.ns.set_level(path, Some(level))?;
        let Some(entry) = self.h.ns.lookup(path) else {
            return Ok(());
        };
        let dst = self.h.scheme().tier_for_level(level);
        let (home, sealed) = {
            let st = entry.state();
            (st.home.tier_id(), st.sealed)
        };
        if sealed && dst > home {
            self.h.request_move(entry, dst);
        }
        Ok(())
    }

    /// Tier currently serving reads of `path`.
    pub fn serving_tier(&self, path: &str) -> Result<TierId> {
        let e = self
            .h
            .ns
            .lookup(path)
            .ok_or_else(|| Error::NotFound(path.to_string()))?;
        let st = e.state();
        Ok(st.cached.as_ref().unwrap_or(&st.home).tier_id())
    }
}

impl Drop for TieredFs {
    fn drop(&mut self) {
        self.stop_background();
    }
}
