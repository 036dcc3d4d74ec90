use std::fs::{self, File, OpenOptions};
use std::io::{ErrorKind, Write};
use std::os::unix::fs::FileExt;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use dashmap::DashMap;
use parking_lot::Mutex;

use super::delay::{DelayModel, IoGuard};
use super::{DeviceProfile, Interpolation};
use crate::error::{Error, Result};
use crate::TierId;

pub const SIDECAR: &str = "manifest";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Area {
    Data,
    Cache,
}

impl Area {
    fn dir(self) -> &'static str {
        match self {
            Area::Data => "data",
            Area::Cache => "cache",
        }
    }
}

/// A file's position inside one tier's backing directory.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Locator {
    pub area: Area,
    pub name: String,
}

impl Locator {
    pub fn data(name: impl Into<String>) -> Self {
        Locator {
            area: Area::Data,
            name: name.into(),
        }
    }

    pub fn cache(name: impl Into<String>) -> Self {
        Locator {
            area: Area::Cache,
            name: name.into(),
        }
    }
}

#[derive(Debug)]
struct PhysFile {
    file: File,
    size: Mutex<u64>,
    synced: AtomicU64,
}

#[derive(Debug, Default)]
pub struct TierStats {
    pub reads: AtomicU64,
    pub writes: AtomicU64,
    pub read_bytes: AtomicU64,
    pub write_bytes: AtomicU64,
    pub creates: AtomicU64,
    pub deletes: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TierStatsSnapshot {
    pub reads: u64,
    pub writes: u64,
    pub read_bytes: u64,
    pub write_bytes: u64,
    pub creates: u64,
    pub deletes: u64,
}

/// Directory-backed storage for one tier with logical capacity accounting
/// and a concurrency-dependent delay on every read and write.
#[derive(Debug)]
pub struct Tier {
    profile: DeviceProfile,
    write_model: DelayModel,
    read_model: DelayModel,
    files: DashMap<Locator, Arc<PhysFile>>,
    used: AtomicU64,
    cache_used: AtomicU64,
    sidecar: Mutex<File>,
    crashed: AtomicBool,
    fsync_real: bool,
    stats: TierStats,
}

impl Tier {
    /// Opens (creating if needed) the tier's directories and accounts every
    /// file already present.
    pub fn open(
        profile: DeviceProfile,
        mode: Interpolation,
        dilation: f64,
        fsync_real: bool,
    ) -> Result<Self> {
        profile.validate()?;
        let tier = profile.tier_id;
        let root = profile.backing_path.clone();
        for area in [Area::Data, Area::Cache] {
            let dir = root.join(area.dir());
            fs::create_dir_all(&dir).map_err(|e| Error::io(tier, &dir, e))?;
        }
        let sidecar_path = root.join(SIDECAR);
        let sidecar = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&sidecar_path)
            .map_err(|e| Error::io(tier, &sidecar_path, e))?;
        let t = Tier {
            write_model: DelayModel::new(profile.write_curve.clone(), mode, dilation),
            read_model: DelayModel::new(profile.read_curve.clone(), mode, dilation),
            profile,
            files: DashMap::new(),
            used: AtomicU64::new(0),
            cache_used: AtomicU64::new(0),
            sidecar: Mutex::new(sidecar),
            crashed: AtomicBool::new(false),
            fsync_real,
            stats: TierStats::default(),
        };
        t.rescan()?;
        Ok(t)
    }

    pub fn id(&self) -> TierId {
        self.profile.tier_id
    }

    pub fn profile(&self) -> &DeviceProfile {
        &self.profile
    }

    pub fn capacity(&self) -> u64 {
        self.profile.capacity_bytes
    }

    pub fn used(&self) -> u64 {
        self.used.load(Ordering::Acquire)
    }

    pub fn cache_used(&self) -> u64 {
        self.cache_used.load(Ordering::Acquire)
    }

    pub fn free(&self) -> u64 {
        self.capacity().saturating_sub(self.used())
    }

    pub fn free_fraction(&self) -> f64 {
        self.free() as f64 / self.capacity() as f64
    }

    pub fn write_model(&self) -> &DelayModel {
        &self.write_model
    }

    pub fn read_model(&self) -> &DelayModel {
        &self.read_model
    }

    /// Turns the delay model on or off for both directions.
    pub fn set_delay(&self, on: bool) {
        self.write_model.set_enabled(on);
        self.read_model.set_enabled(on);
    }

    pub fn is_crashed(&self) -> bool {
        self.crashed.load(Ordering::Acquire)
    }

    pub fn stats(&self) -> TierStatsSnapshot {
        let s = &self.stats;
        TierStatsSnapshot {
            reads: s.reads.load(Ordering::Relaxed),
            writes: s.writes.load(Ordering::Relaxed),
            read_bytes: s.read_bytes.load(Ordering::Relaxed),
            write_bytes: s.write_bytes.load(Ordering::Relaxed),
            creates: s.creates.load(Ordering::Relaxed),
            deletes: s.deletes.load(Ordering::Relaxed),
        }
    }

    pub fn path_of(&self, loc: &Locator) -> PathBuf {
        self.profile
            .backing_path
            .join(loc.area.dir())
            .join(&loc.name)
    }

    fn check(&self) -> Result<()> {
        if self.is_crashed() {
            Err(Error::Crashed(self.id()))
        } else {
            Ok(())
        }
    }

    fn get(&self, loc: &Locator) -> Result<Arc<PhysFile>> {
        self.files
            .get(loc)
            .map(|f| f.value().clone())
            .ok_or_else(|| Error::NotFound(self.path_of(loc).display().to_string()))
    }

    fn reserve(&self, delta: u64, area: Area) -> Result<()> {
        if delta == 0 {
            return Ok(());
        }
        let cap = self.capacity();
        self.used
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |u| {
                (u + delta <= cap).then_some(u + delta)
            })
            .map_err(|u| Error::TierFull {
                tier: self.id(),
                requested: delta,
                free: cap.saturating_sub(u),
            })?;
        if area == Area::Cache {
            self.cache_used.fetch_add(delta, Ordering::AcqRel);
        }
        Ok(())
    }

    fn release(&self, bytes: u64, area: Area) {
        self.used.fetch_sub(bytes, Ordering::AcqRel);
        if area == Area::Cache {
            self.cache_used.fetch_sub(bytes, Ordering::AcqRel);
        }
    }

    pub fn exists(&self, loc: &Locator) -> bool {
        self.files.contains_key(loc)
    }

    pub fn create(&self, loc: &Locator) -> Result<()> {
        self.check()?;
        let path = self.path_of(loc);
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                if e.kind() == ErrorKind::AlreadyExists {
                    Error::Conflict(path.display().to_string())
                } else {
                    Error::io(self.id(), &path, e)
                }
            })?;
        self.files.insert(
            loc.clone(),
            Arc::new(PhysFile {
                file,
                size: Mutex::new(0),
                synced: AtomicU64::new(0),
            }),
        );
        self.stats.creates.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    pub fn size(&self, loc: &Locator) -> Result<u64> {
        Ok(*self.get(loc)?.size.lock())
    }

    pub fn write(&self, loc: &Locator, offset: u64, payload: &[u8]) -> Result<usize> {
        if payload.is_empty() {
            return Err(Error::InvalidArgument("empty write".into()));
        }
        self.check()?;
        let pf = self.get(loc)?;
        {
            let mut size = pf.size.lock();
            let end = offset + payload.len() as u64;
            if end > *size {
                self.reserve(end - *size, loc.area)?;
                *size = end;
            }
        }
        let guard = self.write_model.begin(payload.len());
        pf.file
            .write_all_at(payload, offset)
            .map_err(|e| Error::io(self.id(), self.path_of(loc), e))?;
        guard.complete();
        self.stats.writes.fetch_add(1, Ordering::Relaxed);
        self.stats
            .write_bytes
            .fetch_add(payload.len() as u64, Ordering::Relaxed);
        Ok(payload.len())
    }

    /// Reads up to `len` bytes; the result is short only at end of file.
    pub fn read(&self, loc: &Locator, offset: u64, len: usize) -> Result<Vec<u8>> {
        self.check()?;
        let pf = self.get(loc)?;
        let size = *pf.size.lock();
        let n = (size.saturating_sub(offset)).min(len as u64) as usize;
        let mut buf = vec![0u8; n];
        if n == 0 {
            return Ok(buf);
        }
        let guard: IoGuard<'_> = self.read_model.begin(n);
        pf.file
            .read_exact_at(&mut buf, offset)
            .map_err(|e| Error::io(self.id(), self.path_of(loc), e))?;
        guard.complete();
        self.stats.reads.fetch_add(1, Ordering::Relaxed);
        self.stats.read_bytes.fetch_add(n as u64, Ordering::Relaxed);
        Ok(buf)
    }

    /// Reads the whole file without charging the delay model or stats.
    pub fn read_untimed(&self, loc: &Locator) -> Result<Vec<u8>> {
        self.check()?;
        let pf = self.get(loc)?;
        let size = *pf.size.lock();
        let mut buf = vec![0u8; size as usize];
        pf.file
            .read_exact_at(&mut buf, 0)
            .map_err(|e| Error::io(self.id(), self.path_of(loc), e))?;
        Ok(buf)
    }

    pub fn fsync(&self, loc: &Locator) -> Result<()> {
        self.check()?;
        let pf = self.get(loc)?;
        let size = *pf.size.lock();
        if pf.synced.load(Ordering::Acquire) == size {
            return Ok(());
        }
        if self.fsync_real {
            pf.file
                .sync_data()
                .map_err(|e| Error::io(self.id(), self.path_of(loc), e))?;
        }
        pf.synced.fetch_max(size, Ordering::AcqRel);
        Ok(())
    }

    pub fn delete(&self, loc: &Locator) -> Result<()> {
        self.check()?;
        let (_, pf) = self
            .files
            .remove(loc)
            .ok_or_else(|| Error::NotFound(self.path_of(loc).display().to_string()))?;
        let path = self.path_of(loc);
        let size = *pf.size.lock();
        drop(pf);
        match fs::remove_file(&path) {
            Ok(()) => {}
            Err(e) if e.kind() == ErrorKind::NotFound => {}
            Err(e) => return Err(Error::io(self.id(), &path, e)),
        }
        self.release(size, loc.area);
        self.stats.deletes.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    /// Renames a file within one area of this tier.
    pub fn rename(&self, from: &Locator, to: &Locator) -> Result<()> {
        self.check()?;
        if from.area != to.area {
            return Err(Error::InvalidArgument("rename across areas".into()));
        }
        if self.files.contains_key(to) {
            return Err(Error::Conflict(self.path_of(to).display().to_string()));
        }
        let (_, pf) = self
            .files
            .remove(from)
            .ok_or_else(|| Error::NotFound(self.path_of(from).display().to_string()))?;
        let (src, dst) = (self.path_of(from), self.path_of(to));
        if let Err(e) = fs::rename(&src, &dst) {
            self.files.insert(from.clone(), pf);
            return Err(Error::io(self.id(), &src, e));
        }
        self.files.insert(to.clone(), pf);
        Ok(())
    }

    pub fn list(&self, area: Area) -> Vec<String> {
        let mut names: Vec<String> = self
            .files
            .iter()
            .filter(|e| e.key().area == area)
            .map(|e| e.key().name.clone())
            .collect();
        names.sort();
        names
    }

    /// Rebuilds the file table and accounting from the backing directories.
    /// Returns the accounted bytes.
    pub fn rescan(&self) -> Result<u64> {
        self.files.clear();
        let mut total = 0;
        let mut cache = 0;
        for area in [Area::Data, Area::Cache] {
            let dir = self.profile.backing_path.join(area.dir());
            let rd = fs::read_dir(&dir).map_err(|e| Error::io(self.id(), &dir, e))?;
            for ent in rd {
                let ent = ent.map_err(|e| Error::io(self.id(), &dir, e))?;
                let path = ent.path();
                if !path.is_file() {
                    continue;
                }
                let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
                    continue;
                };
                let file = OpenOptions::new()
                    .read(true)
                    .write(true)
                    .open(&path)
                    .map_err(|e| Error::io(self.id(), &path, e))?;
                let len = file
                    .metadata()
                    .map_err(|e| Error::io(self.id(), &path, e))?
                    .len();
                total += len;
                if area == Area::Cache {
                    cache += len;
                }
                self.files.insert(
                    Locator {
                        area,
                        name: name.to_string(),
                    },
                    Arc::new(PhysFile {
                        file,
                        size: Mutex::new(len),
                        synced: AtomicU64::new(len),
                    }),
                );
            }
        }
        self.used.store(total, Ordering::Release);
        self.cache_used.store(cache, Ordering::Release);
        Ok(total)
    }

    /// Sum of the on-disk lengths of every file, independent of accounting.
    pub fn physical_bytes(&self) -> Result<u64> {
        let mut total = 0;
        for area in [Area::Data, Area::Cache] {
            let dir = self.profile.backing_path.join(area.dir());
            for ent in fs::read_dir(&dir).map_err(|e| Error::io(self.id(), &dir, e))? {
                let ent = ent.map_err(|e| Error::io(self.id(), &dir, e))?;
                let md = ent.metadata().map_err(|e| Error::io(self.id(), &dir, e))?;
                if md.is_file() {
                    total += md.len();
                }
            }
        }
        Ok(total)
    }

    /// Appends one `<filename> <level|-> <size>` line to the sidecar.
    pub fn sidecar_append(&self, name: &str, level: Option<u32>, size: u64) -> Result<()> {
        self.check()?;
        let lvl = level.map_or_else(|| "-".to_string(), |l| l.to_string());
        let mut f = self.sidecar.lock();
        writeln!(f, "{name} {lvl} {size}")
            .map_err(|e| Error::io(self.id(), self.sidecar_path(), e))?;
        if self.fsync_real {
            f.sync_data()
                .map_err(|e| Error::io(self.id(), self.sidecar_path(), e))?;
        }
        Ok(())
    }

    pub fn sidecar_path(&self) -> PathBuf {
        self.profile.backing_path.join(SIDECAR)
    }

    /// Last recorded level for every file named in the sidecar.
    pub fn sidecar_levels(&self) -> Result<std::collections::HashMap<String, Option<u32>>> {
        let path = self.sidecar_path();
        let text = fs::read_to_string(&path).map_err(|e| Error::io(self.id(), &path, e))?;
        let mut out = std::collections::HashMap::new();
        for line in text.lines() {
            let mut it = line.split_whitespace();
            let (Some(name), Some(lvl)) = (it.next(), it.next()) else {
                continue;
            };
            let level = if lvl == "-" { None } else { lvl.parse().ok() };
            out.insert(name.to_string(), level);
        }
        Ok(out)
    }

    /// Replaces the sidecar with exactly the given entries.
    pub fn sidecar_rewrite(&self, entries: &[(String, Option<u32>, u64)]) -> Result<()> {
        self.check()?;
        let path = self.sidecar_path();
        let tmp = path.with_extension("tmp");
        let mut text = String::new();
        for (name, level, size) in entries {
            let lvl = level.map_or_else(|| "-".to_string(), |l| l.to_string());
            text.push_str(&format!("{name} {lvl} {size}\n"));
        }
        fs::write(&tmp, text).map_err(|e| Error::io(self.id(), &tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(self.id(), &path, e))?;
        let f = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(self.id(), &path, e))?;
        *self.sidecar.lock() = f;
        Ok(())
    }

    /// Simulates power loss: every file loses the bytes written since its
    /// last fsync and all further operations fail.
    pub fn crash(&self) {
        if self.crashed.swap(true, Ordering::AcqRel) {
            return;
        }
        for ent in self.files.iter() {
            let pf = ent.value();
            let synced = pf.synced.load(Ordering::Acquire);
            let _ = pf.file.set_len(synced);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::Preset;

    fn tier(cap: u64) -> (tempfile::TempDir, Tier) {
        let dir = tempfile::tempdir().unwrap();
        let p = DeviceProfile::unlimited(0, cap, dir.path()).unwrap();
        let t = Tier::open(p, Interpolation::Linear, 1.0, false).unwrap();
        (dir, t)
    }

    #[test]
    fn create_delete_restores_usage() {
        let (_d, t) = tier(1 << 20);
        let loc = Locator::data("a");
        t.create(&loc).unwrap();
        t.write(&loc, 0, &[1; 5000]).unwrap();
        assert_eq!(t.used(), 5000);
        t.delete(&loc).unwrap();
        assert_eq!(t.used(), 0);
    }

    #[test]
    fn tier_full_is_distinct() {
        let (_d, t) = tier(10_000);
        let loc = Locator::data("a");
        t.create(&loc).unwrap();
        t.write(&loc, 0, &[0; 8000]).unwrap();
        let err = t.write(&loc, 8000, &[0; 4000]).unwrap_err();
        assert!(matches!(err, Error::TierFull { tier: 0, requested: 4000, free: 2000 }));
        assert_eq!(t.used(), 8000);
    }

    #[test]
    fn overwrite_in_place_costs_nothing() {
        let (_d, t) = tier(10_000);
        let loc = Locator::data("a");
        t.create(&loc).unwrap();
        t.write(&loc, 0, &[0; 8000]).unwrap();
        t.write(&loc, 100, &[9; 100]).unwrap();
        assert_eq!(t.used(), 8000);
        assert_eq!(t.read(&loc, 100, 3).unwrap(), vec![9, 9, 9]);
    }

    #[test]
    fn short_read_at_eof() {
        let (_d, t) = tier(1 << 20);
        let loc = Locator::data("a");
        t.create(&loc).unwrap();
        t.write(&loc, 0, b"hello").unwrap();
        assert_eq!(t.read(&loc, 3, 100).unwrap(), b"lo");
        assert!(t.read(&loc, 10, 4).unwrap().is_empty());
    }

    #[test]
    fn missing_file_is_not_found() {
        let (_d, t) = tier(1 << 20);
        assert!(t.delete(&Locator::data("nope")).unwrap_err().is_not_found());
        assert!(t.fsync(&Locator::data("nope")).unwrap_err().is_not_found());
    }

    #[test]
    fn fsync_clean_file_is_noop() {
        let (_d, t) = tier(1 << 20);
        let loc = Locator::data("a");
        t.create(&loc).unwrap();
        t.fsync(&loc).unwrap();
    }

    #[test]
    fn crash_drops_unsynced_tail() {
        let (d, t) = tier(1 << 20);
        let loc = Locator::data("a");
        t.create(&loc).unwrap();
        t.write(&loc, 0, &[1; 100]).unwrap();
        t.fsync(&loc).unwrap();
        t.write(&loc, 100, &[2; 100]).unwrap();
        t.crash();
        assert!(matches!(t.read(&loc, 0, 1), Err(Error::Crashed(0))));
        let p = DeviceProfile::unlimited(0, 1 << 20, d.path()).unwrap();
        let t2 = Tier::open(p, Interpolation::Linear, 1.0, false).unwrap();
        assert_eq!(t2.size(&loc).unwrap(), 100);
        assert_eq!(t2.used(), 100);
    }

    #[test]
    fn rename_keeps_accounting() {
        let (_d, t) = tier(1 << 20);
        let a = Locator::data("a.migrating");
        t.create(&a).unwrap();
        t.write(&a, 0, &[3; 10]).unwrap();
        t.rename(&a, &Locator::data("a")).unwrap();
        assert_eq!(t.list(Area::Data), vec!["a".to_string()]);
        assert_eq!(t.read(&Locator::data("a"), 0, 10).unwrap(), vec![3; 10]);
        assert_eq!(t.used(), 10);
    }

    #[test]
    fn sidecar_last_line_wins() {
        let (_d, t) = tier(1 << 20);
        t.sidecar_append("1.sst", Some(0), 0).unwrap();
        t.sidecar_append("1.sst", Some(2), 100).unwrap();
        t.sidecar_append("2.log", None, 5).unwrap();
        let m = t.sidecar_levels().unwrap();
        assert_eq!(m["1.sst"], Some(2));
        assert_eq!(m["2.log"], None);
    }

    #[test]
    fn delayed_write_single_worker() {
        let dir = tempfile::tempdir().unwrap();
        let p = Preset::Nvmm.profile(0, 1 << 30, dir.path()).unwrap();
        let t = Tier::open(p, Interpolation::Linear, 20.0, false).unwrap();
        let loc = Locator::data("w");
        t.create(&loc).unwrap();
        let start = std::time::Instant::now();
        let n = 500;
        for i in 0..n {
            t.write(&loc, (i % 64) * 4096, &[0; 4096]).unwrap();
        }
        // 250k ops/s dilated 20x is 12.5k ops/s
        let rate = n as f64 / start.elapsed().as_secs_f64() * 20.0;
        assert!((rate - 250_000.0).abs() / 250_000.0 < 0.15, "rate {rate}");
    }
}
