mod common;

use std::collections::VecDeque;
use std::time::Duration;

use common::*;
use tierkv_core::cache::{HitRatioWindow, WriterRegistry, WriterSource};
use tierkv_core::device::Area;
use tierkv_core::{EventKind, IoContext, OpenFlags};

fn fg_reads(fs: &tierkv_core::TieredFs, name: &str, n: usize) {
    let _g = tierkv_core::scoped(IoContext::Foreground);
    let fd = fs.open(name, OpenFlags::READ, None).unwrap();
    for _ in 0..n {
        fs.read(fd, 0, 16).unwrap();
    }
    fs.close(fd).unwrap();
}

#[test]
fn window_matches_replay_oracle() {
    let len = 250;
    let w = HitRatioWindow::new(0, len, 0.8);
    let mut model: VecDeque<bool> = VecDeque::new();
    let mut x = 12345u64;
    for _ in 0..1000 {
        x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let hit = (x >> 33) % 10 < 3;
        w.record(hit);
        model.push_back(hit);
        if model.len() > len {
            model.pop_front();
        }
        let hits = model.iter().filter(|&&h| h).count() as f64;
        assert_eq!(w.ratio(), Some(hits / model.len() as f64));
    }
}

#[test]
fn miss_on_faster_tiers_hit_on_serving_tier() {
    let r = rig(&[64 * MIB, 64 * MIB, 64 * MIB], scheme(3, 0), manual());
    let fs = &r.fs;
    put_file(fs, "deep.sst", compaction(6), 100);
    fg_reads(fs, "deep.sst", 1);
    let h = fs.hierarchy();
    assert_eq!((h.window(0).hits(), h.window(0).misses()), (0, 1));
    assert_eq!((h.window(1).hits(), h.window(1).misses()), (0, 1));
    assert_eq!((h.window(2).hits(), h.window(2).misses()), (1, 0));
}

#[test]
fn monitor_picks_hottest_uncached_file() {
    let r = rig(&[64 * MIB, 64 * MIB], scheme(2, 32 * MIB), manual());
    let fs = &r.fs;
    let h = fs.hierarchy();
    for (name, reads) in [("a.sst", 3), ("b.sst", 9), ("c.sst", 5)] {
        put_file(fs, name, compaction(3), 1000);
        fg_reads(fs, name, reads);
    }
    // ratio 0 < 0.8
    let t = h.monitor_tick(0).unwrap();
    assert_eq!((t.logical_path.as_str(), t.src_tier, t.dst_tier), ("b.sst", 1, 0));
    // pinned while queued
    let t2 = h.monitor_tick(0).unwrap();
    assert_eq!(t2.logical_path, "c.sst");
    let mut s = h.registry().try_acquire(0, WriterSource::CacheCopy).unwrap();
    h.execute_cache_copy(&t, &mut s).unwrap();
    h.execute_cache_copy(&t2, &mut s).unwrap();
    drop(s);
    assert_eq!(h.cache_step(0).unwrap().as_deref(), Some("a.sst"));
    // everything is cached
    assert!(h.monitor_tick(0).is_none());
}

#[test]
fn no_task_above_threshold() {
    let r = rig(&[64 * MIB, 64 * MIB], scheme(2, 32 * MIB), manual());
    let fs = &r.fs;
    let h = fs.hierarchy();
    put_file(fs, "x.sst", compaction(3), 1000);
    put_file(fs, "y.sst", compaction(1), 1000);
    fg_reads(fs, "y.sst", 9);
    fg_reads(fs, "x.sst", 1);
    assert!(h.window(0).ratio().unwrap() >= 0.8);
    assert!(h.monitor_tick(0).is_none());
}

#[test]
fn copy_halves_the_counter_and_is_byte_identical() {
    let r = rig(&[64 * MIB, 64 * MIB], scheme(2, 32 * MIB), manual());
    let fs = &r.fs;
    let h = fs.hierarchy();
    let data = put_file(fs, "h.sst", compaction(4), 200_000);
    fg_reads(fs, "h.sst", 8);
    assert!(h.cache_step(0).unwrap().is_some());
    let e = h.namespace().lookup("h.sst").unwrap();
    assert_eq!(e.access_count(), 4.0);
    assert_eq!(read_all(fs, "h.sst"), data);
    assert_eq!(h.tier(1).size(&tierkv_core::device::Locator::data("h.sst")).unwrap(), 200_000);
    let audit = h.audit_cache().unwrap();
    assert_eq!((audit.checked, audit.mismatched.len()), (1, 0));
}

#[test]
fn zero_budget_never_caches() {
    let r = rig(&[64 * MIB, 64 * MIB], scheme(2, 0), manual());
    let fs = &r.fs;
    put_file(fs, "z.sst", compaction(3), 1000);
    fg_reads(fs, "z.sst", 10);
    assert!(fs.hierarchy().monitor_tick(0).is_none());
    assert_eq!(fs.hierarchy().tier(0).cache_used(), 0);
}

#[test]
fn hotter_file_evicts_the_coldest_copy() {
    let r = rig(&[64 * MIB, 64 * MIB], scheme(2, 250_000), manual());
    let fs = &r.fs;
    let h = fs.hierarchy();
    for (name, reads) in [("p.sst", 4), ("q.sst", 6)] {
        put_file(fs, name, compaction(3), 100_000);
        fg_reads(fs, name, reads);
    }
    assert!(h.cache_step(0).unwrap().is_some());
    assert!(h.cache_step(0).unwrap().is_some());
    // q: 6 -> 3, p: 4 -> 2
    put_file(fs, "r.sst", compaction(3), 100_000);
    fg_reads(fs, "r.sst", 20);
    assert_eq!(h.cache_step(0).unwrap().as_deref(), Some("r.sst"));
    let cached: Vec<_> = h
        .namespace()
        .snapshot()
        .into_iter()
        .filter(|r| r.cached_copy_tier.is_some())
        .map(|r| r.logical_path)
        .collect();
    assert_eq!(cached, vec!["q.sst", "r.sst"]);
    assert!(h.tier(0).cache_used() <= 250_000);
    // home files untouched
    assert_eq!(h.tier(1).used(), 300_000);
}

#[test]
fn displacement_needs_a_file_hotter_after_aging() {
    let r = rig(&[64 * MIB, 64 * MIB], scheme(2, 150_000), manual());
    let fs = &r.fs;
    let h = fs.hierarchy();
    put_file(fs, "p.sst", compaction(3), 100_000);
    fg_reads(fs, "p.sst", 6);
    assert!(h.cache_step(0).unwrap().is_some());
    // p: 6 -> 3; s would keep 5 / 2 after its copy
    put_file(fs, "s.sst", compaction(3), 100_000);
    fg_reads(fs, "s.sst", 5);
    assert!(h.monitor_tick(0).is_none());
    fg_reads(fs, "s.sst", 2);
    assert_eq!(h.cache_step(0).unwrap().as_deref(), Some("s.sst"));
    assert!(h.namespace().lookup("p.sst").unwrap().state().cached.is_none());
}

#[test]
fn worker_budgets_follow_active_writers() {
    let reg = WriterRegistry::new(&[4, 16]);
    let w = reg.register(0, WriterSource::Wal);
    let f = reg.register(0, WriterSource::Flush);
    let c1 = reg.register(0, WriterSource::Compaction);
    let c2 = reg.register(0, WriterSource::Compaction);
    assert_eq!(reg.cache_worker_budget(0), 0);
    drop(c2);
    assert_eq!(reg.cache_worker_budget(0), 1);
    drop((w, f, c1));
    assert_eq!(reg.cache_worker_budget(0), 4);
    assert_eq!(reg.migration_worker_budget(1, 16), 16);
    let busy: Vec<_> = (0..10).map(|_| reg.register(1, WriterSource::Compaction)).collect();
    assert_eq!(reg.migration_worker_budget(1, 16), 6);
    drop(busy);
    // forced slots ignore the cap
    let _all: Vec<_> = (0..4).map(|_| reg.try_acquire(0, WriterSource::Migration).unwrap()).collect();
    assert!(reg.try_acquire(0, WriterSource::Migration).is_none());
    let forced = reg.acquire_forced(0);
    assert_eq!(reg.counts(0).migration, 5);
    drop(forced);
}

#[test]
fn kvs_writer_revokes_background_slot() {
    let reg = WriterRegistry::new(&[2]);
    let a = reg.try_acquire(0, WriterSource::CacheCopy).unwrap();
    let b = reg.try_acquire(0, WriterSource::CacheCopy).unwrap();
    let w = reg.register(0, WriterSource::Wal);
    assert!(b.is_revoked() && !a.is_revoked());
    assert_eq!(reg.counts(0).cache_copy, 1);
    drop(w);
    let mut b = b;
    assert!(b.reacquire(Duration::from_millis(10)));
    assert_eq!(reg.counts(0).cache_copy, 2);
    drop((a, b));
    assert_eq!(reg.counts(0).total(), 0);
}

#[test]
fn background_migration_starts_below_upper_threshold() {
    let cap = 10 * MIB;
    let r = rig(&[cap, 64 * MIB], scheme(2, 0), manual());
    let fs = &r.fs;
    let h = fs.hierarchy();
    // 96% full with sealed L1 files
    let file = (cap / 50) as usize;
    for i in 0..48 {
        put_file(fs, &format!("{i:03}.sst"), compaction(1), file);
    }
    let free = h.tier(0).free();
    assert!(free < h.upper_bytes(0) && free >= h.lower_bytes(0));
    let tasks = h.migration_tick(0);
    assert!(!tasks.is_empty());
    let freed: u64 = tasks.iter().map(|_| file as u64).sum();
    assert!(free + freed >= h.upper_bytes(0));
    assert!(free + freed - (file as u64) < h.upper_bytes(0), "no more tasks than needed");
    // a second tick sees the pending bytes and adds nothing
    assert!(h.migration_tick(0).is_empty());
    let mut moved = 0;
    for t in &tasks {
        let mut s = h.registry().try_acquire(1, WriterSource::Migration).unwrap();
        if h.execute_migration(t, &mut s).unwrap() == tierkv_core::namespace::Relocation::Moved {
            moved += 1;
        }
    }
    assert_eq!(moved, tasks.len());
    assert!(h.tier(0).free() >= h.upper_bytes(0));
}

#[test]
fn candidates_prefer_deep_levels_then_lru() {
    let r = rig(&[4 * MIB, 64 * MIB, 64 * MIB], scheme(3, 0), manual());
    let fs = &r.fs;
    let h = fs.hierarchy();
    let mut s = (*h.scheme()).clone();
    s.level_tier = vec![0; 7];
    h.set_scheme(s).unwrap();
    put_file(fs, "l2-hot.sst", compaction(2), 1_000_000);
    put_file(fs, "l5-old.sst", compaction(5), 1_000_000);
    put_file(fs, "l5-new.sst", compaction(5), 1_000_000);
    put_file(fs, "l3.sst", compaction(3), 1_000_000);
    fg_reads(fs, "l5-old.sst", 1);
    fg_reads(fs, "l2-hot.sst", 50);
    fg_reads(fs, "l5-new.sst", 1);
    let order: Vec<_> = h
        .migration_candidates(0)
        .into_iter()
        .map(|(e, _, _)| e.path().to_string())
        .collect();
    assert_eq!(order, ["l5-old.sst", "l5-new.sst", "l3.sst", "l2-hot.sst"]);
    let first: Vec<_> = h.migration_tick(0).into_iter().map(|t| t.logical_path).collect();
    assert_eq!(first, ["l5-old.sst"]);
}

#[test]
fn forced_migration_blocks_the_allocating_create() {
    let cap = 10 * MIB;
    let r = rig(&[cap, 64 * MIB], scheme(2, 0), manual());
    let fs = &r.fs;
    let h = fs.hierarchy();
    // an open file cannot be migrated, so writing it drives free space
    // under the lower threshold
    let fd = fs.open("big.sst", OpenFlags::CREATE, Some(IoContext::Flush)).unwrap();
    let chunk = vec![7u8; 64 * 1024];
    let target = (cap as f64 * 0.985) as u64;
    let mut off = 0;
    while off + chunk.len() as u64 <= target {
        fs.write(fd, off, &chunk).unwrap();
        off += chunk.len() as u64;
    }
    fs.close(fd).unwrap();
    let free = h.tier(0).free();
    assert!(free < h.lower_bytes(0) && free > 0);
    h.events.clear();
    put_file(fs, "new.sst", IoContext::Flush, 1000);
    let ev = h.events.snapshot();
    let start = ev.iter().position(|e| e.kind == EventKind::ForcedMigrationStart).unwrap();
    let end = ev.iter().rposition(|e| e.kind == EventKind::ForcedMigrationEnd).unwrap();
    assert!(start < end);
    assert!(ev[start].free_fraction < 0.02);
    assert!(!ev.iter().any(|e| matches!(e.kind, EventKind::Spill { .. })));
    assert_eq!(fs.serving_tier("new.sst").unwrap(), 0);
    assert_eq!(fs.serving_tier("big.sst").unwrap(), 1);
}

#[test]
fn forced_migration_before_write_admission() {
    let cap = 10 * MIB;
    let r = rig(&[cap, 64 * MIB], scheme(2, 0), manual());
    let fs = &r.fs;
    let h = fs.hierarchy();
    let file = (cap / 50) as usize;
    for i in 0..48 {
        put_file(fs, &format!("{i:03}.sst"), compaction(1), file);
    }
    h.events.clear();
    // this write would leave 1.5% free
    put_file(fs, "w.sst", IoContext::Flush, (cap as f64 * 0.025) as usize);
    let ev = h.events.snapshot();
    assert!(ev.iter().any(|e| e.kind == EventKind::ForcedMigrationStart));
    assert!(h.tier(0).free() >= h.lower_bytes(0));
    assert_eq!(fs.serving_tier("w.sst").unwrap(), 0);
}

#[test]
fn all_tiers_full_is_an_allocation_failure() {
    let r = rig(&[MIB, MIB], scheme(2, 0), manual());
    let fs = &r.fs;
    let fd = fs.open("big.log", OpenFlags::CREATE, Some(IoContext::Unknown)).unwrap();
    fs.write(fd, 0, &vec![0u8; MIB as usize]).unwrap();
    fs.close(fd).unwrap();
    let fd = fs.open("f.sst", OpenFlags::CREATE, Some(IoContext::Flush)).unwrap();
    fs.write(fd, 0, &vec![0u8; MIB as usize]).unwrap();
    fs.close(fd).unwrap();
    let e = fs.open("g.sst", OpenFlags::CREATE, Some(IoContext::Flush)).unwrap_err();
    assert!(matches!(e, tierkv_core::Error::AllocationFailure(_)), "{e}");
}

#[test]
fn background_threads_respect_the_writer_cap() {
    let mut cfg = manual();
    cfg.background = true;
    cfg.cache_tasks_per_tick = 8;
    cfg.monitor_interval = Duration::from_millis(2);
    cfg.audit_interval = Duration::from_millis(2);
    let dir = tempfile::TempDir::new().unwrap();
    let profiles = vec![
        tierkv_core::Preset::Nvmm.profile(0, 64 * MIB, dir.path().join("t0")).unwrap(),
        tierkv_core::Preset::Nvme.profile(1, 256 * MIB, dir.path().join("t1")).unwrap(),
    ];
    let fs = tierkv_core::TieredFs::mount(profiles, scheme(2, 48 * MIB), cfg).unwrap();
    let names: Vec<_> = (0..40).map(|i| format!("{i:03}.sst")).collect();
    for n in &names {
        put_file(&fs, n, compaction(3), 128 * 1024);
    }
    let stop = std::sync::Arc::new(std::sync::atomic::AtomicBool::new(false));
    let fs = std::sync::Arc::new(fs);
    let writer = {
        let (fs, stop) = (fs.clone(), stop.clone());
        std::thread::spawn(move || {
            let mut i = 0;
            while !stop.load(std::sync::atomic::Ordering::Relaxed) {
                let name = format!("w{i}.sst");
                let fd = fs.open(&name, OpenFlags::CREATE, Some(compaction(1))).unwrap();
                fs.write(fd, 0, &[0u8; 4096]).unwrap();
                std::thread::sleep(Duration::from_millis(3));
                fs.close(fd).unwrap();
                fs.unlink(&name).unwrap();
                i += 1;
            }
        })
    };
    for _ in 0..5 {
        for n in &names {
            fg_reads(&fs, n, 2);
        }
    }
    std::thread::sleep(Duration::from_millis(200));
    stop.store(true, std::sync::atomic::Ordering::Relaxed);
    writer.join().unwrap();
    let st = fs.auditor().unwrap().stats();
    assert!(st.samples > 20, "{st:?}");
    assert_eq!(st.violations, 0, "{:?}", fs.auditor().unwrap().violation_log());
    assert!(fs.hierarchy().quiesce(Duration::from_secs(20)));
    let audit = fs.hierarchy().audit_cache().unwrap();
    assert!(audit.checked > 0);
    assert!(audit.mismatched.is_empty());
    assert!(fs.hierarchy().tier(0).cache_used() <= 48 * MIB);
}

#[test]
fn home_space_recovers_after_quiescence() {
    let mut cfg = manual();
    cfg.background = true;
    let cap = 16 * MIB;
    let r = rig(&[cap, 256 * MIB], scheme(2, 0), cfg);
    let fs = &r.fs;
    let h = fs.hierarchy();
    for i in 0..62 {
        put_file(fs, &format!("{i:03}.sst"), compaction(1), 256 * 1024);
    }
    std::thread::sleep(Duration::from_millis(100));
    assert!(h.quiesce(Duration::from_secs(20)));
    assert!(h.tier(0).free() >= h.upper_bytes(0));
    assert_eq!(h.tier(0).cache_used(), 0);
    assert!(h.tier(0).list(Area::Data).iter().all(|n| !n.ends_with(".migrating")));
}
