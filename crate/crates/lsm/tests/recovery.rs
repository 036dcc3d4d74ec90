mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::*;
use rand::{Rng, SeedableRng};
use tierkv_core::{DeviceProfile, Preset, TieredFs};
use tierkv_lsm::{sst_name, LsmConfig, Store};

fn strict() -> LsmConfig {
    LsmConfig {
        strict_durability: true,
        ..small()
    }
}

fn sst_files(fs: &TieredFs) -> BTreeSet<String> {
    fs.list().into_iter().filter(|n| n.ends_with(".sst")).collect()
}

fn live_files(s: &Store) -> BTreeSet<String> {
    s.tables().iter().flatten().map(|t| sst_name(t.number)).collect()
}

#[test]
fn clean_reopen_replays_nothing() {
    let dir = tempfile::TempDir::new().unwrap();
    let s = Store::open(mount(dir.path()), small()).unwrap();
    for i in 0..3000 {
        s.put(&key(i), &value(i, 0, 100)).unwrap();
    }
    s.close().unwrap();
    let files = s.tables();
    drop(s);
    let s = Store::open(mount(dir.path()), small()).unwrap();
    let info = s.recovery_info();
    assert_eq!((info.wal_records, info.orphans_deleted, info.level_fixups), (0, 0, 0));
    assert_eq!(s.tables(), files);
    for i in (0..3000).step_by(7) {
        assert_eq!(s.get(&key(i)).unwrap(), Some(value(i, 0, 100)));
    }
}

#[test]
fn unflushed_writes_replay_from_the_wal() {
    let dir = tempfile::TempDir::new().unwrap();
    let s = Store::open(mount(dir.path()), strict()).unwrap();
    for i in 0..200 {
        s.put(&key(i), &value(i, 0, 50)).unwrap();
    }
    s.delete(&key(5)).unwrap();
    s.crash();
    drop(s);
    let s = Store::open(mount(dir.path()), strict()).unwrap();
    assert_eq!(s.recovery_info().wal_records, 201);
    assert_eq!(s.get(&key(5)).unwrap(), None);
    assert_eq!(s.get(&key(6)).unwrap(), Some(value(6, 0, 50)));
    assert_eq!(s.last_sequence(), 201);
    s.put(&key(5), b"again").unwrap();
    assert_eq!(s.last_sequence(), 202);
}

#[test]
fn crash_during_flush_leaves_no_duplicates() {
    let dir = tempfile::TempDir::new().unwrap();
    // slow level-0 tier so the crash lands inside the flush
    let profiles = vec![
        Preset::Sata.profile(0, 1 << 30, dir.path().join("t0")).unwrap(),
        DeviceProfile::unlimited(1, 1 << 30, dir.path().join("t1")).unwrap(),
    ];
    let mut sch = scheme(1);
    sch.level_tier[0] = 0;
    let fs = Arc::new(TieredFs::mount(profiles.clone(), sch.clone(), mcfg()).unwrap());
    fs.hierarchy().set_delay(false);
    let cfg = LsmConfig {
        memtable_bytes: 1 << 20,
        ..strict()
    };
    let s = Arc::new(Store::open(fs.clone(), cfg.clone()).unwrap());
    let mut model = BTreeMap::new();
    for i in 0..2000 {
        s.put(&key(i % 1500), &value(i, 0, 100)).unwrap();
        model.insert(key(i % 1500), value(i, 0, 100));
    }
    fs.hierarchy().set_delay(true);
    let flusher = {
        let s = s.clone();
        std::thread::spawn(move || {
            let _ = s.flush();
        })
    };
    let deadline = Instant::now() + Duration::from_secs(10);
    while !s.activity().flushing && Instant::now() < deadline {
        std::thread::yield_now();
    }
    assert!(s.activity().flushing);
    std::thread::sleep(Duration::from_millis(5));
    s.crash();
    flusher.join().unwrap();
    drop(s);
    drop(fs);
    let s = Store::open(Arc::new(TieredFs::mount(profiles, sch, mcfg()).unwrap()), cfg).unwrap();
    let all = s.scan(b"", 1 << 20).unwrap();
    assert_eq!(all, model.into_iter().collect::<Vec<_>>());
    s.check_invariants().unwrap();
    assert_eq!(sst_files(s.fs()), live_files(&s));
}

#[test]
fn crash_during_compaction_keeps_inputs_and_drops_outputs() {
    let dir = tempfile::TempDir::new().unwrap();
    let profiles = || {
        vec![
            DeviceProfile::unlimited(0, 1 << 30, dir.path().join("t0")).unwrap(),
            Preset::Sata.profile(1, 1 << 30, dir.path().join("t1")).unwrap(),
        ]
    };
    let fs = Arc::new(TieredFs::mount(profiles(), scheme(1), mcfg()).unwrap());
    fs.hierarchy().set_delay(false);
    let s = Store::open(fs.clone(), strict()).unwrap();
    let mut model = BTreeMap::new();
    for i in 0..6000u64 {
        let j = (i * 7919) % 6000;
        s.put(&key(j), &value(j, 0, 100)).unwrap();
        model.insert(key(j), value(j, 0, 100));
    }
    s.flush().unwrap();
    assert!(s.wait_idle(Duration::from_secs(60)).unwrap());
    fs.hierarchy().set_delay(true);
    for i in 0..1500u64 {
        let j = (i * 31) % 6000;
        s.put(&key(j), &value(j, 1, 100)).unwrap();
        model.insert(key(j), value(j, 1, 100));
    }
    s.flush().unwrap();
    // wait for a partially written compaction output
    let deadline = Instant::now() + Duration::from_secs(30);
    loop {
        let live = live_files(&s);
        let partial = sst_files(&fs).difference(&live).count();
        if partial > 0 && !s.activity().compactions.is_empty() {
            break;
        }
        assert!(Instant::now() < deadline, "no compaction in flight");
        std::thread::sleep(Duration::from_millis(1));
    }
    s.crash();
    let live_before = live_files(&s);
    drop(s);
    drop(fs);
    let s = Store::open(Arc::new(TieredFs::mount(profiles(), scheme(1), mcfg()).unwrap()), strict()).unwrap();
    assert!(s.recovery_info().orphans_deleted >= 1);
    let after = live_files(&s);
    assert!(after.is_superset(&live_before));
    assert_eq!(sst_files(s.fs()), after);
    s.check_invariants().unwrap();
    assert_eq!(s.scan(b"", 1 << 20).unwrap(), model.into_iter().collect::<Vec<_>>());
}

#[test]
fn acknowledged_writes_survive_random_crashes() {
    let dir = tempfile::TempDir::new().unwrap();
    let mut rng = rand::rngs::StdRng::seed_from_u64(11);
    let mut model: BTreeMap<Vec<u8>, Vec<u8>> = BTreeMap::new();
    let mut op = 0u64;
    for round in 0..4 {
        let s = Arc::new(Store::open(mount(dir.path()), strict()).unwrap());
        let stop = Arc::new(AtomicBool::new(false));
        let worker = {
            let (s, stop) = (s.clone(), stop.clone());
            let seed = rng.gen::<u64>();
            let start = op;
            std::thread::spawn(move || {
                let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
                let mut acked = Vec::new();
                let mut n = start;
                while !stop.load(Ordering::Relaxed) {
                    n += 1;
                    let k = key(rng.gen_range(0..2000));
                    let v = (rng.gen_range(0..8) != 0).then(|| value(n, n, rng.gen_range(20..300)));
                    let r = match &v {
                        Some(v) => s.put(&k, v),
                        None => s.delete(&k),
                    };
                    if r.is_err() {
                        return (acked, Some((k, v)), n);
                    }
                    acked.push((k, v));
                }
                (acked, None, n)
            })
        };
        std::thread::sleep(Duration::from_millis(rng.gen_range(100..400)));
        s.crash();
        stop.store(true, Ordering::Relaxed);
        let (acked, in_flight, n) = worker.join().unwrap();
        op = n;
        drop(s);
        for (k, v) in acked {
            match v {
                Some(v) => model.insert(k, v),
                None => model.remove(&k),
            };
        }
        let s = Store::open(mount(dir.path()), strict()).unwrap();
        if let Some((k, v)) = in_flight {
            // an unacknowledged write may or may not have landed
            let got = s.get(&k).unwrap();
            assert!(got == v || got == model.get(&k).cloned(), "round {round}");
            match got {
                Some(g) => model.insert(k, g),
                None => model.remove(&k),
            };
        }
        s.check_invariants().unwrap();
        let all = s.scan(b"", 1 << 20).unwrap();
        assert_eq!(all.len(), model.len(), "round {round}");
        assert!(all.iter().eq(model.iter().map(|(a, b)| (a.clone(), b.clone())).collect::<Vec<_>>().iter()));
        s.close().unwrap();
    }
}
