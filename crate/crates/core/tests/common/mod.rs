#![allow(dead_code)]

use std::path::Path;

use tempfile::TempDir;
use tierkv_core::{
    DeviceProfile, IoContext, MiddlewareConfig, OpenFlags, PlacementScheme, TieredFs,
};

pub const MIB: u64 = 1 << 20;

pub fn unlimited(dir: &Path, caps: &[u64]) -> Vec<DeviceProfile> {
    caps.iter()
        .enumerate()
        .map(|(i, &c)| DeviceProfile::unlimited(i, c, dir.join(format!("t{i}"))).unwrap())
        .collect()
}

/// Hand-driven config: no background threads, a short hit-ratio window.
pub fn manual() -> MiddlewareConfig {
    MiddlewareConfig {
        background: false,
        cache_window: 100,
        ..MiddlewareConfig::default()
    }
}

/// L0 and L1 on tier 0, deeper levels on tier 1 (and the last on tier 2
/// when there are three tiers).
pub fn scheme(tiers: usize, cache0: u64) -> PlacementScheme {
    let mut s = PlacementScheme::parse(match tiers {
        2 => "wal=0\nL0=0\nL1=0\nL2=1\nL3=1\nL4=1\nL5=1\nL6=1\n",
        _ => "wal=0\nL0=0\nL1=0\nL2=1\nL3=1\nL4=1\nL5=2\nL6=2\n",
    })
    .unwrap();
    s.cache_budget = vec![0; tiers];
    s.cache_budget[0] = cache0;
    s
}

pub struct Rig {
    pub dir: TempDir,
    pub fs: TieredFs,
}

pub fn rig(caps: &[u64], scheme: PlacementScheme, cfg: MiddlewareConfig) -> Rig {
    let dir = TempDir::new().unwrap();
    let fs = TieredFs::mount(unlimited(dir.path(), caps), scheme, cfg).unwrap();
    Rig { dir, fs }
}

pub fn remount(r: Rig, cfg: MiddlewareConfig) -> Rig {
    let profiles = unlimited(r.dir.path(), &caps_of(&r.fs));
    let scheme = (*r.fs.hierarchy().scheme()).clone();
    let Rig { dir, fs } = r;
    drop(fs);
    let fs = TieredFs::mount(profiles, scheme, cfg).unwrap();
    Rig { dir, fs }
}

pub fn caps_of(fs: &TieredFs) -> Vec<u64> {
    fs.hierarchy().tiers().iter().map(|t| t.capacity()).collect()
}

pub fn payload(name: &str, len: usize) -> Vec<u8> {
    let seed = name.bytes().fold(7u32, |a, b| a.wrapping_mul(31).wrapping_add(b as u32));
    (0..len).map(|i| (seed.wrapping_add(i as u32 * 13) >> 3) as u8).collect()
}

/// Creates, fills, fsyncs and closes a file.
pub fn put_file(fs: &TieredFs, name: &str, ctx: IoContext, len: usize) -> Vec<u8> {
    let data = payload(name, len);
    let fd = fs.open(name, OpenFlags::CREATE, Some(ctx)).unwrap();
    fs.write(fd, 0, &data).unwrap();
    fs.fsync(fd).unwrap();
    fs.close(fd).unwrap();
    data
}

pub fn read_all(fs: &TieredFs, name: &str) -> Vec<u8> {
    let fd = fs.open(name, OpenFlags::READ, None).unwrap();
    let n = fs.size(name).unwrap() as usize;
    let v = fs.read(fd, 0, n).unwrap();
    fs.close(fd).unwrap();
    v
}

pub fn compaction(to: u32) -> IoContext {
    IoContext::Compaction { from: to - 1, to }
}
