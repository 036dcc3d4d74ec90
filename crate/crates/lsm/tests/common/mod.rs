#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use tierkv_core::{DeviceProfile, Preset, MiddlewareConfig, PlacementScheme, TieredFs};
use tierkv_lsm::LsmConfig;

pub const MIB: u64 = 1 << 20;

pub fn scheme(fast_levels: usize) -> PlacementScheme {
    PlacementScheme {
        wal_tier: 0,
        level_tier: (0..7).map(|l| usize::from(l >= fast_levels)).collect(),
        cache_budget: vec![0, 0],
        generated_from: BTreeMap::new(),
    }
}

pub fn mcfg() -> MiddlewareConfig {
    MiddlewareConfig {
        background: false,
        ..Default::default()
    }
}

pub fn mount_with(dir: &Path, scheme: PlacementScheme, cfg: MiddlewareConfig) -> Arc<TieredFs> {
    let profiles = (0..2)
        .map(|i| DeviceProfile::unlimited(i, 1 << 30, dir.join(format!("t{i}"))).unwrap())
        .collect();
    Arc::new(TieredFs::mount(profiles, scheme, cfg).unwrap())
}

pub fn mount(dir: &Path) -> Arc<TieredFs> {
    mount_with(dir, scheme(3), mcfg())
}

pub fn small() -> LsmConfig {
    LsmConfig {
        memtable_bytes: 64 * 1024,
        l0_trigger: 2,
        l0_slowdown: 6,
        l0_stop: 10,
        fanout: 4,
        l1_bytes: 128 * 1024,
        target_file_bytes: 64 * 1024,
        threads: 2,
        block_cache_bytes: 256 * 1024,
        value_bytes: 100,
        ..Default::default()
    }
}

pub fn key(i: u64) -> Vec<u8> {
    format!("key{i:08}").into_bytes()
}

pub fn value(i: u64, version: u64, len: usize) -> Vec<u8> {
    let mut v = format!("{i}:{version}:").into_bytes();
    v.resize(len.max(v.len()), b'x');
    v
}

/// NVMM over NVMe with the delay model off: real write parallelism, no
/// waiting.
pub fn mount_fast_presets(dir: &Path, scheme: PlacementScheme, cfg: MiddlewareConfig) -> Arc<TieredFs> {
    let profiles = [Preset::Nvmm, Preset::Nvme]
        .iter()
        .enumerate()
        .map(|(i, p)| p.profile(i, 1 << 30, dir.join(format!("t{i}"))).unwrap())
        .collect();
    let fs = TieredFs::mount(profiles, scheme, cfg).unwrap();
    fs.hierarchy().set_delay(false);
    Arc::new(fs)
}
