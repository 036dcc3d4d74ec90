#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use tierkv_bench::BenchConfig;
use tierkv_core::PlacementScheme;
use tierkv_lsm::Store;

/// Two unthrottled tiers and a store small enough to flush and compact
/// within a few thousand writes.
pub const SMALL_CONF: &str = "\
delay = off
tier.0.capacity = 64MiB
tier.1.capacity = 1GiB
lsm.memtable_bytes = 64KiB
lsm.l1_bytes = 256KiB
lsm.fanout = 4
lsm.target_file_bytes = 64KiB
lsm.threads = 2
lsm.block_cache_bytes = 256KiB
workload = a
workload.records = 2000
workload.operations = 2000
workload.clients = 2
workload.value_bytes = 100
settle_secs = 30
";

pub fn small_config(dir: &Path) -> BenchConfig {
    let mut c = BenchConfig::default();
    c.apply_text(SMALL_CONF).unwrap();
    c.data_dir = dir.to_path_buf();
    c
}

pub fn h3(cfg: &BenchConfig) -> PlacementScheme {
    PlacementScheme::baseline(3, cfg.lsm.num_levels, cfg.tiers.len()).unwrap()
}

pub fn open(cfg: &BenchConfig, scheme: PlacementScheme) -> Store {
    Store::open(cfg.mount(scheme).unwrap(), cfg.lsm.clone()).unwrap()
}

pub fn open_arc(cfg: &BenchConfig, scheme: PlacementScheme) -> Arc<Store> {
    Arc::new(open(cfg, scheme))
}

pub fn all_keys(store: &Store) -> Vec<(Vec<u8>, Vec<u8>)> {
    store.scan(b"", usize::MAX).unwrap()
}
