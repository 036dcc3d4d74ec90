//! A small leveled LSM key-value store whose storage I/O all goes through
//! [`tierkv_core::TieredFs`], tagged with the operation that issued it.
//!
//! Writes go to a WAL and a memtable; full memtables become level-0 tables
//! on a flush thread, and a compaction pool merges level `i` into `i + 1`
//! once a level outgrows its target. A table moving down a level with no
//! overlap changes only its level, which may move it to a slower tier.

mod cache;
mod config;
mod error;
mod format;
mod manifest;
mod memtable;
mod merge;
mod sst;
mod store;
mod version;

pub use cache::BlockCache;
pub use config::LsmConfig;
pub use error::{Error, Result};
pub use memtable::{Memtable, Value, ENTRY_OVERHEAD};
pub use sst::{sst_name, SstMeta};
pub use store::{wal_name, Activity, LsmStats, RecoveryInfo, Store};
