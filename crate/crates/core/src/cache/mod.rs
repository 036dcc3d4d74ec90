//! Persistent read-only caching, capacity migration and the writer
//! registry that keeps both inside each device's write parallelism.

mod audit;
mod manager;
mod migration;
mod policy;
mod registry;
mod window;

use std::sync::Arc;

pub use audit::{CacheAudit, CapAuditor, CapAuditStats};
pub use manager::Manager;
pub use policy::CopyOutcome;
pub use registry::{BgSlot, WriterCounts, WriterGuard, WriterRegistry, WriterSource};
pub use window::HitRatioWindow;

use crate::namespace::FileEntry;
use crate::TierId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskReason {
    HitRatio,
    Capacity,
    Forced,
    TrivialMove,
}

/// Copy of a hot file from its home tier to the cache area one tier up.
#[derive(Debug, Clone)]
pub struct CacheCopyTask {
    pub logical_path: String,
    pub src_tier: TierId,
    pub dst_tier: TierId,
    pub reason: TaskReason,
    pub enqueue_tick: u64,
    pub(crate) entry: Arc<FileEntry>,
    pub(crate) generation: u64,
}

/// Move of a file's home to a slower tier.
#[derive(Debug, Clone)]
pub struct MigrationTask {
    pub logical_path: String,
    pub src_tier: TierId,
    pub dst_tier: TierId,
    pub reason: TaskReason,
    pub enqueue_tick: u64,
    pub(crate) entry: Arc<FileEntry>,
    pub(crate) generation: u64,
    pub(crate) size: u64,
}
