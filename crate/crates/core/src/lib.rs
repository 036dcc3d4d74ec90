//! Tier-aware storage middleware for LSM key-value stores.
//!
//! Files are created through [`TieredFs`] with an [`IoContext`] naming the
//! KVS operation behind them. A [`PlacementScheme`] maps that context to a
//! tier, and background workers copy hot files to faster tiers and move
//! cold ones down when space runs short. Every tier is a directory with a
//! delay model that reproduces a device's throughput-vs-concurrency curve.

pub mod cache;
pub mod config;
pub mod context;
pub mod device;
pub mod error;
pub mod fs;
pub mod hierarchy;
pub mod namespace;
pub mod par;
pub mod placement;
pub mod profiler;

/// Tier rank; 0 is the fastest.
pub type TierId = usize;

pub use config::MiddlewareConfig;
pub use context::{ctx_get, ctx_set, scoped, ContextKind, IoContext};
pub use device::{Curve, DeviceProfile, Interpolation, Preset, Tier};
pub use error::{Error, Result};
pub use fs::{OpenFlags, TieredFs};
pub use hierarchy::{Event, EventKind, Hierarchy};
pub use namespace::{FileClass, FileRecord, Namespace};
pub use par::Exec;
pub use placement::{place, PlacementScheme, TierSpace};
