//! Tier storage drivers and the concurrency-dependent delay model.

mod curve;
mod delay;
mod profile;
mod tier;

pub use curve::{Curve, Interpolation};
pub use delay::{blocks, DelayModel, IoGuard, BLOCK};
pub use profile::{DeviceProfile, Preset};
pub use tier::{Area, Locator, Tier, TierStats, TierStatsSnapshot, SIDECAR};
