//! Benchmark configuration: tiers, middleware, store and workload settings
//! in one flat `key=value` file.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use tierkv_core::config::parse_kv;
use tierkv_core::{DeviceProfile, MiddlewareConfig, PlacementScheme, Preset, TieredFs};
use tierkv_lsm::LsmConfig;

use crate::workload::WorkloadSpec;

const KIB: u64 = 1 << 10;
const MIB: u64 = 1 << 20;
const GIB: u64 = 1 << 30;

/// Parses `4096`, `64KiB`, `256MiB`, `2GiB` (also `K`, `M`, `G`).
pub fn parse_bytes(s: &str) -> Result<u64> {
    let s = s.trim();
    let split = s.find(|c: char| !c.is_ascii_digit()).unwrap_or(s.len());
    let (num, unit) = s.split_at(split);
    let n: u64 = num.parse().with_context(|| format!("bad size {s:?}"))?;
    let mult = match unit.trim() {
        "" | "B" => 1,
        "K" | "KiB" => KIB,
        "M" | "MiB" => MIB,
        "G" | "GiB" => GIB,
        other => bail!("unknown size unit {other:?} in {s:?}"),
    };
    n.checked_mul(mult).with_context(|| format!("size {s:?} overflows"))
}

#[derive(Debug, Clone, PartialEq)]
pub enum TierSource {
    Preset(Preset),
    /// A device profile file written by `profile-device`.
    File(PathBuf),
}

impl std::str::FromStr for TierSource {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.strip_prefix('@') {
            Some(path) => Ok(TierSource::File(path.into())),
            None => Ok(TierSource::Preset(s.parse()?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TierSpec {
    pub source: TierSource,
    /// Overrides the capacity of a profile file.
    pub capacity: Option<u64>,
}

fn default_capacity(t: usize) -> u64 {
    match t {
        0 => 256 * MIB,
        1 => 4 * GIB,
        _ => 16 * GIB,
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub data_dir: PathBuf,
    pub tiers: Vec<TierSpec>,
    pub scheme: Option<PathBuf>,
    /// Modeled device delays; off runs every tier at full speed.
    pub delay: bool,
    pub middleware: MiddlewareConfig,
    pub lsm: LsmConfig,
    pub workload: WorkloadSpec,
    /// Seconds to wait for compactions after loading.
    pub settle_secs: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            data_dir: PathBuf::from("tierkv-data"),
            tiers: [Preset::Nvmm, Preset::Nvme]
                .into_iter()
                .map(|p| TierSpec {
                    source: TierSource::Preset(p),
                    capacity: None,
                })
                .collect(),
            scheme: None,
            delay: true,
            middleware: MiddlewareConfig::default(),
            lsm: LsmConfig::default(),
            workload: WorkloadSpec::default(),
            settle_secs: 120,
        }
    }
}

impl BenchConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("read {}", path.display()))?;
        let mut c = BenchConfig::default();
        c.apply_text(&text)?;
        Ok(c)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_kv(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "dir" => self.data_dir = v.into(),
            "scheme" => self.scheme = Some(v.into()),
            "delay" => {
                self.delay = match v {
                    "on" | "true" | "1" => true,
                    "off" | "false" | "0" => false,
                    _ => bail!("bad boolean {v:?} for delay"),
                }
            }
            "settle_secs" => self.settle_secs = v.parse().with_context(|| format!("bad value {v:?} for {key}"))?,
            "tiers" => {
                let old = std::mem::take(&mut self.tiers);
                for (i, s) in v.split(',').map(str::trim).enumerate() {
                    self.tiers.push(TierSpec {
                        source: s.parse()?,
                        capacity: old.get(i).and_then(|t| t.capacity),
                    });
                }
                if self.tiers.is_empty() {
                    bail!("tiers must name at least one device");
                }
            }
            _ => {
                if let Some(rest) = key.strip_prefix("tier.") {
                    let (i, field) = rest
                        .split_once('.')
                        .with_context(|| format!("expected tier.<n>.capacity, got {key:?}"))?;
                    let i: usize = i.parse().with_context(|| format!("bad tier index in {key:?}"))?;
                    if field != "capacity" {
                        bail!("unknown tier setting {key:?}");
                    }
                    let spec = self
                        .tiers
                        .get_mut(i)
                        .with_context(|| format!("{key}: tier {i} is not configured"))?;
                    spec.capacity = Some(parse_bytes(v)?);
                } else if let Some(rest) = key.strip_prefix("lsm.") {
                    let v = match parse_bytes(v) {
                        Ok(n) => n.to_string(),
                        Err(_) => v.to_string(),
                    };
                    if !self.lsm.set(rest, &v)? {
                        bail!("unknown setting {key:?}");
                    }
                } else if key.starts_with("workload") {
                    if !self.workload.set(key, v)? {
                        bail!("unknown setting {key:?}");
                    }
                } else if !self.middleware.set(key, v)? {
                    bail!("unknown setting {key:?}");
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.middleware.validate()?;
        self.lsm.validate()?;
        self.workload.validate()?;
        Ok(())
    }

    pub fn tier_dir(&self, t: usize) -> PathBuf {
        self.data_dir.join(format!("tier{t}"))
    }

    /// Device profiles, fastest first, backed by directories under
    /// `data_dir`.
    pub fn profiles(&self) -> Result<Vec<DeviceProfile>> {
        self.tiers
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let dir = self.tier_dir(i);
                let p = match &spec.source {
                    TierSource::Preset(p) => {
                        p.profile(i, spec.capacity.unwrap_or(default_capacity(i)), dir)?
                    }
                    TierSource::File(path) => {
                        let mut p = DeviceProfile::load(path)?;
                        p.tier_id = i;
                        p.backing_path = dir;
                        if let Some(c) = spec.capacity {
                            p.capacity_bytes = c;
                        }
                        p.validate()?;
                        p
                    }
                };
                Ok(p)
            })
            .collect()
    }

    pub fn load_scheme(&self) -> Result<Option<PlacementScheme>> {
        self.scheme
            .as_ref()
            .map(|p| PlacementScheme::load(p).with_context(|| format!("scheme {}", p.display())))
            .transpose()
    }

    pub fn mount(&self, scheme: PlacementScheme) -> Result<Arc<TieredFs>> {
        let fs = TieredFs::mount(self.profiles()?, scheme, self.middleware.clone())?;
        if !self.delay {
            fs.hierarchy().set_delay(false);
        }
        Ok(Arc::new(fs))
    }
}
