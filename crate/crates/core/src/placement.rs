//! Which tier hosts a newly created file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::context::IoContext;
use crate::error::{Error, Result};
use crate::TierId;

/// Assignment of the WAL and every LSM level to a tier, plus the bytes each
/// tier may spend on cached copies.
#[derive(Debug, Clone, PartialEq)]
pub struct PlacementScheme {
    pub wal_tier: TierId,
    /// Tier of level `i`. Levels past the end use the last entry.
    pub level_tier: Vec<TierId>,
    pub cache_budget: Vec<u64>,
    pub generated_from: BTreeMap<String, String>,
}

impl PlacementScheme {
    pub fn tier_for_level(&self, level: u32) -> TierId {
        let i = (level as usize).min(self.level_tier.len() - 1);
        self.level_tier[i]
    }

    pub fn cache_budget(&self, tier: TierId) -> u64 {
        self.cache_budget.get(tier).copied().unwrap_or(0)
    }

    pub fn num_levels(&self) -> usize {
        self.level_tier.len()
    }

    /// Levels mapped to `tier`.
    pub fn levels_on(&self, tier: TierId) -> Vec<u32> {
        (0..self.level_tier.len() as u32)
            .filter(|&l| self.level_tier[l as usize] == tier)
            .collect()
    }

    /// `H_k` baseline on `num_tiers` tiers: the WAL plus the first `k - 1`
    /// levels on tier 0, everything else on tier 1. `H_5` puts every level
    /// on tier 0.
    pub fn baseline(k: u32, num_levels: usize, num_tiers: usize) -> Result<Self> {
        if !(1..=5).contains(&k) || num_tiers < 2 || num_levels < 2 {
            return Err(Error::InvalidArgument(format!(
                "baseline H{k} needs 1 <= k <= 5, two tiers and two levels"
            )));
        }
        let fast_levels = if k == 5 { num_levels } else { (k - 1) as usize };
        let level_tier = (0..num_levels)
            .map(|l| if l < fast_levels { 0 } else { 1 })
            .collect();
        let mut generated_from = BTreeMap::new();
        generated_from.insert("source".into(), format!("baseline H{k}"));
        Ok(PlacementScheme {
            wal_tier: 0,
            level_tier,
            cache_budget: vec![0; num_tiers],
            generated_from,
        })
    }

    /// Structural checks every scheme must pass.
    pub fn validate(&self, num_tiers: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidScheme(m));
        if self.wal_tier != 0 {
            return bad(format!("wal must be on tier 0, found tier {}", self.wal_tier));
        }
        if self.level_tier.is_empty() {
            return bad("no levels mapped".into());
        }
        for (l, w) in self.level_tier.windows(2).enumerate() {
            if w[1] < w[0] {
                return bad(format!(
                    "L{} on tier {} is faster than L{} on tier {}",
                    l + 1,
                    w[1],
                    l,
                    w[0]
                ));
            }
        }
        if let Some(&t) = self.level_tier.iter().find(|&&t| t >= num_tiers) {
            return bad(format!("tier {t} does not exist ({num_tiers} tiers)"));
        }
        if self.cache_budget.len() > num_tiers {
            return bad("cache budget for a tier that does not exist".into());
        }
        Ok(())
    }

    /// Checks that the critical path (WAL, L0, L1) lives on tier 0.
    pub fn validate_critical(&self) -> Result<()> {
        if self.tier_for_level(0) != 0 || self.tier_for_level(1) != 0 {
            return Err(Error::InvalidScheme(
                "L0 and L1 must be placed on tier 0".into(),
            ));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "wal={}", self.wal_tier);
        for (l, t) in self.level_tier.iter().enumerate() {
            let _ = writeln!(s, "L{l}={t}");
        }
        for (t, b) in self.cache_budget.iter().enumerate() {
            let _ = writeln!(s, "cache{t}={b}");
        }
        if !self.generated_from.is_empty() {
            s.push_str("[provenance]\n");
            for (k, v) in &self.generated_from {
                let _ = writeln!(s, "{k}={v}");
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut wal = None;
        let mut levels: BTreeMap<usize, TierId> = BTreeMap::new();
        let mut cache: BTreeMap<usize, u64> = BTreeMap::new();
        let mut prov = BTreeMap::new();
        let mut in_prov = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line == "[provenance]" {
                in_prov = true;
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Parse(format!("scheme line {}: expected key=value", lineno + 1))
            })?;
            let (k, v) = (k.trim(), v.trim());
            if in_prov {
                prov.insert(k.to_string(), v.to_string());
                continue;
            }
            let num = |s: &str| -> Result<u64> {
                s.parse()
                    .map_err(|_| Error::Parse(format!("scheme line {}: bad number {s:?}", lineno + 1)))
            };
            if k == "wal" {
                wal = Some(num(v)? as TierId);
            } else if let Some(l) = k.strip_prefix('L') {
                levels.insert(num(l)? as usize, num(v)? as TierId);
            } else if let Some(t) = k.strip_prefix("cache") {
                cache.insert(num(t)? as usize, num(v)?);
            } else {
                return Err(Error::Parse(format!(
                    "scheme line {}: unknown key {k:?}",
                    lineno + 1
                )));
            }
        }
        let wal_tier = wal.ok_or_else(|| Error::Parse("scheme has no wal entry".into()))?;
        if levels.is_empty() {
            return Err(Error::Parse("scheme maps no levels".into()));
        }
        let level_tier: Vec<TierId> = levels.values().copied().collect();
        if levels.keys().copied().ne(0..level_tier.len()) {
            return Err(Error::Parse("scheme levels must be L0..Ln without gaps".into()));
        }
        let ncache = cache.keys().max().map_or(0, |m| m + 1);
        let mut cache_budget = vec![0; ncache];
        for (t, b) in cache {
            cache_budget[t] = b;
        }
        Ok(PlacementScheme {
            wal_tier,
            level_tier,
            cache_budget,
            generated_from: prov,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }
}

/// Capacity snapshot of one tier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TierSpace {
    pub capacity: u64,
    pub used: u64,
}

impl TierSpace {
    pub fn free(&self) -> u64 {
        self.capacity.saturating_sub(self.used)
    }
}

fn has_room(space: &[TierSpace], t: TierId, lower_pct: f64) -> bool {
    let s = space[t];
    if t + 1 == space.len() {
        s.free() > 0
    } else {
        s.free() as f64 >= s.capacity as f64 * lower_pct / 100.0 && s.free() > 0
    }
}

/// Tier named by the scheme for files created under `ctx`.
pub fn scheme_tier(ctx: IoContext, scheme: &PlacementScheme, num_tiers: usize) -> Result<TierId> {
    match ctx {
        IoContext::WalWrite => Ok(scheme.wal_tier),
        IoContext::Flush => Ok(scheme.tier_for_level(0)),
        IoContext::Compaction { to, .. } => Ok(scheme.tier_for_level(to)),
        IoContext::Foreground | IoContext::Unknown => Ok(num_tiers - 1),
        IoContext::CacheCopy | IoContext::Migration => Err(Error::InvalidContext(format!(
            "{ctx} files are placed by the cache and migration manager"
        ))),
    }
}

/// Outcome of a placement decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    pub tier: TierId,
    /// Tier named by the scheme, before any spill.
    pub target: TierId,
}

impl Placement {
    pub fn spilled(&self) -> bool {
        self.tier != self.target
    }
}

/// Next tier slower than `from` that still has room.
pub fn overflow_tier(from: TierId, space: &[TierSpace], lower_pct: f64) -> Result<TierId> {
    (from + 1..space.len())
        .find(|&t| has_room(space, t, lower_pct))
        .ok_or_else(|| Error::AllocationFailure(format!("no tier slower than {from} has room")))
}

/// Spill target for files of `level`.
pub fn overflow_tier_for_level(
    level: u32,
    scheme: &PlacementScheme,
    space: &[TierSpace],
    lower_pct: f64,
) -> Result<TierId> {
    overflow_tier(scheme.tier_for_level(level), space, lower_pct)
}

/// Pure placement rule: the scheme's tier, or the next slower tier with
/// room when that tier is below the lower free-space threshold.
pub fn place(
    ctx: IoContext,
    scheme: &PlacementScheme,
    space: &[TierSpace],
    lower_pct: f64,
) -> Result<Placement> {
    let target = scheme_tier(ctx, scheme, space.len())?;
    if target >= space.len() {
        return Err(Error::InvalidScheme(format!("tier {target} does not exist")));
    }
    if has_room(space, target, lower_pct) {
        return Ok(Placement {
            tier: target,
            target,
        });
    }
    let tier = overflow_tier(target, space, lower_pct).map_err(|_| {
        Error::AllocationFailure(format!("all tiers from {target} down are full"))
    })?;
    Ok(Placement { tier, target })
}
