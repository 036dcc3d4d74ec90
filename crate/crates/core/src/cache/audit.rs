use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::Mutex;

use super::WriterRegistry;
use crate::device::Locator;
use crate::error::Result;
use crate::hierarchy::Hierarchy;
use crate::TierId;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CapAuditStats {
    /// Samples checked against the cap.
    pub samples: u64,
    /// Samples skipped because a forced migration overlapped them.
    pub flagged: u64,
    pub violations: u64,
}

/// Periodic check that background writers stay inside each tier's
/// leftover write parallelism.
#[derive(Debug)]
pub struct CapAuditor {
    last_epoch: Mutex<Vec<u64>>,
    samples: AtomicU64,
    flagged: AtomicU64,
    violations: AtomicU64,
    log: Mutex<Vec<String>>,
}

impl CapAuditor {
    pub fn new(num_tiers: usize) -> Self {
        CapAuditor {
            last_epoch: Mutex::new(vec![0; num_tiers]),
            samples: AtomicU64::new(0),
            flagged: AtomicU64::new(0),
            violations: AtomicU64::new(0),
            log: Mutex::new(Vec::new()),
        }
    }

    /// Takes one sample of every tier.
    pub fn sample(&self, reg: &WriterRegistry) {
        let mut last = self.last_epoch.lock();
        for t in 0..reg.num_tiers() {
            let (c, epoch) = reg.snapshot(t);
            let forced = c.forced > 0 || epoch != last[t];
            last[t] = epoch;
            if forced {
                self.flagged.fetch_add(1, Ordering::Relaxed);
                continue;
            }
            self.samples.fetch_add(1, Ordering::Relaxed);
            let cap = reg.max_parallelism(t).saturating_sub(c.kvs());
            if c.background() > cap {
                self.violations.fetch_add(1, Ordering::Relaxed);
                self.log.lock().push(format!("tier {t}: {c:?} exceeds cap {cap}"));
            }
        }
    }

    pub fn stats(&self) -> CapAuditStats {
        CapAuditStats {
            samples: self.samples.load(Ordering::Relaxed),
            flagged: self.flagged.load(Ordering::Relaxed),
            violations: self.violations.load(Ordering::Relaxed),
        }
    }

    pub fn violation_log(&self) -> Vec<String> {
        self.log.lock().clone()
    }
}

/// Result of comparing every cached copy with its home file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CacheAudit {
    pub checked: usize,
    pub mismatched: Vec<String>,
}

impl Hierarchy {
    /// Checksums every cached copy against its home file.
    pub fn audit_cache(&self) -> Result<CacheAudit> {
        let pairs: Vec<(String, TierId, Locator, TierId, Locator)> = self
            .ns
            .entries()
            .into_iter()
            .filter_map(|e| {
                let st = e.state();
                let c = st.cached.as_ref()?;
                Some((
                    e.path().to_string(),
                    st.home.tier_id(),
                    st.home.locator().clone(),
                    c.tier_id(),
                    c.locator().clone(),
                ))
            })
            .collect();
        let results = self.cfg.exec.map(pairs, |(path, ht, hl, ct, cl)| {
            let home = self.tiers[ht].read_untimed(&hl);
            let copy = self.tiers[ct].read_untimed(&cl);
            match (home, copy) {
                (Ok(a), Ok(b)) => Ok((path, crc32fast::hash(&a) == crc32fast::hash(&b) && a.len() == b.len())),
                // dropped between the snapshot and the read
                (Err(e), _) | (_, Err(e)) if e.is_not_found() => Ok((path, true)),
                (Err(e), _) | (_, Err(e)) => Err(e),
            }
        });
        let mut audit = CacheAudit::default();
        for r in results {
            let (path, ok) = r?;
            audit.checked += 1;
            if !ok {
                audit.mismatched.push(path);
            }
        }
        Ok(audit)
    }
}
