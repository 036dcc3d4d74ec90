use std::sync::atomic::{AtomicI64, AtomicU64, AtomicU8, Ordering};

use crate::TierId;

const EMPTY: u8 = 0;
const HIT: u8 = 1;
const MISS: u8 = 2;

/// Sliding window over the last `len` foreground reads that could have been
/// served by a tier. Lock-free: a ring of outcome slots plus running totals.
#[derive(Debug)]
pub struct HitRatioWindow {
    tier: TierId,
    ring: Box<[AtomicU8]>,
    pos: AtomicU64,
    hits: AtomicI64,
    misses: AtomicI64,
    threshold: f64,
}

impl HitRatioWindow {
    pub fn new(tier: TierId, len: usize, threshold: f64) -> Self {
        assert!(len > 0, "window length must be positive");
        HitRatioWindow {
            tier,
            ring: (0..len).map(|_| AtomicU8::new(EMPTY)).collect(),
            pos: AtomicU64::new(0),
            hits: AtomicI64::new(0),
            misses: AtomicI64::new(0),
            threshold,
        }
    }

    pub fn tier(&self) -> TierId {
        self.tier
    }

    pub fn len(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples() == 0
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn record(&self, hit: bool) {
        let i = self.pos.fetch_add(1, Ordering::AcqRel) % self.ring.len() as u64;
        let new = if hit { HIT } else { MISS };
        let old = self.ring[i as usize].swap(new, Ordering::AcqRel);
        self.bump(new, 1);
        self.bump(old, -1);
    }

    fn bump(&self, v: u8, d: i64) {
        match v {
            HIT => self.hits.fetch_add(d, Ordering::AcqRel),
            MISS => self.misses.fetch_add(d, Ordering::AcqRel),
            _ => 0,
        };
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Acquire).max(0) as u64
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Acquire).max(0) as u64
    }

    pub fn samples(&self) -> u64 {
        self.hits() + self.misses()
    }

    /// `None` until at least one read has been recorded.
    pub fn ratio(&self) -> Option<f64> {
        let (h, m) = (self.hits(), self.misses());
        (h + m > 0).then(|| h as f64 / (h + m) as f64)
    }

    pub fn below_threshold(&self) -> bool {
        self.ratio().is_some_and(|r| r < self.threshold)
    }

    pub fn reset(&self) {
        for s in self.ring.iter() {
            let old = s.swap(EMPTY, Ordering::AcqRel);
            self.bump(old, -1);
        }
    }
}
