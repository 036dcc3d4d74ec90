//! YCSB-style operation streams.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Zipf};

/// Fraction of each operation type. Fractions must sum to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mix {
    pub read: f64,
    pub update: f64,
    pub insert: f64,
    pub scan: f64,
    pub read_modify_write: f64,
}

impl Mix {
    pub const fn new(read: f64, update: f64, insert: f64, scan: f64, rmw: f64) -> Self {
        Mix {
            read,
            update,
            insert,
            scan,
            read_modify_write: rmw,
        }
    }

    pub fn reads_only() -> Self {
        Mix::new(1.0, 0.0, 0.0, 0.0, 0.0)
    }

    fn parts(&self) -> [f64; 5] {
        [self.read, self.update, self.insert, self.scan, self.read_modify_write]
    }

    /// Fraction of operations that write.
    pub fn write_fraction(&self) -> f64 {
        self.update + self.insert + self.read_modify_write
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KeyDistribution {
    Zipfian(f64),
    Uniform,
    /// Skewed toward the most recently inserted keys.
    Latest,
}

impl std::str::FromStr for KeyDistribution {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(KeyDistribution::Uniform),
            "latest" => Ok(KeyDistribution::Latest),
            "zipfian" | "zipf" => Ok(KeyDistribution::Zipfian(0.99)),
            _ => {
                let theta = s
                    .strip_prefix("zipfian:")
                    .or_else(|| s.strip_prefix("zipf:"))
                    .with_context(|| format!("unknown key distribution {s:?}"))?;
                Ok(KeyDistribution::Zipfian(theta.parse().with_context(|| {
                    format!("bad zipfian constant {theta:?}")
                })?))
            }
        }
    }
}

impl fmt::Display for KeyDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KeyDistribution::Zipfian(t) => write!(f, "zipfian:{t}"),
            KeyDistribution::Uniform => f.write_str("uniform"),
            KeyDistribution::Latest => f.write_str("latest"),
        }
    }
}

/// Skew used for `Latest`.
const LATEST_THETA: f64 = 0.99;

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    pub name: String,
    pub mix: Mix,
    pub distribution: KeyDistribution,
    pub record_count: u64,
    pub operation_count: u64,
    pub client_threads: usize,
    pub value_bytes: usize,
    pub seed: u64,
    /// Scan lengths are uniform in `1..=max_scan`.
    pub max_scan: usize,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec::ycsb('a').expect("preset")
    }
}

impl WorkloadSpec {
    /// Standard YCSB core workloads A to F at desk scale.
    pub fn ycsb(letter: char) -> Result<Self> {
        let z = KeyDistribution::Zipfian(0.99);
        let (mix, distribution) = match letter.to_ascii_lowercase() {
            'a' => (Mix::new(0.5, 0.5, 0.0, 0.0, 0.0), z),
            'b' => (Mix::new(0.95, 0.05, 0.0, 0.0, 0.0), z),
            'c' => (Mix::reads_only(), z),
            'd' => (Mix::new(0.95, 0.0, 0.05, 0.0, 0.0), KeyDistribution::Latest),
            'e' => (Mix::new(0.0, 0.0, 0.05, 0.95, 0.0), z),
            'f' => (Mix::new(0.5, 0.0, 0.0, 0.0, 0.5), z),
            other => bail!("unknown YCSB workload {other:?}"),
        };
        Ok(WorkloadSpec {
            name: format!("ycsb-{}", letter.to_ascii_lowercase()),
            mix,
            distribution,
            record_count: 200_000,
            operation_count: 500_000,
            client_threads: 4,
            value_bytes: 1024,
            seed: 42,
            max_scan: 100,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let parts = self.mix.parts();
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) {
            bail!("operation fractions must lie in [0, 1]");
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            bail!("operation fractions sum to {sum}, expected 1");
        }
        if let KeyDistribution::Zipfian(t) = self.distribution {
            if !(t > 0.0 && t < 1.0) {
                bail!("zipfian constant {t} must lie in (0, 1)");
            }
        }
        if self.client_threads == 0 {
            bail!("client_threads must be positive");
        }
        if self.max_scan == 0 {
            bail!("max_scan must be positive");
        }
        let needs_keys = self.mix.read + self.mix.update + self.mix.scan + self.mix.read_modify_write > 0.0;
        if needs_keys && self.record_count == 0 && self.operation_count > 0 {
            bail!("operations on existing keys need record_count > 0");
        }
        Ok(())
    }

    /// Applies one `workload.*` setting. Returns `Ok(false)` for other keys.
    pub fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        let p = |what: &str| format!("bad value {v:?} for {what}");
        match key {
            "workload" => {
                let letter = v.chars().next().with_context(|| p(key))?;
                let base = WorkloadSpec::ycsb(letter)?;
                self.name = base.name;
                self.mix = base.mix;
                self.distribution = base.distribution;
            }
            "workload.records" => self.record_count = v.parse().with_context(|| p(key))?,
            "workload.operations" => self.operation_count = v.parse().with_context(|| p(key))?,
            "workload.clients" => self.client_threads = v.parse().with_context(|| p(key))?,
            "workload.value_bytes" => self.value_bytes = v.parse().with_context(|| p(key))?,
            "workload.seed" => self.seed = v.parse().with_context(|| p(key))?,
            "workload.distribution" => self.distribution = v.parse()?,
            "workload.max_scan" => self.max_scan = v.parse().with_context(|| p(key))?,
            "workload.mix" => self.mix = parse_mix(v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Parses `read:0.5,update:0.5`; missing types get 0.
pub fn parse_mix(s: &str) -> Result<Mix> {
    let mut m = Mix::new(0.0, 0.0, 0.0, 0.0, 0.0);
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once(':')
            .with_context(|| format!("expected op:fraction, got {part:?}"))?;
        let f: f64 = v.trim().parse().with_context(|| format!("bad fraction {v:?}"))?;
        match k.trim() {
            "read" => m.read = f,
            "update" => m.update = f,
            "insert" => m.insert = f,
            "scan" => m.scan = f,
            "rmw" | "read_modify_write" => m.read_modify_write = f,
            other => bail!("unknown operation {other:?}"),
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    Read(u64),
    Update(u64),
    Insert(u64),
    Scan(u64, usize),
    ReadModifyWrite(u64),
}

impl Op {
    pub fn key_id(&self) -> u64 {
        match *self {
            Op::Read(k) | Op::Update(k) | Op::Insert(k) | Op::Scan(k, _) | Op::ReadModifyWrite(k) => k,
        }
    }
}

/// Key bytes for record `id`. Zero padding keeps numeric and byte order
/// the same.
pub fn key_name(id: u64) -> Vec<u8> {
    format!("user{id:012}").into_bytes()
}

fn fnv64(x: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in x.to_le_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Shared count of existing records; inserts claim the next id.
#[derive(Debug)]
pub struct Keyspace(AtomicU64);

impl Keyspace {
    pub fn new(records: u64) -> Arc<Self> {
        Arc::new(Keyspace(AtomicU64::new(records)))
    }

    pub fn len(&self) -> u64 {
        self.0.load(Ordering::Acquire)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn claim(&self) -> u64 {
        self.0.fetch_add(1, Ordering::AcqRel)
    }
}

/// One client's operation generator.
pub struct OpStream {
    spec: WorkloadSpec,
    rng: ChaCha8Rng,
    zipf: Option<Zipf<f64>>,
    keys: Arc<Keyspace>,
    cum: [f64; 5],
}

impl OpStream {
    /// Stream for client `client`. Streams with the same spec, client
    /// index and keyspace history are identical.
    pub fn new(spec: &WorkloadSpec, client: u64, keys: Arc<Keyspace>) -> Result<Self> {
        spec.validate()?;
        let n = spec.record_count.max(1);
        let zipf = match spec.distribution {
            KeyDistribution::Zipfian(t) => Some(Zipf::new(n, t)?),
            KeyDistribution::Latest => Some(Zipf::new(n, LATEST_THETA)?),
            KeyDistribution::Uniform => None,
        };
        let mut cum = [0.0; 5];
        let mut acc = 0.0;
        for (c, p) in cum.iter_mut().zip(spec.mix.parts()) {
            acc += p;
            *c = acc;
        }
        Ok(OpStream {
            rng: ChaCha8Rng::seed_from_u64(spec.seed ^ fnv64(client)),
            spec: spec.clone(),
            zipf,
            keys,
            cum,
        })
    }

    fn existing_key(&mut self) -> u64 {
        let count = self.keys.len().max(1);
        match (self.spec.distribution, &self.zipf) {
            (KeyDistribution::Uniform, _) => self.rng.gen_range(0..count),
            (KeyDistribution::Zipfian(_), Some(z)) => {
                let rank = z.sample(&mut self.rng) as u64 - 1;
                fnv64(rank) % self.spec.record_count.max(1).min(count)
            }
            (KeyDistribution::Latest, Some(z)) => {
                let rank = z.sample(&mut self.rng) as u64 - 1;
                count - 1 - rank % count
            }
            _ => unreachable!("zipf sampler missing"),
        }
    }

    pub fn next_op(&mut self) -> Op {
        let u: f64 = self.rng.gen();
        let kind = self.cum.iter().position(|&c| u < c).unwrap_or_else(|| {
            // rounding left u above the last bound; take the last non-zero type
            self.spec.mix.parts().iter().rposition(|&p| p > 0.0).unwrap_or(0)
        });
        match kind {
            0 => Op::Read(self.existing_key()),
            1 => Op::Update(self.existing_key()),
            2 => Op::Insert(self.keys.claim()),
            3 => {
                let len = self.rng.gen_range(1..=self.spec.max_scan);
                Op::Scan(self.existing_key(), len)
            }
            _ => Op::ReadModifyWrite(self.existing_key()),
        }
    }

    /// Fresh random value of the spec's size.
    pub fn value(&mut self) -> Vec<u8> {
        let mut v = vec![0u8; self.spec.value_bytes];
        self.rng.fill_bytes(&mut v);
        v
    }
}

impl Iterator for OpStream {
    type Item = Op;

    fn next(&mut self) -> Option<Op> {
        Some(self.next_op())
    }
}
