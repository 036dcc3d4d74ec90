use std::time::Duration;

use crate::error::{Error, Result};

const MIB: usize = 1 << 20;

#[derive(Debug, Clone)]
pub struct LsmConfig {
    pub memtable_bytes: usize,
    /// Level-0 file count that triggers compaction.
    pub l0_trigger: usize,
    /// Level-0 file count at which puts are delayed.
    pub l0_slowdown: usize,
    /// Level-0 file count at which puts block.
    pub l0_stop: usize,
    pub slowdown_delay: Duration,
    pub fanout: u64,
    /// Size target of level 1; deeper levels grow by `fanout`.
    pub l1_bytes: u64,
    pub target_file_bytes: u64,
    pub num_levels: usize,
    /// Compaction pool size.
    pub threads: usize,
    pub block_cache_bytes: usize,
    pub block_size: usize,
    pub value_bytes: usize,
    /// Sync the WAL after every write.
    pub strict_durability: bool,
    /// Blocks per read when compaction scans its inputs.
    pub compaction_readahead: usize,
}

impl Default for LsmConfig {
    fn default() -> Self {
        LsmConfig {
            memtable_bytes: 4 * MIB,
            l0_trigger: 4,
            l0_slowdown: 8,
            l0_stop: 12,
            slowdown_delay: Duration::from_millis(1),
            fanout: 10,
            l1_bytes: 16 * MIB as u64,
            target_file_bytes: 4 * MIB as u64,
            num_levels: 7,
            threads: 4,
            block_cache_bytes: 32 * MIB,
            block_size: 4096,
            value_bytes: 1024,
            strict_durability: false,
            compaction_readahead: 16,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

impl LsmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.fanout < 2 {
            return bad("fanout must be at least 2");
        }
        if self.threads < 1 {
            return bad("at least one compaction thread is required");
        }
        if self.num_levels < 2 {
            return bad("at least two levels are required");
        }
        if self.memtable_bytes == 0 || self.block_size == 0 || self.target_file_bytes == 0 || self.l1_bytes == 0 {
            return bad("sizes must be positive");
        }
        if self.l0_trigger == 0 || self.l0_slowdown < self.l0_trigger || self.l0_stop < self.l0_slowdown {
            return bad("need 0 < l0_trigger <= l0_slowdown <= l0_stop");
        }
        Ok(())
    }

    /// Size target of level `l >= 1`.
    pub fn level_target(&self, l: usize) -> u64 {
        self.l1_bytes
            .saturating_mul(self.fanout.saturating_pow(l.saturating_sub(1) as u32))
    }

    /// Applies one `key=value` setting. Returns `Ok(false)` for keys this
    /// config does not own.
    pub fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "memtable_bytes" => self.memtable_bytes = num(key, v)?,
            "l0_trigger" => self.l0_trigger = num(key, v)?,
            "l0_slowdown" => self.l0_slowdown = num(key, v)?,
            "l0_stop" => self.l0_stop = num(key, v)?,
            "slowdown_delay_us" => self.slowdown_delay = Duration::from_micros(num(key, v)?),
            "fanout" => self.fanout = num(key, v)?,
            "l1_bytes" => self.l1_bytes = num(key, v)?,
            "target_file_bytes" => self.target_file_bytes = num(key, v)?,
            "num_levels" => self.num_levels = num(key, v)?,
            "threads" => self.threads = num(key, v)?,
            "block_cache_bytes" => self.block_cache_bytes = num(key, v)?,
            "block_size" => self.block_size = num(key, v)?,
            "value_bytes" => self.value_bytes = num(key, v)?,
            "compaction_readahead" => self.compaction_readahead = num(key, v)?,
            "strict_durability" => {
                self.strict_durability = match v {
                    "true" | "on" | "1" | "yes" => true,
                    "false" | "off" | "0" | "no" => false,
                    _ => return Err(Error::Config(format!("bad boolean {v:?} for {key}"))),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}
