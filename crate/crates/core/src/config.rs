//! Middleware settings and the flat `key=value` config format.

use std::time::Duration;

use crate::device::Interpolation;
use crate::error::{Error, Result};
use crate::par::Exec;

#[derive(Debug, Clone)]
pub struct MiddlewareConfig {
    /// Multiplier applied to every modeled device service time. Throughput
    /// numbers reported in device time are wall-clock rates times this.
    pub dilation: f64,
    pub interpolation: Interpolation,
    /// Issue real `fsync`s; otherwise durability is only tracked.
    pub fsync_real: bool,
    pub cache_enabled: bool,
    pub cache_threshold: f64,
    pub cache_window: usize,
    /// Copy tasks a monitor may enqueue per tick.
    pub cache_tasks_per_tick: usize,
    pub upper_pct: f64,
    pub lower_pct: f64,
    pub pool_cache: usize,
    pub pool_migrate: usize,
    pub pool_move: usize,
    pub monitor_interval: Duration,
    pub copy_chunk: usize,
    /// Start monitor and worker threads. Off means ticks are driven by hand.
    pub background: bool,
    pub exec: Exec,
    pub audit_interval: Duration,
}

impl Default for MiddlewareConfig {
    fn default() -> Self {
        MiddlewareConfig {
            dilation: 20.0,
            interpolation: Interpolation::Linear,
            fsync_real: false,
            cache_enabled: true,
            cache_threshold: 0.8,
            cache_window: 10_000,
            cache_tasks_per_tick: 1,
            upper_pct: 5.0,
            lower_pct: 2.0,
            pool_cache: 16,
            pool_migrate: 16,
            pool_move: 4,
            monitor_interval: Duration::from_millis(20),
            copy_chunk: 64 * 1024,
            background: true,
            exec: Exec::Parallel,
            audit_interval: Duration::from_millis(100),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean {v:?} for {key}"))),
    }
}

impl MiddlewareConfig {
    /// Applies one setting. Returns `Ok(false)` for keys this config does
    /// not own.
    pub fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "device.dilation" => self.dilation = parse(key, v)?,
            "device.interpolation" => self.interpolation = v.parse()?,
            "device.fsync" => self.fsync_real = parse_bool(key, v)?,
            "cache.enabled" => self.cache_enabled = parse_bool(key, v)?,
            "cache.threshold" => self.cache_threshold = parse(key, v)?,
            "cache.window" => self.cache_window = parse(key, v)?,
            "cache.tasks_per_tick" => self.cache_tasks_per_tick = parse(key, v)?,
            "migrate.upper_pct" => self.upper_pct = parse(key, v)?,
            "migrate.lower_pct" => self.lower_pct = parse(key, v)?,
            "pool.cache" => self.pool_cache = parse(key, v)?,
            "pool.migrate" => self.pool_migrate = parse(key, v)?,
            "pool.move" => self.pool_move = parse(key, v)?,
            "monitor.interval_ms" => {
                self.monitor_interval = Duration::from_millis(parse(key, v)?)
            }
            "copy.chunk_bytes" => self.copy_chunk = parse(key, v)?,
            "middleware.background" => self.background = parse_bool(key, v)?,
            "exec" => self.exec = v.parse()?,
            "audit.interval_ms" => self.audit_interval = Duration::from_millis(parse(key, v)?),
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.dilation > 0.0) {
            return err("device.dilation must be positive");
        }
        if !(0.0..=1.0).contains(&self.cache_threshold) {
            return err("cache.threshold must be within [0, 1]");
        }
        if self.cache_window == 0 {
            return err("cache.window must be positive");
        }
        if !(self.lower_pct >= 0.0 && self.lower_pct < self.upper_pct && self.upper_pct < 100.0) {
            return err("need 0 <= migrate.lower_pct < migrate.upper_pct < 100");
        }
        if self.pool_cache == 0 || self.pool_migrate == 0 || self.pool_move == 0 {
            return err("thread pools need at least one thread");
        }
        if self.copy_chunk == 0 {
            return err("copy.chunk_bytes must be positive");
        }
        Ok(())
    }
}

/// Splits flat `key=value` text. Blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
