//! The KVS operation that originated an I/O, carried per thread.

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum IoContext {
    WalWrite,
    /// Memtable flush; always targets level 0.
    Flush,
    Compaction {
        from: u32,
        to: u32,
    },
    CacheCopy,
    Migration,
    Foreground,
    #[default]
    Unknown,
}

/// Context kind without level payload, used for counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ContextKind {
    WalWrite,
    Flush,
    Compaction,
    CacheCopy,
    Migration,
    Foreground,
    Unknown,
}

impl ContextKind {
    pub const ALL: [ContextKind; 7] = [
        ContextKind::WalWrite,
        ContextKind::Flush,
        ContextKind::Compaction,
        ContextKind::CacheCopy,
        ContextKind::Migration,
        ContextKind::Foreground,
        ContextKind::Unknown,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl IoContext {
    pub fn kind(self) -> ContextKind {
        match self {
            IoContext::WalWrite => ContextKind::WalWrite,
            IoContext::Flush => ContextKind::Flush,
            IoContext::Compaction { .. } => ContextKind::Compaction,
            IoContext::CacheCopy => ContextKind::CacheCopy,
            IoContext::Migration => ContextKind::Migration,
            IoContext::Foreground => ContextKind::Foreground,
            IoContext::Unknown => ContextKind::Unknown,
        }
    }

    pub fn from_level(self) -> Option<u32> {
        match self {
            IoContext::Compaction { from, .. } => Some(from),
            _ => None,
        }
    }

    /// Level of files this context creates.
    pub fn to_level(self) -> Option<u32> {
        match self {
            IoContext::Flush => Some(0),
            IoContext::Compaction { to, .. } => Some(to),
            _ => None,
        }
    }

    /// Contexts reserved for the middleware's own background copies.
    pub fn is_internal(self) -> bool {
        matches!(self, IoContext::CacheCopy | IoContext::Migration)
    }
}

impl fmt::Display for IoContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IoContext::WalWrite => f.write_str("wal_write"),
            IoContext::Flush => f.write_str("flush"),
            IoContext::Compaction { from, to } => write!(f, "compaction({from}->{to})"),
            IoContext::CacheCopy => f.write_str("cache_copy"),
            IoContext::Migration => f.write_str("migration"),
            IoContext::Foreground => f.write_str("foreground"),
            IoContext::Unknown => f.write_str("unknown"),
        }
    }
}

impl FromStr for IoContext {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("bad io context {s:?}"));
        Ok(match s {
            "wal_write" => IoContext::WalWrite,
            "flush" => IoContext::Flush,
            "cache_copy" => IoContext::CacheCopy,
            "migration" => IoContext::Migration,
            "foreground" => IoContext::Foreground,
            "unknown" => IoContext::Unknown,
            _ => {
                let inner = s
                    .strip_prefix("compaction(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(bad)?;
                let (a, b) = inner.split_once("->").ok_or_else(bad)?;
                IoContext::Compaction {
                    from: a.trim().parse().map_err(|_| bad())?,
                    to: b.trim().parse().map_err(|_| bad())?,
                }
            }
        })
    }
}

thread_local! {
    static AMBIENT: Cell<IoContext> = const { Cell::new(IoContext::Unknown) };
}

pub fn ctx_set(ctx: IoContext) {
    AMBIENT.with(|c| c.set(ctx));
}

pub fn ctx_get() -> IoContext {
    AMBIENT.with(|c| c.get())
}

/// Sets the ambient context and restores the previous one on drop.
#[must_use = "the context is restored when the guard drops"]
pub struct ContextGuard {
    prev: IoContext,
}

pub fn scoped(ctx: IoContext) -> ContextGuard {
    let prev = ctx_get();
    ctx_set(ctx);
    ContextGuard { prev }
}

impl Drop for ContextGuard {
    fn drop(&mut self) {
        ctx_set(self.prev);
    }
}
