use std::cell::RefCell;
use std::sync::atomic::{AtomicBool, AtomicI64, AtomicU64, Ordering};
use std::time::{Duration, Instant};

use super::curve::{Curve, Interpolation};

pub const BLOCK: u64 = 4096;

/// Most oversleep a worker may bank against its next operation.
const CREDIT: Duration = Duration::from_micros(500);

/// Debts smaller than this are carried to the next op instead of slept.
const SLEEP_MIN: Duration = Duration::from_micros(50);

static NEXT_MODEL: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static BANK: RefCell<Vec<(u64, i64)>> = const { RefCell::new(Vec::new()) };
    static SLACK_SET: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

fn tighten_timer_slack() {
    #[cfg(target_os = "linux")]
    SLACK_SET.with(|s| {
        if !s.get() {
            // SAFETY: PR_SET_TIMERSLACK only affects the calling thread.
            unsafe {
                libc::prctl(libc::PR_SET_TIMERSLACK, 1 as libc::c_ulong, 0, 0, 0);
            }
            s.set(true);
        }
    });
}

/// Number of 4 KiB blocks charged for an I/O of `len` bytes.
pub fn blocks(len: usize) -> u64 {
    (len as u64).div_ceil(BLOCK).max(1)
}

/// Rate limiter that makes `n` closed-loop workers see an aggregate
/// throughput of `curve(n)` 4 KiB ops per second.
///
/// Every operation is charged `blocks * n / curve(n)` seconds of device time,
/// scaled by `dilation`, where `n` counts in-flight operations including the
/// new one. Oversleeping on one op is credited to the same thread's next op
/// and short debts are carried forward; time spent idle earns nothing.
pub struct DelayModel {
    id: u64,
    curve: Curve,
    mode: Interpolation,
    dilation: f64,
    enabled: AtomicBool,
    active: AtomicI64,
    peak_active: AtomicI64,
    ops: AtomicU64,
    blocks: AtomicU64,
}

impl std::fmt::Debug for DelayModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DelayModel")
            .field("curve", &self.curve)
            .field("mode", &self.mode)
            .field("dilation", &self.dilation)
            .field("active", &self.active())
            .finish()
    }
}

impl DelayModel {
    pub fn new(curve: Curve, mode: Interpolation, dilation: f64) -> Self {
        assert!(dilation > 0.0, "dilation must be positive");
        DelayModel {
            id: NEXT_MODEL.fetch_add(1, Ordering::Relaxed),
            curve,
            mode,
            dilation,
            enabled: AtomicBool::new(true),
            active: AtomicI64::new(0),
            peak_active: AtomicI64::new(0),
            ops: AtomicU64::new(0),
            blocks: AtomicU64::new(0),
        }
    }

    pub fn curve(&self) -> &Curve {
        &self.curve
    }

    pub fn dilation(&self) -> f64 {
        self.dilation
    }

    pub fn set_enabled(&self, on: bool) {
        self.enabled.store(on, Ordering::Relaxed);
    }

    pub fn enabled(&self) -> bool {
        self.enabled.load(Ordering::Relaxed)
    }

    pub fn active(&self) -> i64 {
        self.active.load(Ordering::Acquire)
    }

    pub fn peak_active(&self) -> i64 {
        self.peak_active.load(Ordering::Relaxed)
    }

    pub fn ops(&self) -> u64 {
        self.ops.load(Ordering::Relaxed)
    }

    pub fn blocks_charged(&self) -> u64 {
        self.blocks.load(Ordering::Relaxed)
    }

    /// Device-time cost of one op of `nblocks` blocks with `n` ops in flight.
    pub fn service_time(&self, nblocks: u64, n: u32) -> Duration {
        let rate = self.curve.at(n.max(1) as f64, self.mode);
        if rate.is_infinite() {
            return Duration::ZERO;
        }
        Duration::from_secs_f64(nblocks as f64 * n.max(1) as f64 / rate)
    }

    /// Marks the start of an I/O. The returned guard must live until the
    /// underlying I/O has completed.
    pub fn begin(&self, len: usize) -> IoGuard<'_> {
        let n = self.active.fetch_add(1, Ordering::AcqRel) + 1;
        self.peak_active.fetch_max(n, Ordering::Relaxed);
        let nblocks = blocks(len);
        self.ops.fetch_add(1, Ordering::Relaxed);
        self.blocks.fetch_add(nblocks, Ordering::Relaxed);
        let deadline = if self.enabled() {
            let service = self.service_time(nblocks, n as u32).mul_f64(self.dilation);
            if service.is_zero() {
                None
            } else {
                Some(self.advance_deadline(service))
            }
        } else {
            None
        };
        IoGuard {
            model: self,
            deadline,
            done: false,
        }
    }

    fn advance_deadline(&self, service: Duration) -> Instant {
        let bank = with_bank(self.id, |b| std::mem::take(b));
        let now = Instant::now();
        let d = service.as_nanos() as i64 - bank;
        if d >= 0 {
            now + Duration::from_nanos(d as u64)
        } else {
            now.checked_sub(Duration::from_nanos(d.unsigned_abs())).unwrap_or(now)
        }
    }
}

fn with_bank<R>(id: u64, f: impl FnOnce(&mut i64) -> R) -> R {
    BANK.with(|b| {
        let mut b = b.borrow_mut();
        let slot = match b.iter().position(|(m, _)| *m == id) {
            Some(i) => i,
            None => {
                b.push((id, 0));
                b.len() - 1
            }
        };
        f(&mut b[slot].1)
    })
}

/// Keeps an operation counted as active. `complete` applies the delay;
/// dropping without completing (error paths) only releases the count.
pub struct IoGuard<'a> {
    model: &'a DelayModel,
    deadline: Option<Instant>,
    done: bool,
}

impl IoGuard<'_> {
    pub fn complete(mut self) {
        if let Some(deadline) = self.deadline {
            let now = Instant::now();
            let carry = if deadline > now {
                let wait = deadline - now;
                if wait > SLEEP_MIN {
                    tighten_timer_slack();
                    std::thread::sleep(wait);
                    let late = Instant::now().saturating_duration_since(deadline);
                    late.min(CREDIT).as_nanos() as i64
                } else {
                    -(wait.as_nanos() as i64)
                }
            } else {
                0
            };
            with_bank(self.model.id, |b| *b = carry);
        }
        self.release();
    }

    fn release(&mut self) {
        if !self.done {
            self.done = true;
            self.model.active.fetch_sub(1, Ordering::AcqRel);
        }
    }
}

impl Drop for IoGuard<'_> {
    fn drop(&mut self) {
        self.release();
    }
}
