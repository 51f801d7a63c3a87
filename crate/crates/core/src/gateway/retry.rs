use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use parking_lot::{Condvar, Mutex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Exponential backoff: the k-th retry waits `base * 2^k` plus a jitter
/// drawn uniformly from `[0, base * 2^k]`, never more than `cap` in total.
#[derive(Debug)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base: Duration,
    pub cap: Duration,
    pub seed: u64,
}

impl RetryPolicy {
    /// No waiting between attempts. Used by tests and the mock backend.
    pub fn immediate(max_retries: u32) -> Self {
        RetryPolicy { max_retries, base: Duration::ZERO, cap: Duration::ZERO, seed: 0 }
    }

    /// Delay before retry number `k` (0-based), with jitter from `rng`.
    pub fn delay(&self, k: u32, rng: &mut impl Rng) -> Duration {
        let exp = self.base.saturating_mul(1u32.checked_shl(k.min(31)).unwrap_or(u32::MAX));
        let step = exp.min(self.cap);
        let jitter_ms = if step.is_zero() { 0 } else { rng.gen_range(0..=step.as_millis() as u64) };
        (step + Duration::from_millis(jitter_ms)).min(self.cap)
    }

    pub(crate) fn sleep(&self, k: u32, rng: &Mutex<ChaCha20Rng>) {
        if self.base.is_zero() {
            return;
        }
        let delay = self.delay(k, &mut *rng.lock());
        std::thread::sleep(delay);
    }

    /// The run's jitter generator.
    pub fn jitter_rng(&self) -> Mutex<ChaCha20Rng> {
        Mutex::new(ChaCha20Rng::seed_from_u64(self.seed))
    }
}

/// Counting semaphore that remembers its high-water mark.
#[derive(Debug)]
pub struct Semaphore {
    capacity: usize,
    state: Mutex<(usize, usize)>,
    freed: Condvar,
}

pub struct Permit<'a> {
    sem: &'a Semaphore,
}

impl Semaphore {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "semaphore capacity must be positive");
        Semaphore { capacity, state: Mutex::new((0, 0)), freed: Condvar::new() }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut state = self.state.lock();
        while state.0 >= self.capacity {
            self.freed.wait(&mut state);
        }
        state.0 += 1;
        state.1 = state.1.max(state.0);
        Permit { sem: self }
    }

    pub fn peak(&self) -> usize {
        self.state.lock().1
    }

    pub fn in_flight(&self) -> usize {
        self.state.lock().0
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut state = self.sem.state.lock();
        state.0 -= 1;
        self.sem.freed.notify_one();
    }
}

/// Call counters for reporting.
#[derive(Debug, Default)]
pub struct CallStats {
    calls: AtomicU64,
    retries: AtomicU64,
}

impl CallStats {
    pub(super) fn record_call(&self) {
        self.calls.fetch_add(1, Ordering::Relaxed);
    }

    pub(super) fn record_retry(&self) {
        self.retries.fetch_add(1, Ordering::Relaxed);
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn retries(&self) -> u64 {
        self.retries.load(Ordering::Relaxed)
    }
}
