//! Session clocks. Simulated sessions run on a virtual clock so every
//! timestamp in their logs is reproducible.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

pub trait Clock: Send + Sync {
    /// Seconds since the clock's epoch.
    fn now(&self) -> f64;

    /// Lets time pass. Virtual clocks jump; the wall clock sleeps.
    fn advance(&self, seconds: f64);

    fn is_virtual(&self) -> bool;
}

#[derive(Debug, Default)]
pub struct VirtualClock {
    bits: AtomicU64,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> f64 {
        f64::from_bits(self.bits.load(Ordering::SeqCst))
    }

    fn advance(&self, seconds: f64) {
        let next = self.now() + seconds.max(0.0);
        self.bits.store(next.to_bits(), Ordering::SeqCst);
    }

    fn is_virtual(&self) -> bool {
        true
    }
}

#[derive(Debug, Default)]
pub struct WallClock;

impl Clock for WallClock {
    fn now(&self) -> f64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
    }

    fn advance(&self, seconds: f64) {
        if seconds > 0.0 {
            std::thread::sleep(std::time::Duration::from_secs_f64(seconds));
        }
    }

    fn is_virtual(&self) -> bool {
        false
    }
}
