use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

/// Source of arrival times, in seconds since the pipeline started.
pub trait Clock: Send + Sync {
    fn now(&self) -> f64;
    /// Blocks (or, for a virtual clock, jumps) until `now() >= t`.
    fn sleep_until(&self, t: f64);
    fn is_virtual(&self) -> bool;
}

#[derive(Debug, Clone)]
pub struct WallClock {
    start: Instant,
}

impl WallClock {
    pub fn new() -> Self {
        Self {
            start: Instant::now(),
        }
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn now(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    fn sleep_until(&self, t: f64) {
        let now = self.now();
        if t > now {
            std::thread::sleep(Duration::from_secs_f64(t - now));
        }
    }

    fn is_virtual(&self) -> bool {
        false
    }
}

/// Time that only moves when told to. Clones share one reading.
#[derive(Debug, Clone, Default)]
pub struct VirtualClock {
    bits: Arc<AtomicU64>,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&self, t: f64) {
        self.bits.store(t.to_bits(), Ordering::SeqCst);
    }

    pub fn advance(&self, dt: f64) {
        self.set(self.now() + dt);
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> f64 {
        f64::from_bits(self.bits.load(Ordering::SeqCst))
    }

    fn sleep_until(&self, t: f64) {
        if t > self.now() {
            self.set(t);
        }
    }

    fn is_virtual(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn virtual_clock_only_moves_forward_on_sleep() {
        let c = VirtualClock::new();
        assert_eq!(c.now(), 0.0);
        c.sleep_until(5.0);
        c.sleep_until(2.0);
        assert_eq!(c.now(), 5.0);
        let shared = c.clone();
        shared.advance(1.5);
        assert_eq!(c.now(), 6.5);
    }

    #[test]
    fn wall_clock_is_monotone() {
        let c = WallClock::new();
        let a = c.now();
        c.sleep_until(a + 0.01);
        assert!(c.now() >= a + 0.01);
    }
}
