use super::{
    BandRegistry, DateWindow, Geometry, ImageCatalogEntry, ImageRequest, ImageryError, ImageryProvider, PointSample,
    Result,
};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

/// Monotonic time source, measured from an arbitrary origin.
pub trait Clock: Send + Sync {
    fn now(&self) -> Duration;
    fn sleep(&self, d: Duration);
}

pub struct SystemClock {
    origin: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        SystemClock { origin: Instant::now() }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Virtual clock for tests: `sleep` moves time forward instead of blocking.
/// Concurrent sleepers behave like parallel waits (time advances to the
/// latest wake-up, not the sum).
#[derive(Default)]
pub struct ManualClock {
    nanos: AtomicU64,
}

impl ManualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advance(&self, d: Duration) {
        self.nanos.fetch_add(d.as_nanos() as u64, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Duration {
        Duration::from_nanos(self.nanos.load(Ordering::SeqCst))
    }

    fn sleep(&self, d: Duration) {
        let target = self.now() + d;
        self.nanos.fetch_max(target.as_nanos() as u64, Ordering::SeqCst);
        std::thread::yield_now();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateLimiterState {
    /// Requests allowed per window.
    pub capacity: u32,
    /// Requests that could be forwarded right now.
    pub tokens: f64,
    /// Clock reading at which `tokens` was computed, in seconds.
    pub last_refill: f64,
}

/// Sliding-window limiter: a request is forwarded only if fewer than
/// `capacity` requests were forwarded during the preceding `window`.
pub struct RateLimiter {
    capacity: u32,
    window: Duration,
    clock: Arc<dyn Clock>,
    grants: Mutex<VecDeque<Duration>>,
}

impl RateLimiter {
    pub fn new(capacity: u32, window: Duration, clock: Arc<dyn Clock>) -> Self {
        assert!(capacity > 0, "rate limiter capacity must be positive");
        RateLimiter { capacity, window, clock, grants: Mutex::new(VecDeque::new()) }
    }

    pub fn per_minute(capacity: u32, clock: Arc<dyn Clock>) -> Self {
        Self::new(capacity, Duration::from_secs(60), clock)
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    fn expire(grants: &mut VecDeque<Duration>, now: Duration, window: Duration) {
        while grants.front().is_some_and(|&t| t + window <= now) {
            grants.pop_front();
        }
    }

    /// Takes a slot, returning the grant time, or the wait until one frees up.
    pub fn try_acquire(&self) -> std::result::Result<Duration, Duration> {
        let mut grants = self.grants.lock();
        let now = self.clock.now();
        Self::expire(&mut grants, now, self.window);
        if grants.len() < self.capacity as usize {
            grants.push_back(now);
            Ok(now)
        } else {
            let oldest = *grants.front().expect("full window is non-empty");
            Err(oldest + self.window - now)
        }
    }

    /// Blocks (on the limiter's clock) until a slot is granted.
    pub fn acquire(&self) -> Duration {
        loop {
            match self.try_acquire() {
                Ok(t) => return t,
                Err(wait) => self.clock.sleep(wait),
            }
        }
    }

    pub fn state(&self) -> RateLimiterState {
        let mut grants = self.grants.lock();
        let now = self.clock.now();
        Self::expire(&mut grants, now, self.window);
        RateLimiterState {
            capacity: self.capacity,
            tokens: (self.capacity as usize - grants.len()) as f64,
            last_refill: now.as_secs_f64(),
        }
    }
}

/// Forwards calls to `inner` while the limiter grants them; otherwise fails
/// with a retriable [`ImageryError::RateLimited`].
pub struct RateLimitedProvider {
    inner: Arc<dyn ImageryProvider>,
    limiter: Arc<RateLimiter>,
}

impl RateLimitedProvider {
    pub fn new(inner: Arc<dyn ImageryProvider>, limiter: Arc<RateLimiter>) -> Self {
        RateLimitedProvider { inner, limiter }
    }

    pub fn limiter(&self) -> &Arc<RateLimiter> {
        &self.limiter
    }

    fn gate(&self) -> Result<()> {
        self.limiter.try_acquire().map(drop).map_err(|wait| ImageryError::RateLimited { wait })
    }
}

impl ImageryProvider for RateLimitedProvider {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn native_resolution(&self) -> f64 {
        self.inner.native_resolution()
    }

    fn registry(&self) -> &BandRegistry {
        self.inner.registry()
    }

    fn search_catalog(&self, geometry: &Geometry, window: &DateWindow) -> Result<Vec<ImageCatalogEntry>> {
        self.gate()?;
        self.inner.search_catalog(geometry, window)
    }

    fn fetch_band_tiff(&self, entry: &ImageCatalogEntry, band: &str, request: &ImageRequest) -> Result<Vec<u8>> {
        self.gate()?;
        self.inner.fetch_band_tiff(entry, band, request)
    }

    fn sample_point_server_side(&self, lon: f64, lat: f64, window: &DateWindow, bands: &[String]) -> Result<PointSample> {
        self.gate()?;
        self.inner.sample_point_server_side(lon, lat, window, bands)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sixty_first_call_in_a_minute_is_refused() {
        let clock = Arc::new(ManualClock::new());
        let rl = RateLimiter::per_minute(60, clock.clone());
        for _ in 0..60 {
            assert!(rl.try_acquire().is_ok());
            clock.advance(Duration::from_millis(500));
        }
        let wait = rl.try_acquire().unwrap_err();
        assert_eq!(wait, Duration::from_secs(30));
        assert_eq!(rl.state().tokens, 0.0);
        clock.advance(wait);
        assert!(rl.try_acquire().is_ok());
    }

    #[test]
    fn state_reports_free_slots() {
        let clock = Arc::new(ManualClock::new());
        let rl = RateLimiter::per_minute(5, clock.clone());
        rl.try_acquire().unwrap();
        rl.try_acquire().unwrap();
        let s = rl.state();
        assert_eq!((s.capacity, s.tokens), (5, 3.0));
        clock.advance(Duration::from_secs(60));
        assert_eq!(rl.state().tokens, 5.0);
    }

    fn max_in_any_window(times: &mut [Duration], window: Duration) -> usize {
        times.sort();
        let mut best = 0;
        let mut lo = 0;
        for hi in 0..times.len() {
            while times[hi] - times[lo] >= window {
                lo += 1;
            }
            best = best.max(hi - lo + 1);
        }
        best
    }

    proptest::proptest! {
        #[test]
        fn never_exceeds_capacity(cap in 1u32..20, steps in proptest::collection::vec(0u64..5000, 1..200)) {
            let clock = Arc::new(ManualClock::new());
            let rl = RateLimiter::new(cap, Duration::from_secs(10), clock.clone());
            let mut granted = Vec::new();
            for ms in steps {
                clock.advance(Duration::from_millis(ms));
                if let Ok(t) = rl.try_acquire() {
                    granted.push(t);
                }
            }
            proptest::prop_assert!(max_in_any_window(&mut granted, Duration::from_secs(10)) <= cap as usize);
        }
    }
}
