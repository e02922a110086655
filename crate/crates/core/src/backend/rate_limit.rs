use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::{Duration, Instant};

/// Sliding-window gate: at most `max_attempts` acquisitions in any window.
#[derive(Debug)]
pub struct RateLimiter {
    max_attempts: usize,
    window: Duration,
    stamps: Mutex<VecDeque<Instant>>,
}

impl RateLimiter {
    pub fn per_minute(requests_per_minute: u32) -> Self {
        Self::with_window(requests_per_minute, Duration::from_secs(60))
    }

    pub fn with_window(max_attempts: u32, window: Duration) -> Self {
        assert!(max_attempts > 0, "rate limit must be positive");
        Self { max_attempts: max_attempts as usize, window, stamps: Mutex::new(VecDeque::new()) }
    }

    /// Block until an attempt is allowed, then record it.
    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut stamps = self.stamps.lock().expect("rate limiter lock");
                let now = Instant::now();
                while stamps.front().is_some_and(|t| now.duration_since(*t) >= self.window) {
                    stamps.pop_front();
                }
                if stamps.len() < self.max_attempts {
                    stamps.push_back(now);
                    return;
                }
                self.window - now.duration_since(*stamps.front().expect("non-empty"))
            };
            std::thread::sleep(wait);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn never_exceeds_budget_in_any_window() {
        let window = Duration::from_millis(150);
        let limiter = Arc::new(RateLimiter::with_window(3, window));
        let stamps = Arc::new(Mutex::new(Vec::new()));
        std::thread::scope(|scope| {
            for _ in 0..3 {
                let limiter = Arc::clone(&limiter);
                let stamps = Arc::clone(&stamps);
                scope.spawn(move || {
                    for _ in 0..3 {
                        limiter.acquire();
                        stamps.lock().unwrap().push(Instant::now());
                    }
                });
            }
        });
        let mut stamps = stamps.lock().unwrap().clone();
        stamps.sort();
        assert_eq!(stamps.len(), 9);
        // Observed stamps trail the limiter's own by scheduling jitter.
        let strict = window - Duration::from_millis(40);
        for (i, start) in stamps.iter().enumerate() {
            let in_window = stamps[i..].iter().filter(|t| t.duration_since(*start) < strict).count();
            assert!(in_window <= 3, "{in_window} attempts inside one window");
        }
    }
}
