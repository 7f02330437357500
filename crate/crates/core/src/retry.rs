//! Jittered exponential backoff with an overall deadline.

use std::time::{Duration, Instant};

use rand::Rng;

#[derive(Debug, Clone)]
pub struct Backoff {
    base: Duration,
    cap: Duration,
    deadline: Instant,
    attempt: u32,
}

impl Backoff {
    /// 100 ms base, 5 s cap.
    pub fn new(give_up_after: Duration) -> Self {
        Self::with_limits(Duration::from_millis(100), Duration::from_secs(5), give_up_after)
    }

    pub fn with_limits(base: Duration, cap: Duration, give_up_after: Duration) -> Self {
        Self {
            base,
            cap,
            deadline: Instant::now() + give_up_after,
            attempt: 0,
        }
    }

    /// Delay before the next attempt, or `None` once the deadline has passed. The delay
    /// is drawn uniformly from [d/2, d] where d = min(cap, base * 2^attempt), and never
    /// runs past the deadline.
    pub fn next_delay(&mut self) -> Option<Duration> {
        let now = Instant::now();
        if now >= self.deadline {
            return None;
        }
        let exp = self.base.saturating_mul(1u32 << self.attempt.min(16));
        let full = exp.min(self.cap);
        self.attempt += 1;
        let jittered = rand::rng().random_range(full / 2..=full);
        Some(jittered.min(self.deadline - now))
    }

    /// Sleep for the next delay; `false` when the deadline has passed.
    pub fn wait(&mut self) -> bool {
        match self.next_delay() {
            Some(d) => {
                std::thread::sleep(d);
                true
            }
            None => false,
        }
    }

    pub fn attempts(&self) -> u32 {
        self.attempt
    }
}
