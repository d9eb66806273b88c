use std::collections::VecDeque;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

const WINDOW: Duration = Duration::from_secs(60);

/// Caps concurrent requests and, optionally, prompt tokens per rolling minute.
#[derive(Debug)]
pub struct Throttle {
    max_in_flight: usize,
    tokens_per_minute: Option<u64>,
    in_flight: Mutex<usize>,
    freed: Condvar,
    spent: Mutex<VecDeque<(Instant, u64)>>,
}

/// Releases its in-flight slot on drop.
pub struct Permit<'a> {
    throttle: &'a Throttle,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.throttle.in_flight.lock().unwrap();
        *n -= 1;
        self.throttle.freed.notify_one();
    }
}

impl Throttle {
    pub fn new(max_in_flight: usize, tokens_per_minute: Option<u64>) -> Self {
        Throttle {
            max_in_flight: max_in_flight.max(1),
            tokens_per_minute: tokens_per_minute.filter(|&t| t > 0),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
            spent: Mutex::new(VecDeque::new()),
        }
    }

    pub fn unlimited() -> Self {
        Throttle::new(usize::MAX, None)
    }

    pub fn acquire(&self, tokens: u64) -> Permit<'_> {
        self.wait_for_budget(tokens);
        let mut n = self.in_flight.lock().unwrap();
        while *n >= self.max_in_flight {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        Permit { throttle: self }
    }

    pub fn in_flight(&self) -> usize {
        *self.in_flight.lock().unwrap()
    }

    fn wait_for_budget(&self, tokens: u64) {
        let Some(budget) = self.tokens_per_minute else {
            return;
        };
        loop {
            let wait = {
                let mut spent = self.spent.lock().unwrap();
                let now = Instant::now();
                while spent.front().is_some_and(|(t, _)| now.duration_since(*t) >= WINDOW) {
                    spent.pop_front();
                }
                let used: u64 = spent.iter().map(|(_, n)| n).sum();
                // An oversized request still goes through once the window is clear.
                if used + tokens <= budget || spent.is_empty() {
                    spent.push_back((now, tokens));
                    return;
                }
                let oldest = spent.front().map(|(t, _)| *t).unwrap_or(now);
                WINDOW.saturating_sub(now.duration_since(oldest))
            };
            std::thread::sleep(wait.max(Duration::from_millis(5)));
        }
    }
}
