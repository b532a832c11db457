use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BackendError, CallOutcome};

/// Exponential backoff for retryable transport failures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Retries after the first attempt; total attempts never exceed `retry_limit + 1`.
    pub retry_limit: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
    pub jitter: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retry_limit: 2,
            base_delay: Duration::from_millis(250),
            max_delay: Duration::from_secs(8),
            jitter: true,
        }
    }
}

impl RetryPolicy {
    /// No sleeping between attempts and no jitter.
    pub fn immediate(retry_limit: u32) -> Self {
        Self { retry_limit, base_delay: Duration::ZERO, max_delay: Duration::ZERO, jitter: false }
    }

    /// Delay before retry number `retry` (1-based).
    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = 2u32.saturating_pow(retry.saturating_sub(1));
        let delay = self.base_delay.saturating_mul(factor).min(self.max_delay);
        if self.jitter && !delay.is_zero() {
            delay.mul_f64(rand::rng().random_range(0.5..1.0))
        } else {
            delay
        }
    }
}

/// Runs `op` until it succeeds, fails with a non-retryable error, or the
/// retry budget is spent. `op` receives the 1-based attempt number.
pub fn call_with_retry<T>(
    policy: &RetryPolicy,
    mut op: impl FnMut(u32) -> Result<T, BackendError>,
) -> CallOutcome<T> {
    let max_attempts = policy.retry_limit + 1;
    let mut attempt = 0;
    loop {
        attempt += 1;
        match op(attempt) {
            Ok(v) => return CallOutcome { result: Ok(v), attempts: attempt },
            Err(e) if !e.is_retryable() => return CallOutcome { result: Err(e), attempts: attempt },
            Err(e) if attempt >= max_attempts => {
                return CallOutcome {
                    result: Err(BackendError::ExhaustedRetries { attempts: attempt, last: Box::new(e) }),
                    attempts: attempt,
                }
            }
            Err(e) => {
                let mut delay = policy.backoff(attempt);
                if let BackendError::RateLimited { retry_after: Some(after) } = e {
                    delay = delay.max(after.min(policy.max_delay));
                }
                if !delay.is_zero() {
                    std::thread::sleep(delay);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exhausts_after_limit_plus_one() {
        let mut calls = 0;
        let out: CallOutcome<()> = call_with_retry(&RetryPolicy::immediate(2), |_| {
            calls += 1;
            Err(BackendError::Transport("down".into()))
        });
        assert_eq!(calls, 3);
        assert_eq!(out.attempts, 3);
        assert!(matches!(out.result, Err(BackendError::ExhaustedRetries { attempts: 3, .. })));
    }

    #[test]
    fn protocol_errors_not_retried() {
        let mut calls = 0;
        let out: CallOutcome<()> = call_with_retry(&RetryPolicy::immediate(5), |_| {
            calls += 1;
            Err(BackendError::Protocol("bad json".into()))
        });
        assert_eq!(calls, 1);
        assert!(matches!(out.result, Err(BackendError::Protocol(_))));
    }

    #[test]
    fn recovers_mid_way() {
        let out = call_with_retry(&RetryPolicy::immediate(2), |attempt| {
            if attempt < 3 {
                Err(BackendError::RateLimited { retry_after: None })
            } else {
                Ok(attempt)
            }
        });
        assert_eq!(out.result, Ok(3));
        assert_eq!(out.attempts, 3);
    }

    #[test]
    fn backoff_doubles_without_jitter() {
        let p = RetryPolicy { jitter: false, ..Default::default() };
        assert_eq!(p.backoff(1), Duration::from_millis(250));
        assert_eq!(p.backoff(2), Duration::from_millis(500));
        assert_eq!(p.backoff(3), Duration::from_millis(1000));
        assert_eq!(p.backoff(10), Duration::from_secs(8));
    }
}
