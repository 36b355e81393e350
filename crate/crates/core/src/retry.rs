use std::future::Future;
use std::time::Duration;

/// Exponential backoff for outbound HTTP calls.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub factor: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
            factor: 2,
        }
    }
}

impl RetryPolicy {
    /// Policy with the default shape but a different base delay; tests use
    /// this to keep backoff short.
    pub fn with_base_delay(base_delay: Duration) -> Self {
        RetryPolicy {
            base_delay,
            ..Default::default()
        }
    }

    /// Delay before attempt `attempt + 1`, where `attempt` counts from 1.
    pub fn delay_after(&self, attempt: u32) -> Duration {
        self.base_delay * self.factor.saturating_pow(attempt.saturating_sub(1))
    }
}

pub enum Attempt<T, E> {
    Done(T),
    Retry(E),
    Fail(E),
}

/// Runs `op` until it succeeds, fails permanently, or the attempt budget is
/// spent. Returns the last error together with the number of attempts made.
pub async fn with_retry<T, E, F, Fut>(policy: RetryPolicy, mut op: F) -> Result<T, (E, u32)>
where
    F: FnMut(u32) -> Fut,
    Fut: Future<Output = Attempt<T, E>>,
{
    let mut attempt = 1;
    loop {
        match op(attempt).await {
            Attempt::Done(v) => return Ok(v),
            Attempt::Fail(e) => return Err((e, attempt)),
            Attempt::Retry(e) if attempt >= policy.max_attempts => return Err((e, attempt)),
            Attempt::Retry(e) => {
                tracing::debug!(attempt, "retrying after transient failure");
                drop(e);
                tokio::time::sleep(policy.delay_after(attempt)).await;
                attempt += 1;
            }
        }
    }
}
