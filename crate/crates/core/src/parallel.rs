//! Optional worker pool with order-preserving map.

use rayon::prelude::*;
use rayon::ThreadPool;

use crate::error::{Error, Result};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "PIANN_THREADS";

/// Runs independent jobs either inline or on a dedicated rayon pool.
///
/// Results always come back in input order, so any reduction performed by
/// the caller is independent of the worker count.
pub struct Workers {
    pool: Option<ThreadPool>,
}

impl std::fmt::Debug for Workers {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Workers").field("threads", &self.threads()).finish()
    }
}

impl Workers {
    pub fn serial() -> Self {
        Self { pool: None }
    }

    pub fn new(threads: usize) -> Result<Self> {
        if threads <= 1 {
            return Ok(Self::serial());
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::InvalidInput(format!("cannot start worker pool: {e}")))?;
        Ok(Self { pool: Some(pool) })
    }

    /// Worker count from `PIANN_THREADS`, defaulting to one.
    pub fn from_env() -> Result<Self> {
        match std::env::var(THREADS_ENV) {
            Ok(v) => {
                let n = v.trim().parse::<usize>().map_err(|_| {
                    Error::InvalidInput(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))
                })?;
                Self::new(n)
            }
            Err(_) => Ok(Self::serial()),
        }
    }

    pub fn threads(&self) -> usize {
        self.pool.as_ref().map_or(1, ThreadPool::current_num_threads)
    }

    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match &self.pool {
            None => items.iter().map(f).collect(),
            Some(pool) => pool.install(|| items.par_iter().map(f).collect()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let items: Vec<u64> = (0..100).collect();
        let serial = Workers::serial().map(&items, |x| x * x);
        let pooled = Workers::new(4).unwrap().map(&items, |x| x * x);
        assert_eq!(serial, pooled);
        assert_eq!(Workers::new(4).unwrap().threads(), 4);
        assert_eq!(Workers::new(0).unwrap().threads(), 1);
    }
}
