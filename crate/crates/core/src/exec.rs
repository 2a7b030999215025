//! Order-preserving map over independent jobs, serial or on a rayon pool.
//!
//! Without the `parallel` feature every executor runs serially. Results are
//! always returned in input order, so callers see identical output either way.

use crate::error::{Error, Result};

/// Environment variable capping the worker count of [`Executor::from_env`].
pub const THREADS_ENV: &str = "FEDCLF_THREADS";

#[derive(Debug)]
pub struct Executor {
    #[cfg(feature = "parallel")]
    pool: Option<rayon::ThreadPool>,
}

impl Executor {
    pub fn serial() -> Self {
        Self {
            #[cfg(feature = "parallel")]
            pool: None,
        }
    }

    /// A pool with `threads` workers, or rayon's default when `None`.
    #[cfg(feature = "parallel")]
    pub fn parallel(threads: Option<usize>) -> Result<Self> {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = threads {
            builder = builder.num_threads(n.max(1));
        }
        let pool = builder
            .build()
            .map_err(|e| Error::Config(format!("cannot start thread pool: {e}")))?;
        Ok(Self { pool: Some(pool) })
    }

    #[cfg(not(feature = "parallel"))]
    pub fn parallel(_threads: Option<usize>) -> Result<Self> {
        Ok(Self::serial())
    }

    /// Parallel executor capped by `FEDCLF_THREADS` when set; `1` means serial.
    pub fn from_env() -> Result<Self> {
        match std::env::var(THREADS_ENV) {
            Ok(v) => {
                let n: usize = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
                if n <= 1 {
                    Ok(Self::serial())
                } else {
                    Self::parallel(Some(n))
                }
            }
            Err(_) => Self::parallel(None),
        }
    }

    pub fn is_parallel(&self) -> bool {
        #[cfg(feature = "parallel")]
        {
            self.pool.is_some()
        }
        #[cfg(not(feature = "parallel"))]
        {
            false
        }
    }

    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            return pool.install(|| items.par_iter().map(&f).collect());
        }
        items.iter().map(f).collect()
    }
}

impl Default for Executor {
    fn default() -> Self {
        Self::serial()
    }
}
