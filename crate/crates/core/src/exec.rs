//! Client-parallel execution with a configurable worker count.

use rayon::prelude::*;
use rayon::ThreadPool;

use crate::error::{Error, Result};

/// Runs per-client closures either inline (one worker) or on a dedicated
/// rayon pool. Each client is touched by exactly one worker per call, so
/// results never depend on the worker count.
pub struct Executor {
    pool: Option<ThreadPool>,
}

impl Executor {
    pub fn new(workers: usize) -> Result<Self> {
        if workers <= 1 {
            return Ok(Self { pool: None });
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
        Ok(Self { pool: Some(pool) })
    }

    pub fn workers(&self) -> usize {
        self.pool.as_ref().map_or(1, ThreadPool::current_num_threads)
    }

    pub fn for_each_mut<T, F>(&self, items: &mut [T], f: F) -> Result<()>
    where
        T: Send,
        F: Fn(usize, &mut T) -> Result<()> + Sync + Send,
    {
        match &self.pool {
            None => items.iter_mut().enumerate().try_for_each(|(i, t)| f(i, t)),
            Some(pool) => pool.install(|| items.par_iter_mut().enumerate().try_for_each(|(i, t)| f(i, t))),
        }
    }
}
