//! Data-parallel map over independent work items.
//!
//! With the `parallel` feature (default) work is spread over a rayon pool;
//! without it every [`Execution`] runs sequentially. Results are always
//! returned in input order, so callers see identical output either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    /// `jobs == 0` uses the global pool's default width.
    Parallel { jobs: usize },
    #[default]
    Auto,
}

impl Execution {
    pub fn with_jobs(jobs: Option<usize>) -> Self {
        match jobs {
            Some(1) => Execution::Sequential,
            Some(n) => Execution::Parallel { jobs: n },
            None => Execution::Auto,
        }
    }
}

pub fn map<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match exec {
        Execution::Sequential => items.iter().map(f).collect(),
        Execution::Auto => map_parallel(items, f),
        Execution::Parallel { jobs } => with_pool(jobs, || map_parallel(items, f)),
    }
}

#[cfg(feature = "parallel")]
fn map_parallel<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_parallel<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

#[cfg(feature = "parallel")]
fn with_pool<R: Send>(jobs: usize, op: impl FnOnce() -> R + Send) -> R {
    if jobs == 0 {
        return op();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(op),
        Err(_) => op(),
    }
}

#[cfg(not(feature = "parallel"))]
fn with_pool<R: Send>(_jobs: usize, op: impl FnOnce() -> R + Send) -> R {
    op()
}
