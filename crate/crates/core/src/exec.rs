//! Index-ordered map over replications, parallel when the `parallel`
//! feature is enabled.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Execution {
    Sequential,
    /// `workers = None` uses every available core.
    Parallel {
        workers: Option<usize>,
    },
    #[default]
    Auto,
}

impl Execution {
    pub fn with_workers(workers: Option<usize>) -> Self {
        match workers {
            Some(1) => Execution::Sequential,
            w => Execution::Parallel { workers: w },
        }
    }
}

/// Evaluates `f(0..count)` and returns results in index order.
///
/// The output never depends on the execution mode: each call to `f` must be
/// a pure function of its index.
pub fn map_indexed<T, F>(count: usize, exec: Execution, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        Execution::Sequential => (0..count).map(f).collect(),
        Execution::Parallel { workers } => parallel_map(count, workers, f),
        Execution::Auto => parallel_map(count, None, f),
    }
}

#[cfg(feature = "parallel")]
fn parallel_map<T, F>(count: usize, workers: Option<usize>, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    match workers {
        None => (0..count).into_par_iter().map(&f).collect(),
        Some(w) => match rayon::ThreadPoolBuilder::new().num_threads(w.max(1)).build() {
            Ok(pool) => pool.install(|| (0..count).into_par_iter().map(&f).collect()),
            Err(_) => (0..count).map(f).collect(),
        },
    }
}

#[cfg(not(feature = "parallel"))]
fn parallel_map<T, F>(count: usize, _workers: Option<usize>, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..count).map(f).collect()
}
