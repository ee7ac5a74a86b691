//! Execution backend for the data-parallel loops (evaluation, risk, sweeps).
//!
//! With the `parallel` feature the default backend fans out over rayon's
//! pool; without it every loop runs on the calling thread. Results are always
//! collected in index order so both backends produce identical output.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Sequential,
    Parallel,
}

impl Default for Backend {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Backend::Parallel
        } else {
            Backend::Sequential
        }
    }
}

impl Backend {
    /// Evaluate `f(0..n)` and collect the results in index order.
    pub fn map<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Backend::Parallel => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            _ => (0..n).map(f).collect(),
        }
    }
}

/// Cap the global pool size from `LATEM_THREADS`. No-op without `parallel`.
pub fn init_thread_pool_from_env() {
    #[cfg(feature = "parallel")]
    if let Some(n) = std::env::var("LATEM_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        // build_global fails only if a pool already exists; keep the existing one.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}
