//! Execution strategy shared by the data-parallel kernels and batch jobs.
//!
//! Every parallel site in the crate partitions its work so that each output
//! element is produced by exactly one task with a fixed inner order, making
//! results bit-identical between the sequential and parallel paths.

use crate::error::Result;

/// `Parallel` falls back to sequential when the `parallel` feature is
/// disabled, so callers can request it unconditionally.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

impl Exec {
    #[cfg(feature = "parallel")]
    pub(crate) fn is_parallel(self) -> bool {
        self == Exec::Parallel
    }
}

/// Runs `f` once per `slab`-sized chunk of `buf`, in parallel when requested.
/// Chunks are disjoint, so the partitioning cannot change results.
pub(crate) fn for_each_slab<F>(buf: &mut [f64], slab: usize, exec: Exec, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert_eq!(buf.len() % slab.max(1), 0);
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        buf.par_chunks_mut(slab)
            .enumerate()
            .for_each(|(i, s)| f(i, s));
        return;
    }
    let _ = exec;
    for (i, s) in buf.chunks_mut(slab).enumerate() {
        f(i, s);
    }
}

/// Runs `f(0..n)`, in parallel when requested, propagating the first error.
/// Tasks must be independent; any per-index outputs they write are disjoint.
pub(crate) fn try_for_each_index<F>(n: usize, exec: Exec, f: F) -> Result<()>
where
    F: Fn(usize) -> Result<()> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().try_for_each(f);
    }
    let _ = exec;
    (0..n).try_for_each(f)
}
