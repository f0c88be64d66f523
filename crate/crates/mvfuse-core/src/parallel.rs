//! Data-parallel map with a sequential fallback.
//!
//! The `parallel` feature (on by default) compiles the rayon path in; without
//! it every map below is a plain sequential loop. With the feature enabled a
//! process-wide switch can still force sequential execution at runtime, which
//! is what the benchmark suite uses to compare both paths in one binary.
//!
//! Outputs are collected in input order and all reductions downstream fold in
//! ascending index, so toggling parallelism never changes results, bit for
//! bit.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static PARALLEL_ENABLED: AtomicBool = AtomicBool::new(cfg!(feature = "parallel"));

/// Returns whether parallel execution is currently active.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL_ENABLED.load(Ordering::Relaxed)
}

/// Enables or disables the rayon path at runtime; returns the previous state.
/// A no-op (always sequential) when the `parallel` feature is compiled out.
pub fn set_parallel(on: bool) -> bool {
    PARALLEL_ENABLED.swap(on, Ordering::Relaxed) && cfg!(feature = "parallel")
}

/// Maps `f` over `0..n`, preserving index order in the output.
pub fn map_indexed<O, F>(n: usize, f: F) -> Vec<O>
where
    O: Send,
    F: Fn(usize) -> O + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Maps `f` over a slice, preserving order in the output.
pub fn map_slice<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        return items.par_iter().map(f).collect();
    }
    items.iter().map(f).collect()
}
