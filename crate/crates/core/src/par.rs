//! Data-parallel helpers.
//!
//! Every hot loop in the crate (candidate scoring, EM expectation, per-pair
//! gradients, per-query metrics) goes through [`map_indexed`]. With the
//! `parallel` feature it fans out over rayon; without it, or when a caller
//! asks for [`ExecMode::Sequential`], it runs on the current thread. Results
//! always come back in input order so downstream reductions are reproducible.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    Parallel,
}

impl Default for ExecMode {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            ExecMode::Parallel
        } else {
            ExecMode::Sequential
        }
    }
}

/// Maps `f` over `items`, preserving order.
pub fn map_indexed<I, O, F>(mode: ExecMode, items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(usize, &I) -> O + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect(),
        _ => items.iter().enumerate().map(|(i, x)| f(i, x)).collect(),
    }
}

/// Like [`map_indexed`] but for fallible closures; the first error in input
/// order wins.
pub fn try_map_indexed<I, O, E, F>(mode: ExecMode, items: &[I], f: F) -> Result<Vec<O>, E>
where
    I: Sync,
    O: Send,
    E: Send,
    F: Fn(usize, &I) -> Result<O, E> + Sync + Send,
{
    map_indexed(mode, items, f).into_iter().collect()
}
