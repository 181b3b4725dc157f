//! Execution strategy for the data-parallel inner loops (batch gradients,
//! sample generation, pairwise distance blocks, grid cells).
//!
//! With the `parallel` feature the loops run on the rayon pool; without it,
//! or after [`set_mode`]`(Mode::Sequential)`, they run on the calling thread.
//! Every loop collects results in index order, so both strategies produce
//! bit-identical output.

use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Sequential,
    Parallel,
}

static MODE: AtomicU8 = AtomicU8::new(if cfg!(feature = "parallel") { 1 } else { 0 });

/// Selects the strategy for subsequent loops. `Parallel` degrades to
/// `Sequential` when the crate was built without the `parallel` feature.
pub fn set_mode(mode: Mode) {
    let v = match mode {
        Mode::Parallel if cfg!(feature = "parallel") => 1,
        _ => 0,
    };
    MODE.store(v, Ordering::Relaxed);
}

pub fn mode() -> Mode {
    if MODE.load(Ordering::Relaxed) == 1 {
        Mode::Parallel
    } else {
        Mode::Sequential
    }
}

/// Evaluates `f(0..n)` and returns the results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match mode() {
        #[cfg(feature = "parallel")]
        Mode::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// Like [`map_indexed`] but for fallible bodies; returns the first error in
/// index order.
pub fn try_map_indexed<T, E, F>(n: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    map_indexed(n, f).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_preserve_order() {
        let prev = mode();
        set_mode(Mode::Sequential);
        let a = map_indexed(100, |i| i * i);
        set_mode(Mode::Parallel);
        let b = map_indexed(100, |i| i * i);
        set_mode(prev);
        assert_eq!(a, b);
        assert_eq!(a[7], 49);
    }
}
