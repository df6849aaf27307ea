//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature enabled, the helpers run on rayon's pool
//! unless strict mode has been switched on at runtime. Results are always
//! collected in input order and every reduction in the crate is performed
//! sequentially over those collected results, so the parallel and sequential
//! paths produce bitwise-identical outputs.

use std::sync::atomic::{AtomicBool, Ordering};

static STRICT: AtomicBool = AtomicBool::new(false);

/// Force single-threaded execution for the rest of the process.
pub fn set_strict(strict: bool) {
    STRICT.store(strict, Ordering::SeqCst);
}

pub fn is_strict() -> bool {
    STRICT.load(Ordering::SeqCst)
}

/// Whether the helpers below will actually fan out.
pub fn enabled() -> bool {
    cfg!(feature = "parallel") && !is_strict()
}

/// Order-preserving map over a slice.
pub fn map_slice<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if !is_strict() {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    items.iter().map(f).collect()
}

/// Order-preserving map over `0..n`.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if !is_strict() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Cap rayon's global pool. Returns false when the pool was already built
/// or the crate was compiled without the `parallel` feature.
pub fn configure_threads(threads: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global()
            .is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        false
    }
}

/// Sum in a fixed left-to-right order.
pub fn ordered_sum(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |acc, v| acc + v)
}

/// Pairwise (cascade) summation; error grows as O(log n) rather than O(n).
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        return ordered_sum(values);
    }
    let (left, right) = values.split_at(values.len() / 2);
    pairwise_sum(left) + pairwise_sum(right)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let v: Vec<usize> = (0..1000).collect();
        let out = map_slice(&v, |x| x * 2);
        assert!(out.iter().enumerate().all(|(i, &x)| x == 2 * i));
        let out = map_range(500, |i| i + 1);
        assert_eq!(out[499], 500);
    }

    #[test]
    fn pairwise_matches_naive_on_small_ints() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 499_500.0);
        assert_eq!(ordered_sum(&v), 499_500.0);
    }
}
