//! Data-parallel map over task indices with a sequential fallback.
//!
//! Every ensemble in this crate is a map `index -> value` where the work
//! for each index is seeded independently of scheduling order (see
//! [`crate::rng`]). Reductions are then performed in index order, so the
//! parallel and sequential paths produce bitwise identical results.

/// Maps `f` over `0..n` collecting results in index order, using the rayon
/// thread pool when the `parallel` feature is enabled.
#[cfg(feature = "parallel")]
pub fn indexed_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn indexed_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    indexed_map_seq(n, f)
}

/// Sequential reference path; always available so benchmarks can compare
/// the two directly in one build.
pub fn indexed_map_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Kahan-compensated sum in slice order.
pub fn stable_sum(xs: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for &x in xs {
        let y = x - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Sample mean and the half-width of the 95% normal-approximation CI.
pub fn mean_ci(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = stable_sum(xs) / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = xs.iter().map(|&x| (x - mean) * (x - mean)).collect();
    let var = stable_sum(&sq) / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}
