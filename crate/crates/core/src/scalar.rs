//! Floating point abstraction shared by every numerical module.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Scalar type the solvers are generic over. Implemented for `f32` and `f64`.
pub trait Scalar:
    'static
    + Send
    + Sync
    + Float
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + LowerExp
    + Sum
{
    /// Converts an `f64` literal. Values out of range saturate to infinity.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).unwrap_or_else(Self::infinity)
    }

    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).unwrap_or_else(Self::infinity)
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl<T> Scalar for T where
    T: 'static
        + Send
        + Sync
        + Float
        + NumAssign
        + FromPrimitive
        + ToPrimitive
        + Default
        + Debug
        + Display
        + LowerExp
        + Sum
{
}

/// Number of paths per reduction chunk. Partial sums are formed per chunk and
/// combined in chunk order, so results do not depend on the thread count.
pub const REDUCTION_CHUNK: usize = 1024;

/// Deterministic parallel sum.
pub fn det_sum<T: Scalar>(values: &[T]) -> T {
    use rayon::prelude::*;
    let partials: Vec<T> = values
        .par_chunks(REDUCTION_CHUNK)
        .map(|c| c.iter().fold(T::zero(), |a, &b| a + b))
        .collect();
    partials.into_iter().fold(T::zero(), |a, b| a + b)
}

/// Deterministic parallel sum of `f(i)` over `0..n`.
pub fn det_sum_by<T, F>(n: usize, f: F) -> T
where
    T: Scalar,
    F: Fn(usize) -> T + Sync,
{
    use rayon::prelude::*;
    let chunks = n.div_ceil(REDUCTION_CHUNK);
    let partials: Vec<T> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * REDUCTION_CHUNK;
            let hi = (lo + REDUCTION_CHUNK).min(n);
            (lo..hi).fold(T::zero(), |a, i| a + f(i))
        })
        .collect();
    partials.into_iter().fold(T::zero(), |a, b| a + b)
}

pub fn det_mean<T: Scalar>(values: &[T]) -> T {
    if values.is_empty() {
        return T::nan();
    }
    det_sum(values) / T::from_usize_lossy(values.len())
}

/// Deterministic parallel maximum of `f(i)` over `0..n`. NaN propagates.
pub fn det_max_by<T, F>(n: usize, f: F) -> T
where
    T: Scalar,
    F: Fn(usize) -> T + Sync,
{
    use rayon::prelude::*;
    (0..n)
        .into_par_iter()
        .map(&f)
        .reduce(T::neg_infinity, |a, b| {
            if a.is_nan() || b.is_nan() {
                T::nan()
            } else {
                a.max(b)
            }
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn det_sum_matches_across_pools() {
        let v: Vec<f64> = (0..100_000).map(|i| (i as f64).sin() * 1e-3).collect();
        let a = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| det_sum(&v));
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap()
            .install(|| det_sum(&v));
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn lit_works_for_f32() {
        let x: f32 = Scalar::lit(0.5);
        assert_eq!(x, 0.5f32);
        assert!(det_mean::<f32>(&[]).is_nan());
    }
}
