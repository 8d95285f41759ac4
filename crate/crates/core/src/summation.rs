//! Order-fixed pairwise summation.
//!
//! The reduction tree depends only on the number of terms, so parallel
//! producers feeding it give bit-identical results for any worker count.

use crate::scalar::Scalar;

const LEAF: usize = 8;

/// Pairwise sum of `f(0) + ... + f(len - 1)`.
pub fn pairwise_sum_by<T: Scalar>(len: usize, f: &impl Fn(usize) -> T) -> T {
    fn rec<T: Scalar>(lo: usize, hi: usize, f: &impl Fn(usize) -> T) -> T {
        if hi - lo <= LEAF {
            let mut acc = T::zero();
            for k in lo..hi {
                acc += f(k);
            }
            acc
        } else {
            let mid = lo + (hi - lo) / 2;
            rec(lo, mid, f) + rec(mid, hi, f)
        }
    }
    rec(0, len, f)
}

pub fn pairwise_sum<T: Scalar>(values: &[T]) -> T {
    pairwise_sum_by(values.len(), &|k| values[k])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_naive_on_small_inputs() {
        let v: Vec<f64> = (0..37).map(|k| k as f64 * 0.25).collect();
        let naive: f64 = v.iter().sum();
        assert_eq!(pairwise_sum(&v), naive);
        assert_eq!(pairwise_sum::<f64>(&[]), 0.0);
    }

    #[test]
    fn beats_naive_on_ill_conditioned_sum() {
        let n = 1_000_000;
        let v = vec![0.1f32; n];
        let naive: f32 = v.iter().copied().sum();
        let pw = pairwise_sum(&v);
        let exact = 100_000.0f64;
        assert!((pw as f64 - exact).abs() < (naive as f64 - exact).abs());
        assert!((pw as f64 - exact).abs() / exact < 1e-5);
    }
}
