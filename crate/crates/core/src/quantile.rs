//! Nearest-rank quantiles shared by prototype filtering and threshold
//! calibration.

use crate::error::{GroodError, Result};

/// 1-based rank of the nearest-rank `q`-quantile among `n` values:
/// `max(1, ceil(q * n))`.
///
/// `q * n` is nudged down by a relative 1e-12 before rounding up, so products
/// such as `0.07 * 100 = 7.000000000000001` land on the intended rank.
pub fn nearest_rank(q: f64, n: usize) -> usize {
    let x = q * n as f64;
    let rank = (x - x.abs() * 1e-12).ceil();
    (rank.max(1.0) as usize).min(n)
}

/// Nearest-rank `q`-quantile of `values` (`0 <= q <= 1`).
pub fn nearest_rank_quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(GroodError::Empty("quantile of an empty set"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(GroodError::InvalidParameter(format!(
            "quantile {q} outside [0, 1]"
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    Ok(sorted[nearest_rank(q, sorted.len()) - 1])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks() {
        assert_eq!(nearest_rank(0.0, 4), 1);
        assert_eq!(nearest_rank(0.5, 4), 2);
        assert_eq!(nearest_rank(0.95, 100), 95);
        assert_eq!(nearest_rank(0.07, 100), 7);
        assert_eq!(nearest_rank(1.0, 7), 7);
        assert_eq!(nearest_rank(0.01, 7), 1);
    }

    #[test]
    fn quantile_values() {
        let v: Vec<f64> = (1..=100).rev().map(f64::from).collect();
        assert_eq!(nearest_rank_quantile(&v, 0.95).unwrap(), 95.0);
        assert_eq!(nearest_rank_quantile(&v, 1.0).unwrap(), 100.0);
        assert!(nearest_rank_quantile(&[], 0.5).is_err());
        assert!(nearest_rank_quantile(&v, 1.5).is_err());
    }
}
