//! Expansion-count estimation for the constrained search.
//!
//! Decode reports carry a histogram of per-frame label emissions. Pooling
//! those over a calibration set and asking for the smallest expansion count
//! that covers most emitting frames gives a data-driven `n_step`: frames
//! that emit nothing are irrelevant to the choice, so only counts `n >= 1`
//! participate.

use std::collections::BTreeMap;

use crate::{Error, Result};

/// Fraction of emitting frames the chosen expansion count must cover.
pub const DEFAULT_COVERAGE: f64 = 0.99;

/// Accumulates one decode's expansion histogram into a running pool.
pub fn merge_histograms(into: &mut BTreeMap<usize, u64>, from: &BTreeMap<usize, u64>) {
    for (&n, &count) in from {
        *into.entry(n).or_insert(0) += count;
    }
}

/// Smallest expansion count whose cumulative share of emitting frames
/// reaches `coverage`. An empty pool (no frame ever emitted) falls back
/// to 1.
pub fn estimate_auto_nstep(histogram: &BTreeMap<usize, u64>, coverage: f64) -> Result<usize> {
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(Error::Config(format!(
            "coverage must be in (0, 1], got {coverage}"
        )));
    }
    let total: u64 = histogram
        .iter()
        .filter(|(&n, _)| n >= 1)
        .map(|(_, &count)| count)
        .sum();
    if total == 0 {
        return Ok(1);
    }
    let mut cumulative = 0u64;
    let mut max_n = 1usize;
    for (&n, &count) in histogram.iter().filter(|(&n, _)| n >= 1) {
        cumulative += count;
        max_n = n;
        // Tiny slack so an exact-threshold share is not lost to rounding.
        if cumulative as f64 / total as f64 + 1e-12 >= coverage {
            return Ok(n);
        }
    }
    Ok(max_n.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hist(pairs: &[(usize, u64)]) -> BTreeMap<usize, u64> {
        pairs.iter().copied().collect()
    }

    #[test]
    fn covers_the_bulk_of_emitting_frames() {
        // Frame emissions dominated by single labels with a thin two-label
        // tail: 89.62% / 9.52% / 0.86% of emitting frames.
        let pool = hist(&[(0, 153_000), (1, 8962), (2, 952), (3, 86)]);
        assert_eq!(estimate_auto_nstep(&pool, DEFAULT_COVERAGE).unwrap(), 2);
    }

    #[test]
    fn single_label_frames_only_gives_one() {
        let pool = hist(&[(0, 40), (1, 100)]);
        assert_eq!(estimate_auto_nstep(&pool, 0.99).unwrap(), 1);
    }

    #[test]
    fn idle_frames_alone_fall_back_to_one() {
        let pool = hist(&[(0, 500)]);
        assert_eq!(estimate_auto_nstep(&pool, 0.99).unwrap(), 1);
        assert_eq!(estimate_auto_nstep(&BTreeMap::new(), 0.99).unwrap(), 1);
    }

    #[test]
    fn full_coverage_needs_the_longest_expansion() {
        let pool = hist(&[(1, 999), (4, 1)]);
        assert_eq!(estimate_auto_nstep(&pool, 1.0).unwrap(), 4);
        assert_eq!(estimate_auto_nstep(&pool, 0.99).unwrap(), 1);
    }

    #[test]
    fn coverage_outside_unit_interval_is_rejected() {
        let pool = hist(&[(1, 10)]);
        assert!(estimate_auto_nstep(&pool, 0.0).is_err());
        assert!(estimate_auto_nstep(&pool, 1.5).is_err());
        assert!(estimate_auto_nstep(&pool, f64::NAN).is_err());
    }

    #[test]
    fn merge_accumulates_counts() {
        let mut pool = hist(&[(0, 3), (1, 2)]);
        merge_histograms(&mut pool, &hist(&[(1, 5), (2, 1)]));
        assert_eq!(pool, hist(&[(0, 3), (1, 7), (2, 1)]));
    }
}
