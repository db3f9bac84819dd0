//! Repeated shuffled train/test partitions.
//!
//! The measurement protocol runs several independent 90/10 splits rather
//! than literal k-fold cross-validation; every repeat is a fresh shuffled
//! partition that covers all ids exactly once.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// `n_repeats` independent partitions of `0..n_records` into
/// (train, test) id lists. `test_fraction` of the ids (rounded, at least 1)
/// go to the test side.
pub fn split_protocol(
    n_records: usize,
    n_repeats: usize,
    test_fraction: f64,
    seed: u64,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if !(0.0..1.0).contains(&test_fraction) || test_fraction <= 0.0 {
        return Err(Error::domain(format!(
            "test_fraction must be in (0, 1), got {test_fraction}"
        )));
    }
    let n_test = (n_records as f64 * test_fraction).round() as usize;
    if n_test == 0 || n_test >= n_records {
        return Err(Error::domain(format!(
            "{n_records} records at fraction {test_fraction} leave an empty train or test side"
        )));
    }
    let mut out = Vec::with_capacity(n_repeats);
    for rep in 0..n_repeats {
        let mut ids: Vec<usize> = (0..n_records).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(rep as u64));
        ids.shuffle(&mut rng);
        let mut test: Vec<usize> = ids[..n_test].to_vec();
        let mut train: Vec<usize> = ids[n_test..].to_vec();
        test.sort_unstable();
        train.sort_unstable();
        out.push((train, test));
    }
    Ok(out)
}
