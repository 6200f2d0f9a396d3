use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

/// Size of a label-fraction subset: `ceil(fraction * n)`, with a small
/// tolerance so that e.g. `0.1 * 60` (6.000000000000001 in binary) gives 6.
fn subset_len(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
}

/// Indices of a seeded subset. All fractions drawn with the same seed are
/// prefixes of one permutation, so smaller subsets nest inside larger ones.
pub fn subset_indices(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Param(format!("fraction {fraction} outside (0, 1]")));
    }
    if n == 0 {
        return Err(Error::Param("cannot subset an empty dataset".into()));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(seed, &[0x7375_6273]));
    perm.truncate(subset_len(n, fraction));
    Ok(perm)
}

pub fn subset_fraction<T: Clone>(items: &[T], fraction: f64, seed: u64) -> Result<Vec<T>> {
    Ok(subset_indices(items.len(), fraction, seed)?
        .into_iter()
        .map(|i| items[i].clone())
        .collect())
}

/// Seeded shuffle of `0..n`, then the first `train` indices and the next `test`.
pub fn train_test_split(n: usize, train: usize, test: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if train + test > n || train == 0 || test == 0 {
        return Err(Error::Param(format!("cannot split {n} scans into {train} train / {test} test")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(seed, &[0x7370_6c69]));
    let test_idx = perm[train..train + test].to_vec();
    perm.truncate(train);
    Ok((perm, test_idx))
}
