//! Deterministic k-fold splitting.

use super::{GraphDataset, GraphError};
use crate::rng;

/// `(train indices, test indices)` per fold.
pub type FoldSplit = (Vec<usize>, Vec<usize>);

/// Shuffled k-fold partition of `0..n` under `seed`. Folds are disjoint,
/// cover every index, and differ in size by at most one (the first
/// `n % k` folds are the larger ones).
pub fn kfold_indices(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>, GraphError> {
    if k < 2 {
        return Err(GraphError::Argument(format!("k = {k} must be at least 2")));
    }
    if k > n {
        return Err(GraphError::Argument(format!(
            "k = {k} exceeds dataset size {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng::seeded(seed);
    rng::shuffle(&mut rng, &mut order);
    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        folds.push(order[start..start + size].to_vec());
        start += size;
    }
    Ok(folds)
}

/// K-fold split of a dataset into (train indices, test indices) pairs.
pub fn split_kfold(
    dataset: &GraphDataset,
    k: usize,
    seed: u64,
) -> Result<Vec<FoldSplit>, GraphError> {
    let folds = kfold_indices(dataset.len(), k, seed)?;
    Ok((0..k)
        .map(|f| {
            let test = folds[f].clone();
            let train = folds
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != f)
                .flat_map(|(_, fold)| fold.iter().copied())
                .collect();
            (train, test)
        })
        .collect())
}
