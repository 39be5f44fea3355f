use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Assignment of every stack to one of `fold_count` folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_count: usize,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldSplit {
    /// Stack ids in fold `k`, sorted.
    pub fn fold(&self, k: usize) -> Vec<String> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f == k)
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// Stack ids outside fold `k`, sorted.
    pub fn complement(&self, k: usize) -> Vec<String> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f != k)
            .map(|(id, _)| id.clone())
            .collect()
    }
}

/// Seeded shuffle, then round-robin assignment.
pub fn split_folds(stack_ids: &[String], fold_count: usize, seed: u64) -> Result<FoldSplit> {
    if fold_count == 0 {
        return Err(Error::arg("fold_count must be positive"));
    }
    if fold_count > stack_ids.len() {
        return Err(Error::arg(format!(
            "fold_count {fold_count} exceeds number of stacks {}",
            stack_ids.len()
        )));
    }
    let mut ids = stack_ids.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() != stack_ids.len() {
        return Err(Error::arg("duplicate stack ids"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let assignment = ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id, i % fold_count))
        .collect();
    Ok(FoldSplit { fold_count, assignment })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("stack_{i:03}")).collect()
    }

    #[test]
    fn even_partition() {
        let split = split_folds(&ids(8), 4, 7).unwrap();
        for k in 0..4 {
            assert_eq!(split.fold(k).len(), 2);
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(
            split_folds(&ids(11), 4, 3).unwrap(),
            split_folds(&ids(11), 4, 3).unwrap()
        );
    }

    #[test]
    fn too_many_folds() {
        assert!(matches!(split_folds(&ids(3), 4, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn input_order_does_not_matter() {
        let mut rev = ids(9);
        rev.reverse();
        assert_eq!(split_folds(&ids(9), 3, 1).unwrap(), split_folds(&rev, 3, 1).unwrap());
    }
}
