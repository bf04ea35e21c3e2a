//! Deterministic k-fold assignment.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Subject id to fold index, reconstructible from `(seed, ids, n_folds)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub n_folds: usize,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldSplit {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignment.get(id).copied()
    }

    /// Ids in `fold`, in the order they appear in `ordered_ids`.
    pub fn members<'a>(&self, fold: usize, ordered_ids: &'a [String]) -> Vec<&'a String> {
        ordered_ids
            .iter()
            .filter(|id| self.fold_of(id) == Some(fold))
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_folds];
        for &f in self.assignment.values() {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Seeded shuffle followed by round-robin assignment.
pub fn split_folds(subject_ids: &[String], n_folds: usize, seed: u64) -> Result<FoldSplit> {
    if n_folds < 2 {
        return Err(Error::Split(format!("need at least 2 folds, got {n_folds}")));
    }
    if subject_ids.len() < n_folds {
        return Err(Error::Split(format!(
            "{} subjects cannot fill {n_folds} folds",
            subject_ids.len()
        )));
    }
    let mut order: Vec<usize> = (0..subject_ids.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut assignment = BTreeMap::new();
    for (pos, &idx) in order.iter().enumerate() {
        if assignment
            .insert(subject_ids[idx].clone(), pos % n_folds)
            .is_some()
        {
            return Err(Error::Split(format!(
                "duplicate subject id {}",
                subject_ids[idx]
            )));
        }
    }
    Ok(FoldSplit {
        n_folds,
        assignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i:03}")).collect()
    }

    #[test]
    fn balanced_and_deterministic() {
        let split = split_folds(&ids(10), 5, 3).unwrap();
        assert_eq!(split.fold_sizes(), vec![2; 5]);
        assert_eq!(split, split_folds(&ids(10), 5, 3).unwrap());
        let uneven = split_folds(&ids(13), 5, 3).unwrap();
        let sizes = uneven.fold_sizes();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn errors() {
        assert!(matches!(split_folds(&ids(3), 5, 0), Err(Error::Split(_))));
        assert!(matches!(split_folds(&ids(10), 1, 0), Err(Error::Split(_))));
        let mut dup = ids(4);
        dup[3] = dup[0].clone();
        assert!(matches!(split_folds(&dup, 2, 0), Err(Error::Split(_))));
    }

    #[test]
    fn seeds_move_subjects() {
        let a = split_folds(&ids(10), 5, 1).unwrap();
        let b = split_folds(&ids(10), 5, 2).unwrap();
        assert_ne!(a.assignment, b.assignment);
    }

    #[test]
    fn fold_membership_is_uniform_over_seeds() {
        // Chi-square over 1000 seeds per id, 4 degrees of freedom.
        // Critical value at alpha = 0.001 is 18.47.
        let ids = ids(10);
        let mut counts = vec![[0usize; 5]; ids.len()];
        for seed in 0..1000u64 {
            let split = split_folds(&ids, 5, seed).unwrap();
            for (i, id) in ids.iter().enumerate() {
                counts[i][split.fold_of(id).unwrap()] += 1;
            }
        }
        for row in &counts {
            let chi2: f64 = row
                .iter()
                .map(|&c| (c as f64 - 200.0).powi(2) / 200.0)
                .sum();
            assert!(chi2 < 18.47, "chi2 = {chi2}, counts = {row:?}");
        }
    }

    proptest::proptest! {
        #[test]
        fn partition(n in 2usize..40, k in 2usize..6, seed in 0u64..1000) {
            proptest::prop_assume!(n >= k);
            let ids = ids(n);
            let split = split_folds(&ids, k, seed).unwrap();
            proptest::prop_assert_eq!(split.assignment.len(), n);
            let total: usize = (0..k).map(|f| split.members(f, &ids).len()).sum();
            proptest::prop_assert_eq!(total, n);
            proptest::prop_assert!(split.fold_sizes().iter().all(|&s| s > 0));
        }
    }
}
