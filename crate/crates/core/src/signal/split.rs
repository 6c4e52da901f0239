//! Subject-level train/validation/test split.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use super::SignalError;
use crate::rng::substream;

/// Target proportions; must be nonnegative and sum to 1.
pub type SplitFractions = (f64, f64, f64);

pub const DEFAULT_SPLIT: SplitFractions = (0.70, 0.15, 0.15);

/// Disjoint, exhaustive assignment of subject ids to the three splits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndex {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitIndex {
    pub fn validate(&self) -> Result<(), SignalError> {
        let mut seen = BTreeSet::new();
        for id in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(id.clone()) {
                return Err(SignalError::InvalidArgument(format!(
                    "subject {id:?} appears in more than one split"
                )));
            }
        }
        Ok(())
    }

    pub fn contains_train(&self, id: &str) -> bool {
        self.train.iter().any(|s| s == id)
    }
}

/// Splits subjects into train/val/test by whole subject.
///
/// Counts are fixed before shuffling: train and validation each get the
/// rounded share of `n`, test absorbs the remainder, which matches
/// largest-remainder apportionment for the default 70/15/15 fractions
/// (123 subjects give 86/18/19). The subject list is sorted before the
/// seeded shuffle, so the split depends only on the id set and the seed.
pub fn split_by_subject(
    subject_ids: &[String],
    fractions: SplitFractions,
    seed: u64,
) -> Result<SplitIndex, SignalError> {
    let (ft, fv, fe) = fractions;
    if !(ft >= 0.0 && fv >= 0.0 && fe >= 0.0) || ((ft + fv + fe) - 1.0).abs() > 1e-9 {
        return Err(SignalError::InvalidArgument(format!(
            "split fractions {fractions:?} must be nonnegative and sum to 1"
        )));
    }
    let n = subject_ids.len();
    if n < 3 {
        return Err(SignalError::InvalidArgument(format!(
            "cannot split {n} subjects across 3 splits"
        )));
    }
    let unique: BTreeSet<&String> = subject_ids.iter().collect();
    if unique.len() != n {
        return Err(SignalError::InvalidArgument("duplicate subject ids in split input".into()));
    }

    let n_train = (ft * n as f64).round() as usize;
    let n_val = (fv * n as f64).round() as usize;
    if n_train + n_val > n {
        return Err(SignalError::InvalidArgument(format!(
            "split fractions {fractions:?} leave no test subjects for n = {n}"
        )));
    }

    let mut sorted: Vec<String> = subject_ids.to_vec();
    sorted.sort();
    sorted.shuffle(&mut substream(seed, "split"));

    let (train, rest) = sorted.split_at(n_train);
    let (val, test) = rest.split_at(n_val);
    Ok(SplitIndex {
        train: train.to_vec(),
        val: val.to_vec(),
        test: test.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i:03}")).collect()
    }

    #[test]
    fn counts_for_123_subjects() {
        let split = split_by_subject(&ids(123), DEFAULT_SPLIT, 1).unwrap();
        assert_eq!(split.train.len(), 86);
        assert_eq!(split.val.len(), 18);
        assert_eq!(split.test.len(), 19);
    }

    #[test]
    fn disjoint_and_exhaustive_across_seeds() {
        let all = ids(37);
        for seed in 0..100 {
            let split = split_by_subject(&all, DEFAULT_SPLIT, seed).unwrap();
            split.validate().unwrap();
            let mut merged: Vec<String> = split
                .train
                .iter()
                .chain(&split.val)
                .chain(&split.test)
                .cloned()
                .collect();
            merged.sort();
            assert_eq!(merged, all);
        }
    }

    #[test]
    fn same_seed_same_split_regardless_of_input_order() {
        let a = split_by_subject(&ids(20), DEFAULT_SPLIT, 9).unwrap();
        let mut reversed = ids(20);
        reversed.reverse();
        let b = split_by_subject(&reversed, DEFAULT_SPLIT, 9).unwrap();
        assert_eq!(a, b);
        let c = split_by_subject(&ids(20), DEFAULT_SPLIT, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn too_few_subjects_rejected() {
        assert!(split_by_subject(&ids(2), DEFAULT_SPLIT, 0).is_err());
        assert!(split_by_subject(&ids(3), DEFAULT_SPLIT, 0).is_ok());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut with_dup = ids(5);
        with_dup[4] = with_dup[0].clone();
        assert!(split_by_subject(&with_dup, DEFAULT_SPLIT, 0).is_err());
    }

    #[test]
    fn bad_fractions_rejected() {
        assert!(split_by_subject(&ids(10), (0.5, 0.2, 0.2), 0).is_err());
        assert!(split_by_subject(&ids(10), (1.2, -0.1, -0.1), 0).is_err());
    }

    #[test]
    fn proportions_track_fractions() {
        for n in [10usize, 33, 64, 123, 200] {
            let split = split_by_subject(&ids(n), DEFAULT_SPLIT, 3).unwrap();
            assert_eq!(split.train.len(), (0.70 * n as f64).round() as usize);
            assert_eq!(split.val.len(), (0.15 * n as f64).round() as usize);
            assert_eq!(split.train.len() + split.val.len() + split.test.len(), n);
        }
    }
}
