//! Subject-grouped cross-validation splits.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitMode {
    /// One split per distinct subject.
    Loso,
    /// `k` folds; sorted subjects are dealt round-robin.
    KFold(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub test_subjects: Vec<String>,
}

fn groups<S: AsRef<str>>(ids: &[S]) -> BTreeMap<&str, Vec<usize>> {
    let mut g: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in ids.iter().enumerate() {
        g.entry(s.as_ref()).or_default().push(i);
    }
    g
}

fn split_for(n: usize, test_subjects: Vec<&str>, by_subject: &BTreeMap<&str, Vec<usize>>) -> Split {
    let mut in_test = vec![false; n];
    for s in &test_subjects {
        for &i in &by_subject[s] {
            in_test[i] = true;
        }
    }
    Split {
        train: (0..n).filter(|&i| !in_test[i]).collect(),
        test: (0..n).filter(|&i| in_test[i]).collect(),
        test_subjects: test_subjects.into_iter().map(String::from).collect(),
    }
}

pub fn group_splits<S: AsRef<str>>(ids: &[S], mode: SplitMode) -> Result<Vec<Split>> {
    if ids.is_empty() {
        return Err(Error::InvalidArgument("no subject ids".into()));
    }
    let by_subject = groups(ids);
    let subjects: Vec<&str> = by_subject.keys().copied().collect();
    match mode {
        SplitMode::Loso => Ok(subjects
            .iter()
            .map(|&s| split_for(ids.len(), vec![s], &by_subject))
            .collect()),
        SplitMode::KFold(k) => {
            if k == 0 || k > subjects.len() {
                return Err(Error::InvalidArgument(format!(
                    "{k} folds requested but only {} distinct subjects",
                    subjects.len()
                )));
            }
            Ok((0..k)
                .map(|f| {
                    let fold = subjects.iter().skip(f).step_by(k).copied().collect();
                    split_for(ids.len(), fold, &by_subject)
                })
                .collect())
        }
    }
}

/// Holds out a random `fraction` of the subjects among `indices` (at least
/// one when two or more subjects are present). Returns `(train, val)`.
pub fn validation_split<S: AsRef<str>>(
    ids: &[S],
    indices: &[usize],
    fraction: f64,
    rng: &mut impl Rng,
) -> (Vec<usize>, Vec<usize>) {
    let sub: Vec<&str> = indices.iter().map(|&i| ids[i].as_ref()).collect();
    let by_subject = groups(&sub);
    let mut subjects: Vec<&str> = by_subject.keys().copied().collect();
    if fraction <= 0.0 || subjects.len() < 2 {
        return (indices.to_vec(), Vec::new());
    }
    subjects.shuffle(rng);
    let n_val = ((subjects.len() as f64 * fraction).ceil() as usize).clamp(1, subjects.len() - 1);
    let mut val: Vec<usize> = subjects[..n_val]
        .iter()
        .flat_map(|s| by_subject[s].iter().map(|&j| indices[j]))
        .collect();
    val.sort_unstable();
    let train = indices
        .iter()
        .copied()
        .filter(|i| val.binary_search(i).is_err())
        .collect();
    (train, val)
}
