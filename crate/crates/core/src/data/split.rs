//! Stratified train/test splits and k-fold partitions of the train part.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Disjoint validation subsets covering `train`; empty until
    /// [`kfold_split`] runs.
    pub folds: Vec<Vec<usize>>,
}

/// Per class, shuffles the indices and sends `round(ratio·n)` of them
/// (at least one, leaving at least one) to train.
pub fn split_train_test(labels: &[usize], ratio: f64, seed: u64) -> Result<SplitPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::arg(format!("split ratio {ratio} outside (0, 1)")));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = Rng::new(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            return Err(Error::Split(format!(
                "class {c} has {} sample(s); at least 2 are needed",
                members.len()
            )));
        }
        rng.shuffle(&mut members);
        let n = members.len();
        let k = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
        train.extend_from_slice(&members[..k]);
        test.extend_from_slice(&members[k..]);
    }
    if train.is_empty() {
        return Err(Error::Split("no samples to split".into()));
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitPlan {
        seed,
        train,
        test,
        folds: Vec::new(),
    })
}

/// Adds `k` shuffled folds over `plan.train` with sizes differing by at
/// most one. The test part is left untouched.
pub fn kfold_split(plan: &SplitPlan, k: usize, seed: u64) -> Result<SplitPlan> {
    if k < 2 {
        return Err(Error::arg(format!("k-fold needs k ≥ 2, got {k}")));
    }
    let n = plan.train.len();
    if k > n {
        return Err(Error::arg(format!("k={k} exceeds the {n} training samples")));
    }
    let mut order = plan.train.clone();
    Rng::new(seed).fork(1).shuffle(&mut order);
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        let mut f = order[start..start + len].to_vec();
        f.sort_unstable();
        folds.push(f);
        start += len;
    }
    Ok(SplitPlan {
        folds,
        ..plan.clone()
    })
}

impl SplitPlan {
    /// `(train, validation)` indices for fold `i`.
    pub fn fold(&self, i: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let val = self
            .folds
            .get(i)
            .ok_or_else(|| Error::arg(format!("fold {i} of {}", self.folds.len())))?;
        let train = self.train.iter().copied().filter(|x| val.binary_search(x).is_err()).collect();
        Ok((train, val.clone()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("split plan serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn balanced(per_class: usize, classes: usize) -> Vec<usize> {
        (0..per_class * classes).map(|i| i % classes).collect()
    }

    #[test]
    fn seventy_thirty_per_class() {
        let labels = balanced(100, 10);
        let plan = split_train_test(&labels, 0.7, 3).unwrap();
        assert_eq!((plan.train.len(), plan.test.len()), (700, 300));
        for c in 0..10 {
            assert_eq!(plan.train.iter().filter(|&&i| labels[i] == c).count(), 70);
        }
    }

    #[test]
    fn half_split_of_pairs() {
        let labels = balanced(2, 3);
        let plan = split_train_test(&labels, 0.5, 0).unwrap();
        for c in 0..3 {
            assert_eq!(plan.train.iter().filter(|&&i| labels[i] == c).count(), 1);
            assert_eq!(plan.test.iter().filter(|&&i| labels[i] == c).count(), 1);
        }
    }

    #[test]
    fn singleton_class_is_split_error() {
        assert!(matches!(split_train_test(&[0, 0, 1], 0.7, 0), Err(Error::Split(_))));
        assert!(split_train_test(&[0, 0], 1.0, 0).is_err());
    }

    #[test]
    fn deterministic_under_seed() {
        let labels = balanced(17, 4);
        let a = kfold_split(&split_train_test(&labels, 0.7, 9).unwrap(), 5, 9).unwrap();
        let b = kfold_split(&split_train_test(&labels, 0.7, 9).unwrap(), 5, 9).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let c = split_train_test(&labels, 0.7, 10).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn hundred_into_five_folds_of_twenty() {
        let plan = SplitPlan {
            seed: 0,
            train: (0..100).collect(),
            test: vec![],
            folds: vec![],
        };
        let p = kfold_split(&plan, 5, 1).unwrap();
        assert!(p.folds.iter().all(|f| f.len() == 20));
        let (tr, val) = p.fold(2).unwrap();
        assert_eq!((tr.len(), val.len()), (80, 20));
    }

    #[test]
    fn potato_protocol_fold_sizes() {
        let plan = SplitPlan {
            seed: 0,
            train: (0..2010).collect(),
            test: (2010..2879).collect(),
            folds: vec![],
        };
        let p = kfold_split(&plan, 5, 0).unwrap();
        for i in 0..5 {
            let (tr, val) = p.fold(i).unwrap();
            assert_eq!((tr.len(), val.len()), (1608, 402));
        }
        assert_eq!(p.test.len(), 869);
    }

    #[test]
    fn k_too_large_or_small() {
        let plan = split_train_test(&balanced(2, 2), 0.5, 0).unwrap();
        assert!(matches!(kfold_split(&plan, 3, 0), Err(Error::Argument(_))));
        assert!(kfold_split(&plan, 1, 0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn folds_partition_train(seed: u64, per_class in 2usize..30, classes in 1usize..6, k in 2usize..6, ratio in 0.2f64..0.9) {
            let labels = balanced(per_class, classes);
            let plan = split_train_test(&labels, ratio, seed).unwrap();
            let train: BTreeSet<usize> = plan.train.iter().copied().collect();
            let test: BTreeSet<usize> = plan.test.iter().copied().collect();
            proptest::prop_assert!(train.is_disjoint(&test));
            proptest::prop_assert_eq!(train.len() + test.len(), labels.len());
            for c in 0..classes {
                let got = plan.train.iter().filter(|&&i| labels[i] == c).count() as f64;
                proptest::prop_assert!((got - ratio * per_class as f64).abs() <= 1.0);
            }
            if k <= plan.train.len() {
                let p = kfold_split(&plan, k, seed).unwrap();
                proptest::prop_assert_eq!(&p.test, &plan.test);
                let mut union = BTreeSet::new();
                for f in &p.folds {
                    for &x in f {
                        proptest::prop_assert!(union.insert(x), "fold overlap at {}", x);
                    }
                }
                proptest::prop_assert_eq!(union, train);
                let sizes: Vec<usize> = p.folds.iter().map(Vec::len).collect();
                proptest::prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            }
        }
    }
}
