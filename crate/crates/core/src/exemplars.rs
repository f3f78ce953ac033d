//! Herding-based exemplar selection and budget-constrained exemplar storage.
//!
//! Selection ranks a class's instances by Euclidean distance between their
//! features and the class mean and keeps the closest `m`. The ranking is a
//! total order (ties broken by original index), so the selection for `m` is
//! always a prefix of the selection for `m + 1`, which is what makes
//! truncation a valid way to shrink per-class quotas.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Mean of the rows of an `n × d` feature matrix.
pub fn class_mean(features: &Tensor) -> Result<Tensor> {
    if features.shape().len() != 2 {
        return Err(Error::shape("class mean needs an n×d matrix"));
    }
    let (n, d) = (features.rows(), features.cols());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(features.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    Tensor::vector(mean)
}

fn sq_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Indices of the `m` rows nearest the class mean, nearest first.
pub fn herding_select(features: &Tensor, m: usize) -> Result<Vec<usize>> {
    let n = features.rows();
    if m == 0 || m > n {
        return Err(Error::contract(format!(
            "cannot select {m} exemplars from {n} instances"
        )));
    }
    let mean = class_mean(features)?;
    let mut ranked: Vec<(f64, usize)> = (0..n).map(|i| (sq_distance(features.row(i), mean.data()), i)).collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(ranked.into_iter().take(m).map(|(_, i)| i).collect())
}

/// A stored raw instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    /// Index of the instance in the training pool it came from.
    pub id: usize,
    pub label: usize,
    pub features: Vec<f64>,
}

/// Per-class exemplar lists in herding order, bounded by a global count.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExemplarSet {
    budget: usize,
    classes: BTreeMap<usize, Vec<Exemplar>>,
}

/// Per-class quota `⌊K / classes⌋`.
pub fn class_quota(budget: usize, seen_class_count: usize) -> Result<usize> {
    if seen_class_count == 0 {
        return Err(Error::contract("quota needs at least one class"));
    }
    let m = budget / seen_class_count;
    if m == 0 {
        return Err(Error::Budget(format!(
            "{budget} exemplars cannot cover {seen_class_count} classes"
        )));
    }
    Ok(m)
}

impl ExemplarSet {
    pub fn new(budget: usize) -> Self {
        ExemplarSet {
            budget,
            classes: BTreeMap::new(),
        }
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn len(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.classes.keys().copied()
    }

    pub fn class(&self, label: usize) -> Option<&[Exemplar]> {
        self.classes.get(&label).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Exemplar> {
        self.classes.values().flatten()
    }

    /// Replaces the list for `label`. Every exemplar must carry that label and
    /// the set must stay within budget.
    pub fn set_class(&mut self, label: usize, exemplars: Vec<Exemplar>) -> Result<()> {
        if let Some(bad) = exemplars.iter().find(|e| e.label != label) {
            return Err(Error::contract(format!(
                "exemplar {} labelled {} stored under class {label}",
                bad.id, bad.label
            )));
        }
        let others = self.len() - self.classes.get(&label).map_or(0, Vec::len);
        if others + exemplars.len() > self.budget {
            return Err(Error::Budget(format!(
                "storing {} exemplars for class {label} exceeds budget {}",
                exemplars.len(),
                self.budget
            )));
        }
        self.classes.insert(label, exemplars);
        Ok(())
    }

    /// Shrinks every class list to the quota for `budget` over `seen_class_count`
    /// classes by keeping its herding prefix.
    pub fn rebalance(mut self, budget: usize, seen_class_count: usize) -> Result<Self> {
        let m = class_quota(budget, seen_class_count)?;
        for list in self.classes.values_mut() {
            list.truncate(m);
        }
        self.budget = budget;
        if self.len() > budget {
            return Err(Error::Budget(format!(
                "{} stored exemplars exceed budget {budget}",
                self.len()
            )));
        }
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn four_points() -> Tensor {
        Tensor::from_rows(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [4.0, 4.0]]).unwrap()
    }

    fn ex(id: usize, label: usize) -> Exemplar {
        Exemplar {
            id,
            label,
            features: vec![id as f64],
        }
    }

    #[test]
    fn class_mean_examples() {
        let m = class_mean(&Tensor::from_rows(&[[0.0, 0.0], [2.0, 2.0]]).unwrap()).unwrap();
        assert_eq!(m.data(), &[1.0, 1.0]);
        let m = class_mean(&Tensor::from_rows(&[[3.0, -1.5]]).unwrap()).unwrap();
        assert_eq!(m.data(), &[3.0, -1.5]);
        let m = class_mean(&four_points()).unwrap();
        assert_eq!(m.data(), &[1.25, 1.25]);
    }

    #[test]
    fn herding_hand_example() {
        // Distances to (1.25, 1.25): 1.7678, 1.2748, 1.2748, 3.8891.
        assert_eq!(herding_select(&four_points(), 2).unwrap(), vec![1, 2]);
        assert_eq!(herding_select(&four_points(), 4).unwrap(), vec![1, 2, 0, 3]);
    }

    #[test]
    fn herding_ties_by_index() {
        let f = Tensor::from_rows(&[[1.0, 1.0]; 5]).unwrap();
        assert_eq!(herding_select(&f, 3).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn herding_rejects_oversized_request() {
        assert!(herding_select(&four_points(), 5).is_err());
        assert!(herding_select(&four_points(), 0).is_err());
    }

    #[test]
    fn quotas() {
        assert_eq!(class_quota(2000, 100).unwrap(), 20);
        assert_eq!(class_quota(10, 3).unwrap(), 3);
        assert_eq!(class_quota(7, 1).unwrap(), 7);
        assert!(matches!(class_quota(3, 4), Err(Error::Budget(_))));
    }

    #[test]
    fn rebalance_truncates_to_quota() {
        let mut set = ExemplarSet::new(30);
        for c in 0..3 {
            set.set_class(c, (0..10).map(|i| ex(c * 10 + i, c)).collect()).unwrap();
        }
        let set = set.rebalance(10, 3).unwrap();
        assert_eq!(set.len(), 9);
        assert_eq!(
            set.class(1).unwrap().iter().map(|e| e.id).collect::<Vec<_>>(),
            vec![10, 11, 12]
        );
    }

    #[test]
    fn set_class_enforces_budget_and_labels() {
        let mut set = ExemplarSet::new(3);
        assert!(set.set_class(0, vec![ex(0, 1)]).is_err());
        set.set_class(0, vec![ex(0, 0), ex(1, 0)]).unwrap();
        assert!(matches!(
            set.set_class(1, vec![ex(2, 1), ex(3, 1)]),
            Err(Error::Budget(_))
        ));
        set.set_class(0, vec![ex(0, 0)]).unwrap();
        set.set_class(1, vec![ex(2, 1), ex(3, 1)]).unwrap();
        assert_eq!(set.len(), 3);
    }

    fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
        prop::collection::vec(-3i32..=3, rows * cols)
            .prop_map(move |v| Tensor::new(vec![rows, cols], v.into_iter().map(f64::from).collect()).unwrap())
    }

    proptest! {
        #[test]
        fn herding_is_nested((f, m) in (2usize..12).prop_flat_map(|n| (matrix(n, 3), 1..n))) {
            let small = herding_select(&f, m).unwrap();
            let big = herding_select(&f, m + 1).unwrap();
            prop_assert_eq!(&big[..m], &small[..]);
        }

        #[test]
        fn herding_commutes_with_row_permutation(
            (f, perm) in (2usize..10).prop_flat_map(|n| (matrix(n, 2), Just((0..n).collect::<Vec<_>>()).prop_shuffle()))
        ) {
            let n = f.rows();
            let permuted = f.select_rows(&perm).unwrap();
            let picked: Vec<usize> = herding_select(&permuted, n).unwrap().into_iter().map(|i| perm[i]).collect();
            let direct = herding_select(&f, n).unwrap();
            // Same rows in the same distance order; only exact ties may reorder.
            let mean = class_mean(&f).unwrap();
            let d = |i: usize| sq_distance(f.row(i), mean.data());
            for (a, b) in picked.iter().zip(&direct) {
                prop_assert_eq!(d(*a), d(*b));
            }
            let mut sorted = picked.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn rebalance_respects_budget(sizes in prop::collection::vec(1usize..20, 1..8), k in 8usize..60) {
            let total: usize = sizes.iter().sum();
            let mut set = ExemplarSet::new(total);
            let mut id = 0;
            for (c, &s) in sizes.iter().enumerate() {
                set.set_class(c, (0..s).map(|_| { id += 1; ex(id, c) }).collect()).unwrap();
            }
            if k >= sizes.len() {
                let set = set.rebalance(k, sizes.len()).unwrap();
                prop_assert!(set.len() <= k);
            }
        }
    }
}
