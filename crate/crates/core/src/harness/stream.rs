//! Base-x / Inc-y task splits over a shuffled class order.

use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::prng::shuffle_class_order;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Classes in the first task; 0 means the first task is an ordinary increment.
    pub base: usize,
    pub increment: usize,
    pub classes: usize,
}

impl SplitSpec {
    pub fn new(base: usize, increment: usize, classes: usize) -> Result<Self> {
        let s = SplitSpec {
            base,
            increment,
            classes,
        };
        s.validate()?;
        Ok(s)
    }

    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Split {
            base: self.base,
            increment: self.increment,
            classes: self.classes,
            reason: reason.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.increment == 0 {
            return Err(self.err("increment must be at least 1"));
        }
        if self.base >= self.classes && !(self.base == self.classes && self.base > 0) {
            return Err(self.err("base classes must leave room for increments"));
        }
        let rest = self.classes - self.base;
        if !rest.is_multiple_of(self.increment) {
            return Err(self.err(format!("{} does not divide {rest}", self.increment)));
        }
        Ok(())
    }

    /// Number of tasks `B`.
    pub fn stage_count(&self) -> usize {
        let rest = (self.classes - self.base) / self.increment;
        if self.base > 0 {
            1 + rest
        } else {
            rest
        }
    }

    /// Class count of each task.
    pub fn stage_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.stage_count());
        if self.base > 0 {
            sizes.push(self.base);
        }
        sizes.extend(std::iter::repeat_n(self.increment, (self.classes - self.base) / self.increment));
        sizes
    }
}

/// Class order, per-task class lists and the train/test instance ids of each task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub class_order: Vec<usize>,
    pub stage_classes: Vec<Vec<usize>>,
    pub train_ids: Vec<Vec<usize>>,
    pub test_ids: Vec<Vec<usize>>,
}

impl TaskStream {
    pub fn stage_count(&self) -> usize {
        self.stage_classes.len()
    }

    /// `rank[c]` is the position of original class `c` in the class order,
    /// i.e. its incremental label.
    pub fn incremental_labels(&self) -> Vec<usize> {
        let mut rank = vec![0; self.class_order.len()];
        for (i, &c) in self.class_order.iter().enumerate() {
            rank[c] = i;
        }
        rank
    }

    /// Test ids of every class seen up to and including `stage`.
    pub fn seen_test_ids(&self, stage: usize) -> Vec<usize> {
        let mut ids: Vec<usize> = self.test_ids[..=stage].iter().flatten().copied().collect();
        ids.sort_unstable();
        ids
    }
}

pub fn make_stream(dataset: &Dataset, split: SplitSpec, seed: u64) -> Result<TaskStream> {
    split.validate()?;
    if split.classes != dataset.n_classes() {
        return Err(split.err(format!("dataset has {} classes", dataset.n_classes())));
    }
    let class_order = shuffle_class_order(split.classes, seed);
    let mut stage_classes = Vec::new();
    let mut at = 0;
    for size in split.stage_sizes() {
        stage_classes.push(class_order[at..at + size].to_vec());
        at += size;
    }
    let ids_for = |set: &super::data::LabeledSet, classes: &[usize]| set.ids_where(|y| classes.contains(&y));
    let train_ids = stage_classes.iter().map(|c| ids_for(&dataset.train, c)).collect();
    let test_ids = stage_classes.iter().map(|c| ids_for(&dataset.test, c)).collect();
    Ok(TaskStream {
        class_order,
        stage_classes,
        train_ids,
        test_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::synth_dataset;

    #[test]
    fn split_shapes() {
        let s = SplitSpec::new(0, 10, 100).unwrap();
        assert_eq!(s.stage_count(), 10);
        assert_eq!(s.stage_sizes(), vec![10; 10]);
        let s = SplitSpec::new(50, 5, 100).unwrap();
        assert_eq!(s.stage_count(), 11);
        assert_eq!(s.stage_sizes()[0], 50);
        assert_eq!(&s.stage_sizes()[1..], &[5; 10]);
        let one = SplitSpec::new(10, 1, 10).unwrap();
        assert_eq!(one.stage_count(), 1);
    }

    #[test]
    fn split_errors_name_parameters() {
        let e = SplitSpec::new(0, 3, 10).unwrap_err();
        assert!(matches!(
            e,
            Error::Split {
                base: 0,
                increment: 3,
                classes: 10,
                ..
            }
        ));
        assert!(e.to_string().contains("base=0, increment=3, classes=10"));
        assert!(SplitSpec::new(4, 4, 10).is_err());
        assert!(SplitSpec::new(0, 0, 10).is_err());
        assert!(SplitSpec::new(12, 1, 10).is_err());
    }

    #[test]
    fn stream_partitions_classes_and_instances() {
        let ds = synth_dataset(10, 5, 2, 3, 0.3, 1).unwrap();
        let stream = make_stream(&ds, SplitSpec::new(4, 2, 10).unwrap(), 1993).unwrap();
        assert_eq!(stream.stage_count(), 4);
        let mut all: Vec<usize> = stream.stage_classes.iter().flatten().copied().collect();
        assert_eq!(all.len(), 10);
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(stream.stage_classes[0], stream.class_order[..4].to_vec());
        for (b, ids) in stream.train_ids.iter().enumerate() {
            assert_eq!(ids.len(), stream.stage_classes[b].len() * 5);
            assert!(ids
                .iter()
                .all(|&i| stream.stage_classes[b].contains(&ds.train.labels[i])));
        }
        let rank = stream.incremental_labels();
        for (i, &c) in stream.class_order.iter().enumerate() {
            assert_eq!(rank[c], i);
        }
        assert_eq!(stream.seen_test_ids(3).len(), 20);
    }

    #[test]
    fn mismatched_class_count() {
        let ds = synth_dataset(6, 2, 1, 2, 0.3, 1).unwrap();
        assert!(make_stream(&ds, SplitSpec::new(0, 2, 10).unwrap(), 1).is_err());
    }
}
