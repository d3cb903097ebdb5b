//! Capacity-bounded, class-balanced replay memory with disjoint train and
//! validation partitions.
//!
//! Balancing is greedy: each partition splits its capacity evenly over the
//! classes it has seen (remainder slots to the smallest class ids), evicts
//! uniformly at random from classes above their quota, and admits a uniform
//! sample of the incoming examples of classes below it.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::datasets::{FeatureShape, LabeledExample};
use crate::error::{Error, Result};
use crate::numerics::Rng;

pub const DEFAULT_VAL_SHARE: f64 = 0.10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
}

#[derive(Clone, Debug, Default)]
struct Store {
    capacity: usize,
    items: Vec<LabeledExample>,
    seen: BTreeSet<usize>,
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    feature_shape: Option<FeatureShape>,
    train: Store,
    val: Store,
}

/// Per-class quota: `capacity / |classes|` each, with the remainder handed
/// to the smallest class ids.
pub fn quota_table(capacity: usize, classes: &BTreeSet<usize>) -> BTreeMap<usize, usize> {
    let n = classes.len();
    if n == 0 {
        return BTreeMap::new();
    }
    let (base, rem) = (capacity / n, capacity % n);
    classes
        .iter()
        .enumerate()
        .map(|(rank, &c)| (c, base + usize::from(rank < rem)))
        .collect()
}

impl ReplayBuffer {
    /// Buffer of total capacity `capacity` with `round(0.1 · capacity)`
    /// slots reserved for validation.
    pub fn new(capacity: usize) -> Self {
        let val = (DEFAULT_VAL_SHARE * capacity as f64).round() as usize;
        Self::with_val_capacity(capacity, val).expect("default validation share fits")
    }

    pub fn with_val_capacity(capacity: usize, val_capacity: usize) -> Result<Self> {
        if val_capacity > capacity {
            return Err(Error::InvalidArgument(format!(
                "validation capacity {val_capacity} exceeds total capacity {capacity}"
            )));
        }
        Ok(Self {
            capacity,
            feature_shape: None,
            train: Store {
                capacity: capacity - val_capacity,
                ..Store::default()
            },
            val: Store {
                capacity: val_capacity,
                ..Store::default()
            },
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn val_capacity(&self) -> usize {
        self.val.capacity
    }

    pub fn partition_capacity(&self, p: Partition) -> usize {
        self.store(p).capacity
    }

    pub fn items(&self, p: Partition) -> &[LabeledExample] {
        &self.store(p).items
    }

    pub fn len(&self, p: Partition) -> usize {
        self.store(p).items.len()
    }

    pub fn is_empty(&self, p: Partition) -> bool {
        self.store(p).items.is_empty()
    }

    pub fn total_len(&self) -> usize {
        self.train.items.len() + self.val.items.len()
    }

    pub fn seen_classes(&self, p: Partition) -> &BTreeSet<usize> {
        &self.store(p).seen
    }

    fn store(&self, p: Partition) -> &Store {
        match p {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
        }
    }

    fn store_mut(&mut self, p: Partition) -> &mut Store {
        match p {
            Partition::Train => &mut self.train,
            Partition::Val => &mut self.val,
        }
    }

    /// Offers `new_examples` to partition `p`, rebalancing it.
    pub fn update(&mut self, p: Partition, new_examples: &[LabeledExample], rng: &mut Rng) -> Result<()> {
        if new_examples.is_empty() {
            return Ok(());
        }
        let shape = self.feature_shape.unwrap_or_else(|| new_examples[0].shape());
        if let Some(bad) = new_examples.iter().find(|e| e.shape() != shape) {
            return Err(Error::Shape(format!(
                "replay buffer holds {:?} features, got {:?}",
                shape,
                bad.shape()
            )));
        }
        self.feature_shape = Some(shape);

        let store = self.store_mut(p);
        store.seen.extend(new_examples.iter().map(|e| e.label));
        let quotas = quota_table(store.capacity, &store.seen);

        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, e) in store.items.iter().enumerate() {
            by_class.entry(e.label).or_default().push(i);
        }
        let mut evict = vec![false; store.items.len()];
        for (class, positions) in &by_class {
            let quota = quotas[class];
            if positions.len() > quota {
                for j in rng.sample_indices(positions.len(), positions.len() - quota) {
                    evict[positions[j]] = true;
                }
            }
        }
        let mut flags = evict.into_iter();
        store.items.retain(|_| !flags.next().unwrap_or(false));

        let mut candidates: BTreeMap<usize, Vec<&LabeledExample>> = BTreeMap::new();
        for e in new_examples {
            candidates.entry(e.label).or_default().push(e);
        }
        for (class, offered) in candidates {
            let held = store.items.iter().filter(|e| e.label == class).count();
            let slots = quotas[&class].saturating_sub(held);
            let take = slots.min(offered.len());
            for j in rng.sample_indices(offered.len(), take) {
                store.items.push(offered[j].clone());
            }
        }
        Ok(())
    }

    /// `k` examples from partition `p`: without replacement when `k` fits,
    /// otherwise uniformly with replacement.
    pub fn sample_batch(&self, p: Partition, k: usize, rng: &mut Rng) -> Result<Vec<&LabeledExample>> {
        let items = self.items(p);
        if k == 0 {
            return Ok(Vec::new());
        }
        if items.is_empty() {
            return Err(Error::Empty("replay partition"));
        }
        if k <= items.len() {
            Ok(rng.sample_indices(items.len(), k).into_iter().map(|i| &items[i]).collect())
        } else {
            Ok((0..k).map(|_| &items[rng.below(items.len())]).collect())
        }
    }

    pub fn class_counts(&self, p: Partition) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for e in self.items(p) {
            *counts.entry(e.label).or_insert(0) += 1;
        }
        counts
    }
}
