use ndarray::Array2;
use rand::seq::SliceRandom;

use super::Unlabeled;
use crate::rng::{rng_for, Stream};

/// A mini-batch of unit-norm rows.
#[derive(Debug, Clone)]
pub struct FeatureBatch {
    pub z: Array2<f64>,
}

/// One epoch's shuffled partition of `0..n` into batches.
///
/// The order is a pure function of `(seed, task, epoch)`.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    order: Vec<usize>,
    batch_size: usize,
}

impl BatchPlan {
    pub fn new(n: usize, batch_size: usize, seed: u64, task: usize, epoch: usize) -> Self {
        assert!(batch_size >= 1, "batch size must be positive");
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = rng_for(seed, Stream::Shuffle, &[task as u64, epoch as u64]);
        order.shuffle(&mut rng);
        Self {
            order,
            batch_size: batch_size.min(n.max(1)),
        }
    }

    pub fn len(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn indices(&self) -> impl Iterator<Item = &[usize]> {
        self.order.chunks(self.batch_size)
    }

    pub fn batches<'a>(&'a self, data: &'a Unlabeled) -> impl Iterator<Item = FeatureBatch> + 'a {
        self.indices().map(move |idx| FeatureBatch { z: data.gather(idx) })
    }
}
