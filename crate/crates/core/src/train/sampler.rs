use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::rng::{stream, Rng64};

/// Epoch-wise shuffled mini-batches over `0..len`. The order is reshuffled
/// whenever it runs out; the last batch of an epoch may be short.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: Rng64,
}

impl BatchSampler {
    pub fn new(len: usize, seed: u64, tag: u64) -> Self {
        let mut s = BatchSampler {
            order: (0..len).collect(),
            cursor: 0,
            rng: stream(seed, tag),
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Next batch of at most `batch_size` positions and whether it ends the
    /// current epoch.
    pub fn next_batch(&mut self, batch_size: usize) -> (Vec<usize>, bool) {
        if self.order.is_empty() {
            return (Vec::new(), true);
        }
        if self.cursor == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + batch_size).min(self.order.len());
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        (batch, end == self.order.len())
    }
}
