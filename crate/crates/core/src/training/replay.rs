//! Replay memory: a FIFO ring buffer of rollout records with uniform
//! without-replacement minibatch sampling.

use chrono::NaiveDateTime;
use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// One stored transition. `obs` is the exact policy input at the time
/// of the decision so the trainer can recompute the network output
/// under new parameters; `w_hat` (plus the env context captured by the
/// trainer) is enough to rebuild the constraint set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub timestamp: NaiveDateTime,
    pub x: Vec<f64>,
    pub obs: Vec<f64>,
    pub local_obs: Vec<f64>,
    pub w_hat: Vec<f64>,
    pub u_pre: Vec<f64>,
    pub u_post: Vec<f64>,
    pub cost: f64,
    pub logprob: f64,
    pub sigma: f64,
    pub relaxed: bool,
}

#[derive(Debug, Clone)]
pub struct ReplayMemory {
    capacity: usize,
    records: Vec<RolloutRecord>,
    head: usize,
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        ReplayMemory {
            capacity,
            records: Vec::new(),
            head: 0,
        }
    }

    pub fn push(&mut self, r: RolloutRecord) {
        if self.records.len() < self.capacity {
            self.records.push(r);
        } else {
            self.records[self.head] = r;
            self.head = (self.head + 1) % self.capacity;
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records in arrival order, oldest first.
    pub fn iter_ordered(&self) -> impl Iterator<Item = &RolloutRecord> {
        let n = self.records.len();
        (0..n).map(move |i| &self.records[(self.head + i) % n.max(1)])
    }

    /// The most recent `n` records in arrival order.
    pub fn last_n(&self, n: usize) -> Vec<&RolloutRecord> {
        let total = self.records.len();
        self.iter_ordered().skip(total.saturating_sub(n)).collect()
    }

    /// Uniform minibatch without replacement within the batch.
    pub fn sample_batch(&self, k: usize, rng: &mut ChaCha8Rng) -> Vec<&RolloutRecord> {
        let n = self.records.len();
        let k = k.min(n);
        sample(rng, n, k)
            .into_iter()
            .map(|i| &self.records[i])
            .collect()
    }
}
