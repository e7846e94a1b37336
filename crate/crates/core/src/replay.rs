//! Prioritized experience replay on a sum tree.
//!
//! Item `i` is drawn with probability `p_i^alpha / sum_j p_j^alpha`. New items
//! enter with the largest priority seen so far; after a gradient step the
//! sampled items get `|TD error| + PRIORITY_EPS`. Demonstration items sit in
//! the first slots and are never evicted; once the buffer is full only the
//! non-demonstration slots are recycled, oldest first.

use rand::Rng;

use crate::error::{ensure, Result};
use crate::qnet::Transition;

pub const PRIORITY_EPS: f64 = 1e-3;

/// Binary sum tree over a fixed number of leaves.
#[derive(Debug, Clone)]
pub struct SumTree {
    leaves: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    pub fn new(capacity: usize) -> Self {
        let leaves = capacity.max(1).next_power_of_two();
        SumTree {
            leaves,
            nodes: vec![0.0; 2 * leaves],
        }
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    pub fn get(&self, i: usize) -> f64 {
        self.nodes[self.leaves + i]
    }

    pub fn set(&mut self, i: usize, value: f64) {
        let mut at = self.leaves + i;
        self.nodes[at] = value;
        while at > 1 {
            at /= 2;
            self.nodes[at] = self.nodes[2 * at] + self.nodes[2 * at + 1];
        }
    }

    /// Leaf whose cumulative range contains `u` (`0 <= u < total`).
    pub fn find(&self, mut u: f64) -> usize {
        let mut at = 1;
        while at < self.leaves {
            let left = self.nodes[2 * at];
            if u < left || self.nodes[2 * at + 1] <= 0.0 {
                at *= 2;
            } else {
                u -= left;
                at = 2 * at + 1;
            }
        }
        at - self.leaves
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayItem {
    pub transition: Transition,
    pub priority: f64,
    pub is_demo: bool,
    pub episode_id: u64,
    pub step: usize,
}

/// Sampled indices with their normalized importance weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PerSample {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    alpha: f64,
    items: Vec<ReplayItem>,
    tree: SumTree,
    n_demo: usize,
    cursor: usize,
    max_priority: f64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, alpha: f64) -> Self {
        ReplayBuffer {
            capacity,
            alpha,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            tree: SumTree::new(capacity),
            n_demo: 0,
            cursor: 0,
            max_priority: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn n_demo(&self) -> usize {
        self.n_demo
    }

    pub fn item(&self, i: usize) -> &ReplayItem {
        &self.items[i]
    }

    pub fn items(&self) -> &[ReplayItem] {
        &self.items
    }

    /// Inserts with the current maximum priority; returns the slot used.
    /// Demonstration items must be inserted before any other item.
    pub fn push(&mut self, transition: Transition, is_demo: bool, episode_id: u64, step: usize) -> Result<usize> {
        if is_demo {
            ensure!(
                self.n_demo == self.items.len(),
                "demonstration items must precede online items"
            );
            ensure!(self.n_demo < self.capacity, "demonstrations fill the whole buffer");
        }
        ensure!(self.capacity > self.n_demo, "no room for online items");
        let item = ReplayItem {
            transition,
            priority: self.max_priority,
            is_demo,
            episode_id,
            step,
        };
        let slot = if self.items.len() < self.capacity {
            self.items.push(item);
            self.items.len() - 1
        } else {
            let span = self.capacity - self.n_demo;
            let slot = self.n_demo + self.cursor % span;
            self.cursor = (self.cursor + 1) % span;
            self.items[slot] = item;
            slot
        };
        if is_demo {
            self.n_demo += 1;
        }
        self.tree.set(slot, self.max_priority.powf(self.alpha));
        Ok(slot)
    }

    /// Probability of drawing item `i`.
    pub fn probability(&self, i: usize) -> f64 {
        self.tree.get(i) / self.tree.total()
    }

    /// Draws `batch_size` items independently (with replacement) according
    /// to their priorities; importance weights `(N P(i))^-beta` are divided
    /// by the batch maximum.
    pub fn per_sample<R: Rng>(&self, batch_size: usize, beta: f64, rng: &mut R) -> Result<PerSample> {
        ensure!(!self.items.is_empty(), "cannot sample from an empty replay buffer");
        ensure!(batch_size > 0, "batch size must be positive");
        let total = self.tree.total();
        let n = self.items.len() as f64;
        let mut indices = Vec::with_capacity(batch_size);
        let mut weights = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let u = rng.random::<f64>() * total;
            let i = self.tree.find(u).min(self.items.len() - 1);
            indices.push(i);
            weights.push((n * self.probability(i)).powf(-beta));
        }
        let max_w = weights.iter().copied().fold(0.0, f64::max);
        for w in &mut weights {
            *w /= max_w;
        }
        Ok(PerSample { indices, weights })
    }

    /// Sets priorities to `|td| + PRIORITY_EPS` for the given slots.
    pub fn update_priorities(&mut self, indices: &[usize], td_errors: &[f64]) {
        for (&i, &e) in indices.iter().zip(td_errors) {
            let p = e.abs() + PRIORITY_EPS;
            self.items[i].priority = p;
            self.max_priority = self.max_priority.max(p);
            self.tree.set(i, p.powf(self.alpha));
        }
    }

    /// Overrides one item's priority (tests and diagnostics).
    pub fn set_priority(&mut self, i: usize, priority: f64) {
        self.items[i].priority = priority;
        self.tree.set(i, priority.powf(self.alpha));
    }
}
