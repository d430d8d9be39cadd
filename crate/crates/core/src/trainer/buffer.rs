use alloc::collections::VecDeque;
use alloc::vec::Vec;

use crate::bilevel::Transition;
use crate::error::usage;
use crate::rng::{self, Rng};
use crate::Result;

/// FIFO replay buffer with uniform sampling.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, items: VecDeque::with_capacity(capacity.min(1 << 16)) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Appends, evicting the oldest transition when full.
    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// `count` transitions drawn uniformly with replacement.
    pub fn sample(&self, count: usize, rng: &mut Rng) -> Result<Vec<&Transition>> {
        if self.items.is_empty() {
            return Err(usage!("cannot sample from an empty buffer"));
        }
        Ok((0..count).map(|_| &self.items[rng::index(rng, self.items.len())]).collect())
    }
}
