use rand::seq::index;
use rand::Rng;

use crate::seqmodel::Sample;

/// Fixed-capacity episodic memory filled by reservoir sampling, so every
/// sample offered so far is retained with equal probability.
#[derive(Clone, Debug)]
pub struct Memory<T> {
    capacity: usize,
    slots: Vec<Sample<T>>,
    offered: usize,
}

impl<T: Clone> Memory<T> {
    pub fn new(capacity: usize) -> Self {
        Memory {
            capacity,
            slots: Vec::with_capacity(capacity),
            offered: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn slots(&self) -> &[Sample<T>] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Number of samples offered so far.
    pub fn offered(&self) -> usize {
        self.offered
    }

    pub fn offer<R: Rng + ?Sized>(&mut self, sample: &Sample<T>, rng: &mut R) {
        if self.slots.len() < self.capacity {
            self.slots.push(sample.clone());
        } else if self.capacity > 0 {
            let j = rng.random_range(0..=self.offered);
            if j < self.capacity {
                self.slots[j] = sample.clone();
            }
        }
        self.offered += 1;
    }

    /// Up to `k` distinct stored samples, drawn uniformly.
    pub fn sample<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Vec<Sample<T>> {
        let k = k.min(self.slots.len());
        index::sample(rng, self.slots.len(), k)
            .into_iter()
            .map(|i| self.slots[i].clone())
            .collect()
    }
}

/// Offers `sample` to `memory`, returning the updated memory.
pub fn reservoir_offer<T: Clone, R: Rng + ?Sized>(
    mut memory: Memory<T>,
    sample: &Sample<T>,
    rng: &mut R,
) -> Memory<T> {
    memory.offer(sample, rng);
    memory
}
