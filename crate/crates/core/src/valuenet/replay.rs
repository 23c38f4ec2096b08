use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed-capacity FIFO buffer with uniform sampling with replacement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    items: Vec<T>,
    head: usize,
    pushed: u64,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidConfig("replay capacity must be positive".into()));
        }
        Ok(Self { capacity, items: Vec::new(), head: 0, pushed: 0 })
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

    /// Total pushes so far, including evicted items.
    pub fn pushed(&self) -> u64 {
        self.pushed
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            self.items[self.head] = item;
            self.head = (self.head + 1) % self.capacity;
        }
        self.pushed += 1;
    }

    /// Items from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &T> {
        let (newer, older) = self.items.split_at(self.head);
        older.iter().chain(newer)
    }

    pub fn get(&self, slot: usize) -> Option<&T> {
        self.items.get(slot)
    }

    pub fn get_mut(&mut self, slot: usize) -> Option<&mut T> {
        self.items.get_mut(slot)
    }

    /// Storage slots of a uniform sample with replacement.
    pub fn sample_slots<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.items.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        Ok((0..batch).map(|_| rng.random_range(0..self.items.len())).collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<&T>> {
        Ok(self.sample_slots(batch, rng)?.into_iter().map(|s| &self.items[s]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::Seeder;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    #[test]
    fn fifo_eviction() {
        let mut b = ReplayBuffer::new(2).unwrap();
        for i in 0..3 {
            b.push(i);
        }
        assert_eq!(b.iter().copied().collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(b.len(), 2);
        assert_eq!(b.pushed(), 3);
    }

    #[test]
    fn single_item_sample() {
        let mut b = ReplayBuffer::new(5).unwrap();
        b.push("only");
        let mut rng = Seeder::new(0).rng();
        assert_eq!(b.sample(1, &mut rng).unwrap(), vec![&"only"]);
    }

    #[test]
    fn empty_sample_errors() {
        let b: ReplayBuffer<u8> = ReplayBuffer::new(5).unwrap();
        assert!(matches!(b.sample(1, &mut Seeder::new(0).rng()), Err(Error::EmptyBuffer)));
        assert!(ReplayBuffer::<u8>::new(0).is_err());
    }

    #[test]
    fn sampling_is_uniform() {
        let mut b = ReplayBuffer::new(10).unwrap();
        for i in 0..10usize {
            b.push(i);
        }
        let mut rng = Seeder::new(42).rng();
        let mut counts = [0f64; 10];
        for x in b.sample(10_000, &mut rng).unwrap() {
            counts[*x] += 1.0;
        }
        let stat: f64 = counts.iter().map(|c| (c - 1000.0).powi(2) / 1000.0).sum();
        let p = 1.0 - ChiSquared::new(9.0).unwrap().cdf(stat);
        assert!(p > 0.01, "chi2 = {stat}, p = {p}");
    }

    #[test]
    fn same_seed_same_batches() {
        let mut b = ReplayBuffer::new(100).unwrap();
        (0..100).for_each(|i| b.push(i));
        let s1 = b.sample_slots(32, &mut Seeder::new(9).rng()).unwrap();
        let s2 = b.sample_slots(32, &mut Seeder::new(9).rng()).unwrap();
        assert_eq!(s1, s2);
    }
}
