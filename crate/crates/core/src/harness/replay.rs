//! Capped store of past training stacks, balanced across tasks.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fmap::LayerStack;

#[derive(Debug, Clone)]
pub struct ReplayEntry {
    pub task: usize,
    pub stack: LayerStack,
}

/// Class-balanced reservoir: after `t` tasks each task holds at most
/// `capacity / t` stacks, with the remainder going to the earliest tasks.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    seed: u64,
    rng: ChaCha8Rng,
    tasks: Vec<usize>,
    entries: Vec<ReplayEntry>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        ReplayBuffer {
            capacity,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            tasks: Vec::new(),
            entries: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ReplayEntry] {
        &self.entries
    }

    pub fn stacks(&self) -> impl Iterator<Item = &LayerStack> {
        self.entries.iter().map(|e| &e.stack)
    }

    /// Stored bytes of every buffered stack.
    pub fn bytes(&self) -> u64 {
        self.entries.iter().map(|e| e.stack.stack_bytes() as u64).sum()
    }

    fn quota(&self, slot: usize) -> usize {
        let t = self.tasks.len();
        self.capacity / t + usize::from(slot < self.capacity % t)
    }

    /// Adds a finished task's training stream and rebalances the quotas.
    pub fn absorb(&mut self, task: usize, stream: &[LayerStack]) {
        if self.capacity == 0 {
            return;
        }
        self.tasks.push(task);

        let mut kept = Vec::with_capacity(self.capacity);
        for (slot, &t) in self.tasks[..self.tasks.len() - 1].iter().enumerate() {
            let mine: Vec<ReplayEntry> = self.entries.iter().filter(|e| e.task == t).cloned().collect();
            let q = self.quota(slot).min(mine.len());
            let mut picked = sample(&mut self.rng, mine.len(), q).into_vec();
            picked.sort_unstable();
            kept.extend(picked.into_iter().map(|i| mine[i].clone()));
        }

        let q = self.quota(self.tasks.len() - 1);
        let mut reservoir: Vec<&LayerStack> = Vec::with_capacity(q);
        for (i, s) in stream.iter().enumerate() {
            if i < q {
                reservoir.push(s);
            } else {
                let j = self.rng.random_range(0..=i);
                if j < q {
                    reservoir[j] = s;
                }
            }
        }
        kept.extend(reservoir.into_iter().map(|s| ReplayEntry {
            task,
            stack: s.clone(),
        }));
        self.entries = kept;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fmap::{FeatureMap, Label};

    fn stack(id: &str) -> LayerStack {
        let fm = FeatureMap::new(id, 1, 1, 1, vec![0.0], Label::Normal).unwrap();
        LayerStack::new(id, vec![fm]).unwrap()
    }

    fn stream(task: usize, n: usize) -> Vec<LayerStack> {
        (0..n).map(|i| stack(&format!("t{task}_{i}"))).collect()
    }

    fn count(buf: &ReplayBuffer, task: usize) -> usize {
        buf.entries().iter().filter(|e| e.task == task).count()
    }

    #[test]
    fn never_exceeds_capacity_and_stays_balanced() {
        let mut buf = ReplayBuffer::new(40, 3);
        for t in 0..7 {
            buf.absorb(t, &stream(t, 25));
            assert!(buf.len() <= 40);
            let quotas: Vec<usize> = (0..=t).map(|k| count(&buf, k)).collect();
            let lo = *quotas.iter().min().unwrap();
            let hi = *quotas.iter().max().unwrap();
            assert!(hi - lo <= 1, "{quotas:?}");
        }
        // 40 over 7 tasks: 5 each, one extra for each of the first five
        assert_eq!(buf.len(), 40);
        assert_eq!(count(&buf, 0), 6);
        assert_eq!(count(&buf, 6), 5);
    }

    #[test]
    fn small_streams_are_kept_whole() {
        let mut buf = ReplayBuffer::new(100, 0);
        buf.absorb(0, &stream(0, 3));
        buf.absorb(1, &stream(1, 4));
        assert_eq!(buf.len(), 7);
    }

    #[test]
    fn deterministic_for_a_seed() {
        let ids = |seed| {
            let mut buf = ReplayBuffer::new(10, seed);
            for t in 0..3 {
                buf.absorb(t, &stream(t, 30));
            }
            buf.stacks().map(|s| s.image_id.clone()).collect::<Vec<_>>()
        };
        assert_eq!(ids(5), ids(5));
        assert_ne!(ids(5), ids(6));
    }

    #[test]
    fn bytes_are_the_sum_of_stack_sizes() {
        let mut buf = ReplayBuffer::new(40, 1);
        buf.absorb(0, &stream(0, 50));
        assert_eq!(buf.bytes(), 40 * stack("x").stack_bytes() as u64);
    }

    #[test]
    fn zero_capacity_holds_nothing() {
        let mut buf = ReplayBuffer::new(0, 1);
        buf.absorb(0, &stream(0, 5));
        assert!(buf.is_empty());
    }
}
