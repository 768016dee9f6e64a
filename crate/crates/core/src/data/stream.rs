use rand::seq::SliceRandom;

use crate::rng;

/// `⌈n / batch_size⌉`.
pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size.max(1))
}

/// Endless sequence of shuffled mini-batches over one device's samples.
///
/// Each epoch is a fresh permutation determined by `(seed, device, round,
/// epoch)`, so every owned sample appears exactly once per epoch. The last
/// batch of an epoch may be short.
#[derive(Debug, Clone)]
pub struct BatchStream<'a> {
    samples: &'a [usize],
    batch_size: usize,
    seed: u64,
    device: usize,
    round: usize,
    epoch: usize,
    order: Vec<usize>,
    cursor: usize,
}

impl<'a> BatchStream<'a> {
    pub fn new(samples: &'a [usize], batch_size: usize, seed: u64, device: usize, round: usize) -> Self {
        assert!(batch_size >= 1, "batch size must be at least 1");
        Self {
            samples,
            batch_size,
            seed,
            device,
            round,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        }
    }

    pub fn batches_per_epoch(&self) -> usize {
        batches_per_epoch(self.samples.len(), self.batch_size)
    }

    /// Epoch of the next batch to be yielded.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn reshuffle(&mut self) {
        self.order.clear();
        self.order.extend_from_slice(self.samples);
        let mut rng = rng::stream(
            self.seed,
            "batches",
            &[self.device as u64, self.round as u64, self.epoch as u64],
        );
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.samples.is_empty() {
            return None;
        }
        if self.order.is_empty() {
            self.reshuffle();
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        if self.cursor == self.order.len() {
            self.epoch += 1;
            self.order.clear();
        }
        Some(batch)
    }
}
