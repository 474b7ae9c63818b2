//! Episode ring buffer with uniform transition sampling.

use std::collections::VecDeque;

use rand::Rng;

use crate::env::Transition;
use crate::error::{contract, Result};

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<Vec<Transition>>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return contract("replay capacity must be >= 1");
        }
        Ok(Self { capacity, episodes: VecDeque::with_capacity(capacity) })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Stored episodes.
    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Adds an episode, evicting the oldest when full. Empty episodes are
    /// ignored.
    pub fn push(&mut self, episode: Vec<Transition>) {
        if episode.is_empty() {
            return;
        }
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
    }

    /// Draws `count` transitions with replacement: an episode uniformly,
    /// then a step within it uniformly.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        if self.episodes.is_empty() {
            return contract("cannot sample from an empty buffer");
        }
        Ok((0..count)
            .map(|_| {
                let ep = &self.episodes[rng.random_range(0..self.episodes.len())];
                &ep[rng.random_range(0..ep.len())]
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvConfig, HiddenBitGame};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn episode(game: &HiddenBitGame, rng: &mut ChaCha8Rng) -> Vec<Transition> {
        let mut s = game.reset(rng);
        let mut out = Vec::new();
        while !s.done {
            let tr = game.env_step(&s, &[0; 6], rng).unwrap();
            s = tr.next.clone();
            out.push(tr);
        }
        out
    }

    #[test]
    fn capacity_and_reproducible_sampling() {
        let game = HiddenBitGame::new(&EnvConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut buf = ReplayBuffer::new(3).unwrap();
        assert!(buf.sample(1, &mut rng).is_err());
        for _ in 0..5 {
            buf.push(episode(&game, &mut rng));
            assert!(buf.len() <= 3);
        }
        buf.push(Vec::new());
        assert_eq!(buf.len(), 3);
        let a: Vec<Transition> = buf.sample(10, &mut ChaCha8Rng::seed_from_u64(5)).unwrap().into_iter().cloned().collect();
        let b: Vec<Transition> = buf.sample(10, &mut ChaCha8Rng::seed_from_u64(5)).unwrap().into_iter().cloned().collect();
        assert_eq!(a, b);
        assert!(ReplayBuffer::new(0).is_err());
    }
}
