use std::collections::VecDeque;

use rand::Rng;

use crate::envs::{StepOutcome, TimeStep};
use crate::error::{Error, Result};

/// One complete episode. Per-step arrays have `len() + 1` entries for
/// observations, states and availability (the final post-step view is kept
/// for bootstrapping) and `len()` entries for actions and rewards.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub n_agents: usize,
    pub n_actions: usize,
    /// `[t][agent]` observation vectors.
    pub observations: Vec<Vec<Vec<f64>>>,
    pub states: Vec<Vec<f64>>,
    /// `[t][agent][action]`.
    pub available: Vec<Vec<Vec<bool>>>,
    /// `[t][agent]`.
    pub actions: Vec<Vec<usize>>,
    /// Team reward per step.
    pub rewards: Vec<f64>,
    /// True when the environment ended the episode (as opposed to a cutoff).
    pub terminated: bool,
}

impl EpisodeRecord {
    pub fn start(first: &TimeStep, n_actions: usize) -> Self {
        Self {
            n_agents: first.observations.len(),
            n_actions,
            observations: vec![first.observations.clone()],
            states: vec![first.state.clone()],
            available: vec![first.available.clone()],
            actions: Vec::new(),
            rewards: Vec::new(),
            terminated: false,
        }
    }

    pub fn push(&mut self, actions: &[usize], outcome: &StepOutcome) {
        self.actions.push(actions.to_vec());
        self.rewards.push(outcome.reward);
        self.observations.push(outcome.next.observations.clone());
        self.states.push(outcome.next.state.clone());
        self.available.push(outcome.next.available.clone());
        self.terminated = outcome.terminal;
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn episode_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    /// Whether step `t` ends the episode for bootstrapping purposes.
    pub fn is_terminal_step(&self, t: usize) -> bool {
        self.terminated && t + 1 == self.len()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        let ok = self.actions.len() == t
            && self.observations.len() == t + 1
            && self.states.len() == t + 1
            && self.available.len() == t + 1
            && self.actions.iter().all(|a| a.len() == self.n_agents)
            && self.observations.iter().all(|o| o.len() == self.n_agents)
            && self.available.iter().all(|a| a.len() == self.n_agents);
        if !ok {
            return Err(Error::Contract("episode arrays disagree on length".into()));
        }
        Ok(())
    }
}

/// FIFO episode store.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<EpisodeRecord>,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            episodes: VecDeque::with_capacity(capacity.min(1 << 14)),
            inserted: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Total episodes ever inserted.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn insert(&mut self, episode: EpisodeRecord) {
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
        self.inserted += 1;
    }

    pub fn can_sample(&self, batch: usize) -> bool {
        self.episodes.len() >= batch
    }

    pub fn get(&self, i: usize) -> &EpisodeRecord {
        &self.episodes[i]
    }

    /// Uniform sample without replacement, or `None` if too few episodes.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Option<Vec<&EpisodeRecord>> {
        if !self.can_sample(batch) {
            return None;
        }
        let idx = rand::seq::index::sample(rng, self.episodes.len(), batch);
        Some(idx.iter().map(|i| &self.episodes[i]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ep(tag: f64) -> EpisodeRecord {
        let ts = TimeStep {
            observations: vec![vec![tag]],
            state: vec![tag],
            available: vec![vec![true]],
        };
        let mut e = EpisodeRecord::start(&ts, 1);
        e.push(
            &[0],
            &StepOutcome {
                reward: tag,
                terminal: true,
                success: None,
                next: ts.clone(),
            },
        );
        e
    }

    #[test]
    fn fifo_eviction() {
        let mut b = ReplayBuffer::new(3);
        for i in 0..5 {
            b.insert(ep(i as f64));
            assert!(b.len() <= 3);
        }
        let tags: Vec<f64> = (0..3).map(|i| b.get(i).rewards[0]).collect();
        assert_eq!(tags, vec![2.0, 3.0, 4.0]);
        assert_eq!(b.inserted(), 5);
    }

    #[test]
    fn sampling_needs_enough_episodes() {
        let mut b = ReplayBuffer::new(10);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        b.insert(ep(0.0));
        assert!(b.sample(2, &mut rng).is_none());
        b.insert(ep(1.0));
        let s = b.sample(2, &mut rng).unwrap();
        assert_ne!(s[0].rewards, s[1].rewards);
    }

    #[test]
    fn record_invariants() {
        let e = ep(1.0);
        e.validate().unwrap();
        assert!(e.is_terminal_step(0));
        let mut broken = e.clone();
        broken.actions.push(vec![0]);
        assert!(broken.validate().is_err());
    }
}
