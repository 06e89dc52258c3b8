//! Experience replay: the transition record shared by every learner, and a
//! bounded FIFO buffer with seeded uniform sampling.

use ndarray::Array1;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Where a stored transition came from. Meta-test analysis distinguishes
/// steps gathered by the learner itself from steps injected by exploration
/// policies or seeded from a harvested set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    /// Collected by the learner's own behavior policy.
    Learner,
    /// Collected while executing a frozen exploration policy.
    Exploration,
    /// Seeded directly from a harvested valuable-experience set.
    Seeded,
}

/// One environment step as stored in a replay buffer.
///
/// The state embedding is a compact global summary used for subspace
/// bookkeeping (clustering, novelty gating); the per-agent observations are
/// what policies actually consume. The two are kept separate on purpose:
/// observations may be high-dimensional or history-dependent while the
/// embedding stays low-dimensional and task-agnostic.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Transition {
    /// Global state embedding at the step's start.
    pub state: Array1<f64>,
    /// Per-agent observations at the step's start.
    pub observations: Vec<Array1<f64>>,
    /// Joint action, one entry per agent (discrete index or encoded control).
    pub actions: Array1<f64>,
    /// Raw environment reward.
    pub reward: f64,
    /// Relabeled reward, if a densification pass assigned one.
    pub shaped_reward: Option<f64>,
    /// Global state embedding after the step.
    pub next_state: Array1<f64>,
    /// Per-agent observations after the step.
    pub next_observations: Vec<Array1<f64>>,
    /// Whether the episode ended at this step.
    pub done: bool,
    /// Origin of the transition.
    pub provenance: Provenance,
}

impl Transition {
    /// The reward a learner should train on: the relabeled value when
    /// present, the raw environment reward otherwise.
    pub fn effective_reward(&self) -> f64 {
        self.shaped_reward.unwrap_or(self.reward)
    }
}

/// Bounded FIFO replay buffer.
///
/// When full, pushing overwrites the oldest entry. Sampling is uniform with
/// replacement from whatever is currently stored.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    entries: Vec<Transition>,
    /// Next write position once the ring has wrapped.
    head: usize,
    /// Total pushes ever, for diagnostics.
    total_pushed: u64,
}

impl ReplayBuffer {
    /// Creates an empty buffer holding at most `capacity` transitions.
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument(
                "replay buffer capacity must be positive".into(),
            ));
        }
        Ok(ReplayBuffer {
            capacity,
            entries: Vec::new(),
            head: 0,
            total_pushed: 0,
        })
    }

    /// Current number of stored transitions.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// True iff nothing is stored.
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Maximum number of stored transitions.
    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total number of pushes over the buffer's lifetime.
    pub fn total_pushed(&self) -> u64 {
        self.total_pushed
    }

    /// Appends a transition, evicting the oldest when at capacity.
    pub fn push(&mut self, t: Transition) {
        self.total_pushed += 1;
        if self.entries.len() < self.capacity {
            self.entries.push(t);
        } else {
            self.entries[self.head] = t;
            self.head = (self.head + 1) % self.capacity;
        }
    }

    /// Uniform sample of `n` transitions with replacement.
    pub fn sample<R: Rng>(&self, rng: &mut R, n: usize) -> Result<Vec<&Transition>> {
        if self.entries.is_empty() {
            return Err(Error::InvalidState(
                "cannot sample from an empty replay buffer".into(),
            ));
        }
        Ok((0..n)
            .map(|_| &self.entries[rng.random_range(0..self.entries.len())])
            .collect())
    }

    /// All stored transitions, oldest first.
    pub fn iter_in_order(&self) -> impl Iterator<Item = &Transition> {
        let (wrapped, recent) = self.entries.split_at(self.head);
        recent.iter().chain(wrapped.iter())
    }

    /// Removes everything.
    pub fn clear(&mut self) {
        self.entries.clear();
        self.head = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::array;

    fn t(id: f64) -> Transition {
        Transition {
            state: array![id],
            observations: vec![array![id]],
            actions: array![0.0],
            reward: id,
            shaped_reward: None,
            next_state: array![id],
            next_observations: vec![array![id]],
            done: false,
            provenance: Provenance::Learner,
        }
    }

    #[test]
    fn zero_capacity_is_rejected() {
        assert!(ReplayBuffer::new(0).is_err());
    }

    #[test]
    fn fifo_eviction_overwrites_oldest() {
        let mut buf = ReplayBuffer::new(3).unwrap();
        for i in 0..5 {
            buf.push(t(i as f64));
        }
        assert_eq!(buf.len(), 3);
        let order: Vec<f64> = buf.iter_in_order().map(|x| x.reward).collect();
        assert_eq!(order, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn sampling_empty_buffer_errors() {
        let buf = ReplayBuffer::new(4).unwrap();
        assert!(buf.sample(&mut stream(0, 1), 1).is_err());
    }

    #[test]
    fn sampling_covers_all_entries() {
        let mut buf = ReplayBuffer::new(8).unwrap();
        for i in 0..8 {
            buf.push(t(i as f64));
        }
        let mut rng = stream(0, 1);
        let mut seen = [false; 8];
        for s in buf.sample(&mut rng, 512).unwrap() {
            seen[s.reward as usize] = true;
        }
        assert!(seen.iter().all(|&x| x), "512 draws should hit all 8 slots");
    }

    #[test]
    fn effective_reward_prefers_shaped() {
        let mut tr = t(1.0);
        assert_eq!(tr.effective_reward(), 1.0);
        tr.shaped_reward = Some(0.25);
        assert_eq!(tr.effective_reward(), 0.25);
    }

    #[test]
    fn total_pushed_counts_past_capacity() {
        let mut buf = ReplayBuffer::new(2).unwrap();
        for i in 0..7 {
            buf.push(t(i as f64));
        }
        assert_eq!(buf.total_pushed(), 7);
        assert_eq!(buf.len(), 2);
    }
}
