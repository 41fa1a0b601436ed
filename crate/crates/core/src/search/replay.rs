use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayEntry {
    pub action: Vec<f64>,
    pub q: f64,
    /// Insertion order within the current step.
    pub seq: u64,
}

/// Bounded store of (action, Q) pairs. A new pair replaces the lowest-Q
/// entry once full, or is dropped if it does not beat it.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    entries: Vec<ReplayEntry>,
    capacity: usize,
    next_seq: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            entries: Vec::with_capacity(capacity),
            capacity,
            next_seq: 0,
        }
    }

    pub fn entries(&self) -> &[ReplayEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.next_seq = 0;
    }

    /// Returns whether the pair was stored. Non-finite `q` is never stored.
    pub fn update(&mut self, action: Vec<f64>, q: f64) -> bool {
        if !q.is_finite() {
            return false;
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        let entry = ReplayEntry { action, q, seq };
        if self.entries.len() < self.capacity {
            self.entries.push(entry);
            return true;
        }
        // lowest q; among equals the newest goes first so older entries survive
        let (worst, min_q) = self
            .entries
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.q.total_cmp(&b.1.q).then(b.1.seq.cmp(&a.1.seq)))
            .map(|(i, e)| (i, e.q))
            .expect("full buffer is non-empty");
        if q <= min_q {
            return false;
        }
        self.entries[worst] = entry;
        true
    }

    /// Highest-Q entry; ties go to the earliest insertion.
    pub fn best(&self) -> Option<&ReplayEntry> {
        self.entries
            .iter()
            .min_by(|a, b| b.q.total_cmp(&a.q).then(a.seq.cmp(&b.seq)))
    }

    /// ε-greedy: a uniformly random entry with probability `epsilon`, else [`best`](Self::best).
    pub fn select_action<R: Rng + ?Sized>(&self, epsilon: f64, rng: &mut R) -> Result<&ReplayEntry> {
        if self.entries.is_empty() {
            return Err(Error::State("select_action on an empty replay buffer".into()));
        }
        if epsilon > 0.0 && rng.random::<f64>() < epsilon {
            return Ok(&self.entries[rng.random_range(0..self.entries.len())]);
        }
        Ok(self.best().expect("non-empty"))
    }
}
