use rand::Rng;

use super::{Result, RlError};
use crate::env::Transition;

/// Fixed-capacity FIFO ring of transitions.
#[derive(Debug, Clone)]
pub struct ReplayMemory {
    capacity: usize,
    entries: Vec<Transition>,
    /// Slot the next push overwrites once the ring is full.
    cursor: usize,
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(RlError::InvalidConfig("replay capacity must be >= 1".into()));
        }
        Ok(Self {
            capacity,
            entries: Vec::with_capacity(capacity.min(1 << 16)),
            cursor: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, tr: Transition) {
        if self.entries.len() < self.capacity {
            self.entries.push(tr);
        } else {
            self.entries[self.cursor] = tr;
            self.cursor = (self.cursor + 1) % self.capacity;
        }
    }

    /// Entries from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        let (newer, older) = self.entries.split_at(self.cursor);
        older.iter().chain(newer)
    }

    /// `k` independent uniform draws with replacement, so `k` may exceed
    /// the number of stored entries.
    pub fn sample<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        if k == 0 || self.entries.is_empty() {
            return Err(RlError::InsufficientReplay {
                size: self.entries.len(),
                requested: k,
            });
        }
        Ok((0..k)
            .map(|_| &self.entries[rng.gen_range(0..self.entries.len())])
            .collect())
    }
}

/// Linear decay from `eps_start` to `eps_end` over `decay_steps` environment steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonSchedule {
    pub eps_start: f64,
    pub eps_end: f64,
    pub decay_steps: u64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self {
            eps_start: 1.0,
            eps_end: 0.2,
            decay_steps: 1,
        }
    }
}

impl EpsilonSchedule {
    pub fn new(eps_start: f64, eps_end: f64, decay_steps: u64) -> Result<Self> {
        let unit = |e: f64| (0.0..=1.0).contains(&e);
        if !unit(eps_start) || !unit(eps_end) || eps_start < eps_end {
            return Err(RlError::InvalidConfig(format!(
                "need 1 >= eps_start >= eps_end >= 0, got {eps_start} and {eps_end}"
            )));
        }
        if decay_steps == 0 {
            return Err(RlError::InvalidConfig("decay_steps must be >= 1".into()));
        }
        Ok(Self {
            eps_start,
            eps_end,
            decay_steps,
        })
    }

    pub fn at(&self, step: u64) -> f64 {
        let frac = step.min(self.decay_steps) as f64 / self.decay_steps as f64;
        (self.eps_start - (self.eps_start - self.eps_end) * frac).max(self.eps_end)
    }
}

pub fn epsilon_at(sched: &EpsilonSchedule, step: u64) -> f64 {
    sched.at(step)
}
