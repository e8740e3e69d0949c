use crate::env::{Action, EnvState, StateKey};
use indexmap::IndexMap;
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Action,
    pub reward: f64,
    /// True when `next_state` ends the episode by reaching a terminal state.
    pub terminal: bool,
    pub next_state: Vec<f64>,
}

/// Fixed-capacity ring of transitions; the oldest entry is overwritten first.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            next: 0,
        }
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

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// Uniform sample with replacement.
    pub fn sample<'a, R: Rng + ?Sized>(&'a self, n: usize, rng: &mut R) -> Vec<&'a Transition> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n)
            .map(|_| &self.items[rng.random_range(0..self.items.len())])
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateEntry {
    pub state: EnvState,
    pub observation: Vec<f64>,
    pub visits: u64,
}

/// Every distinct visited state with its visit count, in first-visit order.
#[derive(Debug, Clone, Default)]
pub struct StateBuffer {
    entries: IndexMap<StateKey, StateEntry>,
}

impl StateBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, key: StateKey, state: &EnvState, observation: &[f64]) {
        self.entries
            .entry(key)
            .and_modify(|e| e.visits += 1)
            .or_insert_with(|| StateEntry {
                state: state.clone(),
                observation: observation.to_vec(),
                visits: 1,
            });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&StateEntry> {
        self.entries.get_index(index).map(|(_, e)| e)
    }

    pub fn visits(&self, key: &StateKey) -> u64 {
        self.entries.get(key).map_or(0, |e| e.visits)
    }

    pub fn iter(&self) -> impl Iterator<Item = &StateEntry> {
        self.entries.values()
    }

    /// Indices of up to `n` entries drawn uniformly without replacement, ascending.
    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        if n >= self.len() {
            return (0..self.len()).collect();
        }
        let mut idx = rand::seq::index::sample(rng, self.len(), n).into_vec();
        idx.sort_unstable();
        idx
    }
}
