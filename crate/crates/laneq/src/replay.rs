//! Experience replay over compactly stored observations.
//!
//! Observations are kept trimmed to their real rows (ids, features, mask,
//! edge list) and re-padded on demand. Expansion routes through the same
//! adjacency normalization as live observation building, so a stored
//! transition reproduces its original tensors bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::obs::{normalize_adjacency, Observation, FEATURE_DIM};
use crate::sim::{Action, VehicleId};
use crate::Mat;

/// Stream tag for replay sampling draws.
const REPLAY_RNG_STREAM: u64 = 12;

/// One observation, trimmed to its real slots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredObs {
    pub ids: Vec<VehicleId>,
    /// Controlled flag per real slot.
    pub mask: Vec<bool>,
    /// Row-major `ids.len() x FEATURE_DIM` features.
    pub feat: Vec<f64>,
    /// Undirected edges as `(low, high)` slot pairs.
    pub edges: Vec<(u16, u16)>,
    /// Slot capacity of the padded form.
    pub n_max: usize,
}

impl StoredObs {
    pub fn from_observation(obs: &Observation) -> Self {
        let n = obs.n_real();
        let mut feat = Vec::with_capacity(n * FEATURE_DIM);
        for i in 0..n {
            feat.extend_from_slice(obs.feat.row(i));
        }
        // Off-diagonal entries of the normalized adjacency are nonzero
        // exactly where the binary adjacency had an edge.
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if obs.anorm.get(i, j) != 0.0 {
                    edges.push((i as u16, j as u16));
                }
            }
        }
        Self {
            ids: obs.ids.clone(),
            mask: obs.mask[..n].to_vec(),
            feat,
            edges,
            n_max: obs.n_max(),
        }
    }

    pub fn n_real(&self) -> usize {
        self.ids.len()
    }

    fn expand_to(&self, rows: usize) -> Observation {
        let n = self.n_real();
        debug_assert!(rows >= n);
        let mut feat = Mat::zeros(rows, FEATURE_DIM);
        for i in 0..n {
            for j in 0..FEATURE_DIM {
                feat.set(i, j, self.feat[i * FEATURE_DIM + j]);
            }
        }
        let mut adj = Mat::zeros(rows, rows);
        for &(i, j) in &self.edges {
            adj.set(i as usize, j as usize, 1.0);
            adj.set(j as usize, i as usize, 1.0);
        }
        let mut mask = vec![false; rows];
        mask[..n].copy_from_slice(&self.mask);
        Observation {
            ids: self.ids.clone(),
            mask,
            feat,
            anorm: normalize_adjacency(&adj),
        }
    }

    /// Full padded form, identical to the observation this was built from.
    pub fn expand(&self) -> Observation {
        self.expand_to(self.n_max)
    }

    /// Padding-free form. Real entries match the padded form exactly:
    /// padded slots are isolated, so they change no degree and no
    /// normalized entry among real slots.
    pub fn expand_trimmed(&self) -> Observation {
        self.expand_to(self.n_real())
    }
}

/// One environment step as seen by the learner. Slot-aligned vectors run
/// over the real slots of `obs`: actions exist exactly on controlled
/// slots, and `next_alive` marks controlled slots whose vehicle is still
/// present in `next`.
#[derive(Clone, Debug)]
pub struct Transition {
    pub obs: StoredObs,
    pub actions: Vec<Option<Action>>,
    pub reward: f64,
    pub next: StoredObs,
    pub next_alive: Vec<bool>,
    /// True only for terminal ends (collision), never for horizon cuts.
    pub done: bool,
}

/// FIFO ring buffer sampled uniformly with replacement.
pub struct ReplayBuffer {
    items: Vec<Transition>,
    write: usize,
    capacity: usize,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(REPLAY_RNG_STREAM);
        Self {
            items: Vec::new(),
            write: 0,
            capacity,
            rng,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.write] = t;
            self.write = (self.write + 1) % self.capacity;
        }
    }

    /// `batch` independent uniform draws over the current contents.
    pub fn sample(&mut self, batch: usize) -> Vec<&Transition> {
        assert!(!self.items.is_empty(), "cannot sample an empty buffer");
        let n = self.items.len();
        let picks: Vec<usize> = (0..batch).map(|_| self.rng.gen_range(0..n)).collect();
        picks.into_iter().map(|i| &self.items[i]).collect()
    }
}
