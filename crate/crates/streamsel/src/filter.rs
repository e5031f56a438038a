//! Coarse-grained stream filter: per-class running feature statistics,
//! O(d) Rep + Div scoring, and a bounded candidate buffer kept as a
//! priority queue.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use crate::error::{Result, StreamselError};
use crate::model::Sample;
use crate::vecmath::{axpy, dot, scale, sq_dist, sq_norm};

/// Running sums over one class's feature stream. `count` is fractional to
/// support the optional exponential-decay mode (decay 1.0 = plain sums).
#[derive(Debug, Clone)]
pub struct ClassStreamStats {
    pub class: usize,
    pub count: f64,
    pub sum_features: Vec<f64>,
    pub sum_sq_norm: f64,
}

impl ClassStreamStats {
    pub fn new(class: usize, dim: usize) -> Self {
        ClassStreamStats {
            class,
            count: 0.0,
            sum_features: vec![0.0; dim],
            sum_sq_norm: 0.0,
        }
    }

    pub fn update(&mut self, features: &[f64], decay: f64) {
        if decay < 1.0 {
            self.count *= decay;
            scale(&mut self.sum_features, decay);
            self.sum_sq_norm *= decay;
        }
        self.count += 1.0;
        axpy(&mut self.sum_features, 1.0, features);
        self.sum_sq_norm += sq_norm(features);
    }

    pub fn mean_features(&self) -> Vec<f64> {
        let mut m = self.sum_features.clone();
        scale(&mut m, 1.0 / self.count);
        m
    }

    /// Rep + Div for one feature vector:
    ///   Rep = -||f - mu||^2
    ///   Div = ||f||^2 + q - 2<f, mu>
    /// with mu the running mean feature and q the running mean squared
    /// norm. One pass over the vector, independent of the class count.
    pub fn score(&self, features: &[f64]) -> Result<f64> {
        if self.count <= 0.0 {
            return Err(StreamselError::Stats(format!(
                "class {} has no observations",
                self.class
            )));
        }
        let mu = self.mean_features();
        let q = self.sum_sq_norm / self.count;
        let rep = -sq_dist(features, &mu);
        let div = sq_norm(features) + q - 2.0 * dot(features, &mu);
        Ok(rep + div)
    }
}

#[derive(Debug, Clone)]
pub struct ScoredCandidate {
    pub sample: Sample,
    pub features: Vec<f64>,
    pub score: f64,
    pub arrival: u64,
}

struct HeapEntry(ScoredCandidate);

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapEntry {}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap via Reverse at the call site: order by score, then by
        // arrival so the oldest of tied scores is evicted first.
        self.0
            .score
            .partial_cmp(&other.0.score)
            .unwrap_or(Ordering::Equal)
            .then(self.0.arrival.cmp(&other.0.arrival))
    }
}

/// Bounded buffer retaining the capacity-many highest-scored candidates.
#[derive(Default)]
pub struct CandidateBuffer {
    capacity: usize,
    heap: BinaryHeap<std::cmp::Reverse<HeapEntry>>,
}

impl CandidateBuffer {
    pub fn new(capacity: usize) -> Self {
        CandidateBuffer {
            capacity,
            heap: BinaryHeap::with_capacity(capacity + 1),
        }
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Insert and, when over capacity, evict the minimum-score entry
    /// (older first on score ties).
    pub fn admit(&mut self, candidate: ScoredCandidate) {
        if self.capacity == 0 {
            return;
        }
        self.heap.push(std::cmp::Reverse(HeapEntry(candidate)));
        if self.heap.len() > self.capacity {
            self.heap.pop();
        }
    }

    /// Snapshot of current contents grouped by class; the buffer keeps
    /// accumulating afterwards.
    pub fn snapshot_by_class(&self) -> BTreeMap<usize, Vec<&ScoredCandidate>> {
        let mut groups: BTreeMap<usize, Vec<&ScoredCandidate>> = BTreeMap::new();
        let mut items: Vec<&ScoredCandidate> = self.heap.iter().map(|r| &r.0 .0).collect();
        items.sort_by_key(|c| c.arrival);
        for c in items {
            groups.entry(c.sample.label).or_default().push(c);
        }
        groups
    }

    pub fn clear(&mut self) {
        self.heap.clear();
    }
}
