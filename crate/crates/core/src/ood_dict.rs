//! The dynamic OOD dictionary: a capacity-bounded max-heap of latent
//! outliers keyed by admission score, plus an immutable memory bank.
//!
//! A candidate enters when the queue has room, or when its score is
//! strictly below the front (the highest score), which is evicted first.
//! Among equal scores the earliest admitted entry is the front.

use std::cmp::Ordering;

use thiserror::Error;

use crate::features::FeatureBatch;
use crate::id_dict::{IdDictionary, OutlierSet};
use crate::scorer::{self, ScoreError};

#[derive(Debug, Error, PartialEq)]
pub enum OodError {
    #[error("queue capacity must be at least 1")]
    ZeroCapacity,
    #[error("need {needed} outliers for the memory bank and queue seed, only {available} available")]
    InsufficientOutliers { needed: usize, available: usize },
    #[error("key dimension {found} does not match dictionary dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("{keys} keys but {scores} admission scores")]
    LengthMismatch { keys: usize, scores: usize },
    #[error(transparent)]
    Score(#[from] ScoreError),
}

/// Outcome of offering one candidate to the queue.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Admission {
    /// Entered a queue that had room.
    Admitted,
    /// Entered after evicting the front, whose score is recorded.
    Replaced { evicted_score: f64 },
    Rejected,
}

impl Admission {
    pub fn entered(self) -> bool {
        !matches!(self, Admission::Rejected)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    score: f64,
    seq: u64,
    slot: usize,
}

impl Entry {
    /// Heap priority: higher score first, then earlier admission.
    fn outranks(&self, other: &Entry) -> bool {
        match self.score.total_cmp(&other.score) {
            Ordering::Greater => true,
            Ordering::Less => false,
            Ordering::Equal => self.seq < other.seq,
        }
    }
}

/// One queue entry as exposed for auditing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueueEntry<'a> {
    pub key: &'a [f32],
    pub score: f64,
    /// Admission order over the lifetime of the dictionary.
    pub seq: u64,
}

/// How to initialize a dictionary.
#[derive(Debug, Clone, Copy)]
pub enum Init<'a> {
    /// Empty bank and empty queue.
    None,
    /// The first `mb_size` outliers form the memory bank; the next
    /// `queue_seed_size` are offered to the queue with their latent scores
    /// against `id_dict` as admission scores.
    Outliers {
        set: &'a OutlierSet,
        id_dict: &'a IdDictionary,
        k_id: usize,
        mb_size: usize,
        queue_seed_size: usize,
    },
}

#[derive(Debug, Clone)]
pub struct OodDictionary {
    capacity: usize,
    dim: usize,
    heap: Vec<Entry>,
    /// Key storage indexed by `Entry::slot`; an evicted slot is reused by
    /// its replacement.
    arena: Vec<f32>,
    bank: FeatureBatch,
    next_seq: u64,
    filled: bool,
}

/// Builds a dictionary of queue capacity `capacity` for `dim`-dimensional
/// keys.
pub fn new_dictionary(capacity: usize, dim: usize, init: Init<'_>) -> Result<OodDictionary, OodError> {
    if capacity == 0 {
        return Err(OodError::ZeroCapacity);
    }
    let mut dict = OodDictionary {
        capacity,
        dim,
        heap: Vec::with_capacity(capacity),
        arena: Vec::with_capacity(capacity * dim),
        bank: FeatureBatch::empty(dim),
        next_seq: 0,
        filled: false,
    };
    if let Init::Outliers { set, id_dict, k_id, mb_size, queue_seed_size } = init {
        let keys = set.keys();
        if keys.dim() != dim {
            return Err(OodError::DimensionMismatch { expected: dim, found: keys.dim() });
        }
        let needed = mb_size + queue_seed_size;
        if keys.len() < needed {
            return Err(OodError::InsufficientOutliers { needed, available: keys.len() });
        }
        dict.bank = keys.select(&(0..mb_size).collect::<Vec<_>>());
        let seeds = keys.select(&(mb_size..needed).collect::<Vec<_>>());
        if !seeds.is_empty() {
            let scores = scorer::kth_cosine_batch(&seeds, id_dict.packed(), k_id)?;
            dict.consider_batch(&seeds, &scores)?;
        }
    }
    Ok(dict)
}

impl OodDictionary {
    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Current queue size.
    pub fn queue_len(&self) -> usize {
        self.heap.len()
    }

    pub fn bank_len(&self) -> usize {
        self.bank.len()
    }

    /// Bank plus queue.
    pub fn total_len(&self) -> usize {
        self.bank.len() + self.heap.len()
    }

    pub fn is_full(&self) -> bool {
        self.heap.len() == self.capacity
    }

    /// Whether the queue has reached capacity at least once.
    pub fn has_filled(&self) -> bool {
        self.filled
    }

    pub fn bank(&self) -> &FeatureBatch {
        &self.bank
    }

    fn key(&self, slot: usize) -> &[f32] {
        &self.arena[slot * self.dim..(slot + 1) * self.dim]
    }

    fn view(&self, e: &Entry) -> QueueEntry<'_> {
        QueueEntry { key: self.key(e.slot), score: e.score, seq: e.seq }
    }

    /// The entry with the highest admission score.
    pub fn front(&self) -> Option<QueueEntry<'_>> {
        self.heap.first().map(|e| self.view(e))
    }

    pub fn front_score(&self) -> Option<f64> {
        self.heap.first().map(|e| e.score)
    }

    /// Queue entries in heap-array order.
    pub fn queue(&self) -> impl ExactSizeIterator<Item = QueueEntry<'_>> + '_ {
        self.heap.iter().map(move |e| self.view(e))
    }

    /// Memory bank keys followed by queue keys in heap-array order.
    pub fn keys_total(&self) -> FeatureBatch {
        let mut data = Vec::with_capacity(self.total_len() * self.dim);
        data.extend_from_slice(self.bank.as_slice());
        for e in &self.heap {
            data.extend_from_slice(self.key(e.slot));
        }
        FeatureBatch::new(data, self.dim).expect("rows have the dictionary dimension")
    }

    /// Offers one candidate. Non-finite scores are rejected.
    pub fn consider(&mut self, key: &[f32], score: f64) -> Result<Admission, OodError> {
        if key.len() != self.dim {
            return Err(OodError::DimensionMismatch { expected: self.dim, found: key.len() });
        }
        if !score.is_finite() {
            return Ok(Admission::Rejected);
        }
        let seq = self.next_seq;
        if self.heap.len() < self.capacity {
            let slot = self.heap.len();
            self.arena.extend_from_slice(key);
            self.heap.push(Entry { score, seq, slot });
            self.sift_up(self.heap.len() - 1);
            self.next_seq += 1;
            self.filled |= self.heap.len() == self.capacity;
            return Ok(Admission::Admitted);
        }
        let front = self.heap[0];
        if score >= front.score {
            return Ok(Admission::Rejected);
        }
        self.arena[front.slot * self.dim..(front.slot + 1) * self.dim].copy_from_slice(key);
        self.heap[0] = Entry { score, seq, slot: front.slot };
        self.sift_down(0);
        self.next_seq += 1;
        Ok(Admission::Replaced { evicted_score: front.score })
    }

    /// Offers every row of `keys` in order with the matching score.
    pub fn consider_batch(&mut self, keys: &FeatureBatch, scores: &[f64]) -> Result<Vec<Admission>, OodError> {
        if keys.len() != scores.len() {
            return Err(OodError::LengthMismatch { keys: keys.len(), scores: scores.len() });
        }
        if !keys.is_empty() && keys.dim() != self.dim {
            return Err(OodError::DimensionMismatch { expected: self.dim, found: keys.dim() });
        }
        keys.rows().zip(scores).map(|(k, &s)| self.consider(k, s)).collect()
    }

    fn sift_up(&mut self, mut i: usize) {
        while i > 0 {
            let parent = (i - 1) / 2;
            if !self.heap[i].outranks(&self.heap[parent]) {
                break;
            }
            self.heap.swap(i, parent);
            i = parent;
        }
    }

    fn sift_down(&mut self, mut i: usize) {
        let n = self.heap.len();
        loop {
            let (l, r) = (2 * i + 1, 2 * i + 2);
            let mut top = i;
            if l < n && self.heap[l].outranks(&self.heap[top]) {
                top = l;
            }
            if r < n && self.heap[r].outranks(&self.heap[top]) {
                top = r;
            }
            if top == i {
                break;
            }
            self.heap.swap(i, top);
            i = top;
        }
    }

    /// Checks the heap ordering of the queue.
    pub fn is_heap(&self) -> bool {
        (1..self.heap.len()).all(|i| !self.heap[i].outranks(&self.heap[(i - 1) / 2]))
    }
}
