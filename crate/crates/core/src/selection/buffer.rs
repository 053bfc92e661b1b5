use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use crate::error::{Error, Result};
use crate::numkernel::Sample;
use crate::rng::StreamRng;

use super::StrategyKind;

/// A stored sample with its admission-time score.
#[derive(Debug, Clone)]
pub struct Entry {
    pub sample: Sample,
    pub score: f64,
    pub tick: u64,
}

/// Heap adapter: the greatest element is the next eviction candidate, i.e. the
/// lowest score and, among equal scores, the oldest insertion.
#[derive(Debug, Clone)]
struct Evictable(Entry);

impl PartialEq for Evictable {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Evictable {}
impl PartialOrd for Evictable {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Evictable {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .score
            .total_cmp(&self.0.score)
            .then_with(|| other.0.tick.cmp(&self.0.tick))
    }
}

#[derive(Debug, Clone)]
struct PriorityQueue {
    quota: usize,
    heap: BinaryHeap<Evictable>,
}

impl PriorityQueue {
    fn new(quota: usize) -> Self {
        Self {
            quota,
            heap: BinaryHeap::with_capacity(quota),
        }
    }

    fn offer(&mut self, entry: Entry) -> Decision {
        if self.quota == 0 {
            return Decision::Discarded;
        }
        if self.heap.len() < self.quota {
            self.heap.push(Evictable(entry));
            return Decision::Stored { evicted: None };
        }
        let min = &self.heap.peek().expect("full queue").0;
        // Ties go to the newcomer, which evicts the oldest minimum.
        if entry.score >= min.score {
            let old = self.heap.pop().expect("full queue").0;
            self.heap.push(Evictable(entry));
            Decision::Stored {
                evicted: Some(old.sample),
            }
        } else {
            Decision::Discarded
        }
    }

    fn min_score(&self) -> Option<f64> {
        self.heap.peek().map(|e| e.0.score)
    }
}

#[derive(Debug, Clone)]
enum Layout {
    Fifo(VecDeque<Entry>),
    Reservoir { entries: Vec<Entry>, rng: StreamRng },
    Priority(PriorityQueue),
    PerLabel(Vec<PriorityQueue>),
    Unbounded(Vec<Entry>),
}

/// Outcome of offering a sample to a buffer.
#[derive(Debug, Clone, PartialEq)]
pub enum Decision {
    Stored { evicted: Option<Sample> },
    Discarded,
}

impl Decision {
    pub fn is_stored(&self) -> bool {
        matches!(self, Decision::Stored { .. })
    }
}

/// A client's bounded on-device sample store.
#[derive(Debug, Clone)]
pub struct StorageBuffer {
    capacity: usize,
    layout: Layout,
    seen: u64,
    tick: u64,
}

impl StorageBuffer {
    pub fn fifo(capacity: usize) -> Self {
        Self::with_layout(capacity, Layout::Fifo(VecDeque::with_capacity(capacity)))
    }

    pub fn reservoir(capacity: usize, rng: StreamRng) -> Self {
        Self::with_layout(
            capacity,
            Layout::Reservoir {
                entries: Vec::with_capacity(capacity),
                rng,
            },
        )
    }

    pub fn priority(capacity: usize) -> Self {
        Self::with_layout(capacity, Layout::Priority(PriorityQueue::new(capacity)))
    }

    /// One priority queue per label; `quotas[y]` samples of label `y` at most.
    pub fn per_label(quotas: &[usize]) -> Self {
        let capacity = quotas.iter().sum();
        Self::with_layout(
            capacity,
            Layout::PerLabel(quotas.iter().map(|&q| PriorityQueue::new(q)).collect()),
        )
    }

    /// Stores everything it is offered.
    pub fn unbounded() -> Self {
        Self::with_layout(usize::MAX, Layout::Unbounded(Vec::new()))
    }

    /// The buffer a baseline strategy uses (ODE kinds use [`StorageBuffer::per_label`]
    /// under a coordination plan, or a single priority queue without one).
    pub fn for_strategy(kind: StrategyKind, capacity: usize, rng: StreamRng) -> Self {
        match kind {
            StrategyKind::Fifo => Self::fifo(capacity),
            StrategyKind::Reservoir => Self::reservoir(capacity, rng),
            StrategyKind::FullData => Self::unbounded(),
            _ => Self::priority(capacity),
        }
    }

    fn with_layout(capacity: usize, layout: Layout) -> Self {
        Self {
            capacity,
            layout,
            seen: 0,
            tick: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn is_bounded(&self) -> bool {
        !matches!(self.layout, Layout::Unbounded(_))
    }

    /// Samples offered so far (the reservoir's `N`).
    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn len(&self) -> usize {
        match &self.layout {
            Layout::Fifo(q) => q.len(),
            Layout::Reservoir { entries, .. } | Layout::Unbounded(entries) => entries.len(),
            Layout::Priority(pq) => pq.heap.len(),
            Layout::PerLabel(qs) => qs.iter().map(|q| q.heap.len()).sum(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-label quota, if the buffer is split by label.
    pub fn label_quota(&self, label: usize) -> Option<usize> {
        match &self.layout {
            Layout::PerLabel(qs) => qs.get(label).map(|q| q.quota),
            _ => None,
        }
    }

    /// Offer `sample` with its `score`. Under a per-label layout `label_key`
    /// selects the queue; labels with a zero quota are discarded.
    pub fn offer(
        &mut self,
        sample: Sample,
        score: f64,
        label_key: Option<usize>,
    ) -> Result<Decision> {
        if !score.is_finite() {
            return Err(Error::Invalid(format!("non-finite score {score}")));
        }
        self.seen += 1;
        self.tick += 1;
        let entry = Entry {
            sample,
            score,
            tick: self.tick,
        };
        let cap = self.capacity;
        let decision = match &mut self.layout {
            Layout::Fifo(q) => {
                if cap == 0 {
                    return Ok(Decision::Discarded);
                }
                let evicted = if q.len() == cap {
                    q.pop_front().map(|e| e.sample)
                } else {
                    None
                };
                q.push_back(entry);
                Decision::Stored { evicted }
            }
            Layout::Reservoir { entries, rng } => {
                if entries.len() < cap {
                    entries.push(entry);
                    Decision::Stored { evicted: None }
                } else {
                    let j = rng.below(self.seen) as usize;
                    if j < cap {
                        let old = std::mem::replace(&mut entries[j], entry);
                        Decision::Stored {
                            evicted: Some(old.sample),
                        }
                    } else {
                        Decision::Discarded
                    }
                }
            }
            Layout::Priority(pq) => pq.offer(entry),
            Layout::PerLabel(qs) => {
                let key = label_key.unwrap_or(entry.sample.label);
                let n = qs.len();
                qs.get_mut(key)
                    .ok_or_else(|| {
                        Error::Invalid(format!(
                            "label key {key} unknown to a buffer with {n} label queues"
                        ))
                    })?
                    .offer(entry)
            }
            Layout::Unbounded(entries) => {
                entries.push(entry);
                Decision::Stored { evicted: None }
            }
        };
        Ok(decision)
    }

    /// Lowest stored score in the relevant queue (the next eviction candidate).
    pub fn min_score(&self, label_key: Option<usize>) -> Option<f64> {
        match &self.layout {
            Layout::Priority(pq) => pq.min_score(),
            Layout::PerLabel(qs) => label_key
                .and_then(|k| qs.get(k))
                .and_then(|q| q.min_score()),
            _ => None,
        }
    }

    fn entries(&self) -> Vec<&Entry> {
        match &self.layout {
            Layout::Fifo(q) => q.iter().collect(),
            Layout::Reservoir { entries, .. } | Layout::Unbounded(entries) => {
                entries.iter().collect()
            }
            Layout::Priority(pq) => pq.heap.iter().map(|e| &e.0).collect(),
            Layout::PerLabel(qs) => qs
                .iter()
                .flat_map(|q| q.heap.iter().map(|e| &e.0))
                .collect(),
        }
    }

    /// Stored entries in insertion order.
    pub fn entries_by_tick(&self) -> Vec<&Entry> {
        let mut v = self.entries();
        v.sort_by_key(|e| e.tick);
        v
    }

    /// Stored samples in insertion order.
    pub fn samples(&self) -> Vec<&Sample> {
        self.entries_by_tick()
            .into_iter()
            .map(|e| &e.sample)
            .collect()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.entries_by_tick()
            .into_iter()
            .map(|e| e.score)
            .collect()
    }

    pub fn label_counts(&self, class_count: usize) -> Vec<usize> {
        let mut h = vec![0; class_count];
        for e in self.entries() {
            if e.sample.label < class_count {
                h[e.sample.label] += 1;
            }
        }
        h
    }

    /// Recompute every stored score (ablation of keeping admission-time scores).
    pub fn rescore(&mut self, mut f: impl FnMut(&Sample) -> Result<f64>) -> Result<()> {
        let mut rebuild = |pq: &mut PriorityQueue| -> Result<()> {
            let old = std::mem::take(&mut pq.heap).into_vec();
            for Evictable(mut e) in old {
                e.score = f(&e.sample)?;
                pq.heap.push(Evictable(e));
            }
            Ok(())
        };
        match &mut self.layout {
            Layout::Priority(pq) => rebuild(pq)?,
            Layout::PerLabel(qs) => {
                for q in qs {
                    rebuild(q)?;
                }
            }
            _ => {}
        }
        Ok(())
    }
}
