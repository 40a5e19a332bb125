//! The weight queue: a bounded FIFO of per-edit parameter records that
//! detects semantically dependent earlier edits and re-aligns them.
//!
//! Each processed edit walks four steps: enqueue the edit's located
//! parameters, select the top-K nearest older entries in delta space, rewrite
//! each selected entry's mapping from the current edit's value and the
//! entry's relation hidden state, and finally consider evicting the stale
//! head.

use std::collections::VecDeque;

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::editor::{closed_form_update, CovMatrix, EditOutcome};
use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::numerics::{l2_distance, Matrix, Vector};

/// What the distance of Step 2 compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    /// Distances between per-edit delta matrices (default): deltas carry the
    /// edit's rank-1 signature, snapshots of one evolving matrix mostly
    /// measure recency.
    Delta,
    /// Distances between full weight snapshots, the literal reading.
    Snapshot,
}

/// Direction of the head-eviction rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DequeueMode {
    /// Evict when the head is far from the current edit (stale; default).
    Rationale,
    /// Evict when the head is near, the inequality as printed.
    Literal,
}

/// How correction candidates are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMode {
    /// Distance-sorted, threshold-filtered, truncated to K.
    TopK,
    /// Seeded uniform K-subset of the older same-layer entries (ablation).
    Random { seed: u64 },
}

/// Located parameters of one edit at one layer.
#[derive(Debug, Clone)]
pub struct QueueEntry {
    pub edit_index: usize,
    pub layer: usize,
    /// `ΔW` recorded by the edit.
    pub delta: Matrix,
    pub snapshot_norm: f64,
    /// Full post-edit weight snapshot, kept only in snapshot distance mode.
    pub snapshot: Option<Matrix>,
    pub k_s: Vector,
    pub h_r: Vector,
    pub v_star: Vector,
    pub triple: (String, String, String),
}

/// One attempted realignment of an older entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrectionRecord {
    pub source_edit: usize,
    pub corrected_edit: usize,
    pub layer: usize,
    pub distance: f64,
    /// The element-wise combined value `v*_t + h_r_i`.
    pub delta_w: Vector,
    pub applied: bool,
}

/// Step 2 candidate: an index into the queue plus its distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub position: usize,
    pub edit_index: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueueConfig {
    /// Capacity counted in edits (entry groups), not per-layer entries.
    pub capacity: usize,
    pub eta_que: f64,
    pub eta_deq: f64,
    pub top_k: usize,
    pub distance_mode: DistanceMode,
    pub dequeue_mode: DequeueMode,
}

impl Default for QueueConfig {
    fn default() -> Self {
        // 30% capacity of a 1000-edit stream; desk runs scale both down.
        QueueConfig {
            capacity: 300,
            eta_que: 0.5,
            eta_deq: 0.5,
            top_k: 50,
            distance_mode: DistanceMode::Delta,
            dequeue_mode: DequeueMode::Rationale,
        }
    }
}

impl QueueConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eta_que < 0.0 || self.eta_deq < 0.0 {
            return Err(Error::Config("eta thresholds must be >= 0".into()));
        }
        if self.capacity > 0 && self.top_k == 0 {
            return Err(Error::Config("top_k must be >= 1 for an enabled queue".into()));
        }
        Ok(())
    }
}

/// Bounded FIFO of [`QueueEntry`] records, ascending by edit index.
#[derive(Debug, Clone)]
pub struct WeightQueue {
    pub config: QueueConfig,
    entries: VecDeque<QueueEntry>,
    /// Correction bias `b'`, zero and fixed.
    pub b_prime: Vector,
}

impl WeightQueue {
    pub fn new(config: QueueConfig, d_model: usize) -> Result<Self> {
        config.validate()?;
        Ok(WeightQueue { config, entries: VecDeque::new(), b_prime: Vector::zeros(d_model) })
    }

    /// Number of stored edits (entry groups).
    pub fn len(&self) -> usize {
        let mut count = 0;
        let mut last = None;
        for e in &self.entries {
            if last != Some(e.edit_index) {
                count += 1;
                last = Some(e.edit_index);
            }
        }
        count
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry_count(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> impl Iterator<Item = &QueueEntry> {
        self.entries.iter()
    }

    pub fn head(&self) -> Option<&QueueEntry> {
        self.entries.front()
    }

    /// Step 1: append at the tail; capacity overflow force-evicts the oldest
    /// edit's entries (before any threshold-based dequeue).
    pub fn enqueue(&mut self, entry: QueueEntry) -> Vec<QueueEntry> {
        if let Some(back) = self.entries.back() {
            assert!(
                entry.edit_index >= back.edit_index,
                "enqueue must preserve ascending edit order"
            );
        }
        self.entries.push_back(entry);
        let mut evicted = Vec::new();
        while self.len() > self.config.capacity {
            let head_index = self.entries.front().expect("non-empty").edit_index;
            while self.entries.front().map(|e| e.edit_index) == Some(head_index) {
                evicted.push(self.entries.pop_front().expect("non-empty"));
            }
        }
        evicted
    }

    /// Distance between two entries under the configured mode.
    pub fn distance(&self, a: &QueueEntry, b: &QueueEntry) -> Result<f64> {
        match self.config.distance_mode {
            DistanceMode::Delta => l2_distance(&a.delta, &b.delta),
            DistanceMode::Snapshot => {
                let (sa, sb) = (a.snapshot.as_ref(), b.snapshot.as_ref());
                match (sa, sb) {
                    (Some(sa), Some(sb)) => l2_distance(sa, sb),
                    _ => Err(Error::Config(
                        "snapshot distance mode requires stored snapshots".into(),
                    )),
                }
            }
        }
    }

    /// Step 2: strictly older same-layer entries with distance below
    /// `eta_que`, ascending by (distance, edit index), at most K.
    pub fn top_k_candidates(&self, current: &QueueEntry) -> Result<Vec<Candidate>> {
        let mut candidates = Vec::new();
        for (position, entry) in self.entries.iter().enumerate() {
            if entry.edit_index >= current.edit_index || entry.layer != current.layer {
                continue;
            }
            let distance = self.distance(current, entry)?;
            if distance < self.config.eta_que {
                candidates.push(Candidate { position, edit_index: entry.edit_index, distance });
            }
        }
        candidates.sort_by(|a, b| {
            a.distance
                .partial_cmp(&b.distance)
                .expect("finite distances")
                .then(a.edit_index.cmp(&b.edit_index))
        });
        candidates.truncate(self.config.top_k);
        Ok(candidates)
    }

    /// Ablation selection: a seeded uniform K-subset of the strictly older
    /// same-layer entries, no distance filter.
    pub fn random_candidates(&self, current: &QueueEntry, seed: u64) -> Result<Vec<Candidate>> {
        let mut pool = Vec::new();
        for (position, entry) in self.entries.iter().enumerate() {
            if entry.edit_index >= current.edit_index || entry.layer != current.layer {
                continue;
            }
            let distance = self.distance(current, entry)?;
            pool.push(Candidate { position, edit_index: entry.edit_index, distance });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        pool.shuffle(&mut rng);
        pool.truncate(self.config.top_k);
        Ok(pool)
    }

    /// Step 3: rewrite each candidate's mapping on the live model. The
    /// corrected value is `v*_current + h_r_entry (+ b')`, installed at the
    /// entry's stored key via the closed-form solve. A failed solve records
    /// `applied = false` and leaves that entry's layer untouched.
    pub fn self_correct(
        &self,
        current: &QueueEntry,
        candidates: &[Candidate],
        model: &mut TransformerModel,
        covs: &[(usize, CovMatrix)],
    ) -> Result<Vec<CorrectionRecord>> {
        let mut records = Vec::with_capacity(candidates.len());
        for cand in candidates {
            let entry = &self.entries[cand.position];
            let mut delta_w = current.v_star.clone();
            delta_w.add_scaled(1.0, &entry.h_r);
            let mut target = delta_w.clone();
            target.add_scaled(1.0, &self.b_prime);
            let cov = covs
                .iter()
                .find(|(l, _)| *l == entry.layer)
                .map(|(_, c)| c)
                .ok_or_else(|| {
                    Error::Config(format!("no covariance for layer {}", entry.layer))
                })?;
            let applied = match closed_form_update(model.w_proj(entry.layer), &entry.k_s, &target, cov)
            {
                Ok(w_new) => {
                    model.set_w_proj(entry.layer, w_new);
                    true
                }
                Err(Error::Algebra(_)) => false,
                Err(other) => return Err(other),
            };
            records.push(CorrectionRecord {
                source_edit: current.edit_index,
                corrected_edit: entry.edit_index,
                layer: entry.layer,
                distance: cand.distance,
                delta_w,
                applied,
            });
        }
        Ok(records)
    }

    /// Step 4 on a single head entry: rationale mode evicts when the head is
    /// farther than `eta_deq` from the current entry, literal mode when it is
    /// nearer (the comparison as printed).
    pub fn maybe_dequeue(&mut self, current: &QueueEntry) -> Result<Option<QueueEntry>> {
        let head = match self.entries.front() {
            Some(h) if h.edit_index < current.edit_index => h,
            _ => return Ok(None),
        };
        let d_head = self.distance(current, head)?;
        let evict = match self.config.dequeue_mode {
            DequeueMode::Rationale => d_head > self.config.eta_deq,
            DequeueMode::Literal => d_head < self.config.eta_deq,
        };
        Ok(if evict { self.entries.pop_front() } else { None })
    }

    /// Step 4 on the head group: decide from the head entry matching the
    /// current edit's layers, then evict the whole oldest edit.
    fn maybe_dequeue_group(&mut self, current_group: &[QueueEntry]) -> Result<Vec<QueueEntry>> {
        let head = match self.entries.front() {
            Some(h) if current_group.first().map(|c| h.edit_index < c.edit_index) == Some(true) => h,
            _ => return Ok(Vec::new()),
        };
        let head_index = head.edit_index;
        let current = match current_group.iter().find(|c| c.layer == head.layer) {
            Some(c) => c,
            None => return Ok(Vec::new()),
        };
        let d_head = self.distance(current, head)?;
        let evict = match self.config.dequeue_mode {
            DequeueMode::Rationale => d_head > self.config.eta_deq,
            DequeueMode::Literal => d_head < self.config.eta_deq,
        };
        let mut evicted = Vec::new();
        if evict {
            while self.entries.front().map(|e| e.edit_index) == Some(head_index) {
                evicted.push(self.entries.pop_front().expect("non-empty"));
            }
        }
        Ok(evicted)
    }
}

/// Report of one [`process_edit`] call.
#[derive(Debug, Clone, Default)]
pub struct StepReport {
    pub edit_index: usize,
    pub corrections: Vec<CorrectionRecord>,
    /// `(edit_index, layer)` of entries evicted in Step 4.
    pub evicted: Vec<(usize, usize)>,
    /// `(edit_index, layer)` of entries force-evicted by capacity overflow.
    pub overflow_evicted: Vec<(usize, usize)>,
    pub queue_len: usize,
}

/// Build the queue entries for one applied edit.
fn entries_from_outcome(
    outcome: &EditOutcome,
    model: &TransformerModel,
    mode: DistanceMode,
) -> Vec<QueueEntry> {
    outcome
        .layers
        .iter()
        .map(|rec| QueueEntry {
            edit_index: outcome.sample_id,
            layer: rec.layer,
            delta: rec.delta.clone(),
            snapshot_norm: model.w_proj(rec.layer).frobenius_norm(),
            snapshot: matches!(mode, DistanceMode::Snapshot)
                .then(|| model.w_proj(rec.layer).clone()),
            k_s: rec.k_s.clone(),
            h_r: rec.h_r.clone(),
            v_star: rec.v_star.clone(),
            triple: (
                outcome.subject.clone(),
                outcome.relation.clone(),
                outcome.new_object.clone(),
            ),
        })
        .collect()
}

/// Steps 1-4 for one applied edit. With capacity 0 the queue is disabled:
/// nothing is stored and the model is untouched.
pub fn process_edit(
    queue: &mut WeightQueue,
    model: &mut TransformerModel,
    outcome: &EditOutcome,
    covs: &[(usize, CovMatrix)],
    selection: SelectionMode,
) -> Result<StepReport> {
    if queue.config.capacity == 0 {
        return Ok(StepReport { edit_index: outcome.sample_id, ..Default::default() });
    }
    let group = entries_from_outcome(outcome, model, queue.config.distance_mode);

    // Step 1: enqueue the whole group.
    let mut overflow_evicted = Vec::new();
    for entry in group.iter().cloned() {
        for e in queue.enqueue(entry) {
            overflow_evicted.push((e.edit_index, e.layer));
        }
    }

    // Steps 2 and 3, per layer.
    let mut corrections = Vec::new();
    for current in &group {
        let candidates = match selection {
            SelectionMode::TopK => queue.top_k_candidates(current)?,
            SelectionMode::Random { seed } => {
                queue.random_candidates(current, seed ^ current.layer as u64)?
            }
        };
        corrections.extend(queue.self_correct(current, &candidates, model, covs)?);
    }

    // Step 4: head eviction.
    let evicted = queue
        .maybe_dequeue_group(&group)?
        .into_iter()
        .map(|e| (e.edit_index, e.layer))
        .collect();

    Ok(StepReport {
        edit_index: outcome.sample_id,
        corrections,
        evicted,
        overflow_evicted,
        queue_len: queue.len(),
    })
}

/// Queue state dump for reports: per entry `(edit_index, layer, triple,
/// delta norm)`.
pub fn queue_state_json(queue: &WeightQueue) -> serde_json::Value {
    serde_json::json!({
        "len": queue.len(),
        "capacity": queue.config.capacity,
        "entries": queue
            .entries()
            .map(|e| {
                serde_json::json!({
                    "edit_index": e.edit_index,
                    "layer": e.layer,
                    "subject": e.triple.0,
                    "relation": e.triple.1,
                    "object": e.triple.2,
                    "delta_norm": e.delta.frobenius_norm(),
                })
            })
            .collect::<Vec<_>>(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn entry(edit_index: usize, layer: usize, delta: Vec<f64>) -> QueueEntry {
        let dim = delta.len();
        QueueEntry {
            edit_index,
            layer,
            delta: Matrix::from_vec(1, dim, delta).unwrap(),
            snapshot_norm: 0.0,
            snapshot: None,
            k_s: Vector::zeros(dim),
            h_r: Vector::zeros(1),
            v_star: Vector::zeros(1),
            triple: (String::new(), String::new(), String::new()),
        }
    }

    fn queue(capacity: usize, eta_que: f64, top_k: usize) -> WeightQueue {
        WeightQueue::new(
            QueueConfig {
                capacity,
                eta_que,
                eta_deq: 0.5,
                top_k,
                distance_mode: DistanceMode::Delta,
                dequeue_mode: DequeueMode::Rationale,
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn enqueue_preserves_fifo_order() {
        let mut q = queue(10, 0.5, 3);
        q.enqueue(entry(0, 0, vec![0.0]));
        q.enqueue(entry(1, 0, vec![1.0]));
        assert_eq!(q.head().unwrap().edit_index, 0);
        assert_eq!(q.entries().last().unwrap().edit_index, 1);
        assert_eq!(q.len(), 2);
    }

    #[test]
    fn enqueue_empty_then_single() {
        let mut q = queue(4, 0.5, 3);
        assert!(q.is_empty());
        q.enqueue(entry(0, 0, vec![0.5]));
        assert_eq!(q.len(), 1);
    }

    #[test]
    fn capacity_overflow_evicts_head() {
        let mut q = queue(2, 0.5, 3);
        q.enqueue(entry(0, 0, vec![0.0]));
        q.enqueue(entry(1, 0, vec![1.0]));
        let evicted = q.enqueue(entry(2, 0, vec![2.0]));
        assert_eq!(evicted.len(), 1);
        assert_eq!(evicted[0].edit_index, 0);
        let order: Vec<usize> = q.entries().map(|e| e.edit_index).collect();
        assert_eq!(order, vec![1, 2]);
    }

    #[test]
    fn capacity_counts_edit_groups() {
        let mut q = queue(2, 0.5, 3);
        // Two layers per edit share the edit index.
        q.enqueue(entry(0, 0, vec![0.0]));
        q.enqueue(entry(0, 1, vec![0.0]));
        q.enqueue(entry(1, 0, vec![1.0]));
        q.enqueue(entry(1, 1, vec![1.0]));
        assert_eq!(q.len(), 2);
        assert_eq!(q.entry_count(), 4);
        let evicted = q.enqueue(entry(2, 0, vec![2.0]));
        // The whole oldest edit leaves.
        assert_eq!(evicted.len(), 2);
        assert!(evicted.iter().all(|e| e.edit_index == 0));
    }

    #[test]
    fn top_k_sorts_filters_truncates() {
        let mut q = queue(10, 0.5, 2);
        q.enqueue(entry(0, 0, vec![0.1]));
        q.enqueue(entry(1, 0, vec![0.7]));
        q.enqueue(entry(2, 0, vec![0.3]));
        let current = entry(3, 0, vec![0.0]);
        q.enqueue(current.clone());
        // Distances from 0.0: 0.1, 0.7, 0.3 -> filtered (<0.5): 0.1, 0.3.
        let cands = q.top_k_candidates(&current).unwrap();
        assert_eq!(cands.len(), 2);
        assert_eq!(cands[0].edit_index, 0);
        assert!((cands[0].distance - 0.1).abs() < 1e-12);
        assert_eq!(cands[1].edit_index, 2);
        assert!((cands[1].distance - 0.3).abs() < 1e-12);
    }

    #[test]
    fn top_k_empty_queue_is_empty() {
        let q = queue(10, 0.5, 2);
        let cands = q.top_k_candidates(&entry(0, 0, vec![0.0])).unwrap();
        assert!(cands.is_empty());
    }

    #[test]
    fn top_k_unbounded_returns_all_sorted() {
        let mut q = queue(10, f64::INFINITY, 10);
        for (i, d) in [0.9, 0.2, 0.5].iter().enumerate() {
            q.enqueue(entry(i, 0, vec![*d]));
        }
        let current = entry(3, 0, vec![0.0]);
        let cands = q.top_k_candidates(&current).unwrap();
        let dists: Vec<f64> = cands.iter().map(|c| c.distance).collect();
        assert_eq!(cands.len(), 3);
        assert!(dists.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn top_k_ties_break_by_older_edit() {
        let mut q = queue(10, 1.0, 4);
        q.enqueue(entry(0, 0, vec![0.3]));
        q.enqueue(entry(1, 0, vec![0.3]));
        let current = entry(2, 0, vec![0.0]);
        let cands = q.top_k_candidates(&current).unwrap();
        assert_eq!(cands[0].edit_index, 0);
        assert_eq!(cands[1].edit_index, 1);
    }

    #[test]
    fn top_k_ignores_other_layers() {
        let mut q = queue(10, 1.0, 4);
        q.enqueue(entry(0, 0, vec![0.1]));
        q.enqueue(entry(1, 1, vec![0.1]));
        let cands = q.top_k_candidates(&entry(2, 0, vec![0.0])).unwrap();
        assert_eq!(cands.len(), 1);
        assert_eq!(cands[0].edit_index, 0);
    }

    #[test]
    fn dequeue_rationale_evicts_far_head() {
        let mut q = queue(10, 0.5, 3);
        q.enqueue(entry(0, 0, vec![0.9]));
        let current = entry(1, 0, vec![0.0]);
        // d_head = 0.9 > 0.5 -> evicted.
        let evicted = q.maybe_dequeue(&current).unwrap();
        assert_eq!(evicted.unwrap().edit_index, 0);
        assert!(q.is_empty());
    }

    #[test]
    fn dequeue_rationale_keeps_near_head() {
        let mut q = queue(10, 0.5, 3);
        q.enqueue(entry(0, 0, vec![0.2]));
        let current = entry(1, 0, vec![0.0]);
        assert!(q.maybe_dequeue(&current).unwrap().is_none());
        assert_eq!(q.len(), 1);
    }

    #[test]
    fn dequeue_literal_evicts_near_head() {
        let mut q = WeightQueue::new(
            QueueConfig {
                capacity: 10,
                eta_que: 0.5,
                eta_deq: 0.5,
                top_k: 3,
                distance_mode: DistanceMode::Delta,
                dequeue_mode: DequeueMode::Literal,
            },
            1,
        )
        .unwrap();
        q.enqueue(entry(0, 0, vec![0.2]));
        let current = entry(1, 0, vec![0.0]);
        let evicted = q.maybe_dequeue(&current).unwrap();
        assert_eq!(evicted.unwrap().edit_index, 0);
    }

    #[test]
    fn top_k_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..1000 {
            let n = rng.gen_range(0..12);
            let k = rng.gen_range(1..5);
            let eta = rng.gen_range(0.0..1.5);
            let mut q = WeightQueue::new(
                QueueConfig {
                    capacity: 64,
                    eta_que: eta,
                    eta_deq: 0.5,
                    top_k: k,
                    distance_mode: DistanceMode::Delta,
                    dequeue_mode: DequeueMode::Rationale,
                },
                1,
            )
            .unwrap();
            let mut deltas = Vec::new();
            for i in 0..n {
                // Quantized values force ties.
                let d = (rng.gen_range(0..8) as f64) * 0.25;
                deltas.push(d);
                q.enqueue(entry(i, 0, vec![d]));
            }
            let cur = entry(n, 0, vec![0.0]);
            let got = q.top_k_candidates(&cur).unwrap();
            // Brute force: compute, filter, stable sort, truncate.
            let mut oracle: Vec<(usize, f64)> = deltas
                .iter()
                .enumerate()
                .map(|(i, d)| (i, d.abs()))
                .filter(|(_, d)| *d < eta)
                .collect();
            oracle.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
            oracle.truncate(k);
            assert_eq!(got.len(), oracle.len());
            for (g, o) in got.iter().zip(&oracle) {
                assert_eq!(g.edit_index, o.0);
                assert!((g.distance - o.1).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// FIFO order and the capacity bound survive arbitrary operation
        /// sequences.
        #[test]
        fn fifo_and_capacity_invariants(
            capacity in 1usize..6,
            ops in proptest::collection::vec((0.0f64..2.0, prop::bool::ANY), 1..40)
        ) {
            let mut q = queue(capacity, 0.5, 3);
            for (i, (d, do_dequeue)) in ops.iter().enumerate() {
                q.enqueue(entry(i, 0, vec![*d]));
                if *do_dequeue {
                    let cur = entry(i, 0, vec![*d]);
                    let _ = q.maybe_dequeue(&cur).unwrap();
                }
                prop_assert!(q.len() <= capacity);
                let order: Vec<usize> = q.entries().map(|e| e.edit_index).collect();
                let mut sorted = order.clone();
                sorted.sort_unstable();
                prop_assert_eq!(order, sorted);
            }
        }
    }
}
