//! Fast replay buffer (reset per task) and the persistent meta buffer of
//! tail-of-task records used to estimate integration weights.

use std::collections::VecDeque;

use crate::distance::VisitationWeights;
use crate::error::{FameError, Result};

/// Bounded ring buffer owned by the fast learner; cleared at every task
/// boundary.
#[derive(Debug, Clone)]
pub struct FastBuffer<T> {
    ring: VecDeque<T>,
    capacity: usize,
}

impl<T> FastBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "fast buffer needs positive capacity");
        Self { ring: VecDeque::with_capacity(capacity.min(4096)), capacity }
    }

    pub fn push(&mut self, item: T) {
        if self.ring.len() == self.capacity {
            self.ring.pop_front();
        }
        self.ring.push_back(item);
    }

    pub fn clear(&mut self) {
        self.ring.clear();
    }

    pub fn len(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.ring.iter()
    }
}

/// One stored meta-buffer record.
#[derive(Debug, Clone, PartialEq)]
pub enum MetaRecord {
    /// Value-based runs store the visited (state, action) pair.
    Discrete { state: usize, action: usize },
    /// Policy-based runs store the grid cell, with the action for the KL
    /// rule and without it for the Wasserstein rule.
    Continuous { cell: usize, action: Option<Vec<f64>> },
}

impl MetaRecord {
    pub fn state_index(&self) -> usize {
        match self {
            MetaRecord::Discrete { state, .. } => *state,
            MetaRecord::Continuous { cell, .. } => *cell,
        }
    }
}

/// Persistent per-task buckets of tail-of-task records; at most N records
/// per task, so total memory is bounded by K·N regardless of T.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetaBuffer {
    per_task: Vec<Vec<MetaRecord>>,
}

impl MetaBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores `record` iff the task step satisfies t > T - N (t in 1..=T).
    /// Returns whether the record was kept.
    pub fn record(
        &mut self,
        record: MetaRecord,
        t: usize,
        total_steps: usize,
        tail_len: usize,
        task_id: usize,
    ) -> Result<bool> {
        if t == 0 || t > total_steps {
            return Err(FameError::ContractViolation(format!(
                "step {t} outside the task range 1..={total_steps}"
            )));
        }
        if t + tail_len <= total_steps {
            return Ok(false);
        }
        if self.per_task.len() <= task_id {
            self.per_task.resize_with(task_id + 1, Vec::new);
        }
        let bucket = &mut self.per_task[task_id];
        if bucket.len() >= tail_len {
            return Err(FameError::ContractViolation(format!(
                "task {task_id} bucket already holds {tail_len} records"
            )));
        }
        bucket.push(record);
        Ok(true)
    }

    pub fn is_empty(&self) -> bool {
        self.per_task.iter().all(|b| b.is_empty())
    }

    pub fn n_tasks(&self) -> usize {
        self.per_task.len()
    }

    pub fn total_records(&self) -> usize {
        self.per_task.iter().map(|b| b.len()).sum()
    }

    /// Task ids with at least one record, in order.
    pub fn task_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.per_task.iter().enumerate().filter(|(_, b)| !b.is_empty()).map(|(i, _)| i)
    }

    pub fn task_records(&self, task_id: usize) -> &[MetaRecord] {
        self.per_task.get(task_id).map(|b| b.as_slice()).unwrap_or(&[])
    }

    /// Normalized empirical (state, action) frequencies of one task bucket.
    pub fn estimate_sa_weights(
        &self,
        task_id: usize,
        n_states: usize,
        n_actions: usize,
    ) -> Result<VisitationWeights> {
        let records = self.task_records(task_id);
        if records.is_empty() {
            return Err(FameError::EmptyTaskBucket { task_id });
        }
        let mut counts = vec![0.0; n_states * n_actions];
        for rec in records {
            match rec {
                MetaRecord::Discrete { state, action } => {
                    counts[state * n_actions + action] += 1.0;
                }
                MetaRecord::Continuous { .. } => {
                    return Err(FameError::ContractViolation(
                        "state-action weights need discrete records".into(),
                    ))
                }
            }
        }
        normalize_in_place(&mut counts);
        VisitationWeights::from_state_action_weights(counts, n_states, n_actions, task_id)
    }

    /// Normalized empirical state (or cell) frequencies of one task bucket.
    pub fn estimate_state_weights(&self, task_id: usize, n_states: usize) -> Result<VisitationWeights> {
        let records = self.task_records(task_id);
        if records.is_empty() {
            return Err(FameError::EmptyTaskBucket { task_id });
        }
        let mut counts = vec![0.0; n_states];
        for rec in records {
            counts[rec.state_index()] += 1.0;
        }
        normalize_in_place(&mut counts);
        VisitationWeights::from_state_weights(counts, task_id)
    }
}

fn normalize_in_place(w: &mut [f64]) {
    let z: f64 = w.iter().sum();
    for x in w.iter_mut() {
        *x /= z;
    }
    let z2: f64 = w.iter().sum();
    if let Some(first) = w.iter_mut().find(|x| **x > 0.0) {
        *first += 1.0 - z2;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_buffer_ring_semantics() {
        let mut fb = FastBuffer::new(3);
        for i in 0..5 {
            fb.push(i);
        }
        assert_eq!(fb.len(), 3);
        let items: Vec<i32> = fb.iter().copied().collect();
        assert_eq!(items, vec![2, 3, 4]);
        fb.clear();
        assert!(fb.is_empty());
    }

    #[test]
    fn tail_window_boundaries() {
        let mut mb = MetaBuffer::new();
        let rec = || MetaRecord::Discrete { state: 0, action: 0 };
        // T = 10, N = 3: t = 7 not stored, t = 8..=10 stored
        assert!(!mb.record(rec(), 7, 10, 3, 0).unwrap());
        assert!(mb.record(rec(), 8, 10, 3, 0).unwrap());
        assert!(mb.record(rec(), 9, 10, 3, 0).unwrap());
        assert!(mb.record(rec(), 10, 10, 3, 0).unwrap());
        assert_eq!(mb.task_records(0).len(), 3);
    }

    #[test]
    fn full_run_stores_exactly_n_records() {
        let mut mb = MetaBuffer::new();
        let t_total = 200;
        let n = 17;
        for t in 1..=t_total {
            mb.record(MetaRecord::Discrete { state: t % 4, action: t % 2 }, t, t_total, n, 3)
                .unwrap();
        }
        assert_eq!(mb.task_records(3).len(), n);
    }

    #[test]
    fn estimate_weights_point_mass_and_ties() {
        let mut mb = MetaBuffer::new();
        for t in 98..=100 {
            mb.record(MetaRecord::Discrete { state: 1, action: 0 }, t, 100, 4, 0).unwrap();
        }
        let w = mb.estimate_sa_weights(0, 2, 2, ).unwrap();
        assert_eq!(w.state_action(1, 0), Some(1.0));

        let mut mb = MetaBuffer::new();
        mb.record(MetaRecord::Discrete { state: 0, action: 0 }, 99, 100, 2, 0).unwrap();
        mb.record(MetaRecord::Discrete { state: 1, action: 1 }, 100, 100, 2, 0).unwrap();
        let w = mb.estimate_sa_weights(0, 2, 2).unwrap();
        assert_eq!(w.state_action(0, 0), Some(0.5));
        assert_eq!(w.state_action(1, 1), Some(0.5));
    }

    #[test]
    fn empty_bucket_is_an_error() {
        let mb = MetaBuffer::new();
        assert!(matches!(
            mb.estimate_state_weights(0, 4),
            Err(FameError::EmptyTaskBucket { task_id: 0 })
        ));
    }

    #[test]
    fn empirical_weights_approach_truth() {
        use rand::Rng;
        // records sampled from a known distribution: TV <= 0.05 at 1e4 draws
        let truth = [0.5, 0.25, 0.125, 0.125];
        let mut rng = crate::rng::stream(9, &[4]);
        let mut mb = MetaBuffer::new();
        let n = 10_000;
        for t in 1..=n {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut s = truth.len() - 1;
            for (i, p) in truth.iter().enumerate() {
                acc += p;
                if u < acc {
                    s = i;
                    break;
                }
            }
            mb.record(MetaRecord::Continuous { cell: s, action: None }, t, n, n, 0).unwrap();
        }
        let w = mb.estimate_state_weights(0, 4).unwrap();
        let tv: f64 = 0.5
            * truth
                .iter()
                .enumerate()
                .map(|(s, p)| (w.state(s) - p).abs())
                .sum::<f64>();
        assert!(tv <= 0.05, "tv = {tv}");
    }
}
