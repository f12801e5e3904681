//! The stability half of the dual-learner system: knowledge-integration
//! rules that update the meta learner at task boundaries by minimizing
//! visitation-weighted forgetting.
//!
//! Three rules are implemented, each with a closed form:
//! - weighted-ℓ2 on Q tables: per-(s,a) running weighted average;
//! - softmax-KL: per-state MLE over pooled state-action mass;
//! - squared-W2 on diagonal Gaussians: per-state running weighted average
//!   of means and standard deviations.
//!
//! Incremental bookkeeping (cumulative weights per entry) makes k updates
//! equal the batch minimizer over all k tasks without storing past
//! learners; the `oracle` module recomputes the batch solutions
//! independently.

use crate::buffers::{MetaBuffer, MetaRecord};
use crate::distance::VisitationWeights;
pub use crate::distance::w2_squared_diag_gaussian;
use crate::error::{FameError, Result};
use crate::fast::QTable;
use crate::policy::{CategoricalPolicyTable, GaussianPolicyTable, SIGMA_MIN};

/// Default uniform mass blended into softmax-KL meta rows, keeping
/// downstream KL terms finite on unseen actions.
pub const DEFAULT_SMOOTHING_EPS: f64 = 1e-3;

/// The meta learner's parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum MetaLearner {
    Q(QTable),
    Categorical(CategoricalPolicyTable),
    Gaussian(GaussianPolicyTable),
}

/// Meta learner plus the cumulative visitation bookkeeping that makes the
/// incremental updates equal their batch minimizers.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaState {
    learner: MetaLearner,
    /// Σ_{i<k} μ_i(s) per state (Wasserstein rule).
    cum_state_weight: Vec<f64>,
    /// Σ_{i<k} w_i(s,a) per state-action (ℓ2 and softmax-KL rules).
    cum_sa_weight: Vec<f64>,
    tasks_integrated: usize,
    tau: f64,
    smoothing_eps: f64,
}

impl MetaState {
    /// Meta learner for the weighted-ℓ2 rule; starts as a zero Q table.
    pub fn new_q_l2(n_states: usize, n_actions: usize, tau: f64) -> Self {
        Self {
            learner: MetaLearner::Q(QTable::zeros(n_states, n_actions, tau)),
            cum_state_weight: vec![0.0; n_states],
            cum_sa_weight: vec![0.0; n_states * n_actions],
            tasks_integrated: 0,
            tau,
            smoothing_eps: 0.0,
        }
    }

    /// Meta learner for the softmax-KL rule; starts uniform.
    pub fn new_softmax_kl(n_states: usize, n_actions: usize, tau: f64, smoothing_eps: f64) -> Self {
        Self {
            learner: MetaLearner::Categorical(CategoricalPolicyTable::uniform(n_states, n_actions)),
            cum_state_weight: vec![0.0; n_states],
            cum_sa_weight: vec![0.0; n_states * n_actions],
            tasks_integrated: 0,
            tau,
            smoothing_eps,
        }
    }

    /// Meta learner for the Gaussian rules; starts at (0, 1).
    pub fn new_gaussian(n_cells: usize, action_dim: usize) -> Self {
        Self {
            learner: MetaLearner::Gaussian(GaussianPolicyTable::new(n_cells, action_dim)),
            cum_state_weight: vec![0.0; n_cells],
            cum_sa_weight: Vec::new(),
            tasks_integrated: 0,
            tau: 1.0,
            smoothing_eps: 0.0,
        }
    }

    pub fn learner(&self) -> &MetaLearner {
        &self.learner
    }

    pub fn tasks_integrated(&self) -> usize {
        self.tasks_integrated
    }

    pub fn cum_state_weight(&self) -> &[f64] {
        &self.cum_state_weight
    }

    pub fn cum_sa_weight(&self) -> &[f64] {
        &self.cum_sa_weight
    }

    pub fn as_q(&self) -> Option<&QTable> {
        match &self.learner {
            MetaLearner::Q(q) => Some(q),
            _ => None,
        }
    }

    pub fn as_categorical(&self) -> Option<&CategoricalPolicyTable> {
        match &self.learner {
            MetaLearner::Categorical(c) => Some(c),
            _ => None,
        }
    }

    pub fn as_gaussian(&self) -> Option<&GaussianPolicyTable> {
        match &self.learner {
            MetaLearner::Gaussian(g) => Some(g),
            _ => None,
        }
    }

    /// Internal Q representation of a softmax-KL meta policy: τ·log π,
    /// defined up to a per-state constant.
    pub fn q_representation(&self) -> Option<QTable> {
        let pi = self.as_categorical()?;
        let mut values = Vec::with_capacity(pi.n_states() * pi.n_actions());
        for s in 0..pi.n_states() {
            for a in 0..pi.n_actions() {
                values.push(self.tau * pi.prob(s, a).max(f64::MIN_POSITIVE).ln());
            }
        }
        Some(QTable::from_values(pi.n_states(), pi.n_actions(), values, self.tau))
    }

    pub(crate) fn restore(
        learner: MetaLearner,
        cum_state_weight: Vec<f64>,
        cum_sa_weight: Vec<f64>,
        tasks_integrated: usize,
        tau: f64,
        smoothing_eps: f64,
    ) -> Self {
        Self { learner, cum_state_weight, cum_sa_weight, tasks_integrated, tau, smoothing_eps }
    }

    pub(crate) fn parts(&self) -> (&MetaLearner, &[f64], &[f64], usize, f64, f64) {
        (
            &self.learner,
            &self.cum_state_weight,
            &self.cum_sa_weight,
            self.tasks_integrated,
            self.tau,
            self.smoothing_eps,
        )
    }
}

/// Incremental weighted-ℓ2 integration:
/// Q^M(s,a) ← (W_prev·Q^M + w_k·Q_k) / (W_prev + w_k), entries with zero
/// total weight unchanged.
pub fn integrate_q_l2(
    meta: &mut MetaState,
    fast_q: &QTable,
    weights_k: &VisitationWeights,
) -> Result<()> {
    let sa = weights_k
        .state_action_weights()
        .ok_or_else(|| {
            FameError::ContractViolation("l2 integration needs state-action weights".into())
        })?
        .to_vec();
    let q = match &mut meta.learner {
        MetaLearner::Q(q) => q,
        _ => {
            return Err(FameError::ContractViolation(
                "integrate_q_l2 requires a Q-table meta learner".into(),
            ))
        }
    };
    if sa.len() != q.n_states() * q.n_actions() {
        return Err(FameError::ContractViolation("weight shape mismatch".into()));
    }
    for (idx, w) in sa.iter().enumerate() {
        let prev = meta.cum_sa_weight[idx];
        let tot = prev + w;
        if tot > 0.0 && *w > 0.0 {
            let s = idx / q.n_actions();
            let a = idx % q.n_actions();
            let blended = (prev * q.get(s, a) + w * fast_q.values()[idx]) / tot;
            q.set(s, a, blended);
        }
        meta.cum_sa_weight[idx] = tot;
    }
    meta.tasks_integrated += 1;
    Ok(())
}

/// Incremental softmax-KL integration over one task's state-action mass.
///
/// Pools w_k into the cumulative mass and rebuilds the per-state MLE rows,
/// blended with `smoothing_eps` of uniform mass; states with no mass stay
/// uniform. All-zero weights leave the meta unchanged with a warning.
pub fn integrate_softmax_kl(meta: &mut MetaState, weights_k: &VisitationWeights) -> Result<()> {
    let sa = weights_k
        .state_action_weights()
        .ok_or_else(|| {
            FameError::ContractViolation("softmax-KL integration needs state-action weights".into())
        })?
        .to_vec();
    let (n_states, n_actions) = match &meta.learner {
        MetaLearner::Categorical(c) => (c.n_states(), c.n_actions()),
        _ => {
            return Err(FameError::ContractViolation(
                "integrate_softmax_kl requires a categorical meta learner".into(),
            ))
        }
    };
    if sa.len() != n_states * n_actions {
        return Err(FameError::ContractViolation("weight shape mismatch".into()));
    }
    if sa.iter().all(|w| *w == 0.0) {
        log::warn!("softmax-KL integration skipped: task contributed no weight");
        return Ok(());
    }
    for (cum, w) in meta.cum_sa_weight.iter_mut().zip(&sa) {
        *cum += w;
    }
    rebuild_categorical_rows(meta, n_states, n_actions);
    meta.tasks_integrated += 1;
    Ok(())
}

/// Softmax-KL integration straight from the meta buffer: pools every task
/// bucket's normalized (state, action) counts and rebuilds the MLE rows.
/// An empty buffer leaves the meta unchanged and emits a warning.
pub fn integrate_softmax_kl_from_buffer(meta: &mut MetaState, buffer: &MetaBuffer) -> Result<()> {
    let (n_states, n_actions) = match &meta.learner {
        MetaLearner::Categorical(c) => (c.n_states(), c.n_actions()),
        _ => {
            return Err(FameError::ContractViolation(
                "integrate_softmax_kl requires a categorical meta learner".into(),
            ))
        }
    };
    if buffer.is_empty() {
        log::warn!("softmax-KL integration skipped: meta buffer is empty");
        return Ok(());
    }
    let mut pooled = vec![0.0; n_states * n_actions];
    let mut tasks = 0usize;
    for task_id in buffer.task_ids() {
        let w = buffer.estimate_sa_weights(task_id, n_states, n_actions)?;
        for (p, x) in pooled.iter_mut().zip(w.state_action_weights().unwrap()) {
            *p += x;
        }
        tasks += 1;
    }
    meta.cum_sa_weight = pooled;
    rebuild_categorical_rows(meta, n_states, n_actions);
    meta.tasks_integrated = tasks;
    Ok(())
}

fn rebuild_categorical_rows(meta: &mut MetaState, n_states: usize, n_actions: usize) {
    let eps = meta.smoothing_eps;
    let cum = meta.cum_sa_weight.clone();
    let pi = match &mut meta.learner {
        MetaLearner::Categorical(c) => c,
        _ => unreachable!("checked by callers"),
    };
    let uniform = vec![1.0 / n_actions as f64; n_actions];
    for s in 0..n_states {
        let row = &cum[s * n_actions..(s + 1) * n_actions];
        let z: f64 = row.iter().sum();
        if z <= 0.0 {
            pi.set_row(s, &uniform);
            continue;
        }
        let mut p: Vec<f64> = row
            .iter()
            .map(|w| (1.0 - eps) * (w / z) + eps / n_actions as f64)
            .collect();
        // absorb float round-off so the row sums to 1 exactly-ish
        let total: f64 = p.iter().sum();
        for x in &mut p {
            *x /= total;
        }
        pi.set_row(s, &p);
    }
}

/// Gaussian MLE integration from pooled buffer actions (forward-KL rule).
///
/// Each task bucket contributes with per-record weight 1/N_i so tasks count
/// equally; per cell, the meta takes the weighted mean and weighted
/// (population) standard deviation, clamped at sigma_min. Cells with fewer
/// than two records keep their previous parameters.
pub fn integrate_policy_kl(meta: &mut MetaState, buffer: &MetaBuffer) -> Result<()> {
    let (n_cells, dim) = match &meta.learner {
        MetaLearner::Gaussian(g) => (g.n_cells(), g.action_dim()),
        _ => {
            return Err(FameError::ContractViolation(
                "integrate_policy_kl requires a Gaussian meta learner".into(),
            ))
        }
    };
    if buffer.is_empty() {
        log::warn!("policy-KL integration skipped: meta buffer is empty");
        return Ok(());
    }

    let mut weight = vec![0.0; n_cells];
    let mut count = vec![0usize; n_cells];
    let mut mean = vec![0.0; n_cells * dim];
    for task_id in buffer.task_ids() {
        let records = buffer.task_records(task_id);
        let per_record = 1.0 / records.len() as f64;
        for rec in records {
            if let MetaRecord::Continuous { cell, action: Some(a) } = rec {
                if a.len() != dim {
                    return Err(FameError::ContractViolation(
                        "buffered action dimension mismatch".into(),
                    ));
                }
                weight[*cell] += per_record;
                count[*cell] += 1;
                for (i, x) in a.iter().enumerate() {
                    mean[cell * dim + i] += per_record * x;
                }
            }
        }
    }
    for c in 0..n_cells {
        if weight[c] > 0.0 {
            for i in 0..dim {
                mean[c * dim + i] /= weight[c];
            }
        }
    }
    let mut var = vec![0.0; n_cells * dim];
    for task_id in buffer.task_ids() {
        let records = buffer.task_records(task_id);
        let per_record = 1.0 / records.len() as f64;
        for rec in records {
            if let MetaRecord::Continuous { cell, action: Some(a) } = rec {
                for (i, x) in a.iter().enumerate() {
                    let d = x - mean[cell * dim + i];
                    var[cell * dim + i] += per_record * d * d;
                }
            }
        }
    }

    let g = match &mut meta.learner {
        MetaLearner::Gaussian(g) => g,
        _ => unreachable!(),
    };
    for c in 0..n_cells {
        if count[c] < 2 {
            continue;
        }
        let m: Vec<f64> = (0..dim).map(|i| mean[c * dim + i]).collect();
        let s: Vec<f64> = (0..dim)
            .map(|i| (var[c * dim + i] / weight[c]).sqrt().max(SIGMA_MIN))
            .collect();
        g.set_cell(c, &m, &s);
    }
    meta.tasks_integrated += 1;
    Ok(())
}

/// Incremental Wasserstein integration: per state,
/// ν^M ← (W_prev·ν^M + μ_k·ν_k) / (W_prev + μ_k) and identically for σ^M;
/// zero-total-weight states unchanged, cumulative weight bumped by μ_k.
pub fn integrate_policy_wd(
    meta: &mut MetaState,
    fast_pi: &GaussianPolicyTable,
    mu_k: &VisitationWeights,
) -> Result<()> {
    let g = match &mut meta.learner {
        MetaLearner::Gaussian(g) => g,
        _ => {
            return Err(FameError::ContractViolation(
                "integrate_policy_wd requires a Gaussian meta learner".into(),
            ))
        }
    };
    if fast_pi.n_cells() != g.n_cells() || fast_pi.action_dim() != g.action_dim() {
        return Err(FameError::ContractViolation("fast policy shape mismatch".into()));
    }
    if mu_k.n_states() != g.n_cells() {
        return Err(FameError::ContractViolation("visitation shape mismatch".into()));
    }
    let dim = g.action_dim();
    for c in 0..g.n_cells() {
        let w_prev = meta.cum_state_weight[c];
        let m = mu_k.state(c);
        let tot = w_prev + m;
        if tot > 0.0 && m > 0.0 {
            let mut mean = Vec::with_capacity(dim);
            let mut std = Vec::with_capacity(dim);
            for i in 0..dim {
                mean.push((w_prev * g.mean(c)[i] + m * fast_pi.mean(c)[i]) / tot);
                std.push((w_prev * g.std(c)[i] + m * fast_pi.std(c)[i]) / tot);
            }
            g.set_cell(c, &mean, &std);
        }
        meta.cum_state_weight[c] = tot;
    }
    meta.tasks_integrated += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sa_weights(w: Vec<f64>, ns: usize, na: usize, task: usize) -> VisitationWeights {
        let z: f64 = w.iter().sum();
        let mut n: Vec<f64> = w.iter().map(|x| x / z).collect();
        let z2: f64 = n.iter().sum();
        n[0] += 1.0 - z2;
        VisitationWeights::from_state_action_weights(n, ns, na, task).unwrap()
    }

    #[test]
    fn first_l2_integration_copies_fast_on_support() {
        let mut meta = MetaState::new_q_l2(2, 2, 1.0);
        let fast = QTable::from_values(2, 2, vec![1.0, 2.0, 3.0, 4.0], 1.0);
        // only (0,0) and (1,1) carry weight
        let w = sa_weights(vec![1.0, 0.0, 0.0, 1.0], 2, 2, 0);
        integrate_q_l2(&mut meta, &fast, &w).unwrap();
        let q = meta.as_q().unwrap();
        assert_eq!(q.get(0, 0), 1.0);
        assert_eq!(q.get(1, 1), 4.0);
        // unweighted entries keep the previous meta value (zero here)
        assert_eq!(q.get(0, 1), 0.0);
        assert_eq!(meta.tasks_integrated(), 1);
    }

    #[test]
    fn equal_weights_average_q_values() {
        let mut meta = MetaState::new_q_l2(1, 1, 1.0);
        let w = sa_weights(vec![1.0], 1, 1, 0);
        integrate_q_l2(&mut meta, &QTable::from_values(1, 1, vec![0.0], 1.0), &w).unwrap();
        let w = sa_weights(vec![1.0], 1, 1, 1);
        integrate_q_l2(&mut meta, &QTable::from_values(1, 1, vec![2.0], 1.0), &w).unwrap();
        assert!((meta.as_q().unwrap().get(0, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_kl_single_state_action_counts() {
        // action counts (3,1) with no smoothing -> (0.75, 0.25)
        let mut meta = MetaState::new_softmax_kl(1, 2, 1.0, 0.0);
        let w = sa_weights(vec![3.0, 1.0], 1, 2, 0);
        integrate_softmax_kl(&mut meta, &w).unwrap();
        let pi = meta.as_categorical().unwrap();
        assert!((pi.prob(0, 0) - 0.75).abs() < 1e-12);
        assert!((pi.prob(0, 1) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn softmax_kl_unseen_state_stays_uniform() {
        let mut meta = MetaState::new_softmax_kl(2, 2, 1.0, 1e-3);
        let w = sa_weights(vec![1.0, 1.0, 0.0, 0.0], 2, 2, 0);
        integrate_softmax_kl(&mut meta, &w).unwrap();
        let pi = meta.as_categorical().unwrap();
        assert_eq!(pi.prob(1, 0), 0.5);
        assert_eq!(pi.prob(1, 1), 0.5);
    }

    #[test]
    fn softmax_kl_rows_stay_simplex() {
        let mut meta = MetaState::new_softmax_kl(3, 4, 1.0, 1e-3);
        let mut rng = crate::rng::stream(5, &[1]);
        use rand::Rng;
        for task in 0..6 {
            let w: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..1.0)).collect();
            let w = sa_weights(w, 3, 4, task);
            integrate_softmax_kl(&mut meta, &w).unwrap();
            let pi = meta.as_categorical().unwrap();
            for s in 0..3 {
                let sum: f64 = pi.row(s).iter().sum();
                assert!((sum - 1.0).abs() < 1e-10);
                assert!(pi.row(s).iter().all(|p| *p >= 0.0));
            }
        }
    }

    #[test]
    fn q_representation_recovers_policy_ratios() {
        let mut meta = MetaState::new_softmax_kl(1, 2, 1.0, 0.0);
        let w = sa_weights(vec![3.0, 1.0], 1, 2, 0);
        integrate_softmax_kl(&mut meta, &w).unwrap();
        let q = meta.q_representation().unwrap();
        let pi = q.softmax_policy();
        assert!((pi.prob(0, 0) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn empty_buffer_leaves_meta_unchanged() {
        let mut meta = MetaState::new_softmax_kl(1, 2, 1.0, 1e-3);
        let before = meta.clone();
        let buffer = MetaBuffer::new();
        integrate_softmax_kl_from_buffer(&mut meta, &buffer).unwrap();
        assert_eq!(meta, before);
    }

    #[test]
    fn policy_kl_degenerate_cell_gets_sigma_min() {
        let mut meta = MetaState::new_gaussian(2, 1);
        let mut buffer = MetaBuffer::new();
        for t in 1..=4usize {
            buffer
                .record(
                    MetaRecord::Continuous { cell: 0, action: Some(vec![0.7]) },
                    t,
                    4,
                    4,
                    0,
                )
                .unwrap();
        }
        integrate_policy_kl(&mut meta, &buffer).unwrap();
        let g = meta.as_gaussian().unwrap();
        assert!((g.mean(0)[0] - 0.7).abs() < 1e-12);
        assert_eq!(g.std(0)[0], SIGMA_MIN);
        // untouched cell keeps the (0, 1) prior
        assert_eq!(g.mean(1)[0], 0.0);
        assert_eq!(g.std(1)[0], 1.0);
    }

    #[test]
    fn policy_kl_pools_tasks_equally() {
        // two tasks contributing one action each at a cell: pooled mean 1
        let mut meta = MetaState::new_gaussian(1, 1);
        let mut buffer = MetaBuffer::new();
        buffer
            .record(MetaRecord::Continuous { cell: 0, action: Some(vec![0.0]) }, 1, 1, 1, 0)
            .unwrap();
        buffer
            .record(MetaRecord::Continuous { cell: 0, action: Some(vec![2.0]) }, 1, 1, 1, 1)
            .unwrap();
        integrate_policy_kl(&mut meta, &buffer).unwrap();
        assert!((meta.as_gaussian().unwrap().mean(0)[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wd_first_integration_copies_fast_on_visited() {
        let mut meta = MetaState::new_gaussian(2, 1);
        let mut fast = GaussianPolicyTable::new(2, 1);
        fast.set_cell(0, &[0.8], &[0.4]);
        fast.set_cell(1, &[-0.8], &[0.2]);
        let mu = VisitationWeights::from_state_weights(vec![1.0, 0.0], 0).unwrap();
        integrate_policy_wd(&mut meta, &fast, &mu).unwrap();
        let g = meta.as_gaussian().unwrap();
        assert_eq!(g.mean(0)[0], 0.8);
        assert_eq!(g.std(0)[0], 0.4);
        // unvisited cell frozen at the prior
        assert_eq!(g.mean(1)[0], 0.0);
        assert_eq!(g.std(1)[0], 1.0);
    }

    #[test]
    fn wd_equal_weights_average_parameters() {
        // prev (0,1), fast (2,3), equal weights -> (1,2)
        let mut meta = MetaState::new_gaussian(1, 1);
        let mut a = GaussianPolicyTable::new(1, 1);
        a.set_cell(0, &[0.0], &[1.0]);
        let mut b = GaussianPolicyTable::new(1, 1);
        b.set_cell(0, &[2.0], &[3.0]);
        let mu = VisitationWeights::from_state_weights(vec![1.0], 0).unwrap();
        integrate_policy_wd(&mut meta, &a, &mu).unwrap();
        integrate_policy_wd(&mut meta, &b, &mu).unwrap();
        let g = meta.as_gaussian().unwrap();
        assert!((g.mean(0)[0] - 1.0).abs() < 1e-15);
        assert!((g.std(0)[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn w2_closed_form_examples() {
        let w = |p: (f64, f64), q: (f64, f64)| {
            w2_squared_diag_gaussian((&[p.0], &[p.1]), (&[q.0], &[q.1])).unwrap()
        };
        assert_eq!(w((0.0, 1.0), (0.0, 1.0)), 0.0);
        assert_eq!(w((1.0, 1.0), (0.0, 1.0)), 1.0);
        assert_eq!(w((2.0, 3.0), (0.0, 1.0)), 8.0);
        assert!(w2_squared_diag_gaussian((&[0.0], &[0.0]), (&[0.0], &[1.0])).is_err());
    }
}
