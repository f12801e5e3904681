//! The plasticity half of the dual-learner system: tabular Q-learning for
//! discrete tasks and a REINFORCE-style Gaussian policy learner for
//! continuous tasks, each optionally regularized toward the meta policy
//! during warm-up.

use rand::Rng;

use crate::error::{FameError, Result};
use crate::mdp::Transition;
use crate::pointmass::ContTrajectory;
use crate::policy::{
    gaussian_log_density_grad, softmax, CategoricalPolicyTable, GaussianPolicyTable,
};

/// Tabular action-value function with a softmax readout temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    values: Vec<f64>,
    n_states: usize,
    n_actions: usize,
    tau: f64,
}

impl QTable {
    pub fn zeros(n_states: usize, n_actions: usize, tau: f64) -> Self {
        assert!(tau > 0.0, "temperature must be positive");
        Self { values: vec![0.0; n_states * n_actions], n_states, n_actions, tau }
    }

    pub fn from_values(n_states: usize, n_actions: usize, values: Vec<f64>, tau: f64) -> Self {
        assert_eq!(values.len(), n_states * n_actions);
        assert!(tau > 0.0, "temperature must be positive");
        Self { values, n_states, n_actions, tau }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn set(&mut self, s: usize, a: usize, v: f64) {
        self.values[s * self.n_actions + a] = v;
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn max_value(&self, s: usize) -> f64 {
        self.row(s).iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Softmax (Boltzmann) policy over Q / tau.
    pub fn softmax_policy(&self) -> CategoricalPolicyTable {
        let mut probs = Vec::with_capacity(self.values.len());
        for s in 0..self.n_states {
            probs.extend(softmax(self.row(s), self.tau));
        }
        CategoricalPolicyTable::new(self.n_states, self.n_actions, probs)
            .expect("softmax rows are simplex-valued")
    }
}

/// Exploration schedule and update hyperparameters for the fast learner.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LearnerConfig {
    pub learning_rate: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay_steps: usize,
    /// Behavior-cloning strength λ.
    pub bc_lambda: f64,
    /// BC warm-up span L in steps.
    pub bc_steps: usize,
    pub gamma: f64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.3,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_steps: 1000,
            bc_lambda: 1.0,
            bc_steps: 0,
            gamma: 0.95,
        }
    }
}

impl LearnerConfig {
    /// Linear decay from start to end over `epsilon_decay_steps`.
    pub fn epsilon(&self, step: usize) -> f64 {
        if self.epsilon_decay_steps == 0 || step >= self.epsilon_decay_steps {
            return self.epsilon_end;
        }
        let frac = step as f64 / self.epsilon_decay_steps as f64;
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

/// TD(0) update: Q(s,a) += α [r + γ max_a' Q(s',a') (1-done) − Q(s,a)].
///
/// Touches exactly the (s,a) entry of the transition.
pub fn q_update(q: &mut QTable, tr: &Transition, cfg: &LearnerConfig) {
    let bootstrap = if tr.done { 0.0 } else { cfg.gamma * q.max_value(tr.next_state) };
    let target = tr.reward + bootstrap;
    let old = q.get(tr.state, tr.action);
    q.set(tr.state, tr.action, old + cfg.learning_rate * (target - old));
}

/// TD update on every transition of the batch plus one descent step on the
/// behavior-cloning loss λ E_s[KL(meta_pi(·|s) || softmax(Q/τ)(·|s))]
/// averaged over the batch states.
///
/// The KL gradient with respect to Q(s,a) is λ/τ (softmax(Q/τ)(a|s) − meta_pi(a|s)).
pub fn bc_regularized_q_update(
    q: &mut QTable,
    batch: &[Transition],
    meta_pi: &CategoricalPolicyTable,
    cfg: &LearnerConfig,
) -> Result<()> {
    if cfg.bc_lambda < 0.0 {
        return Err(FameError::ContractViolation("bc_lambda must be non-negative".into()));
    }
    if batch.is_empty() {
        return Ok(());
    }
    for tr in batch {
        q_update(q, tr, cfg);
    }
    if cfg.bc_lambda == 0.0 {
        return Ok(());
    }
    let scale = cfg.learning_rate * cfg.bc_lambda / (q.tau() * batch.len() as f64);
    for tr in batch {
        let s = tr.state;
        let p = softmax(q.row(s), q.tau());
        for (a, pa) in p.iter().enumerate() {
            let grad = pa - meta_pi.prob(s, a);
            let old = q.get(s, a);
            q.set(s, a, old - scale * grad);
        }
    }
    Ok(())
}

/// ε-greedy action selection under the learner's schedule.
pub fn act_epsilon_greedy<R: Rng + ?Sized>(
    q: &QTable,
    state: usize,
    step: usize,
    cfg: &LearnerConfig,
    rng: &mut R,
) -> usize {
    let eps = cfg.epsilon(step);
    if rng.random::<f64>() < eps {
        rng.random_range(0..q.n_actions())
    } else {
        let row = q.row(state);
        let mut best = 0;
        for (a, v) in row.iter().enumerate().skip(1) {
            if *v > row[best] {
                best = a;
            }
        }
        best
    }
}

/// Gaussian fast learner: a tabular policy plus per-cell return baselines.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLearner {
    pub policy: GaussianPolicyTable,
    baseline: Vec<f64>,
    baseline_count: Vec<u64>,
    /// Box the policy means are projected into after each update. Means far
    /// outside the action bounds act identically (samples saturate) but are
    /// unidentifiable from clipped actions, so rarely-visited cells would
    /// drift without bound.
    mean_bounds: Option<(f64, f64)>,
}

impl GaussianLearner {
    pub fn new(n_cells: usize, action_dim: usize) -> Self {
        Self {
            policy: GaussianPolicyTable::new(n_cells, action_dim),
            baseline: vec![0.0; n_cells],
            baseline_count: vec![0; n_cells],
            mean_bounds: None,
        }
    }

    /// Replaces the policy parameters, keeping fresh baselines.
    pub fn with_policy(policy: GaussianPolicyTable) -> Self {
        let n = policy.n_cells();
        Self { policy, baseline: vec![0.0; n], baseline_count: vec![0; n], mean_bounds: None }
    }

    pub fn with_mean_bounds(mut self, low: f64, high: f64) -> Self {
        self.mean_bounds = Some((low, high));
        self
    }

    pub fn mean_bounds(&self) -> Option<(f64, f64)> {
        self.mean_bounds
    }

    pub fn baseline(&self, cell: usize) -> f64 {
        self.baseline[cell]
    }

    /// How many return samples this cell's baseline has absorbed.
    pub fn visit_count(&self, cell: usize) -> u64 {
        self.baseline_count[cell]
    }

    fn update_baseline(&mut self, cell: usize, g: f64) {
        self.baseline_count[cell] += 1;
        let n = self.baseline_count[cell] as f64;
        self.baseline[cell] += (g - self.baseline[cell]) / n;
    }
}

/// One REINFORCE step over a batch of episodes: per grid cell, a single
/// gradient application of the return-weighted log-likelihood, with the
/// per-cell running-mean baseline subtracted. Standard deviations stay
/// clamped at sigma_min.
pub fn gaussian_policy_update(
    learner: &mut GaussianLearner,
    episodes: &[ContTrajectory],
    cfg: &LearnerConfig,
) {
    if episodes.is_empty() {
        return;
    }
    let dim = learner.policy.action_dim();
    let n_cells = learner.policy.n_cells();
    let mut grad_mean = vec![0.0; n_cells * dim];
    let mut grad_std = vec![0.0; n_cells * dim];
    let mut touched = vec![false; n_cells];

    // whole-episode discounted returns; a return-to-go variant couples the
    // advantage to the step's position in the episode and turns the
    // per-cell baseline into a bias
    let mut advs: Vec<(usize, f64)> = Vec::new();
    for (e, ep) in episodes.iter().enumerate() {
        let mut g = 0.0;
        for step in ep.steps.iter().rev() {
            g = step.reward + cfg.gamma * g;
        }
        for step in &ep.steps {
            advs.push((e, g - learner.baseline(step.cell)));
            learner.update_baseline(step.cell, g);
        }
    }
    if advs.is_empty() {
        return;
    }
    // standardize advantages across the batch: all-negative shaped rewards
    // otherwise push every visited cell away from its executed actions
    let mean_adv: f64 = advs.iter().map(|(_, a)| a).sum::<f64>() / advs.len() as f64;
    let var_adv: f64 =
        advs.iter().map(|(_, a)| (a - mean_adv) * (a - mean_adv)).sum::<f64>() / advs.len() as f64;
    let std_adv = var_adv.sqrt();
    if std_adv > 1e-12 {
        for (_, a) in &mut advs {
            *a = (*a - mean_adv) / std_adv;
        }
    }

    let mut idx = 0;
    for (e, ep) in episodes.iter().enumerate() {
        for step in &ep.steps {
            debug_assert_eq!(advs[idx].0, e);
            let adv = advs[idx].1;
            idx += 1;
            let (dm, ds) = gaussian_log_density_grad(
                &step.action,
                learner.policy.mean(step.cell),
                learner.policy.std(step.cell),
            );
            for i in 0..dim {
                grad_mean[step.cell * dim + i] += adv * dm[i];
                grad_std[step.cell * dim + i] += adv * ds[i];
            }
            touched[step.cell] = true;
        }
    }

    // Bounded steps and an exploration floor on sigma: together they keep
    // the 1/sigma^2-scale REINFORCE gradients from blowing up the table.
    const MAX_STEP: f64 = 0.25;
    const EXPLORE_STD_FLOOR: f64 = 0.05;
    let scale = cfg.learning_rate / episodes.len() as f64;
    for cell in 0..n_cells {
        if !touched[cell] {
            continue;
        }
        let dm: Vec<f64> = grad_mean[cell * dim..(cell + 1) * dim]
            .iter()
            .map(|g| (scale * g).clamp(-MAX_STEP, MAX_STEP))
            .collect();
        let ds: Vec<f64> = grad_std[cell * dim..(cell + 1) * dim]
            .iter()
            .map(|g| (scale * g).clamp(-MAX_STEP, MAX_STEP))
            .collect();
        learner.policy.nudge_cell(cell, &dm, &ds, EXPLORE_STD_FLOOR);
        if let Some((lo, hi)) = learner.mean_bounds {
            let clamped: Vec<f64> =
                learner.policy.mean(cell).iter().map(|m| m.clamp(lo, hi)).collect();
            let std = learner.policy.std(cell).to_vec();
            learner.policy.set_cell(cell, &clamped, &std);
        }
    }
}
