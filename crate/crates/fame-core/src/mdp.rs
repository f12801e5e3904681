//! Finite MDPs, exact solvers, and the simulation step contract.

use rand::Rng;

use crate::distance::VisitationWeights;
use crate::error::{FameError, Result};
use crate::fast::QTable;
use crate::policy::CategoricalPolicyTable;

/// Row-stochasticity tolerance for transition tensors.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// One environment interaction.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
    pub done: bool,
    pub task_id: usize,
}

/// A finite MDP ⟨S, A, P, R, γ⟩ with a start distribution and terminal set.
///
/// Terminal states self-loop with probability 1 and zero reward, keeping
/// every operator total. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// Flat [state][action][next_state].
    transition: Vec<f64>,
    /// Flat [state][action].
    reward: Vec<f64>,
    gamma: f64,
    start_dist: Vec<f64>,
    terminal: Vec<bool>,
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        gamma: f64,
        start_dist: Vec<f64>,
        terminal: Vec<bool>,
    ) -> Result<Self> {
        if transition.len() != n_states * n_actions * n_states {
            return Err(FameError::InvalidModel("transition tensor has wrong size".into()));
        }
        if reward.len() != n_states * n_actions {
            return Err(FameError::InvalidModel("reward table has wrong size".into()));
        }
        if start_dist.len() != n_states || terminal.len() != n_states {
            return Err(FameError::InvalidModel("start/terminal vectors have wrong size".into()));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(FameError::InvalidModel(format!("gamma {gamma} not in (0,1)")));
        }
        let start_sum: f64 = start_dist.iter().sum();
        if (start_sum - 1.0).abs() > 1e-10 || start_dist.iter().any(|p| *p < 0.0) {
            return Err(FameError::InvalidModel("start_dist is not a distribution".into()));
        }
        let mdp = Self { n_states, n_actions, transition, reward, gamma, start_dist, terminal };
        for s in 0..n_states {
            for a in 0..n_actions {
                let row = mdp.transition_row(s, a);
                if row.iter().any(|p| *p < 0.0) {
                    return Err(FameError::InvalidModel(format!(
                        "negative transition probability at ({s},{a})"
                    )));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(FameError::InvalidModel(format!(
                        "transition row ({s},{a}) sums to {sum}"
                    )));
                }
            }
        }
        for s in 0..n_states {
            if mdp.terminal[s] {
                for a in 0..n_actions {
                    if (mdp.p(s, a, s) - 1.0).abs() > ROW_SUM_TOL || mdp.r(s, a) != 0.0 {
                        return Err(FameError::InvalidModel(format!(
                            "terminal state {s} must self-loop with zero reward"
                        )));
                    }
                }
            }
        }
        Ok(mdp)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn p(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.transition[(s * self.n_actions + a) * self.n_states + s2]
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let base = (s * self.n_actions + a) * self.n_states;
        &self.transition[base..base + self.n_states]
    }

    pub fn r(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn start_dist(&self) -> &[f64] {
        &self.start_dist
    }

    pub fn terminal_flags(&self) -> &[bool] {
        &self.terminal
    }

    pub fn transition_flat(&self) -> &[f64] {
        &self.transition
    }

    pub fn reward_flat(&self) -> &[f64] {
        &self.reward
    }

    pub fn sample_start<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_index(&self.start_dist, rng)
    }

    /// Samples one environment step.
    ///
    /// The input state must be non-terminal and the action in range.
    pub fn step<R: Rng + ?Sized>(
        &self,
        state: usize,
        action: usize,
        rng: &mut R,
    ) -> Result<(usize, f64, bool)> {
        if state >= self.n_states || action >= self.n_actions {
            return Err(FameError::ContractViolation(format!(
                "step out of range: state {state}, action {action}"
            )));
        }
        if self.terminal[state] {
            return Err(FameError::ContractViolation(format!(
                "step called on terminal state {state}"
            )));
        }
        let next = sample_index(self.transition_row(state, action), rng);
        let reward = self.r(state, action);
        Ok((next, reward, self.terminal[next]))
    }
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// One Bellman optimality sweep: returns the backed-up table and the
/// sup-norm change. Exposed so tests can check the γ-contraction directly.
pub fn bellman_backup(mdp: &TabularMdp, q: &[f64]) -> (Vec<f64>, f64) {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut out = vec![0.0; ns * na];
    let mut diff: f64 = 0.0;
    for s in 0..ns {
        for a in 0..na {
            let mut v = mdp.r(s, a);
            let row = mdp.transition_row(s, a);
            for (s2, p) in row.iter().enumerate() {
                if *p > 0.0 {
                    let m = (0..na).map(|a2| q[s2 * na + a2]).fold(f64::NEG_INFINITY, f64::max);
                    v += mdp.gamma() * p * m;
                }
            }
            diff = diff.max((v - q[s * na + a]).abs());
            out[s * na + a] = v;
        }
    }
    (out, diff)
}

/// Solves for Q* by value iteration until the sup-norm Bellman residual of
/// the returned table is at most `tol`.
pub fn value_iteration(mdp: &TabularMdp, tol: f64) -> QTable {
    assert!(tol > 0.0, "tolerance must be positive");
    let mut q = vec![0.0; mdp.n_states() * mdp.n_actions()];
    loop {
        let (next, diff) = bellman_backup(mdp, &q);
        q = next;
        // residual(q_{t+1}) <= gamma * ||q_{t+1} - q_t||_inf <= gamma * tol < tol
        if diff <= tol {
            break;
        }
    }
    QTable::from_values(mdp.n_states(), mdp.n_actions(), q, 1.0)
}

/// Greedy action per state; ties break toward the lowest action index.
pub fn greedy_policy(q: &QTable) -> Vec<usize> {
    (0..q.n_states())
        .map(|s| {
            let row = q.row(s);
            let mut best = 0;
            for (a, v) in row.iter().enumerate().skip(1) {
                if *v > row[best] {
                    best = a;
                }
            }
            best
        })
        .collect()
}

/// Exact policy evaluation: solves (I - γ P_π) V = R_π and returns Q^π.
///
/// Independent linear-algebra route used as an oracle against value
/// iteration.
pub fn policy_evaluation_q(mdp: &TabularMdp, policy: &CategoricalPolicyTable) -> Vec<f64> {
    use nalgebra::{DMatrix, DVector};
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut p_pi = DMatrix::<f64>::zeros(ns, ns);
    let mut r_pi = DVector::<f64>::zeros(ns);
    for s in 0..ns {
        for a in 0..na {
            let pa = policy.prob(s, a);
            if pa == 0.0 {
                continue;
            }
            r_pi[s] += pa * mdp.r(s, a);
            for s2 in 0..ns {
                p_pi[(s, s2)] += pa * mdp.p(s, a, s2);
            }
        }
    }
    let system = DMatrix::<f64>::identity(ns, ns) - mdp.gamma() * p_pi;
    let v = system.lu().solve(&r_pi).expect("I - gamma*P is nonsingular for gamma < 1");
    let mut q = vec![0.0; ns * na];
    for s in 0..ns {
        for a in 0..na {
            let mut x = mdp.r(s, a);
            for s2 in 0..ns {
                x += mdp.gamma() * mdp.p(s, a, s2) * v[s2];
            }
            q[s * na + a] = x;
        }
    }
    q
}

/// How to compute the discounted state-occupancy distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VisitationMode {
    /// Solve the discounted-occupancy linear system.
    Exact,
    /// Estimate from rollouts consuming roughly this many environment steps.
    Empirical { total_steps: usize },
}

/// Discounted state visitation μ^π, normalized by (1 - γ) to sum to 1.
pub fn discounted_visitation<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    policy: &CategoricalPolicyTable,
    mode: VisitationMode,
    rng: &mut R,
    task_id: usize,
) -> Result<VisitationWeights> {
    if policy.n_states() != mdp.n_states() || policy.n_actions() != mdp.n_actions() {
        return Err(FameError::ContractViolation("policy shape does not match MDP".into()));
    }
    let mu = match mode {
        VisitationMode::Exact => exact_visitation(mdp, policy),
        VisitationMode::Empirical { total_steps } => {
            empirical_visitation(mdp, policy, total_steps, rng)
        }
    };
    VisitationWeights::from_state_weights(mu, task_id)
}

fn exact_visitation(mdp: &TabularMdp, policy: &CategoricalPolicyTable) -> Vec<f64> {
    use nalgebra::{DMatrix, DVector};
    let ns = mdp.n_states();
    // x = (1 - gamma) * (I - gamma * P_pi^T)^{-1} d0
    let mut p_pi_t = DMatrix::<f64>::zeros(ns, ns);
    for s in 0..ns {
        for a in 0..mdp.n_actions() {
            let pa = policy.prob(s, a);
            if pa == 0.0 {
                continue;
            }
            for s2 in 0..ns {
                p_pi_t[(s2, s)] += pa * mdp.p(s, a, s2);
            }
        }
    }
    let d0 = DVector::from_column_slice(mdp.start_dist());
    let system = DMatrix::<f64>::identity(ns, ns) - mdp.gamma() * p_pi_t;
    let x = system.lu().solve(&d0).expect("I - gamma*P^T is nonsingular for gamma < 1");
    let mut mu: Vec<f64> = x.iter().map(|v| v.max(0.0) * (1.0 - mdp.gamma())).collect();
    let z: f64 = mu.iter().sum();
    for m in &mut mu {
        *m /= z;
    }
    mu
}

fn empirical_visitation<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    policy: &CategoricalPolicyTable,
    total_steps: usize,
    rng: &mut R,
) -> Vec<f64> {
    let mut w = vec![0.0; mdp.n_states()];
    let mut used = 0usize;
    let gamma = mdp.gamma();
    while used < total_steps {
        let mut s = mdp.sample_start(rng);
        let mut disc = 1.0;
        loop {
            w[s] += disc;
            used += 1;
            if mdp.is_terminal(s) {
                // the self-loop holds all remaining discounted mass
                w[s] += disc * gamma / (1.0 - gamma);
                break;
            }
            disc *= gamma;
            if disc < 1e-12 || used >= total_steps {
                break;
            }
            let a = policy.sample(s, rng);
            let (s2, _, _) = mdp.step(s, a, rng).expect("non-terminal state");
            s = s2;
        }
    }
    let z: f64 = w.iter().sum();
    for x in &mut w {
        *x /= z;
    }
    w
}

/// Action selection rules used when rolling out evaluation episodes.
#[derive(Debug, Clone, Copy)]
pub enum DiscreteActor<'a> {
    Greedy(&'a QTable),
    Stochastic(&'a CategoricalPolicyTable),
    Uniform,
}

impl DiscreteActor<'_> {
    pub fn act<R: Rng + ?Sized>(&self, state: usize, n_actions: usize, rng: &mut R) -> usize {
        match self {
            DiscreteActor::Greedy(q) => {
                let row = q.row(state);
                let mut best = 0;
                for (a, v) in row.iter().enumerate().skip(1) {
                    if *v > row[best] {
                        best = a;
                    }
                }
                best
            }
            DiscreteActor::Stochastic(pi) => pi.sample(state, rng),
            DiscreteActor::Uniform => rng.random_range(0..n_actions),
        }
    }
}

/// Rolls one episode and returns (undiscounted return, steps used, transitions).
pub fn rollout_episode<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    actor: DiscreteActor<'_>,
    max_steps: usize,
    task_id: usize,
    rng: &mut R,
) -> (f64, usize, Vec<Transition>) {
    let mut s = mdp.sample_start(rng);
    let mut ret = 0.0;
    let mut transitions = Vec::new();
    for _ in 0..max_steps {
        if mdp.is_terminal(s) {
            break;
        }
        let a = actor.act(s, mdp.n_actions(), rng);
        let (s2, r, done) = mdp.step(s, a, rng).expect("actor only acts on non-terminal states");
        ret += r;
        transitions.push(Transition { state: s, action: a, reward: r, next_state: s2, done, task_id });
        s = s2;
        if done {
            break;
        }
    }
    let steps = transitions.len();
    (ret, steps, transitions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    /// Deterministic 2-state chain: action 0 moves s0 -> s1 (reward 1), s1 terminal.
    fn chain() -> TabularMdp {
        TabularMdp::new(
            2,
            1,
            vec![0.0, 1.0, 0.0, 1.0],
            vec![1.0, 0.0],
            0.9,
            vec![1.0, 0.0],
            vec![false, true],
        )
        .unwrap()
    }

    #[test]
    fn chain_step_is_deterministic() {
        let mdp = chain();
        let mut rng = stream(0, &[0]);
        let (s2, r, done) = mdp.step(0, 0, &mut rng).unwrap();
        assert_eq!((s2, r, done), (1, 1.0, true));
    }

    #[test]
    fn step_on_terminal_state_is_rejected() {
        let mdp = chain();
        let mut rng = stream(0, &[0]);
        assert!(mdp.step(1, 0, &mut rng).is_err());
    }

    #[test]
    fn terminal_states_must_self_loop() {
        let bad = TabularMdp::new(
            2,
            1,
            vec![0.0, 1.0, 1.0, 0.0],
            vec![1.0, 0.0],
            0.9,
            vec![1.0, 0.0],
            vec![false, true],
        );
        assert!(bad.is_err());
    }

    #[test]
    fn value_iteration_geometric_series() {
        // single self-loop state, r = 1, gamma = 0.9 -> Q* = 10
        let mdp = TabularMdp::new(1, 1, vec![1.0], vec![1.0], 0.9, vec![1.0], vec![false]).unwrap();
        let q = value_iteration(&mdp, 1e-10);
        assert!((q.get(0, 0) - 10.0).abs() < 1e-8);
    }

    #[test]
    fn value_iteration_zero_rewards() {
        let mdp = TabularMdp::new(
            2,
            2,
            vec![0.5, 0.5, 1.0, 0.0, 0.0, 1.0, 0.5, 0.5],
            vec![0.0; 4],
            0.8,
            vec![0.5, 0.5],
            vec![false, false],
        )
        .unwrap();
        let q = value_iteration(&mdp, 1e-12);
        assert!(q.values().iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn bellman_backup_contracts_by_gamma() {
        let mdp = TabularMdp::new(
            2,
            2,
            vec![0.3, 0.7, 1.0, 0.0, 0.0, 1.0, 0.6, 0.4],
            vec![1.0, -0.5, 0.25, 2.0],
            0.85,
            vec![1.0, 0.0],
            vec![false, false],
        )
        .unwrap();
        let mut q = vec![0.0; 4];
        let mut last_diff = f64::INFINITY;
        for sweep in 0..30 {
            let (next, diff) = bellman_backup(&mdp, &q);
            q = next;
            if sweep > 0 {
                assert!(
                    diff <= mdp.gamma() * last_diff + 1e-12,
                    "sweep {sweep}: {diff} > gamma * {last_diff}"
                );
            }
            last_diff = diff;
        }
    }

    #[test]
    fn greedy_ties_break_low() {
        let q = QTable::from_values(1, 2, vec![1.0, 1.0], 1.0);
        assert_eq!(greedy_policy(&q), vec![0]);
        let q = QTable::from_values(1, 2, vec![1.0, 0.0], 1.0);
        assert_eq!(greedy_policy(&q), vec![0]);
    }

    #[test]
    fn greedy_agrees_with_direct_argmax_scan() {
        let mut rng = stream(42, &[9]);
        for _ in 0..50 {
            let ns = 6;
            let na = 5;
            let vals: Vec<f64> = (0..ns * na).map(|_| rng.random_range(-3.0..3.0)).collect();
            let q = QTable::from_values(ns, na, vals.clone(), 1.0);
            let g = greedy_policy(&q);
            for s in 0..ns {
                let row = &vals[s * na..(s + 1) * na];
                let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(row[g[s]], best);
                assert!(row[..g[s]].iter().all(|v| *v < best));
            }
        }
    }

    #[test]
    fn exact_visitation_absorbing_state() {
        // single non-terminal self-looping state holds all mass
        let mdp = TabularMdp::new(1, 1, vec![1.0], vec![0.0], 0.9, vec![1.0], vec![false]).unwrap();
        let pi = CategoricalPolicyTable::uniform(1, 1);
        let mut rng = stream(0, &[1]);
        let w = discounted_visitation(&mdp, &pi, VisitationMode::Exact, &mut rng, 0).unwrap();
        assert!((w.state(0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exact_visitation_symmetric_chain() {
        // two states, both actions swap states; symmetric start
        let mdp = TabularMdp::new(
            2,
            2,
            vec![0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0],
            vec![0.0; 4],
            0.9,
            vec![0.5, 0.5],
            vec![false, false],
        )
        .unwrap();
        let pi = CategoricalPolicyTable::uniform(2, 2);
        let mut rng = stream(0, &[1]);
        let w = discounted_visitation(&mdp, &pi, VisitationMode::Exact, &mut rng, 0).unwrap();
        assert!((w.state(0) - 0.5).abs() < 1e-10);
        assert!((w.state(1) - 0.5).abs() < 1e-10);
    }

    #[test]
    fn value_iteration_agrees_with_policy_evaluation_oracle() {
        // Q* from value iteration vs the exact linear Bellman solve for its
        // own greedy policy, on a 5x5 gridworld
        let spec = crate::gridworld::GridworldSpec {
            slip: 0.15,
            wall_density: 0.1,
            ..Default::default()
        };
        let mdp = crate::gridworld::generate_gridworld(&spec, 4).unwrap();
        let tol = 1e-9;
        let q_star = value_iteration(&mdp, tol);
        let greedy = CategoricalPolicyTable::one_hot(&greedy_policy(&q_star), mdp.n_actions());
        let q_pi = policy_evaluation_q(&mdp, &greedy);
        for (a, b) in q_star.values().iter().zip(&q_pi) {
            assert!((a - b).abs() <= 10.0 * tol, "VI {a} vs linear solve {b}");
        }
    }

    #[test]
    fn empirical_visitation_matches_exact_within_tv() {
        let spec = crate::gridworld::GridworldSpec {
            width: 4,
            height: 4,
            slip: 0.1,
            ..Default::default()
        };
        let mdp = crate::gridworld::generate_gridworld(&spec, 2).unwrap();
        let q = value_iteration(&mdp, 1e-10);
        let greedy = CategoricalPolicyTable::one_hot(&greedy_policy(&q), mdp.n_actions());
        let mut rng = stream(21, &[3]);
        let exact =
            discounted_visitation(&mdp, &greedy, VisitationMode::Exact, &mut rng, 0).unwrap();
        let empirical = discounted_visitation(
            &mdp,
            &greedy,
            VisitationMode::Empirical { total_steps: 100_000 },
            &mut rng,
            0,
        )
        .unwrap();
        let tv: f64 = 0.5
            * (0..mdp.n_states())
                .map(|s| (exact.state(s) - empirical.state(s)).abs())
                .sum::<f64>();
        assert!(tv <= 0.02, "total variation {tv}");
    }

    #[test]
    fn exact_visitation_sums_to_one_nonnegative() {
        let mut rng = stream(3, &[7]);
        for trial in 0..20 {
            let ns = 4;
            let na = 2;
            let mut trans = vec![0.0; ns * na * ns];
            for s in 0..ns {
                for a in 0..na {
                    let mut row: Vec<f64> = (0..ns).map(|_| rng.random_range(0.01..1.0)).collect();
                    let z: f64 = row.iter().sum();
                    for x in &mut row {
                        *x /= z;
                    }
                    // exact renormalization so the row sums to 1 within 1e-12
                    let z2: f64 = row.iter().sum();
                    row[ns - 1] += 1.0 - z2;
                    trans[(s * na + a) * ns..(s * na + a + 1) * ns].copy_from_slice(&row);
                }
            }
            let mdp = TabularMdp::new(
                ns,
                na,
                trans,
                vec![0.0; ns * na],
                0.95,
                vec![1.0, 0.0, 0.0, 0.0],
                vec![false; ns],
            )
            .unwrap();
            let pi = CategoricalPolicyTable::uniform(ns, na);
            let w =
                discounted_visitation(&mdp, &pi, VisitationMode::Exact, &mut rng, trial).unwrap();
            let total: f64 = (0..ns).map(|s| w.state(s)).sum();
            assert!((total - 1.0).abs() < 1e-10);
            assert!((0..ns).all(|s| w.state(s) >= 0.0));
        }
    }
}
