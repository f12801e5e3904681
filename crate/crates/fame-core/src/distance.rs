//! MDP distance and catastrophic forgetting between consecutive learners.

use crate::error::{FameError, Result};
use crate::fast::QTable;
use crate::policy::{softmax, CategoricalPolicyTable, GaussianPolicyTable};

/// Probability floor applied to categorical policies inside KL terms, so
/// one-hot greedy policies yield finite divergences.
pub const KL_EPS: f64 = 1e-8;

/// Tolerance for "weights sum to 1" contract checks.
pub const WEIGHT_SUM_TOL: f64 = 1e-10;

/// Pointwise divergence on Q values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum QMetric {
    SquaredL2,
    SupNorm,
}

/// Divergence on per-state policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PiMetric {
    Kl,
    SquaredW2,
}

/// Selected divergences for the Q-value and policy families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DivergenceSpec {
    pub q_metric: QMetric,
    pub pi_metric: PiMetric,
}

impl Default for DivergenceSpec {
    fn default() -> Self {
        Self { q_metric: QMetric::SquaredL2, pi_metric: PiMetric::Kl }
    }
}

/// Per-task visitation weights: a state distribution μ(s), optionally
/// composed with a policy into state-action weights w(s,a) = μ(s)π(a|s).
#[derive(Debug, Clone, PartialEq)]
pub struct VisitationWeights {
    state: Vec<f64>,
    state_action: Option<Vec<f64>>,
    n_actions: usize,
    task_id: usize,
}

impl VisitationWeights {
    pub fn from_state_weights(state: Vec<f64>, task_id: usize) -> Result<Self> {
        validate_distribution(&state, "state weights")?;
        Ok(Self { state, state_action: None, n_actions: 0, task_id })
    }

    pub fn from_state_action_weights(
        sa: Vec<f64>,
        n_states: usize,
        n_actions: usize,
        task_id: usize,
    ) -> Result<Self> {
        if sa.len() != n_states * n_actions {
            return Err(FameError::ContractViolation(
                "state-action weight vector has wrong size".into(),
            ));
        }
        validate_distribution(&sa, "state-action weights")?;
        let mut state = vec![0.0; n_states];
        for s in 0..n_states {
            state[s] = sa[s * n_actions..(s + 1) * n_actions].iter().sum();
        }
        Ok(Self { state, state_action: Some(sa), n_actions, task_id })
    }

    /// Composes the state weights with a policy: w(s,a) = μ(s) π(a|s).
    pub fn composed_with(&self, policy: &CategoricalPolicyTable) -> Result<Self> {
        if policy.n_states() != self.state.len() {
            return Err(FameError::ContractViolation("policy shape mismatch".into()));
        }
        let na = policy.n_actions();
        let mut sa = vec![0.0; self.state.len() * na];
        for (s, mu) in self.state.iter().enumerate() {
            for a in 0..na {
                sa[s * na + a] = mu * policy.prob(s, a);
            }
        }
        Ok(Self {
            state: self.state.clone(),
            state_action: Some(sa),
            n_actions: na,
            task_id: self.task_id,
        })
    }

    pub fn n_states(&self) -> usize {
        self.state.len()
    }

    pub fn task_id(&self) -> usize {
        self.task_id
    }

    pub fn state(&self, s: usize) -> f64 {
        self.state[s]
    }

    pub fn state_weights(&self) -> &[f64] {
        &self.state
    }

    pub fn state_action_weights(&self) -> Option<&[f64]> {
        self.state_action.as_deref()
    }

    pub fn state_action(&self, s: usize, a: usize) -> Option<f64> {
        self.state_action.as_ref().map(|w| w[s * self.n_actions + a])
    }
}

fn validate_distribution(w: &[f64], what: &str) -> Result<()> {
    if w.iter().any(|x| *x < 0.0 || !x.is_finite()) {
        return Err(FameError::ContractViolation(format!("{what} must be non-negative")));
    }
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(FameError::ContractViolation(format!("{what} sum to {sum}, not 1")));
    }
    Ok(())
}

fn q_point_divergence(metric: QMetric, a: f64, b: f64) -> f64 {
    match metric {
        QMetric::SquaredL2 => (a - b) * (a - b),
        QMetric::SupNorm => (a - b).abs(),
    }
}

/// Q-value-based MDP distance between two optimal Q tables.
///
/// SquaredL2 aggregates uniformly over (s,a); SupNorm takes the max.
/// Definition fixes no aggregation weighting, so uniform is the default and
/// the CF operations below expose the weighted forms.
pub fn mdp_distance(q1: &QTable, q2: &QTable, spec: &DivergenceSpec) -> Result<f64> {
    check_shapes(q1, q2)?;
    let n = (q1.n_states() * q1.n_actions()) as f64;
    let d = match spec.q_metric {
        QMetric::SquaredL2 => q1
            .values()
            .iter()
            .zip(q2.values())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n,
        QMetric::SupNorm => q1
            .values()
            .iter()
            .zip(q2.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max),
    };
    Ok(d)
}

/// Policy-based MDP distance: softmax policies of the two Q tables with a
/// shared temperature, compared per state and averaged uniformly.
///
/// KL is symmetrized (Jeffreys) so the distance stays symmetric.
pub fn mdp_distance_policy(q1: &QTable, q2: &QTable, tau: f64, spec: &DivergenceSpec) -> Result<f64> {
    check_shapes(q1, q2)?;
    if spec.pi_metric == PiMetric::SquaredW2 {
        return Err(FameError::ContractViolation(
            "squared-W2 is not defined for categorical softmax policies".into(),
        ));
    }
    let ns = q1.n_states();
    let mut total = 0.0;
    for s in 0..ns {
        let p = softmax(q1.row(s), tau);
        let q = softmax(q2.row(s), tau);
        total += 0.5 * (kl_categorical(&p, &q, 0.0) + kl_categorical(&q, &p, 0.0));
    }
    Ok(total / ns as f64)
}

fn check_shapes(q1: &QTable, q2: &QTable) -> Result<()> {
    if q1.n_states() != q2.n_states() || q1.n_actions() != q2.n_actions() {
        return Err(FameError::ContractViolation("Q tables must share S and A".into()));
    }
    Ok(())
}

/// KL(p || q) between two categorical rows, with probability floor `eps`.
///
/// With eps = 0 a support mismatch yields +infinity rather than a panic.
pub fn kl_categorical(p: &[f64], q: &[f64], eps: f64) -> f64 {
    let floor = |row: &[f64]| -> Vec<f64> {
        if eps == 0.0 {
            row.to_vec()
        } else {
            let u = eps / row.len() as f64;
            let raw: Vec<f64> = row.iter().map(|x| (1.0 - eps) * x + u).collect();
            raw
        }
    };
    let pf = floor(p);
    let qf = floor(q);
    let mut kl = 0.0;
    for (a, b) in pf.iter().zip(&qf) {
        if *a > 0.0 {
            if *b == 0.0 {
                return f64::INFINITY;
            }
            kl += a * (a / b).ln();
        }
    }
    kl.max(0.0)
}

/// KL of one diagonal Gaussian from another, summed over dimensions.
pub fn kl_diag_gaussian(mean_p: &[f64], std_p: &[f64], mean_q: &[f64], std_q: &[f64]) -> f64 {
    mean_p
        .iter()
        .zip(std_p)
        .zip(mean_q.iter().zip(std_q))
        .map(|((mp, sp), (mq, sq))| {
            (sq / sp).ln() + (sp * sp + (mp - mq) * (mp - mq)) / (2.0 * sq * sq) - 0.5
        })
        .sum()
}

/// Squared 2-Wasserstein distance between diagonal Gaussians:
/// ||mean_p - mean_q||^2 + ||std_p - std_q||^2.
pub fn w2_squared_diag_gaussian(
    (mean_p, std_p): (&[f64], &[f64]),
    (mean_q, std_q): (&[f64], &[f64]),
) -> Result<f64> {
    if std_p.iter().chain(std_q).any(|s| *s <= 0.0) {
        return Err(FameError::ContractViolation(
            "w2 requires strictly positive standard deviations".into(),
        ));
    }
    let dm: f64 = mean_p.iter().zip(mean_q).map(|(a, b)| (a - b) * (a - b)).sum();
    let ds: f64 = std_p.iter().zip(std_q).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(dm + ds)
}

/// Q-value catastrophic forgetting:
/// CF(Q_prev, Q_cur) = Σ_{s,a} w_prev(s,a) d_Q(Q_prev(s,a), Q_cur(s,a)).
///
/// `weights_prev` must carry state-action weights evaluated under the
/// previous learner's policy in the previous environment.
pub fn cf_q(
    q_prev: &QTable,
    q_cur: &QTable,
    weights_prev: &VisitationWeights,
    spec: &DivergenceSpec,
) -> Result<f64> {
    check_shapes(q_prev, q_cur)?;
    let sa = weights_prev.state_action_weights().ok_or_else(|| {
        FameError::ContractViolation("cf_q needs state-action weights".into())
    })?;
    if sa.len() != q_prev.n_states() * q_prev.n_actions() {
        return Err(FameError::ContractViolation("weight shape does not match Q tables".into()));
    }
    let mut cf = 0.0;
    for (i, w) in sa.iter().enumerate() {
        if *w > 0.0 {
            cf += w * q_point_divergence(spec.q_metric, q_prev.values()[i], q_cur.values()[i]);
        }
    }
    Ok(cf)
}

/// A policy argument to `cf_pi`: tabular categorical or tabular Gaussian.
#[derive(Debug, Clone, Copy)]
pub enum PolicyRef<'a> {
    Categorical(&'a CategoricalPolicyTable),
    Gaussian(&'a GaussianPolicyTable),
}

/// Policy catastrophic forgetting:
/// CF(π_prev, π_cur) = Σ_s μ_prev(s) d_π(π_cur(·|s), π_prev(·|s)).
///
/// The divergence direction puts the current policy first, matching the
/// definition; `mu_prev` is the previous policy's visitation in the
/// previous environment. Categorical KL uses the `KL_EPS` floor.
pub fn cf_pi(
    pi_prev: PolicyRef<'_>,
    pi_cur: PolicyRef<'_>,
    mu_prev: &VisitationWeights,
    spec: &DivergenceSpec,
) -> Result<f64> {
    match (pi_prev, pi_cur) {
        (PolicyRef::Categorical(prev), PolicyRef::Categorical(cur)) => {
            if prev.n_states() != cur.n_states() || prev.n_actions() != cur.n_actions() {
                return Err(FameError::ContractViolation("policy shapes differ".into()));
            }
            if mu_prev.n_states() != prev.n_states() {
                return Err(FameError::ContractViolation("weight shape mismatch".into()));
            }
            if spec.pi_metric == PiMetric::SquaredW2 {
                return Err(FameError::ContractViolation(
                    "squared-W2 is not defined for categorical policies".into(),
                ));
            }
            let mut cf = 0.0;
            for s in 0..prev.n_states() {
                let mu = mu_prev.state(s);
                if mu > 0.0 {
                    cf += mu * kl_categorical(cur.row(s), prev.row(s), KL_EPS);
                }
            }
            Ok(cf)
        }
        (PolicyRef::Gaussian(prev), PolicyRef::Gaussian(cur)) => {
            if prev.n_cells() != cur.n_cells() || prev.action_dim() != cur.action_dim() {
                return Err(FameError::ContractViolation("policy shapes differ".into()));
            }
            if mu_prev.n_states() != prev.n_cells() {
                return Err(FameError::ContractViolation("weight shape mismatch".into()));
            }
            let mut cf = 0.0;
            for c in 0..prev.n_cells() {
                let mu = mu_prev.state(c);
                if mu > 0.0 {
                    let d = match spec.pi_metric {
                        PiMetric::SquaredW2 => w2_squared_diag_gaussian(
                            (cur.mean(c), cur.std(c)),
                            (prev.mean(c), prev.std(c)),
                        )?,
                        PiMetric::Kl => {
                            kl_diag_gaussian(cur.mean(c), cur.std(c), prev.mean(c), prev.std(c))
                        }
                    };
                    cf += mu * d;
                }
            }
            Ok(cf)
        }
        _ => Err(FameError::ContractViolation(
            "cf_pi requires two policies of the same representation".into(),
        )),
    }
}
