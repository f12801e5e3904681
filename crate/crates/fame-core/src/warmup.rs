//! Adaptive meta warm-up: evaluate the candidate initializations on the new
//! task, run the one-vs-all hypothesis test
//! H0: V^M <= max{V^f, V^r} vs. H1: V^M > max{V^f, V^r},
//! and configure the fast learner accordingly.

use rand::Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{FameError, Result};
use crate::fast::{GaussianLearner, QTable};
use crate::mdp::{rollout_episode, DiscreteActor, TabularMdp, Transition};
use crate::pointmass::{ContTrajectory, ContinuousTask, StartRegion};
use crate::policy::GaussianPolicyTable;

/// Warm-up candidate initializations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Candidate {
    Meta,
    Fast,
    Random,
}

impl Candidate {
    pub fn label(&self) -> &'static str {
        match self {
            Candidate::Meta => "meta",
            Candidate::Fast => "fast",
            Candidate::Random => "random",
        }
    }
}

/// Per-candidate evaluation summary over early episodes in the new task.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub candidate: Candidate,
    pub returns: Vec<f64>,
    pub n: usize,
    pub mean: f64,
    pub variance: f64,
}

impl EvalSummary {
    pub fn from_returns(candidate: Candidate, returns: Vec<f64>) -> Result<Self> {
        if returns.is_empty() {
            return Err(FameError::ContractViolation(
                "evaluation summary needs at least one episode".into(),
            ));
        }
        let n = returns.len();
        let mean = returns.iter().sum::<f64>() / n as f64;
        let variance = if n > 1 {
            returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n as f64 - 1.0)
        } else {
            0.0
        };
        Ok(Self { candidate, returns, n, mean, variance })
    }
}

/// How the decision is made.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum WarmupMode {
    /// Pick the largest sample mean.
    #[serde(rename = "empirical")]
    EmpiricalRanking,
    /// Union-intersection Welch tests at level alpha.
    #[serde(rename = "strict")]
    StrictTest,
}

/// Outcome of the warm-up selection.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmupDecision {
    pub chosen: Candidate,
    pub mode: WarmupMode,
    /// One-sided p-values for Meta > Fast and Meta > Random (strict mode).
    pub p_meta_vs_fast: Option<f64>,
    pub p_meta_vs_random: Option<f64>,
    pub p_fast_vs_random: Option<f64>,
    /// Behavior cloning toward the meta policy (value-based branch only).
    pub bc_enabled: bool,
}

/// One-sided Welch t-test p-value for H1: mean1 > mean2.
///
/// Degenerate zero-variance pairs resolve by mean comparison.
pub fn welch_one_sided_p(s1: &EvalSummary, s2: &EvalSummary) -> f64 {
    let v1 = s1.variance / s1.n as f64;
    let v2 = s2.variance / s2.n as f64;
    let se2 = v1 + v2;
    if se2 == 0.0 {
        return if s1.mean > s2.mean { 0.0 } else { 1.0 };
    }
    let t = (s1.mean - s2.mean) / se2.sqrt();
    let mut denom = 0.0;
    if s1.n > 1 {
        denom += v1 * v1 / (s1.n as f64 - 1.0);
    }
    if s2.n > 1 {
        denom += v2 * v2 / (s2.n as f64 - 1.0);
    }
    if denom == 0.0 {
        return if t > 0.0 { 0.0 } else { 1.0 };
    }
    let df = (se2 * se2 / denom).max(1.0);
    let dist = StudentsT::new(0.0, 1.0, df).expect("valid dof");
    1.0 - dist.cdf(t)
}

/// Runs the one-vs-all test over the available summaries.
///
/// Strict mode rejects H0 only when BOTH Welch tests (Meta vs Fast, Meta vs
/// Random) come in below alpha; otherwise a Welch test between Fast and
/// Random decides, falling back to the larger mean and then to the fixed
/// preference order Fast > Meta > Random on exact ties. Empirical-ranking
/// mode picks the largest sample mean directly with the same tie order.
/// A pure function of (summaries, alpha, mode, enable_bc_on_meta).
pub fn one_vs_all_test(
    summaries: &[EvalSummary],
    alpha: f64,
    mode: WarmupMode,
    enable_bc_on_meta: bool,
) -> Result<WarmupDecision> {
    if summaries.is_empty() {
        return Err(FameError::ContractViolation("no candidates to test".into()));
    }
    let find = |c: Candidate| summaries.iter().find(|s| s.candidate == c);
    let meta = find(Candidate::Meta);
    let fast = find(Candidate::Fast);
    let random = find(Candidate::Random);

    // preference order on exact ties: Fast, Meta, Random
    let tie_rank = |c: Candidate| match c {
        Candidate::Fast => 0,
        Candidate::Meta => 1,
        Candidate::Random => 2,
    };
    let best_by_mean = |cands: &[&EvalSummary]| -> Candidate {
        let mut best = cands[0];
        for s in &cands[1..] {
            if s.mean > best.mean
                || (s.mean == best.mean && tie_rank(s.candidate) < tie_rank(best.candidate))
            {
                best = s;
            }
        }
        best.candidate
    };

    let decision = |chosen: Candidate, p_mf, p_mr, p_fr| WarmupDecision {
        chosen,
        mode,
        p_meta_vs_fast: p_mf,
        p_meta_vs_random: p_mr,
        p_fast_vs_random: p_fr,
        bc_enabled: enable_bc_on_meta && chosen == Candidate::Meta,
    };

    match mode {
        WarmupMode::EmpiricalRanking => {
            let available: Vec<&EvalSummary> = summaries.iter().collect();
            Ok(decision(best_by_mean(&available), None, None, None))
        }
        WarmupMode::StrictTest => {
            for s in summaries {
                if s.n < 2 {
                    return Err(FameError::ContractViolation(format!(
                        "strict mode needs n >= 2 for candidate {}",
                        s.candidate.label()
                    )));
                }
            }
            let p_mf = match (meta, fast) {
                (Some(m), Some(f)) => Some(welch_one_sided_p(m, f)),
                _ => None,
            };
            let p_mr = match (meta, random) {
                (Some(m), Some(r)) => Some(welch_one_sided_p(m, r)),
                _ => None,
            };
            // union-intersection: every available comparison must reject
            let meta_wins = meta.is_some()
                && (p_mf.is_some() || p_mr.is_some())
                && p_mf.map(|p| p < alpha).unwrap_or(true)
                && p_mr.map(|p| p < alpha).unwrap_or(true);
            if meta_wins {
                return Ok(decision(Candidate::Meta, p_mf, p_mr, None));
            }
            // fall back to Fast vs Random
            match (fast, random) {
                (Some(f), Some(r)) => {
                    let p_fr = welch_one_sided_p(f, r);
                    if p_fr < alpha {
                        return Ok(decision(Candidate::Fast, p_mf, p_mr, Some(p_fr)));
                    }
                    let p_rf = welch_one_sided_p(r, f);
                    if p_rf < alpha {
                        return Ok(decision(Candidate::Random, p_mf, p_mr, Some(p_fr)));
                    }
                    Ok(decision(best_by_mean(&[f, r]), p_mf, p_mr, Some(p_fr)))
                }
                (Some(_), None) => Ok(decision(Candidate::Fast, p_mf, p_mr, None)),
                (None, Some(_)) => Ok(decision(Candidate::Random, p_mf, p_mr, None)),
                (None, None) => Ok(decision(Candidate::Meta, p_mf, p_mr, None)),
            }
        }
    }
}

/// Evaluation rollouts for one candidate on a discrete task.
#[derive(Debug, Clone)]
pub struct CandidateOutcome {
    pub summary: EvalSummary,
    pub transitions: Vec<Transition>,
    pub steps_used: usize,
}

/// Rolls `n_episodes` evaluation episodes per available candidate on the
/// new task. The transitions are returned so the caller can append them to
/// the fast buffer, and the step counts are charged against the task
/// budget. At the first task the Meta and Fast candidates are absent.
pub fn evaluate_discrete_candidates<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    meta: Option<DiscreteActor<'_>>,
    fast_prev: Option<&QTable>,
    n_episodes: usize,
    max_episode_steps: usize,
    task_id: usize,
    rng: &mut R,
) -> Result<Vec<CandidateOutcome>> {
    if n_episodes < 2 {
        return Err(FameError::ContractViolation("need at least 2 evaluation episodes".into()));
    }
    let mut outcomes = Vec::new();
    let mut run = |candidate: Candidate, actor: DiscreteActor<'_>, rng: &mut R| -> Result<()> {
        let mut returns = Vec::with_capacity(n_episodes);
        let mut transitions = Vec::new();
        let mut steps_used = 0;
        for _ in 0..n_episodes {
            let (ret, steps, mut trs) =
                rollout_episode(mdp, actor, max_episode_steps, task_id, rng);
            returns.push(ret);
            steps_used += steps;
            transitions.append(&mut trs);
        }
        outcomes.push(CandidateOutcome {
            summary: EvalSummary::from_returns(candidate, returns)?,
            transitions,
            steps_used,
        });
        Ok(())
    };
    if let Some(actor) = meta {
        run(Candidate::Meta, actor, rng)?;
    }
    if let Some(q) = fast_prev {
        run(Candidate::Fast, DiscreteActor::Greedy(q), rng)?;
    }
    run(Candidate::Random, DiscreteActor::Uniform, rng)?;
    Ok(outcomes)
}

/// Continuous-task counterpart; candidates are Gaussian policies and the
/// random candidate is a fresh (0, 1) table.
pub struct GaussianCandidateOutcome {
    pub summary: EvalSummary,
    pub trajectories: Vec<ContTrajectory>,
    pub steps_used: usize,
}

pub fn evaluate_gaussian_candidates<R: Rng + ?Sized>(
    task: &ContinuousTask,
    meta: Option<&GaussianPolicyTable>,
    fast_prev: Option<&GaussianPolicyTable>,
    n_episodes: usize,
    rng: &mut R,
) -> Result<Vec<GaussianCandidateOutcome>> {
    if n_episodes < 2 {
        return Err(FameError::ContractViolation("need at least 2 evaluation episodes".into()));
    }
    let fresh = GaussianPolicyTable::new(task.n_cells(), task.state_dim);
    let mut outcomes = Vec::new();
    let mut run = |candidate: Candidate, policy: &GaussianPolicyTable, rng: &mut R| -> Result<()> {
        let mut returns = Vec::with_capacity(n_episodes);
        let mut trajectories = Vec::new();
        let mut steps_used = 0;
        for _ in 0..n_episodes {
            let (ret, steps, traj) = task.rollout(policy, StartRegion::Train, rng);
            returns.push(ret);
            steps_used += steps;
            trajectories.push(traj);
        }
        outcomes.push(GaussianCandidateOutcome {
            summary: EvalSummary::from_returns(candidate, returns)?,
            trajectories,
            steps_used,
        });
        Ok(())
    };
    if let Some(pi) = meta {
        run(Candidate::Meta, pi, rng)?;
    }
    if let Some(pi) = fast_prev {
        run(Candidate::Fast, pi, rng)?;
    }
    run(Candidate::Random, &fresh, rng)?;
    Ok(outcomes)
}

/// Applies a warm-up decision to a value-based fast learner.
///
/// Meta resets the table and relies on BC regularization (the decision's
/// `bc_enabled` flag) because the meta learner is a policy, not a Q table;
/// Fast copies the predecessor; Random resets.
pub fn apply_warmup_value(
    decision: &WarmupDecision,
    fast_q: &mut QTable,
    prev_q: Option<&QTable>,
) {
    match decision.chosen {
        Candidate::Fast => {
            if let Some(prev) = prev_q {
                *fast_q = prev.clone();
            }
        }
        Candidate::Meta | Candidate::Random => {
            *fast_q = QTable::zeros(fast_q.n_states(), fast_q.n_actions(), fast_q.tau());
        }
    }
}

/// Applies a warm-up decision to a policy-based fast learner by copying the
/// chosen policy's parameters directly.
pub fn apply_warmup_policy(
    decision: &WarmupDecision,
    learner: &mut GaussianLearner,
    prev: Option<&GaussianPolicyTable>,
    meta: Option<&GaussianPolicyTable>,
) {
    let n_cells = learner.policy.n_cells();
    let dim = learner.policy.action_dim();
    match decision.chosen {
        Candidate::Meta => {
            if let Some(pi) = meta {
                *learner = GaussianLearner::with_policy(pi.clone());
            }
        }
        Candidate::Fast => {
            if let Some(pi) = prev {
                *learner = GaussianLearner::with_policy(pi.clone());
            }
        }
        Candidate::Random => {
            *learner = GaussianLearner::new(n_cells, dim);
        }
    }
}
