//! Config-driven experiment runner: the value-based and policy-based
//! dual-learner loops plus the Reset and Finetune baselines, with
//! deterministic seeding, per-task checkpoints, and CSV emission.
//!
//! Every stochastic consumer owns a stream derived from (seed, label,
//! task/grid indices), so adding curve evaluations never perturbs training
//! and two runs with the same (config, seed) are byte-identical.

use std::path::Path;

use crate::buffers::{FastBuffer, MetaBuffer, MetaRecord};
use crate::config::{Method, RunConfig, TaskKind, ValueIntegration};
use crate::distance::{
    cf_pi, cf_q, DivergenceSpec, PiMetric, PolicyRef, QMetric, VisitationWeights,
};
use crate::error::{FameError, Result};
use crate::fast::{
    act_epsilon_greedy, bc_regularized_q_update, gaussian_policy_update, q_update,
    GaussianLearner, QTable,
};
use crate::flat::{write_atomic, Checkpoint};
use crate::gridworld::generate_gridworld;
use crate::mdp::{
    discounted_visitation, greedy_policy, rollout_episode, DiscreteActor, TabularMdp, Transition,
    VisitationMode,
};
use crate::meta::{
    integrate_policy_kl, integrate_policy_wd, integrate_q_l2, integrate_softmax_kl, MetaState,
};
use crate::metrics::{forgetting, average_performance, LearningCurveSet};
use crate::oracle;
use crate::pointmass::{generate_pointmass, ContTrajectory, ContinuousTask, StartRegion};
use crate::policy::{CategoricalPolicyTable, GaussianPolicyTable};
use crate::rng::stream;
use crate::warmup::{
    apply_warmup_policy, apply_warmup_value, evaluate_discrete_candidates,
    evaluate_gaussian_candidates, one_vs_all_test, Candidate, WarmupDecision, WarmupMode,
};

const TAG_TRAIN: u64 = 1;
const TAG_WARM: u64 = 2;
const TAG_EVAL: u64 = 3;
const TAG_CF: u64 = 4;

/// Per-task record of what the run did and measured.
#[derive(Debug, Clone)]
pub struct TaskOutcome {
    pub task_index: usize,
    pub chosen: Candidate,
    /// None for forced decisions (baselines, first task, overrides).
    pub tested_mode: Option<WarmupMode>,
    pub p_meta_vs_fast: Option<f64>,
    pub p_meta_vs_random: Option<f64>,
    pub p_fast_vs_random: Option<f64>,
    pub mean_meta: Option<f64>,
    pub mean_fast: Option<f64>,
    pub mean_random: Option<f64>,
    pub bc_enabled: bool,
    pub eval_steps_used: usize,
    pub train_steps_used: usize,
    /// Batch objective of the meta learner over tasks seen so far,
    /// evaluated before and after this boundary's integration.
    pub objective_before: Option<f64>,
    pub objective_after: Option<f64>,
    /// Forgetting between consecutive fast learners (weights from the
    /// previous learner's visitation in the previous environment).
    pub cf_fast_vs_prev: Option<f64>,
    /// Same, between consecutive meta learners.
    pub cf_meta_vs_prev: Option<f64>,
}

impl TaskOutcome {
    fn new(task_index: usize) -> Self {
        Self {
            task_index,
            chosen: Candidate::Random,
            tested_mode: None,
            p_meta_vs_fast: None,
            p_meta_vs_random: None,
            p_fast_vs_random: None,
            mean_meta: None,
            mean_fast: None,
            mean_random: None,
            bc_enabled: false,
            eval_steps_used: 0,
            train_steps_used: 0,
            objective_before: None,
            objective_after: None,
            cf_fast_vs_prev: None,
            cf_meta_vs_prev: None,
        }
    }

    fn absorb(&mut self, decision: &WarmupDecision) {
        self.chosen = decision.chosen;
        self.p_meta_vs_fast = decision.p_meta_vs_fast;
        self.p_meta_vs_random = decision.p_meta_vs_random;
        self.p_fast_vs_random = decision.p_fast_vs_random;
        self.bc_enabled = decision.bc_enabled;
    }
}

/// Everything a finished run produced: curves, per-task outcomes, final
/// metrics, and desk-scale audit snapshots for oracle checks.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub method: Method,
    pub seed: u64,
    pub task_seeds: Vec<u64>,
    pub tasks: Vec<TaskOutcome>,
    /// Fast-learner curve p_i(t); the forward-transfer target.
    pub curves_fast: LearningCurveSet,
    /// Reporting curve: the meta learner for dual-learner methods, the
    /// fast learner for baselines. Average performance and forgetting are
    /// computed here.
    pub curves_report: LearningCurveSet,
    pub avg_perf: f64,
    pub forgetting: f64,
    pub forgetting_per_task: Vec<f64>,
    /// End-of-task fast learners (value runs).
    pub fast_q_snapshots: Vec<QTable>,
    /// End-of-task fast policies (policy runs).
    pub fast_pi_snapshots: Vec<GaussianPolicyTable>,
    /// Meta learner after 0, 1, ..., K integrations.
    pub meta_snapshots: Vec<MetaState>,
    /// Integration weights actually used, one per integrated task.
    pub integration_weights: Vec<VisitationWeights>,
    pub meta_buffer: MetaBuffer,
}

impl RunRecord {
    pub fn run_id(&self) -> String {
        format!("{}-{}", self.method.label(), self.seed)
    }

    /// Final scores of this run alone; forward transfer needs a baseline
    /// run and stays empty here (see [`aggregate_metrics`]).
    pub fn metric_report(&self) -> crate::metrics::MetricReport {
        crate::metrics::MetricReport {
            avg_perf: self.avg_perf,
            ft: None,
            ft_per_task: vec![None; self.forgetting_per_task.len()],
            forgetting: self.forgetting,
            forgetting_per_task: self.forgetting_per_task.clone(),
            normalization: "raw",
        }
    }
}

fn generate_task_envs(cfg: &RunConfig) -> Result<Vec<TabularMdp>> {
    let base = cfg.sequence.gridworld.as_ref().ok_or_else(|| {
        FameError::InvalidConfig("value-based runs need a gridworld spec".into())
    })?;
    cfg.sequence
        .task_seeds
        .iter()
        .enumerate()
        .map(|(i, seed)| {
            let mut spec = base.clone();
            if let Some(goals) = &cfg.sequence.goal_cells {
                spec.goal = Some(goals[i]);
            }
            generate_gridworld(&spec, *seed)
        })
        .collect()
}

fn generate_cont_tasks(cfg: &RunConfig) -> Result<Vec<ContinuousTask>> {
    let base = cfg.sequence.pointmass.as_ref().ok_or_else(|| {
        FameError::InvalidConfig("policy-based runs need a pointmass spec".into())
    })?;
    cfg.sequence
        .task_seeds
        .iter()
        .enumerate()
        .map(|(i, seed)| {
            let mut spec = base.clone();
            if let Some(goals) = &cfg.sequence.goals {
                spec.goal = Some(goals[i].clone());
            }
            generate_pointmass(&spec, *seed)
        })
        .collect()
}

/// Mean undiscounted return of `episodes` rollouts.
fn eval_discrete_policy(
    mdp: &TabularMdp,
    actor: DiscreteActor<'_>,
    episodes: usize,
    cap: usize,
    rng_seed: (u64, &[u64]),
) -> f64 {
    let mut rng = stream(rng_seed.0, rng_seed.1);
    let mut total = 0.0;
    for _ in 0..episodes {
        let (ret, _, _) = rollout_episode(mdp, actor, cap, 0, &mut rng);
        total += ret;
    }
    total / episodes as f64
}

/// Success rate of `episodes` evaluation rollouts.
fn eval_gaussian_policy(
    task: &ContinuousTask,
    policy: &GaussianPolicyTable,
    episodes: usize,
    rng_seed: (u64, &[u64]),
) -> f64 {
    let mut rng = stream(rng_seed.0, rng_seed.1);
    let mut succ = 0usize;
    for _ in 0..episodes {
        let (_, _, traj) = task.rollout(policy, StartRegion::Eval, &mut rng);
        if traj.success {
            succ += 1;
        }
    }
    succ as f64 / episodes as f64
}

/// Empirical discounted cell visitation of a Gaussian policy, normalized
/// over cells. Continuous states rule out the exact linear-system route.
pub fn empirical_cell_visitation(
    task: &ContinuousTask,
    policy: &GaussianPolicyTable,
    episodes: usize,
    gamma: f64,
    seed: u64,
    parts: &[u64],
    task_id: usize,
) -> Result<VisitationWeights> {
    let mut rng = stream(seed, parts);
    let mut w = vec![0.0; task.n_cells()];
    for _ in 0..episodes {
        let (_, _, traj) = task.rollout(policy, StartRegion::Train, &mut rng);
        let mut disc = 1.0;
        for step in &traj.steps {
            w[step.cell] += disc;
            disc *= gamma;
        }
    }
    let z: f64 = w.iter().sum();
    if z == 0.0 {
        return Err(FameError::ContractViolation(
            "no visitation mass collected; policy produced empty episodes".into(),
        ));
    }
    for x in &mut w {
        *x /= z;
    }
    let z2: f64 = w.iter().sum();
    if let Some(first) = w.iter_mut().find(|x| **x > 0.0) {
        *first += 1.0 - z2;
    }
    VisitationWeights::from_state_weights(w, task_id)
}

/// Exact state-action weights of a Q table's greedy policy in an
/// environment: mu(s) under the greedy policy, composed with its one-hot.
fn exact_greedy_weights(mdp: &TabularMdp, q: &QTable, task_id: usize) -> Result<VisitationWeights> {
    let greedy = CategoricalPolicyTable::one_hot(&greedy_policy(q), mdp.n_actions());
    let mut unused = stream(0, &[0]);
    let mu = discounted_visitation(mdp, &greedy, VisitationMode::Exact, &mut unused, task_id)?;
    mu.composed_with(&greedy)
}

fn forced_decision(chosen: Candidate, bc: bool) -> WarmupDecision {
    WarmupDecision {
        chosen,
        mode: WarmupMode::EmpiricalRanking,
        p_meta_vs_fast: None,
        p_meta_vs_random: None,
        p_fast_vs_random: None,
        bc_enabled: bc,
    }
}

/// Runs Reset / Finetune / value-based dual-learner sequences on gridworld
/// tasks.
pub fn run_value_sequence(cfg: &RunConfig) -> Result<RunRecord> {
    cfg.validate()?;
    if !matches!(cfg.method, Method::FameQ | Method::Reset | Method::Finetune) {
        return Err(FameError::InvalidConfig(format!(
            "run_value_sequence does not support method '{}'",
            cfg.method.label()
        )));
    }
    if cfg.sequence.kind != TaskKind::Gridworld {
        return Err(FameError::InvalidConfig("value-based runs use gridworld sequences".into()));
    }
    let envs = generate_task_envs(cfg)?;
    let k_tasks = envs.len();
    let (ns, na) = (envs[0].n_states(), envs[0].n_actions());
    if envs.iter().any(|e| e.n_states() != ns || e.n_actions() != na) {
        return Err(FameError::InvalidConfig("tasks must share state and action spaces".into()));
    }
    let t_total = cfg.sequence.steps_per_task;
    let cap = cfg.sequence.max_episode_steps;
    let lcfg = cfg.learner_config();
    let tau = cfg.fame.tau;
    let is_fame = cfg.method.is_fame();
    let tail = cfg.meta_record_steps();
    let points = cfg.eval.points_per_task;
    let delta = t_total / points;
    let eval_eps = cfg.eval.episodes_per_point;

    let mut fast = QTable::zeros(ns, na, tau);
    let mut meta = if is_fame {
        Some(match cfg.fame.value_integration {
            ValueIntegration::SoftmaxKl => {
                MetaState::new_softmax_kl(ns, na, tau, cfg.fame.smoothing_eps)
            }
            ValueIntegration::L2 => MetaState::new_q_l2(ns, na, tau),
        })
    } else {
        None
    };
    let mut buffer = MetaBuffer::new();
    let mut fast_buf: FastBuffer<Transition> = FastBuffer::new(t_total.max(1));

    let grid: Vec<u64> = (0..=k_tasks * points).map(|j| (j * delta) as u64).collect();
    let mut fast_vals = vec![vec![0.0; grid.len()]; k_tasks];
    let mut boundary_meta = vec![vec![0.0; k_tasks]; k_tasks + 1];

    // curves report return normalized by the goal reward, keeping
    // gridworld series in [0, 1] regardless of the Q-value scale
    let reward_scale =
        cfg.sequence.gridworld.as_ref().map(|g| g.goal_reward).unwrap_or(1.0).max(f64::EPSILON);
    let eval_fast_at = |gi: usize, fast: &QTable, out: &mut Vec<Vec<f64>>, envs: &[TabularMdp]| {
        for (task, env) in envs.iter().enumerate() {
            out[task][gi] = eval_discrete_policy(
                env,
                DiscreteActor::Greedy(fast),
                eval_eps,
                cap,
                (cfg.seed, &[TAG_EVAL, 0, gi as u64, task as u64]),
            ) / reward_scale;
        }
    };
    let eval_meta_boundary =
        |b: usize, meta: &MetaState, out: &mut Vec<Vec<f64>>, envs: &[TabularMdp]| {
            for (task, env) in envs.iter().enumerate() {
                let actor = match (meta.as_categorical(), meta.as_q()) {
                    (Some(c), _) => DiscreteActor::Stochastic(c),
                    (_, Some(q)) => DiscreteActor::Greedy(q),
                    _ => unreachable!("value-based meta is categorical or Q"),
                };
                out[b][task] = eval_discrete_policy(
                    env,
                    actor,
                    eval_eps,
                    cap,
                    (cfg.seed, &[TAG_EVAL, 1, b as u64, task as u64]),
                ) / reward_scale;
            }
        };

    eval_fast_at(0, &fast, &mut fast_vals, &envs);
    if let Some(m) = &meta {
        eval_meta_boundary(0, m, &mut boundary_meta, &envs);
    }

    let mut tasks = Vec::with_capacity(k_tasks);
    let mut fast_snaps: Vec<QTable> = Vec::with_capacity(k_tasks);
    let mut meta_snaps: Vec<MetaState> = Vec::new();
    if let Some(m) = &meta {
        meta_snaps.push(m.clone());
    }
    let mut integration_weights: Vec<VisitationWeights> = Vec::new();

    for k in 0..k_tasks {
        let env = &envs[k];
        fast_buf.clear();
        let mut outcome = TaskOutcome::new(k);
        let mut t = 0usize;

        // ----- knowledge transfer: adaptive warm-up -----
        let decision = match cfg.method {
            Method::Reset => forced_decision(Candidate::Random, false),
            Method::Finetune => forced_decision(Candidate::Fast, false),
            _ if k == 0 => forced_decision(Candidate::Random, false),
            _ => {
                if let Some(forced) = cfg.overrides.force_warmup {
                    forced_decision(forced, false)
                } else {
                    let m = meta.as_ref().expect("dual-learner run has a meta state");
                    let meta_actor = match (m.as_categorical(), m.as_q()) {
                        (Some(c), _) => DiscreteActor::Stochastic(c),
                        (_, Some(q)) => DiscreteActor::Greedy(q),
                        _ => unreachable!(),
                    };
                    let mut warm_rng = stream(cfg.seed, &[TAG_WARM, k as u64]);
                    let outcomes = evaluate_discrete_candidates(
                        env,
                        Some(meta_actor),
                        Some(&fast),
                        cfg.warmup.n_eval_episodes,
                        cap,
                        k,
                        &mut warm_rng,
                    )?;
                    for o in &outcomes {
                        match o.summary.candidate {
                            Candidate::Meta => outcome.mean_meta = Some(o.summary.mean),
                            Candidate::Fast => outcome.mean_fast = Some(o.summary.mean),
                            Candidate::Random => outcome.mean_random = Some(o.summary.mean),
                        }
                        outcome.eval_steps_used += o.steps_used;
                        for tr in &o.transitions {
                            fast_buf.push(tr.clone());
                        }
                    }
                    t += outcome.eval_steps_used;
                    outcome.tested_mode = Some(cfg.warmup.mode);
                    let summaries: Vec<_> =
                        outcomes.into_iter().map(|o| o.summary).collect();
                    one_vs_all_test(&summaries, cfg.warmup.alpha, cfg.warmup.mode, true)?
                }
            }
        };
        outcome.absorb(&decision);
        apply_warmup_value(&decision, &mut fast, fast_snaps.last());
        let meta_pi_for_bc: Option<CategoricalPolicyTable> = if decision.bc_enabled {
            meta.as_ref().and_then(|m| {
                m.as_categorical().cloned().or_else(|| m.as_q().map(|q| q.softmax_policy()))
            })
        } else {
            None
        };

        // ----- training -----
        let mut train_rng = stream(cfg.seed, &[TAG_TRAIN, k as u64]);
        let mut state = env.sample_start(&mut train_rng);
        let mut ep_steps = 0usize;
        let mut next_point = delta;
        // curve points already covered by candidate evaluation
        while next_point <= t && next_point <= t_total {
            eval_fast_at(k * points + next_point / delta, &fast, &mut fast_vals, &envs);
            next_point += delta;
        }
        while t < t_total {
            if env.is_terminal(state) || ep_steps >= cap {
                state = env.sample_start(&mut train_rng);
                ep_steps = 0;
                continue;
            }
            let action = act_epsilon_greedy(&fast, state, t, &lcfg, &mut train_rng);
            let (next_state, reward, done) = env.step(state, action, &mut train_rng)?;
            t += 1;
            ep_steps += 1;
            outcome.train_steps_used += 1;
            let tr = Transition { state, action, reward, next_state, done, task_id: k };
            if is_fame {
                buffer.record(MetaRecord::Discrete { state, action }, t, t_total, tail, k)?;
            }
            if decision.bc_enabled && t <= lcfg.bc_steps {
                let meta_pi = meta_pi_for_bc.as_ref().expect("BC requires a meta policy");
                bc_regularized_q_update(&mut fast, std::slice::from_ref(&tr), meta_pi, &lcfg)?;
            } else {
                q_update(&mut fast, &tr, &lcfg);
            }
            fast_buf.push(tr);
            state = if done {
                ep_steps = 0;
                env.sample_start(&mut train_rng)
            } else {
                next_state
            };
            while next_point <= t {
                eval_fast_at(k * points + next_point / delta, &fast, &mut fast_vals, &envs);
                next_point += delta;
            }
        }

        fast_snaps.push(fast.clone());

        // ----- knowledge integration -----
        if let Some(m) = meta.as_mut() {
            if !cfg.overrides.disable_integration {
                let w = match cfg.fame.value_integration {
                    ValueIntegration::SoftmaxKl => {
                        // w_k(s,a) = mu_k(s) * softmax(Q_k/tau)(a|s): state
                        // occupancy from the tail records, action profile
                        // from the fast learner's own softmax readout
                        let mu = buffer.estimate_state_weights(k, ns)?;
                        mu.composed_with(&fast.softmax_policy())?
                    }
                    ValueIntegration::L2 => buffer.estimate_sa_weights(k, ns, na)?,
                };
                integration_weights.push(w.clone());
                outcome.objective_before =
                    Some(value_meta_objective(cfg, m, &fast_snaps, &integration_weights));
                match cfg.fame.value_integration {
                    ValueIntegration::SoftmaxKl => integrate_softmax_kl(m, &w)?,
                    ValueIntegration::L2 => integrate_q_l2(m, &fast, &w)?,
                }
                outcome.objective_after =
                    Some(value_meta_objective(cfg, m, &fast_snaps, &integration_weights));
            }
            meta_snaps.push(m.clone());
            eval_meta_boundary(k + 1, m, &mut boundary_meta, &envs);
        }

        // ----- forgetting between consecutive learners -----
        if k > 0 {
            let prev_env = &envs[k - 1];
            let spec = DivergenceSpec { q_metric: QMetric::SquaredL2, pi_metric: PiMetric::Kl };
            let w_prev = exact_greedy_weights(prev_env, &fast_snaps[k - 1], k - 1)?;
            outcome.cf_fast_vs_prev =
                Some(cf_q(&fast_snaps[k - 1], &fast_snaps[k], &w_prev, &spec)?);
            if meta_snaps.len() > k {
                let prev_meta = &meta_snaps[k];
                let cur_meta = &meta_snaps[k + 1];
                outcome.cf_meta_vs_prev = Some(match (prev_meta.as_q(), cur_meta.as_q()) {
                    (Some(pq), Some(_)) => {
                        let w = exact_greedy_weights(prev_env, pq, k - 1)?;
                        cf_q(pq, cur_meta.as_q().unwrap(), &w, &spec)?
                    }
                    _ => {
                        let p = prev_meta.as_categorical().expect("categorical meta");
                        let c = cur_meta.as_categorical().expect("categorical meta");
                        let mut unused = stream(cfg.seed, &[TAG_CF, k as u64]);
                        let mu = discounted_visitation(
                            prev_env,
                            p,
                            VisitationMode::Exact,
                            &mut unused,
                            k - 1,
                        )?;
                        cf_pi(PolicyRef::Categorical(p), PolicyRef::Categorical(c), &mu, &spec)?
                    }
                });
            }
        }
        tasks.push(outcome);
    }

    let report_vals: Vec<Vec<f64>> = if meta.is_some() {
        (0..k_tasks)
            .map(|task| {
                grid.iter()
                    .map(|t| {
                        let b = (*t as usize) / t_total;
                        boundary_meta[b][task]
                    })
                    .collect()
            })
            .collect()
    } else {
        fast_vals.clone()
    };

    let curves_fast = LearningCurveSet::new(grid.clone(), fast_vals, t_total as u64)?;
    let curves_report = LearningCurveSet::new(grid, report_vals, t_total as u64)?;
    let (f_mean, f_per) = forgetting(&curves_report);
    let avg = average_performance(&curves_report, (k_tasks * t_total) as u64);

    Ok(RunRecord {
        method: cfg.method,
        seed: cfg.seed,
        task_seeds: cfg.sequence.task_seeds.clone(),
        tasks,
        curves_fast,
        curves_report,
        avg_perf: avg,
        forgetting: f_mean,
        forgetting_per_task: f_per,
        fast_q_snapshots: fast_snaps,
        fast_pi_snapshots: Vec::new(),
        meta_snapshots: meta_snaps,
        integration_weights,
        meta_buffer: buffer,
    })
}

fn value_meta_objective(
    cfg: &RunConfig,
    meta: &MetaState,
    fast_snaps: &[QTable],
    weights: &[VisitationWeights],
) -> f64 {
    match cfg.fame.value_integration {
        ValueIntegration::L2 => {
            oracle::l2_objective(meta.as_q().expect("l2 meta"), fast_snaps, weights)
        }
        ValueIntegration::SoftmaxKl => {
            oracle::softmax_kl_objective(meta.as_categorical().expect("categorical meta"), weights)
        }
    }
}

/// Runs Reset / Finetune / policy-based dual-learner sequences on
/// continuous reach tasks.
pub fn run_policy_sequence(cfg: &RunConfig) -> Result<RunRecord> {
    cfg.validate()?;
    if !matches!(cfg.method, Method::FameKl | Method::FameWd | Method::Reset | Method::Finetune) {
        return Err(FameError::InvalidConfig(format!(
            "run_policy_sequence does not support method '{}'",
            cfg.method.label()
        )));
    }
    if cfg.sequence.kind != TaskKind::Pointmass {
        return Err(FameError::InvalidConfig("policy-based runs use pointmass sequences".into()));
    }
    let envs = generate_cont_tasks(cfg)?;
    let k_tasks = envs.len();
    let n_cells = envs[0].n_cells();
    let dim = envs[0].state_dim;
    let t_total = cfg.sequence.steps_per_task;
    let lcfg = cfg.learner_config();
    let is_fame = cfg.method.is_fame();
    let tail = cfg.meta_record_steps();
    let points = cfg.eval.points_per_task;
    let delta = t_total / points;
    let eval_eps = cfg.eval.episodes_per_point;
    let (mean_lo, mean_hi) = (2.0 * envs[0].action_low, 2.0 * envs[0].action_high);

    let mut learner = GaussianLearner::new(n_cells, dim).with_mean_bounds(mean_lo, mean_hi);
    let mut meta = if is_fame { Some(MetaState::new_gaussian(n_cells, dim)) } else { None };
    let mut buffer = MetaBuffer::new();
    let mut fast_buf: FastBuffer<ContTrajectory> = FastBuffer::new(t_total.max(1));

    let grid: Vec<u64> = (0..=k_tasks * points).map(|j| (j * delta) as u64).collect();
    let mut fast_vals = vec![vec![0.0; grid.len()]; k_tasks];
    let mut boundary_meta = vec![vec![0.0; k_tasks]; k_tasks + 1];

    let eval_fast_at =
        |gi: usize, pi: &GaussianPolicyTable, out: &mut Vec<Vec<f64>>, envs: &[ContinuousTask]| {
            for (task, env) in envs.iter().enumerate() {
                out[task][gi] = eval_gaussian_policy(
                    env,
                    pi,
                    eval_eps,
                    (cfg.seed, &[TAG_EVAL, 0, gi as u64, task as u64]),
                );
            }
        };
    let eval_meta_boundary =
        |b: usize, meta: &MetaState, out: &mut Vec<Vec<f64>>, envs: &[ContinuousTask]| {
            let pi = meta.as_gaussian().expect("policy-based meta is Gaussian");
            for (task, env) in envs.iter().enumerate() {
                out[b][task] = eval_gaussian_policy(
                    env,
                    pi,
                    eval_eps,
                    (cfg.seed, &[TAG_EVAL, 1, b as u64, task as u64]),
                );
            }
        };

    eval_fast_at(0, &learner.policy, &mut fast_vals, &envs);
    if let Some(m) = &meta {
        eval_meta_boundary(0, m, &mut boundary_meta, &envs);
    }

    let mut tasks = Vec::with_capacity(k_tasks);
    let mut fast_snaps: Vec<GaussianPolicyTable> = Vec::with_capacity(k_tasks);
    let mut meta_snaps: Vec<MetaState> = Vec::new();
    if let Some(m) = &meta {
        meta_snaps.push(m.clone());
    }
    let mut integration_weights: Vec<VisitationWeights> = Vec::new();

    for k in 0..k_tasks {
        let env = &envs[k];
        fast_buf.clear();
        let mut outcome = TaskOutcome::new(k);
        let mut t = 0usize;

        // ----- knowledge transfer: adaptive warm-up -----
        let decision = match cfg.method {
            Method::Reset => forced_decision(Candidate::Random, false),
            Method::Finetune => forced_decision(Candidate::Fast, false),
            _ if k == 0 => forced_decision(Candidate::Random, false),
            _ => {
                if let Some(forced) = cfg.overrides.force_warmup {
                    forced_decision(forced, false)
                } else {
                    let m = meta.as_ref().expect("dual-learner run has a meta state");
                    let mut warm_rng = stream(cfg.seed, &[TAG_WARM, k as u64]);
                    let outcomes = evaluate_gaussian_candidates(
                        env,
                        m.as_gaussian(),
                        Some(&learner.policy),
                        cfg.warmup.n_eval_episodes,
                        &mut warm_rng,
                    )?;
                    for o in &outcomes {
                        match o.summary.candidate {
                            Candidate::Meta => outcome.mean_meta = Some(o.summary.mean),
                            Candidate::Fast => outcome.mean_fast = Some(o.summary.mean),
                            Candidate::Random => outcome.mean_random = Some(o.summary.mean),
                        }
                        outcome.eval_steps_used += o.steps_used;
                        for traj in &o.trajectories {
                            fast_buf.push(traj.clone());
                        }
                    }
                    t += outcome.eval_steps_used;
                    outcome.tested_mode = Some(cfg.warmup.mode);
                    let summaries: Vec<_> =
                        outcomes.into_iter().map(|o| o.summary).collect();
                    // direct parameter copy; no BC in the policy branch
                    one_vs_all_test(&summaries, cfg.warmup.alpha, cfg.warmup.mode, false)?
                }
            }
        };
        outcome.absorb(&decision);
        apply_warmup_policy(
            &decision,
            &mut learner,
            fast_snaps.last(),
            meta.as_ref().and_then(|m| m.as_gaussian()),
        );
        learner = learner.with_mean_bounds(mean_lo, mean_hi);

        // ----- training -----
        let mut train_rng = stream(cfg.seed, &[TAG_TRAIN, k as u64]);
        let mut batch: Vec<ContTrajectory> = Vec::new();
        let mut next_point = delta;
        while next_point <= t && next_point <= t_total {
            eval_fast_at(k * points + next_point / delta, &learner.policy, &mut fast_vals, &envs);
            next_point += delta;
        }
        while t < t_total {
            let remaining = t_total - t;
            let (_, steps, traj) =
                env.rollout_capped(&learner.policy, StartRegion::Train, remaining, &mut train_rng);
            if is_fame {
                for (i, step) in traj.steps.iter().enumerate() {
                    let ti = t + i + 1;
                    let record = match cfg.method {
                        Method::FameKl => MetaRecord::Continuous {
                            cell: step.cell,
                            action: Some(step.action.clone()),
                        },
                        Method::FameWd => {
                            MetaRecord::Continuous { cell: step.cell, action: None }
                        }
                        _ => unreachable!("only dual-learner methods record"),
                    };
                    buffer.record(record, ti, t_total, tail, k)?;
                }
            }
            t += steps;
            outcome.train_steps_used += steps;
            if steps == 0 {
                // immediate-success start consumed no budget; avoid spinning
                outcome.train_steps_used += 1;
                t += 1;
            }
            batch.push(traj.clone());
            fast_buf.push(traj);
            if batch.len() >= cfg.learner.episodes_per_update || t >= t_total {
                gaussian_policy_update(&mut learner, &batch, &lcfg);
                batch.clear();
            }
            while next_point <= t && next_point <= t_total {
                eval_fast_at(
                    k * points + next_point / delta,
                    &learner.policy,
                    &mut fast_vals,
                    &envs,
                );
                next_point += delta;
            }
        }

        fast_snaps.push(learner.policy.clone());

        // ----- knowledge integration -----
        if let Some(m) = meta.as_mut() {
            if !cfg.overrides.disable_integration {
                let mu = buffer.estimate_state_weights(k, n_cells)?;
                integration_weights.push(mu.clone());
                outcome.objective_before =
                    Some(policy_meta_objective(cfg, m, &fast_snaps, &integration_weights, &buffer));
                match cfg.method {
                    Method::FameKl => integrate_policy_kl(m, &buffer)?,
                    Method::FameWd => integrate_policy_wd(m, &learner.policy, &mu)?,
                    _ => unreachable!(),
                }
                outcome.objective_after =
                    Some(policy_meta_objective(cfg, m, &fast_snaps, &integration_weights, &buffer));
            }
            meta_snaps.push(m.clone());
            eval_meta_boundary(k + 1, m, &mut boundary_meta, &envs);
        }

        // ----- forgetting between consecutive learners -----
        if k > 0 {
            let prev_env = &envs[k - 1];
            let spec =
                DivergenceSpec { q_metric: QMetric::SquaredL2, pi_metric: PiMetric::SquaredW2 };
            let mu_prev = empirical_cell_visitation(
                prev_env,
                &fast_snaps[k - 1],
                64,
                lcfg.gamma,
                cfg.seed,
                &[TAG_CF, 0, k as u64],
                k - 1,
            )?;
            outcome.cf_fast_vs_prev = Some(cf_pi(
                PolicyRef::Gaussian(&fast_snaps[k - 1]),
                PolicyRef::Gaussian(&fast_snaps[k]),
                &mu_prev,
                &spec,
            )?);
            if meta_snaps.len() > k {
                let p = meta_snaps[k].as_gaussian().expect("gaussian meta");
                let c = meta_snaps[k + 1].as_gaussian().expect("gaussian meta");
                let mu = empirical_cell_visitation(
                    prev_env,
                    p,
                    64,
                    lcfg.gamma,
                    cfg.seed,
                    &[TAG_CF, 1, k as u64],
                    k - 1,
                )?;
                outcome.cf_meta_vs_prev =
                    Some(cf_pi(PolicyRef::Gaussian(p), PolicyRef::Gaussian(c), &mu, &spec)?);
            }
        }
        tasks.push(outcome);
    }

    let report_vals: Vec<Vec<f64>> = if meta.is_some() {
        (0..k_tasks)
            .map(|task| {
                grid.iter()
                    .map(|t| {
                        let b = (*t as usize) / t_total;
                        boundary_meta[b][task]
                    })
                    .collect()
            })
            .collect()
    } else {
        fast_vals.clone()
    };

    let curves_fast = LearningCurveSet::new(grid.clone(), fast_vals, t_total as u64)?;
    let curves_report = LearningCurveSet::new(grid, report_vals, t_total as u64)?;
    let (f_mean, f_per) = forgetting(&curves_report);
    let avg = average_performance(&curves_report, (k_tasks * t_total) as u64);

    Ok(RunRecord {
        method: cfg.method,
        seed: cfg.seed,
        task_seeds: cfg.sequence.task_seeds.clone(),
        tasks,
        curves_fast,
        curves_report,
        avg_perf: avg,
        forgetting: f_mean,
        forgetting_per_task: f_per,
        fast_q_snapshots: Vec::new(),
        fast_pi_snapshots: fast_snaps,
        meta_snapshots: meta_snaps,
        integration_weights,
        meta_buffer: buffer,
    })
}

fn policy_meta_objective(
    cfg: &RunConfig,
    meta: &MetaState,
    fast_snaps: &[GaussianPolicyTable],
    weights: &[VisitationWeights],
    buffer: &MetaBuffer,
) -> f64 {
    let g = meta.as_gaussian().expect("gaussian meta");
    match cfg.method {
        Method::FameWd => oracle::wd_objective(g, fast_snaps, weights),
        Method::FameKl => oracle::policy_kl_objective(g, buffer),
        _ => unreachable!(),
    }
}

/// Dispatches on the sequence kind.
pub fn run_sequence(cfg: &RunConfig) -> Result<RunRecord> {
    match cfg.sequence.kind {
        TaskKind::Gridworld => run_value_sequence(cfg),
        TaskKind::Pointmass => run_policy_sequence(cfg),
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:?}")).unwrap_or_default()
}

fn curves_csv(record: &RunRecord, curves: &LearningCurveSet) -> String {
    let mut out = String::from("run_id,seed,method,task_index,env_seed,t,p_raw,p_norm\n");
    let run_id = record.run_id();
    for task in 0..curves.n_tasks() {
        let vals = curves.task_values(task);
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        for (gi, t) in curves.grid().iter().enumerate() {
            let raw = vals[gi];
            let norm = if span > 0.0 { (raw - lo) / span } else { 0.0 };
            out.push_str(&format!(
                "{run_id},{},{},{task},{},{t},{raw:?},{norm:?}\n",
                record.seed,
                record.method.label(),
                record.task_seeds[task],
            ));
        }
    }
    out
}

fn tasks_csv(record: &RunRecord) -> String {
    let mut out = String::from(
        "run_id,task_index,chosen,bc_enabled,eval_steps,train_steps,\
         mean_meta,mean_fast,mean_random,p_meta_vs_fast,p_meta_vs_random,p_fast_vs_random,\
         objective_before,objective_after,cf_fast_vs_prev,cf_meta_vs_prev\n",
    );
    let run_id = record.run_id();
    for t in &record.tasks {
        out.push_str(&format!(
            "{run_id},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            t.task_index,
            t.chosen.label(),
            t.bc_enabled,
            t.eval_steps_used,
            t.train_steps_used,
            fmt_opt(t.mean_meta),
            fmt_opt(t.mean_fast),
            fmt_opt(t.mean_random),
            fmt_opt(t.p_meta_vs_fast),
            fmt_opt(t.p_meta_vs_random),
            fmt_opt(t.p_fast_vs_random),
            fmt_opt(t.objective_before),
            fmt_opt(t.objective_after),
            fmt_opt(t.cf_fast_vs_prev),
            fmt_opt(t.cf_meta_vs_prev),
        ));
    }
    out
}

fn report_csv(record: &RunRecord) -> String {
    let mut out = String::from("run_id,seed,method,metric,value\n");
    let run_id = record.run_id();
    let m = record.method.label();
    out.push_str(&format!("{run_id},{},{m},avg_perf,{:?}\n", record.seed, record.avg_perf));
    out.push_str(&format!("{run_id},{},{m},forgetting,{:?}\n", record.seed, record.forgetting));
    for (i, f) in record.forgetting_per_task.iter().enumerate() {
        out.push_str(&format!("{run_id},{},{m},forgetting_task_{i},{f:?}\n", record.seed));
    }
    out
}

/// Writes curves, per-task records, the per-run report, and per-task
/// checkpoints into `dir`. Files land atomically.
pub fn write_outputs(record: &RunRecord, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_atomic(&dir.join("curves.csv"), &curves_csv(record, &record.curves_report))?;
    write_atomic(&dir.join("fast_curves.csv"), &curves_csv(record, &record.curves_fast))?;
    write_atomic(&dir.join("tasks.csv"), &tasks_csv(record))?;
    write_atomic(&dir.join("report.csv"), &report_csv(record))?;
    for k in 0..record.tasks.len() {
        let ck = checkpoint_after(record, k);
        ck.save(&dir.join(format!("checkpoint_{:03}.flat", k + 1)))?;
    }
    Ok(())
}

/// Reconstructs the checkpoint as of the end of task `k` from the run's
/// audit snapshots.
pub fn checkpoint_after(record: &RunRecord, k: usize) -> Checkpoint {
    let mut buffer = MetaBuffer::new();
    for task_id in record.meta_buffer.task_ids().filter(|t| *t <= k) {
        let records = record.meta_buffer.task_records(task_id);
        let n = records.len();
        for (i, rec) in records.iter().enumerate() {
            let _ = buffer.record(rec.clone(), i + 1, n, n, task_id);
        }
    }
    Checkpoint {
        tasks_done: k + 1,
        fast_q: record.fast_q_snapshots.get(k).cloned(),
        fast_gaussian: record.fast_pi_snapshots.get(k).cloned(),
        meta: if record.meta_snapshots.is_empty() {
            None
        } else {
            record.meta_snapshots.get(k + 1).cloned()
        },
        buffer,
    }
}

/// Curves parsed back from a run directory, for cross-run aggregation.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub method: String,
    pub seed: u64,
    pub curves_report: LearningCurveSet,
    pub curves_fast: LearningCurveSet,
}

fn parse_curves_csv(text: &str) -> Result<(String, u64, LearningCurveSet)> {
    let mut method = String::new();
    let mut seed = 0u64;
    let mut per_task: Vec<Vec<(u64, f64)>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 8 {
            return Err(FameError::FlatLayout(format!("bad curves row '{line}'")));
        }
        seed = cols[1].parse().map_err(|_| FameError::FlatLayout("bad seed".into()))?;
        method = cols[2].to_string();
        let task: usize =
            cols[3].parse().map_err(|_| FameError::FlatLayout("bad task index".into()))?;
        let t: u64 = cols[5].parse().map_err(|_| FameError::FlatLayout("bad step".into()))?;
        let p: f64 = cols[6].parse().map_err(|_| FameError::FlatLayout("bad value".into()))?;
        if per_task.len() <= task {
            per_task.resize_with(task + 1, Vec::new);
        }
        per_task[task].push((t, p));
    }
    let grid: Vec<u64> = per_task
        .first()
        .ok_or_else(|| FameError::FlatLayout("empty curves file".into()))?
        .iter()
        .map(|(t, _)| *t)
        .collect();
    let k = per_task.len() as u64;
    let steps_per_task = grid.last().copied().unwrap_or(0) / k.max(1);
    let values = per_task.into_iter().map(|v| v.into_iter().map(|(_, p)| p).collect()).collect();
    Ok((method, seed, LearningCurveSet::new(grid, values, steps_per_task)?))
}

pub fn load_run_dir(dir: &Path) -> Result<LoadedRun> {
    let report = std::fs::read_to_string(dir.join("curves.csv"))?;
    let fast = std::fs::read_to_string(dir.join("fast_curves.csv"))?;
    let (method, seed, curves_report) = parse_curves_csv(&report)?;
    let (_, _, curves_fast) = parse_curves_csv(&fast)?;
    Ok(LoadedRun { method, seed, curves_report, curves_fast })
}

/// Aggregates runs into a cross-method table: average performance and
/// forgetting from the reporting curves, forward transfer from the fast
/// curves against the seed-matched `reset` baseline with min-max bounds
/// shared across all inputs. Emits one CSV row per method.
pub fn aggregate_metrics(runs: &[LoadedRun]) -> Result<String> {
    use crate::metrics::{forward_transfer, min_max_bounds};
    if runs.is_empty() {
        return Err(FameError::InvalidConfig("no runs to aggregate".into()));
    }
    let all_fast: Vec<&LearningCurveSet> = runs.iter().map(|r| &r.curves_fast).collect();
    let bounds = min_max_bounds(&all_fast)?;

    let mut methods: Vec<String> = Vec::new();
    for r in runs {
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
    }
    let baseline_of = |seed: u64| -> Option<&LoadedRun> {
        runs.iter().find(|r| r.method == "reset" && r.seed == seed)
    };

    let mut out =
        String::from("method,n_seeds,avg_perf,avg_perf_se,ft,ft_se,forgetting,forgetting_se\n");
    for method in &methods {
        let group: Vec<&LoadedRun> = runs.iter().filter(|r| &r.method == method).collect();
        let mut avg = Vec::new();
        let mut ft = Vec::new();
        let mut fg = Vec::new();
        for run in &group {
            let final_t = run.curves_report.final_step();
            avg.push(average_performance(&run.curves_report, final_t));
            fg.push(forgetting(&run.curves_report).0);
            if let Some(base) = baseline_of(run.seed) {
                let ours = run.curves_fast.normalized(&bounds)?;
                let theirs = base.curves_fast.normalized(&bounds)?;
                if let (Some(v), _) = forward_transfer(&ours, &theirs)? {
                    ft.push(v);
                }
            }
        }
        let (am, ase) = mean_se(&avg);
        let (fm, fse) = mean_se(&fg);
        let (tm, tse) = if ft.is_empty() { (f64::NAN, f64::NAN) } else { mean_se(&ft) };
        out.push_str(&format!(
            "{method},{},{am:?},{ase:?},{tm:?},{tse:?},{fm:?},{fse:?}\n",
            group.len()
        ));
    }
    Ok(out)
}

/// (mean, standard error) over seeds.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{EvalParams, LearnerParams, SequenceConfig, WarmupParams};
    use crate::gridworld::{GridworldSpec, StartMode};

    pub(crate) fn small_value_config(method: Method, seed: u64) -> RunConfig {
        RunConfig {
            method,
            seed,
            out_dir: None,
            sequence: SequenceConfig {
                kind: TaskKind::Gridworld,
                steps_per_task: 1500,
                task_seeds: vec![1, 2, 1],
                max_episode_steps: 30,
                gridworld: Some(GridworldSpec {
                    width: 4,
                    height: 4,
                    slip: 0.05,
                    gamma: 0.95,
                    start: StartMode::UniformFree,
                    ..Default::default()
                }),
                goal_cells: Some(vec![(3, 3), (0, 3), (3, 3)]),
                pointmass: None,
                goals: None,
            },
            learner: LearnerParams { learning_rate: 0.4, ..Default::default() },
            fame: Default::default(),
            warmup: WarmupParams { n_eval_episodes: 4, ..Default::default() },
            eval: EvalParams { points_per_task: 10, episodes_per_point: 4 },
            overrides: Default::default(),
        }
    }

    #[test]
    fn total_steps_per_task_equal_budget() {
        for method in [Method::FameQ, Method::Reset, Method::Finetune] {
            let cfg = small_value_config(method, 7);
            let record = run_value_sequence(&cfg).unwrap();
            for t in &record.tasks {
                assert_eq!(
                    t.eval_steps_used + t.train_steps_used,
                    cfg.sequence.steps_per_task,
                    "method {} task {}",
                    method.label(),
                    t.task_index
                );
            }
        }
    }

    #[test]
    fn reset_never_creates_meta_and_always_resets() {
        let cfg = small_value_config(Method::Reset, 3);
        let record = run_value_sequence(&cfg).unwrap();
        assert!(record.meta_snapshots.is_empty());
        assert!(record.tasks.iter().all(|t| t.chosen == Candidate::Random));
        assert_eq!(record.curves_fast, record.curves_report);
    }

    #[test]
    fn finetune_always_keeps_fast() {
        let cfg = small_value_config(Method::Finetune, 3);
        let record = run_value_sequence(&cfg).unwrap();
        assert!(record.tasks.iter().all(|t| t.chosen == Candidate::Fast));
    }

    #[test]
    fn fame_q_forced_fast_without_integration_matches_finetune_bit_exactly() {
        let mut cfg = small_value_config(Method::FameQ, 11);
        cfg.overrides.force_warmup = Some(Candidate::Fast);
        cfg.overrides.disable_integration = true;
        let fame = run_value_sequence(&cfg).unwrap();
        let finetune =
            run_value_sequence(&small_value_config(Method::Finetune, 11)).unwrap();
        assert_eq!(fame.curves_fast, finetune.curves_fast);
        for (a, b) in fame.fast_q_snapshots.iter().zip(&finetune.fast_q_snapshots) {
            assert_eq!(a.values(), b.values());
        }
    }

    #[test]
    fn runs_are_bit_reproducible() {
        let cfg = small_value_config(Method::FameQ, 5);
        let a = run_value_sequence(&cfg).unwrap();
        let b = run_value_sequence(&cfg).unwrap();
        assert_eq!(a.curves_fast, b.curves_fast);
        assert_eq!(a.curves_report, b.curves_report);
        assert_eq!(curves_csv(&a, &a.curves_report), curves_csv(&b, &b.curves_report));
        assert_eq!(tasks_csv(&a), tasks_csv(&b));
    }

    #[test]
    fn single_task_softmax_kl_meta_matches_fast_softmax_on_buffered_states() {
        let mut cfg = small_value_config(Method::FameQ, 9);
        cfg.sequence.task_seeds = vec![1];
        cfg.sequence.goal_cells = Some(vec![(3, 3)]);
        let record = run_value_sequence(&cfg).unwrap();
        let meta = record.meta_snapshots.last().unwrap();
        let pi = meta.as_categorical().unwrap();
        let fast = record.fast_q_snapshots.last().unwrap();
        let smoothed = fast.softmax_policy().smoothed(cfg.fame.smoothing_eps);
        let w = &record.integration_weights[0];
        for s in 0..pi.n_states() {
            if w.state(s) > 0.0 {
                let tv = crate::policy::tv_distance(pi.row(s), smoothed.row(s));
                assert!(tv < 1e-6, "state {s}: tv = {tv}");
            }
        }
    }

    #[test]
    fn meta_objective_never_increases_at_integration() {
        for integration in [ValueIntegration::SoftmaxKl, ValueIntegration::L2] {
            let mut cfg = small_value_config(Method::FameQ, 13);
            cfg.fame.value_integration = integration;
            let record = run_value_sequence(&cfg).unwrap();
            for t in &record.tasks {
                let (before, after) =
                    (t.objective_before.unwrap(), t.objective_after.unwrap());
                assert!(
                    after <= before + 1e-9,
                    "integration {integration:?} task {}: {after} > {before}",
                    t.task_index
                );
            }
        }
    }

    #[test]
    fn outputs_round_trip_through_disk() {
        let cfg = small_value_config(Method::FameQ, 2);
        let record = run_value_sequence(&cfg).unwrap();
        let dir = std::env::temp_dir().join(format!("fame-harness-test-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        write_outputs(&record, &dir).unwrap();
        let loaded = load_run_dir(&dir).unwrap();
        assert_eq!(loaded.method, "fame-q");
        assert_eq!(loaded.curves_report, record.curves_report);
        assert_eq!(loaded.curves_fast, record.curves_fast);
        let ck = Checkpoint::load(&dir.join("checkpoint_003.flat")).unwrap();
        assert_eq!(ck.tasks_done, 3);
        assert_eq!(ck.meta.as_ref(), record.meta_snapshots.last());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
