//! A desk-scale continual reinforcement-learning laboratory built around a
//! dual-learner design: a fast per-task learner for plasticity and a meta
//! learner that integrates knowledge at task boundaries by minimizing
//! visitation-weighted forgetting, plus an adaptive warm-up selector that
//! picks among meta / previous / fresh initializations with a one-vs-all
//! hypothesis test.
//!
//! Every closed-form update is checked against an independent brute-force
//! oracle (see [`oracle`]), and the experiment harness drives full
//! sequences with deterministic seeding and CSV output.

pub mod buffers;
pub mod config;
pub mod distance;
pub mod error;
pub mod fast;
pub mod flat;
pub mod gridworld;
pub mod harness;
pub mod mdp;
pub mod meta;
pub mod metrics;
pub mod oracle;
pub mod pointmass;
pub mod policy;
pub mod rng;
pub mod warmup;

pub use buffers::{FastBuffer, MetaBuffer, MetaRecord};
pub use config::{Method, RunConfig, TaskKind, ValueIntegration};
pub use distance::{
    cf_pi, cf_q, kl_categorical, kl_diag_gaussian, mdp_distance, mdp_distance_policy,
    w2_squared_diag_gaussian, DivergenceSpec, PiMetric, PolicyRef, QMetric, VisitationWeights,
};
pub use error::{FameError, Result};
pub use fast::{
    act_epsilon_greedy, bc_regularized_q_update, gaussian_policy_update, q_update,
    GaussianLearner, LearnerConfig, QTable,
};
pub use flat::Checkpoint;
pub use gridworld::{generate_gridworld, GridworldSpec, StartMode};
pub use harness::{
    aggregate_metrics, load_run_dir, run_policy_sequence, run_sequence, run_value_sequence,
    write_outputs, RunRecord, TaskOutcome,
};
pub use mdp::{
    bellman_backup, discounted_visitation, greedy_policy, policy_evaluation_q, rollout_episode,
    value_iteration, DiscreteActor, TabularMdp, Transition, VisitationMode,
};
pub use meta::{
    integrate_policy_kl, integrate_policy_wd, integrate_q_l2, integrate_softmax_kl,
    integrate_softmax_kl_from_buffer, MetaLearner, MetaState,
};
pub use metrics::{
    average_performance, auc, forgetting, forward_transfer, min_max_bounds,
    normalize_forgetting_across_methods, LearningCurveSet, MetricReport,
};
pub use oracle::{run_suite, OracleReport, OracleSuite};
pub use pointmass::{generate_pointmass, ContStep, ContTrajectory, ContinuousTask, PointmassSpec, StartRegion};
pub use policy::{CategoricalPolicyTable, GaussianPolicyTable, SIGMA_MIN};
pub use warmup::{
    apply_warmup_policy, apply_warmup_value, evaluate_discrete_candidates,
    evaluate_gaussian_candidates, one_vs_all_test, welch_one_sided_p, Candidate, EvalSummary,
    WarmupDecision, WarmupMode,
};
