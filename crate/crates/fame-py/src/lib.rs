//! Python bindings: tabular MDPs, the exact solvers, the forgetting
//! measures, the three knowledge-integration rules, and the experiment
//! runner.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use fame_core::config::{Method, RunConfig};
use fame_core::gridworld::{GridworldSpec, StartMode};
use fame_core::harness::run_sequence;
use fame_core::mdp::{self, VisitationMode};
use fame_core::oracle::{run_suite, OracleSuite};
use fame_core::policy::CategoricalPolicyTable;
use fame_core::rng::stream;
use fame_core::{
    cf_pi, cf_q, integrate_policy_wd, integrate_q_l2, integrate_softmax_kl, mdp_distance,
    mdp_distance_policy, DivergenceSpec, FameError, GaussianPolicyTable, MetaState, PiMetric,
    PolicyRef, QMetric, QTable, VisitationWeights,
};

fn err(e: FameError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_q_metric(name: &str) -> PyResult<QMetric> {
    match name {
        "squared-l2" => Ok(QMetric::SquaredL2),
        "sup-norm" => Ok(QMetric::SupNorm),
        other => Err(PyValueError::new_err(format!("unknown q metric '{other}'"))),
    }
}

/// A finite MDP with terminal self-loops and a start distribution.
#[pyclass(name = "TabularMdp", from_py_object)]
#[derive(Clone)]
struct PyTabularMdp {
    inner: mdp::TabularMdp,
}

#[pymethods]
impl PyTabularMdp {
    #[getter]
    fn n_states(&self) -> usize {
        self.inner.n_states()
    }

    #[getter]
    fn n_actions(&self) -> usize {
        self.inner.n_actions()
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.gamma()
    }

    fn transition_row(&self, state: usize, action: usize) -> Vec<f64> {
        self.inner.transition_row(state, action).to_vec()
    }

    fn reward(&self, state: usize, action: usize) -> f64 {
        self.inner.r(state, action)
    }

    fn is_terminal(&self, state: usize) -> bool {
        self.inner.is_terminal(state)
    }

    /// Samples one step from a seeded stream.
    fn step(&self, state: usize, action: usize, seed: u64) -> PyResult<(usize, f64, bool)> {
        let mut rng = stream(seed, &[0x7079]);
        self.inner.step(state, action, &mut rng).map_err(err)
    }

    /// Exact discounted state visitation of a stochastic policy
    /// (row-major probs, one row per state).
    fn discounted_visitation(&self, probs: Vec<f64>) -> PyResult<Vec<f64>> {
        let pi = CategoricalPolicyTable::new(self.inner.n_states(), self.inner.n_actions(), probs)
            .map_err(err)?;
        let mut rng = stream(0, &[0]);
        let w = mdp::discounted_visitation(&self.inner, &pi, VisitationMode::Exact, &mut rng, 0)
            .map_err(err)?;
        Ok(w.state_weights().to_vec())
    }
}

/// Tabular action-value function.
#[pyclass(name = "QTable", from_py_object)]
#[derive(Clone)]
struct PyQTable {
    inner: QTable,
}

#[pymethods]
impl PyQTable {
    #[new]
    #[pyo3(signature = (n_states, n_actions, values, tau = 1.0))]
    fn new(n_states: usize, n_actions: usize, values: Vec<f64>, tau: f64) -> PyResult<Self> {
        if values.len() != n_states * n_actions {
            return Err(PyValueError::new_err("values length must be n_states * n_actions"));
        }
        Ok(Self { inner: QTable::from_values(n_states, n_actions, values, tau) })
    }

    #[getter]
    fn n_states(&self) -> usize {
        self.inner.n_states()
    }

    #[getter]
    fn n_actions(&self) -> usize {
        self.inner.n_actions()
    }

    fn values(&self) -> Vec<f64> {
        self.inner.values().to_vec()
    }

    fn get(&self, state: usize, action: usize) -> f64 {
        self.inner.get(state, action)
    }

    fn greedy_policy(&self) -> Vec<usize> {
        mdp::greedy_policy(&self.inner)
    }

    fn softmax_policy(&self) -> Vec<f64> {
        let pi = self.inner.softmax_policy();
        (0..pi.n_states()).flat_map(|s| pi.row(s).to_vec()).collect()
    }
}

#[pyfunction]
#[pyo3(signature = (width, height, seed, slip = 0.1, wall_density = 0.0, gamma = 0.95, goal = None, goal_reward = 1.0))]
#[allow(clippy::too_many_arguments)]
fn generate_gridworld(
    width: usize,
    height: usize,
    seed: u64,
    slip: f64,
    wall_density: f64,
    gamma: f64,
    goal: Option<(usize, usize)>,
    goal_reward: f64,
) -> PyResult<PyTabularMdp> {
    let spec = GridworldSpec {
        width,
        height,
        slip,
        wall_density,
        gamma,
        goal,
        goal_reward,
        start: StartMode::UniformFree,
        ..Default::default()
    };
    Ok(PyTabularMdp { inner: fame_core::generate_gridworld(&spec, seed).map_err(err)? })
}

#[pyfunction]
#[pyo3(signature = (mdp, tol = 1e-9))]
fn value_iteration(mdp: &PyTabularMdp, tol: f64) -> PyQTable {
    PyQTable { inner: mdp::value_iteration(&mdp.inner, tol) }
}

/// Q-value-based MDP distance ("squared-l2" averages, "sup-norm" maxes).
#[pyfunction]
#[pyo3(signature = (q1, q2, metric = "squared-l2"))]
fn mdp_distance_q(q1: &PyQTable, q2: &PyQTable, metric: &str) -> PyResult<f64> {
    let spec = DivergenceSpec { q_metric: parse_q_metric(metric)?, pi_metric: PiMetric::Kl };
    mdp_distance(&q1.inner, &q2.inner, &spec).map_err(err)
}

/// Policy-based MDP distance on softmax policies with shared temperature.
#[pyfunction]
#[pyo3(signature = (q1, q2, tau = 1.0))]
fn mdp_distance_pi(q1: &PyQTable, q2: &PyQTable, tau: f64) -> PyResult<f64> {
    mdp_distance_policy(&q1.inner, &q2.inner, tau, &DivergenceSpec::default()).map_err(err)
}

/// Q-value catastrophic forgetting under state-action weights.
#[pyfunction]
#[pyo3(signature = (q_prev, q_cur, weights, metric = "squared-l2"))]
fn cf_q_value(q_prev: &PyQTable, q_cur: &PyQTable, weights: Vec<f64>, metric: &str) -> PyResult<f64> {
    let w = VisitationWeights::from_state_action_weights(
        weights,
        q_prev.inner.n_states(),
        q_prev.inner.n_actions(),
        0,
    )
    .map_err(err)?;
    let spec = DivergenceSpec { q_metric: parse_q_metric(metric)?, pi_metric: PiMetric::Kl };
    cf_q(&q_prev.inner, &q_cur.inner, &w, &spec).map_err(err)
}

/// Policy catastrophic forgetting between categorical policies (KL).
#[pyfunction]
fn cf_pi_categorical(
    probs_prev: Vec<f64>,
    probs_cur: Vec<f64>,
    mu_prev: Vec<f64>,
    n_actions: usize,
) -> PyResult<f64> {
    let ns = mu_prev.len();
    let prev = CategoricalPolicyTable::new(ns, n_actions, probs_prev).map_err(err)?;
    let cur = CategoricalPolicyTable::new(ns, n_actions, probs_cur).map_err(err)?;
    let mu = VisitationWeights::from_state_weights(mu_prev, 0).map_err(err)?;
    cf_pi(
        PolicyRef::Categorical(&prev),
        PolicyRef::Categorical(&cur),
        &mu,
        &DivergenceSpec::default(),
    )
    .map_err(err)
}

/// Squared 2-Wasserstein distance between diagonal Gaussians.
#[pyfunction]
fn w2_squared(mean_p: Vec<f64>, std_p: Vec<f64>, mean_q: Vec<f64>, std_q: Vec<f64>) -> PyResult<f64> {
    fame_core::w2_squared_diag_gaussian((&mean_p, &std_p), (&mean_q, &std_q)).map_err(err)
}

/// Meta learner with cumulative-weight bookkeeping.
#[pyclass(name = "MetaState")]
struct PyMetaState {
    inner: MetaState,
}

#[pymethods]
impl PyMetaState {
    #[staticmethod]
    #[pyo3(signature = (n_states, n_actions, tau = 1.0))]
    fn new_q_l2(n_states: usize, n_actions: usize, tau: f64) -> Self {
        Self { inner: MetaState::new_q_l2(n_states, n_actions, tau) }
    }

    #[staticmethod]
    #[pyo3(signature = (n_states, n_actions, tau = 1.0, smoothing_eps = 1e-3))]
    fn new_softmax_kl(n_states: usize, n_actions: usize, tau: f64, smoothing_eps: f64) -> Self {
        Self { inner: MetaState::new_softmax_kl(n_states, n_actions, tau, smoothing_eps) }
    }

    #[staticmethod]
    fn new_gaussian(n_cells: usize, action_dim: usize) -> Self {
        Self { inner: MetaState::new_gaussian(n_cells, action_dim) }
    }

    #[getter]
    fn tasks_integrated(&self) -> usize {
        self.inner.tasks_integrated()
    }

    /// Weighted-l2 integration of one task's Q table.
    fn integrate_q_l2(&mut self, fast: &PyQTable, weights: Vec<f64>, task_id: usize) -> PyResult<()> {
        let w = VisitationWeights::from_state_action_weights(
            weights,
            fast.inner.n_states(),
            fast.inner.n_actions(),
            task_id,
        )
        .map_err(err)?;
        integrate_q_l2(&mut self.inner, &fast.inner, &w).map_err(err)
    }

    /// Softmax-KL integration of one task's state-action mass.
    fn integrate_softmax_kl(
        &mut self,
        weights: Vec<f64>,
        n_states: usize,
        n_actions: usize,
        task_id: usize,
    ) -> PyResult<()> {
        let w = VisitationWeights::from_state_action_weights(weights, n_states, n_actions, task_id)
            .map_err(err)?;
        integrate_softmax_kl(&mut self.inner, &w).map_err(err)
    }

    /// Wasserstein integration of one task's Gaussian policy.
    fn integrate_policy_wd(
        &mut self,
        means: Vec<f64>,
        stds: Vec<f64>,
        mu: Vec<f64>,
        task_id: usize,
    ) -> PyResult<()> {
        let n_cells = mu.len();
        if n_cells == 0 || !means.len().is_multiple_of(n_cells) {
            return Err(PyValueError::new_err("means length must be a multiple of len(mu)"));
        }
        let dim = means.len() / n_cells;
        let pi = GaussianPolicyTable::from_parts(n_cells, dim, means, stds).map_err(err)?;
        let w = VisitationWeights::from_state_weights(mu, task_id).map_err(err)?;
        integrate_policy_wd(&mut self.inner, &pi, &w).map_err(err)
    }

    fn q_values(&self) -> Option<Vec<f64>> {
        self.inner.as_q().map(|q| q.values().to_vec())
    }

    fn policy_probs(&self) -> Option<Vec<f64>> {
        self.inner
            .as_categorical()
            .map(|pi| (0..pi.n_states()).flat_map(|s| pi.row(s).to_vec()).collect())
    }

    fn gaussian_params(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        self.inner.as_gaussian().map(|g| {
            let mean = (0..g.n_cells()).flat_map(|c| g.mean(c).to_vec()).collect();
            let std = (0..g.n_cells()).flat_map(|c| g.std(c).to_vec()).collect();
            (mean, std)
        })
    }
}

/// Runs a full sequence from TOML text; returns per-run scores and
/// per-task decisions. Writes CSVs when out_dir is given.
#[pyfunction]
#[pyo3(signature = (config_toml, seed = None, method = None, out_dir = None))]
fn run_from_toml(
    py: Python<'_>,
    config_toml: &str,
    seed: Option<u64>,
    method: Option<&str>,
    out_dir: Option<&str>,
) -> PyResult<Py<PyDict>> {
    let mut cfg = RunConfig::from_toml(config_toml).map_err(err)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(name) = method {
        cfg.method = Method::parse(name).map_err(err)?;
    }
    let record = run_sequence(&cfg).map_err(err)?;
    if let Some(dir) = out_dir {
        fame_core::harness::write_outputs(&record, std::path::Path::new(dir)).map_err(err)?;
    }
    let out = PyDict::new(py);
    out.set_item("run_id", record.run_id())?;
    out.set_item("method", record.method.label())?;
    out.set_item("seed", record.seed)?;
    out.set_item("avg_perf", record.avg_perf)?;
    out.set_item("forgetting", record.forgetting)?;
    out.set_item("forgetting_per_task", record.forgetting_per_task.clone())?;
    let decisions: Vec<String> =
        record.tasks.iter().map(|t| t.chosen.label().to_string()).collect();
    out.set_item("warmup_decisions", decisions)?;
    let grid: Vec<u64> = record.curves_report.grid().to_vec();
    out.set_item("curve_grid", grid)?;
    let curves: Vec<Vec<f64>> = (0..record.curves_report.n_tasks())
        .map(|i| record.curves_report.task_values(i).to_vec())
        .collect();
    out.set_item("curves_report", curves)?;
    Ok(out.into())
}

/// Randomized incremental-vs-batch / closed-form-vs-numeric checks.
#[pyfunction]
#[pyo3(signature = (suite, instances = 100, seed = 0))]
fn oracle_check(py: Python<'_>, suite: &str, instances: usize, seed: u64) -> PyResult<Py<PyDict>> {
    let s = OracleSuite::parse(suite).map_err(err)?;
    let report = run_suite(s, instances, seed);
    let out = PyDict::new(py);
    out.set_item("suite", s.label())?;
    out.set_item("instances", report.instances)?;
    out.set_item("max_deviation", report.max_deviation)?;
    out.set_item("tolerance", s.tolerance())?;
    out.set_item("passed", report.passed())?;
    out.set_item("failing_seeds", report.failing_seeds.clone())?;
    Ok(out.into())
}

#[pymodule]
fn fame_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTabularMdp>()?;
    m.add_class::<PyQTable>()?;
    m.add_class::<PyMetaState>()?;
    m.add_function(wrap_pyfunction!(generate_gridworld, m)?)?;
    m.add_function(wrap_pyfunction!(value_iteration, m)?)?;
    m.add_function(wrap_pyfunction!(mdp_distance_q, m)?)?;
    m.add_function(wrap_pyfunction!(mdp_distance_pi, m)?)?;
    m.add_function(wrap_pyfunction!(cf_q_value, m)?)?;
    m.add_function(wrap_pyfunction!(cf_pi_categorical, m)?)?;
    m.add_function(wrap_pyfunction!(w2_squared, m)?)?;
    m.add_function(wrap_pyfunction!(run_from_toml, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_check, m)?)?;
    Ok(())
}
