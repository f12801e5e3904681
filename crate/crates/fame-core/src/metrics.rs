//! Continual-RL metrics computed from recorded learning curves: average
//! performance, forward transfer against a matched baseline run, and
//! forgetting at task boundaries.

use crate::error::{FameError, Result};

/// Per-task evaluation series p_i(t) on a shared grid over t in [0, K*T].
#[derive(Debug, Clone, PartialEq)]
pub struct LearningCurveSet {
    /// Strictly increasing evaluation steps; includes every multiple of T.
    grid: Vec<u64>,
    /// values[task][grid index] = p_i(t).
    values: Vec<Vec<f64>>,
    steps_per_task: u64,
}

impl LearningCurveSet {
    pub fn new(grid: Vec<u64>, values: Vec<Vec<f64>>, steps_per_task: u64) -> Result<Self> {
        if grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(FameError::ContractViolation("grid must be strictly increasing".into()));
        }
        if values.is_empty() || values.iter().any(|v| v.len() != grid.len()) {
            return Err(FameError::ContractViolation(
                "every task needs one value per grid point".into(),
            ));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(FameError::ContractViolation("curve values must be finite".into()));
        }
        let k = values.len() as u64;
        for boundary in (0..=k).map(|i| i * steps_per_task) {
            if !grid.contains(&boundary) {
                return Err(FameError::ContractViolation(format!(
                    "grid is missing the task boundary t = {boundary}"
                )));
            }
        }
        Ok(Self { grid, values, steps_per_task })
    }

    pub fn n_tasks(&self) -> usize {
        self.values.len()
    }

    pub fn steps_per_task(&self) -> u64 {
        self.steps_per_task
    }

    pub fn grid(&self) -> &[u64] {
        &self.grid
    }

    pub fn task_values(&self, task: usize) -> &[f64] {
        &self.values[task]
    }

    pub fn final_step(&self) -> u64 {
        *self.grid.last().unwrap()
    }

    /// Value of p_task at t; off-grid times fall back to the nearest
    /// earlier sample with a warning.
    pub fn value_at(&self, task: usize, t: u64) -> f64 {
        match self.grid.binary_search(&t) {
            Ok(i) => self.values[task][i],
            Err(insert) => {
                log::warn!("evaluation step {t} off the grid; using the nearest earlier sample");
                let i = insert.saturating_sub(1);
                self.values[task][i]
            }
        }
    }

    /// Min-max normalizes every task's values with the given per-task
    /// bounds. Degenerate bounds (max == min) map the whole series to 0.
    pub fn normalized(&self, bounds: &[(f64, f64)]) -> Result<Self> {
        if bounds.len() != self.n_tasks() {
            return Err(FameError::ContractViolation("one bound pair per task".into()));
        }
        let values = self
            .values
            .iter()
            .zip(bounds)
            .map(|(row, (lo, hi))| {
                let span = hi - lo;
                row.iter()
                    .map(|v| if span > 0.0 { ((v - lo) / span).clamp(0.0, 1.0) } else { 0.0 })
                    .collect()
            })
            .collect();
        Self::new(self.grid.clone(), values, self.steps_per_task)
    }
}

/// Per-task (min, max) over every provided curve set; the shared
/// normalization bounds when comparing methods.
pub fn min_max_bounds(sets: &[&LearningCurveSet]) -> Result<Vec<(f64, f64)>> {
    let k = sets.first().map(|s| s.n_tasks()).ok_or_else(|| {
        FameError::ContractViolation("need at least one curve set".into())
    })?;
    if sets.iter().any(|s| s.n_tasks() != k) {
        return Err(FameError::ContractViolation("curve sets disagree on task count".into()));
    }
    let mut bounds = vec![(f64::INFINITY, f64::NEG_INFINITY); k];
    for set in sets {
        for (task, bound) in bounds.iter_mut().enumerate() {
            for v in set.task_values(task) {
                bound.0 = bound.0.min(*v);
                bound.1 = bound.1.max(*v);
            }
        }
    }
    Ok(bounds)
}

/// P_K(t): arithmetic mean of the K per-task evaluations at time t.
pub fn average_performance(curves: &LearningCurveSet, t: u64) -> f64 {
    let k = curves.n_tasks();
    (0..k).map(|i| curves.value_at(i, t)).sum::<f64>() / k as f64
}

/// Normalized area under task i's curve over its own training window
/// [(i-1)T, iT], by the trapezoidal rule.
pub fn auc(curves: &LearningCurveSet, task: usize) -> f64 {
    let t0 = task as u64 * curves.steps_per_task;
    let t1 = (task as u64 + 1) * curves.steps_per_task;
    let grid = curves.grid();
    let vals = curves.task_values(task);
    let mut area = 0.0;
    for i in 1..grid.len() {
        let (a, b) = (grid[i - 1], grid[i]);
        if b <= t0 || a >= t1 {
            continue;
        }
        let width = (b - a) as f64;
        area += 0.5 * (vals[i - 1] + vals[i]) * width;
    }
    area / curves.steps_per_task as f64
}

/// Forward transfer against the baseline run:
/// FTr_i = (AUC_i − AUC_i^b) / (1 − AUC_i^b); FT is the mean over the tasks
/// where it is defined. Curves must already be normalized so AUC lies in
/// [0, 1]; AUC_i^b = 1 makes FTr_i undefined (reported as None).
pub fn forward_transfer(
    curves: &LearningCurveSet,
    baseline: &LearningCurveSet,
) -> Result<(Option<f64>, Vec<Option<f64>>)> {
    if curves.n_tasks() != baseline.n_tasks()
        || curves.steps_per_task != baseline.steps_per_task
    {
        return Err(FameError::ContractViolation(
            "curves and baseline must share task structure".into(),
        ));
    }
    let mut per_task = Vec::with_capacity(curves.n_tasks());
    for i in 0..curves.n_tasks() {
        let a = auc(curves, i);
        let b = auc(baseline, i);
        if (1.0 - b).abs() < 1e-12 {
            per_task.push(None);
        } else {
            per_task.push(Some((a - b) / (1.0 - b)));
        }
    }
    let defined: Vec<f64> = per_task.iter().flatten().copied().collect();
    let ft = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    Ok((ft, per_task))
}

/// Forgetting: F_i = p_i(i·T) − p_i(K·T), averaged over tasks.
pub fn forgetting(curves: &LearningCurveSet) -> (f64, Vec<f64>) {
    let k = curves.n_tasks();
    let t_final = k as u64 * curves.steps_per_task;
    let per_task: Vec<f64> = (0..k)
        .map(|i| {
            let boundary = (i as u64 + 1) * curves.steps_per_task;
            curves.value_at(i, boundary) - curves.value_at(i, t_final)
        })
        .collect();
    let f = per_task.iter().sum::<f64>() / k as f64;
    (f, per_task)
}

/// Cross-method forgetting normalization: each task's scores are divided by
/// their standard deviation across methods, then re-averaged per method.
/// Zero-variance tasks pass through unscaled.
pub fn normalize_forgetting_across_methods(per_method: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let k = per_method.first().map(|m| m.len()).ok_or_else(|| {
        FameError::ContractViolation("need at least one method".into())
    })?;
    if per_method.iter().any(|m| m.len() != k) {
        return Err(FameError::ContractViolation("methods disagree on task count".into()));
    }
    let n = per_method.len() as f64;
    let mut out = vec![vec![0.0; k]; per_method.len()];
    for task in 0..k {
        let mean: f64 = per_method.iter().map(|m| m[task]).sum::<f64>() / n;
        let var: f64 =
            per_method.iter().map(|m| (m[task] - mean) * (m[task] - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        for (m, row) in per_method.iter().enumerate() {
            out[m][task] = if std > 0.0 { row[task] / std } else { row[task] };
        }
    }
    Ok(out)
}

/// Final scores for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub avg_perf: f64,
    /// None when no baseline run was supplied.
    pub ft: Option<f64>,
    pub ft_per_task: Vec<Option<f64>>,
    pub forgetting: f64,
    pub forgetting_per_task: Vec<f64>,
    /// "raw" or "min-max" depending on how curves entered the FT formula.
    pub normalization: &'static str,
}
