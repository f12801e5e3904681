//! Tabular policy representations shared by the fast and meta learners.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{FameError, Result};

/// Lower clamp for Gaussian policy standard deviations.
pub const SIGMA_MIN: f64 = 1e-3;

/// Upper clamp applied when gradient steps move standard deviations.
pub const SIGMA_MAX: f64 = 10.0;

/// Row-stochastic table of action probabilities, one row per state.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalPolicyTable {
    probs: Vec<f64>,
    n_states: usize,
    n_actions: usize,
}

impl CategoricalPolicyTable {
    /// Builds a table from per-state rows, validating the simplex invariant.
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(FameError::ContractViolation(format!(
                "policy table needs {} entries, got {}",
                n_states * n_actions,
                probs.len()
            )));
        }
        for s in 0..n_states {
            let row = &probs[s * n_actions..(s + 1) * n_actions];
            if row.iter().any(|p| *p < 0.0 || !p.is_finite()) {
                return Err(FameError::ContractViolation(format!(
                    "negative or non-finite probability in state {s}"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-10 {
                return Err(FameError::ContractViolation(format!(
                    "state {s} row sums to {sum}, not 1"
                )));
            }
        }
        Ok(Self { probs, n_states, n_actions })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
            n_states,
            n_actions,
        }
    }

    /// One-hot table from a deterministic action per state.
    pub fn one_hot(actions: &[usize], n_actions: usize) -> Self {
        let n_states = actions.len();
        let mut probs = vec![0.0; n_states * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            probs[s * n_actions + a] = 1.0;
        }
        Self { probs, n_states, n_actions }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn prob(&self, state: usize, action: usize) -> f64 {
        self.probs[state * self.n_actions + action]
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.probs[state * self.n_actions..(state + 1) * self.n_actions]
    }

    /// Overwrites one state's distribution. Caller guarantees simplex-validity.
    pub(crate) fn set_row(&mut self, state: usize, row: &[f64]) {
        self.probs[state * self.n_actions..(state + 1) * self.n_actions].copy_from_slice(row);
    }

    pub fn sample<R: Rng + ?Sized>(&self, state: usize, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for a in 0..self.n_actions {
            acc += self.prob(state, a);
            if u < acc {
                return a;
            }
        }
        self.n_actions - 1
    }

    /// Blends each row with uniform mass: (1 - eps) * p + eps / A.
    pub fn smoothed(&self, eps: f64) -> Self {
        let u = eps / self.n_actions as f64;
        let probs = self.probs.iter().map(|p| (1.0 - eps) * p + u).collect();
        Self { probs, n_states: self.n_states, n_actions: self.n_actions }
    }

    /// Max over states of the total-variation distance between rows.
    pub fn max_tv_distance(&self, other: &Self) -> f64 {
        assert_eq!(self.n_states, other.n_states);
        assert_eq!(self.n_actions, other.n_actions);
        (0..self.n_states)
            .map(|s| tv_distance(self.row(s), other.row(s)))
            .fold(0.0, f64::max)
    }
}

/// Total-variation distance between two finite distributions.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Numerically stable softmax of `values / tau`.
pub fn softmax(values: &[f64], tau: f64) -> Vec<f64> {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| ((v - m) / tau).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

/// Per-state independent Gaussian policy over a discretized state space.
///
/// Cell `c` holds an action distribution N(mean[c], diag(std[c]^2)).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicyTable {
    mean: Vec<f64>,
    std: Vec<f64>,
    n_cells: usize,
    action_dim: usize,
}

impl GaussianPolicyTable {
    /// Fresh policy: zero means, unit standard deviations.
    pub fn new(n_cells: usize, action_dim: usize) -> Self {
        Self {
            mean: vec![0.0; n_cells * action_dim],
            std: vec![1.0; n_cells * action_dim],
            n_cells,
            action_dim,
        }
    }

    pub fn from_parts(n_cells: usize, action_dim: usize, mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != n_cells * action_dim || std.len() != n_cells * action_dim {
            return Err(FameError::ContractViolation(
                "gaussian table dimensions do not match parameter lengths".into(),
            ));
        }
        if std.iter().any(|s| *s < SIGMA_MIN) {
            return Err(FameError::ContractViolation(format!(
                "standard deviation below sigma_min = {SIGMA_MIN}"
            )));
        }
        Ok(Self { mean, std, n_cells, action_dim })
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn mean(&self, cell: usize) -> &[f64] {
        &self.mean[cell * self.action_dim..(cell + 1) * self.action_dim]
    }

    pub fn std(&self, cell: usize) -> &[f64] {
        &self.std[cell * self.action_dim..(cell + 1) * self.action_dim]
    }

    pub fn set_cell(&mut self, cell: usize, mean: &[f64], std: &[f64]) {
        let r = cell * self.action_dim..(cell + 1) * self.action_dim;
        self.mean[r.clone()].copy_from_slice(mean);
        self.std[r].copy_from_slice(std);
        for s in &mut self.std[cell * self.action_dim..(cell + 1) * self.action_dim] {
            *s = s.max(SIGMA_MIN);
        }
    }

    /// Adds a gradient step to one cell, keeping std inside
    /// [std_floor, sigma_max]. Learners pass an exploration floor above
    /// SIGMA_MIN so 1/sigma^3-scale gradients cannot arise.
    pub fn nudge_cell(&mut self, cell: usize, d_mean: &[f64], d_std: &[f64], std_floor: f64) {
        let floor = std_floor.max(SIGMA_MIN);
        for (i, d) in d_mean.iter().enumerate() {
            self.mean[cell * self.action_dim + i] += d;
        }
        for (i, d) in d_std.iter().enumerate() {
            let s = &mut self.std[cell * self.action_dim + i];
            *s = (*s + d).clamp(floor, SIGMA_MAX);
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, cell: usize, rng: &mut R) -> Vec<f64> {
        let mut a = Vec::with_capacity(self.action_dim);
        for i in 0..self.action_dim {
            let n = Normal::new(
                self.mean[cell * self.action_dim + i],
                self.std[cell * self.action_dim + i],
            )
            .expect("std >= sigma_min");
            a.push(n.sample(rng));
        }
        a
    }

    pub fn max_abs_param_diff(&self, other: &Self) -> f64 {
        self.mean
            .iter()
            .zip(&other.mean)
            .chain(self.std.iter().zip(&other.std))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Log density of a diagonal Gaussian at `action`.
pub fn gaussian_log_density(action: &[f64], mean: &[f64], std: &[f64]) -> f64 {
    const LN_2PI: f64 = 1.837_877_066_409_345_5;
    action
        .iter()
        .zip(mean)
        .zip(std)
        .map(|((a, m), s)| {
            let z = (a - m) / s;
            -0.5 * (z * z + LN_2PI) - s.ln()
        })
        .sum()
}

/// Analytic gradient of `gaussian_log_density` with respect to (mean, std).
pub fn gaussian_log_density_grad(action: &[f64], mean: &[f64], std: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut d_mean = Vec::with_capacity(mean.len());
    let mut d_std = Vec::with_capacity(std.len());
    for ((a, m), s) in action.iter().zip(mean).zip(std) {
        let diff = a - m;
        d_mean.push(diff / (s * s));
        d_std.push((diff * diff - s * s) / (s * s * s));
    }
    (d_mean, d_std)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_are_simplex() {
        let p = softmax(&[1.0, 2.0, 3.0], 1.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[2] > p[1] && p[1] > p[0]);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = softmax(&[1.0, 2.0], 0.5);
        let b = softmax(&[101.0, 102.0], 0.5);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn categorical_rejects_bad_rows() {
        assert!(CategoricalPolicyTable::new(1, 2, vec![0.6, 0.6]).is_err());
        assert!(CategoricalPolicyTable::new(1, 2, vec![-0.1, 1.1]).is_err());
        assert!(CategoricalPolicyTable::new(1, 2, vec![0.25, 0.75]).is_ok());
    }

    #[test]
    fn gaussian_grad_matches_finite_differences() {
        let action = [0.7, -1.3];
        let mean = [0.2, 0.4];
        let std = [0.9, 1.7];
        let (dm, ds) = gaussian_log_density_grad(&action, &mean, &std);
        let h = 1e-6;
        for i in 0..2 {
            let mut mp = mean;
            let mut mm = mean;
            mp[i] += h;
            mm[i] -= h;
            let fd = (gaussian_log_density(&action, &mp, &std)
                - gaussian_log_density(&action, &mm, &std))
                / (2.0 * h);
            assert!((fd - dm[i]).abs() / dm[i].abs().max(1.0) < 1e-5);

            let mut sp = std;
            let mut sm = std;
            sp[i] += h;
            sm[i] -= h;
            let fd = (gaussian_log_density(&action, &mean, &sp)
                - gaussian_log_density(&action, &mean, &sm))
                / (2.0 * h);
            assert!((fd - ds[i]).abs() / ds[i].abs().max(1.0) < 1e-5);
        }
    }

    #[test]
    fn sigma_clamp_holds_after_nudge() {
        let mut t = GaussianPolicyTable::new(2, 1);
        t.nudge_cell(0, &[0.0], &[-5.0], 0.0);
        assert_eq!(t.std(0)[0], SIGMA_MIN);
    }
}
