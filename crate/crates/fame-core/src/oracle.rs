//! Independent verification routes for every closed-form update.
//!
//! Each integration rule has a brute-force batch counterpart here that
//! recomputes the minimizer directly from all stored per-task inputs, plus
//! numeric routes (gradient ascent for the softmax-KL MLE, inverse-CDF
//! quadrature for the Wasserstein closed form). Nothing in this module
//! calls the incremental implementations it checks.

use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::buffers::{MetaBuffer, MetaRecord};
use crate::distance::VisitationWeights;
use crate::error::{FameError, Result};
use crate::fast::QTable;
use crate::meta::{integrate_policy_wd, integrate_q_l2, integrate_softmax_kl, MetaState};
use crate::policy::{softmax, CategoricalPolicyTable, GaussianPolicyTable, SIGMA_MIN};
use crate::rng::stream;

/// Batch minimizer of the weighted-ℓ2 objective:
/// per (s,a), Σ_i w_i Q_i / Σ_i w_i; entries with zero total weight carry
/// `fallback` (the meta initialization).
pub fn batch_q_weighted_average(
    tables: &[QTable],
    weights: &[VisitationWeights],
    fallback: f64,
) -> Result<Vec<f64>> {
    if tables.len() != weights.len() || tables.is_empty() {
        return Err(FameError::ContractViolation("one weight set per table".into()));
    }
    let len = tables[0].values().len();
    let mut num = vec![0.0; len];
    let mut den = vec![0.0; len];
    for (q, w) in tables.iter().zip(weights) {
        let sa = w.state_action_weights().ok_or_else(|| {
            FameError::ContractViolation("batch l2 needs state-action weights".into())
        })?;
        for i in 0..len {
            num[i] += sa[i] * q.values()[i];
            den[i] += sa[i];
        }
    }
    Ok((0..len)
        .map(|i| if den[i] > 0.0 { num[i] / den[i] } else { fallback })
        .collect())
}

/// Batch minimizer of the summed squared-W2 objective: per state, the
/// visitation-weighted averages of the per-task means and standard
/// deviations. Returns (means, stds, total weight per cell).
pub fn batch_gaussian_wd(
    policies: &[GaussianPolicyTable],
    state_weights: &[VisitationWeights],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    if policies.len() != state_weights.len() || policies.is_empty() {
        return Err(FameError::ContractViolation("one weight set per policy".into()));
    }
    let n_cells = policies[0].n_cells();
    let dim = policies[0].action_dim();
    let mut mean = vec![0.0; n_cells * dim];
    let mut std = vec![0.0; n_cells * dim];
    let mut total = vec![0.0; n_cells];
    for (pi, w) in policies.iter().zip(state_weights) {
        for c in 0..n_cells {
            let mu = w.state(c);
            total[c] += mu;
            for i in 0..dim {
                mean[c * dim + i] += mu * pi.mean(c)[i];
                std[c * dim + i] += mu * pi.std(c)[i];
            }
        }
    }
    for c in 0..n_cells {
        if total[c] > 0.0 {
            for i in 0..dim {
                mean[c * dim + i] /= total[c];
                std[c * dim + i] /= total[c];
            }
        }
    }
    Ok((mean, std, total))
}

/// Numerically maximizes Σ_i E_{w_i}[log softmax(Q/τ)] by gradient ascent
/// on an unconstrained Q, starting from zero. Per state the objective is
/// concave, so this converges to the MLE the closed form claims.
pub fn numeric_softmax_kl_mle(
    pooled_sa_weights: &[f64],
    n_states: usize,
    n_actions: usize,
    tau: f64,
    iters: usize,
) -> CategoricalPolicyTable {
    let mut probs = Vec::with_capacity(n_states * n_actions);
    for s in 0..n_states {
        let w = &pooled_sa_weights[s * n_actions..(s + 1) * n_actions];
        let w_total: f64 = w.iter().sum();
        if w_total <= 0.0 {
            probs.extend(std::iter::repeat_n(1.0 / n_actions as f64, n_actions));
            continue;
        }
        let target: Vec<f64> = w.iter().map(|x| x / w_total).collect();
        let mut q = vec![0.0; n_actions];
        let step = 2.0 * tau;
        for _ in 0..iters {
            let p = softmax(&q, tau);
            let mut moved = 0.0f64;
            for a in 0..n_actions {
                let g = (target[a] - p[a]) / tau;
                q[a] += step * g;
                moved = moved.max((step * g).abs());
            }
            if moved < 1e-14 {
                break;
            }
        }
        probs.extend(softmax(&q, tau));
    }
    CategoricalPolicyTable::new(n_states, n_actions, probs).expect("softmax rows are valid")
}

/// Numerically maximizes the pooled Gaussian log-likelihood over (mean,
/// std) for one cell's weighted action samples, by gradient ascent with
/// analytic gradients of the log-density. Independent of the closed-form
/// weighted-moment route.
pub fn numeric_gaussian_mle(samples: &[(f64, Vec<f64>)], dim: usize, iters: usize) -> (Vec<f64>, Vec<f64>) {
    let total_w: f64 = samples.iter().map(|(w, _)| w).sum();
    let mut mean = vec![0.0; dim];
    let mut std = vec![1.0; dim];
    let mut lr = 0.5;
    let log_lik = |mean: &[f64], std: &[f64]| -> f64 {
        samples
            .iter()
            .map(|(w, a)| w * crate::policy::gaussian_log_density(a, mean, std))
            .sum::<f64>()
    };
    let mut best = log_lik(&mean, &std);
    for _ in 0..iters {
        let mut g_mean = vec![0.0; dim];
        let mut g_std = vec![0.0; dim];
        for (w, a) in samples {
            let (dm, ds) = crate::policy::gaussian_log_density_grad(a, &mean, &std);
            for i in 0..dim {
                g_mean[i] += w * dm[i];
                g_std[i] += w * ds[i];
            }
        }
        let trial_mean: Vec<f64> =
            mean.iter().zip(&g_mean).map(|(m, g)| m + lr * g / total_w).collect();
        let trial_std: Vec<f64> = std
            .iter()
            .zip(&g_std)
            .map(|(s, g)| (s + lr * g / total_w).max(SIGMA_MIN))
            .collect();
        let trial = log_lik(&trial_mean, &trial_std);
        if trial >= best {
            mean = trial_mean;
            std = trial_std;
            best = trial;
        } else {
            lr *= 0.5;
            if lr < 1e-12 {
                break;
            }
        }
    }
    (mean, std)
}

/// Squared 2-Wasserstein distance between 1-D Gaussians by inverse-CDF
/// quadrature: ∫₀¹ (F_p⁻¹(u) − F_q⁻¹(u))² du, integrated with Simpson's
/// rule over panels refined geometrically toward both endpoints.
pub fn w2_squared_quadrature(p: (f64, f64), q: (f64, f64)) -> f64 {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let f = |u: f64| -> f64 {
        let z = normal.inverse_cdf(u);
        let d = (p.0 + p.1 * z) - (q.0 + q.1 * z);
        d * d
    };
    // panel edges: 1e-10, 1e-9, ..., 0.1, 0.5, then mirrored
    let mut edges = vec![1e-10];
    for e in (-9..=-1).map(|k| 10f64.powi(k)) {
        edges.push(e);
    }
    edges.push(0.5);
    let mut total = 0.0;
    let simpson = |a: f64, b: f64, f: &dyn Fn(f64) -> f64| -> f64 {
        let n = 64;
        let h = (b - a) / n as f64;
        let mut acc = f(a) + f(b);
        for i in 1..n {
            let coef = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += coef * f(a + i as f64 * h);
        }
        acc * h / 3.0
    };
    for w in edges.windows(2) {
        total += simpson(w[0], w[1], &f);
        total += simpson(1.0 - w[1], 1.0 - w[0], &f);
    }
    total
}

/// Value of the weighted-ℓ2 objective Σ_i E_{w_i}[(Q_i − Q)²].
pub fn l2_objective(meta_q: &QTable, tables: &[QTable], weights: &[VisitationWeights]) -> f64 {
    let mut obj = 0.0;
    for (q, w) in tables.iter().zip(weights) {
        let sa = w.state_action_weights().expect("state-action weights");
        for (i, wi) in sa.iter().enumerate() {
            let d = q.values()[i] - meta_q.values()[i];
            obj += wi * d * d;
        }
    }
    obj
}

/// Negative pooled log-likelihood Σ_i E_{w_i}[−log π(a|s)]; the softmax-KL
/// integration minimizes this over π.
pub fn softmax_kl_objective(meta_pi: &CategoricalPolicyTable, weights: &[VisitationWeights]) -> f64 {
    let na = meta_pi.n_actions();
    let mut obj = 0.0;
    for w in weights {
        let sa = w.state_action_weights().expect("state-action weights");
        for (i, wi) in sa.iter().enumerate() {
            if *wi > 0.0 {
                obj -= wi * meta_pi.prob(i / na, i % na).max(f64::MIN_POSITIVE).ln();
            }
        }
    }
    obj
}

/// Value of the summed squared-W2 objective over per-task Gaussian policies.
pub fn wd_objective(
    meta: &GaussianPolicyTable,
    policies: &[GaussianPolicyTable],
    state_weights: &[VisitationWeights],
) -> f64 {
    let mut obj = 0.0;
    for (pi, w) in policies.iter().zip(state_weights) {
        for c in 0..meta.n_cells() {
            let mu = w.state(c);
            if mu > 0.0 {
                let d = crate::distance::w2_squared_diag_gaussian(
                    (pi.mean(c), pi.std(c)),
                    (meta.mean(c), meta.std(c)),
                )
                .expect("positive stds");
                obj += mu * d;
            }
        }
    }
    obj
}

/// Negative pooled log-likelihood of buffered continuous actions under the
/// meta Gaussian, tasks weighted equally.
pub fn policy_kl_objective(meta: &GaussianPolicyTable, buffer: &MetaBuffer) -> f64 {
    let mut obj = 0.0;
    for task_id in buffer.task_ids() {
        let records = buffer.task_records(task_id);
        let per = 1.0 / records.len() as f64;
        for rec in records {
            if let MetaRecord::Continuous { cell, action: Some(a) } = rec {
                obj -= per
                    * crate::policy::gaussian_log_density(a, meta.mean(*cell), meta.std(*cell));
            }
        }
    }
    obj
}

/// Named randomized-check suites runnable from the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleSuite {
    L2,
    Wd,
    Kl,
    W2ClosedForm,
}

impl OracleSuite {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "l2" => Ok(Self::L2),
            "wd" => Ok(Self::Wd),
            "kl" => Ok(Self::Kl),
            "w2-closed-form" => Ok(Self::W2ClosedForm),
            other => Err(FameError::InvalidConfig(format!(
                "unknown oracle suite '{other}' (expected l2, wd, kl, w2-closed-form)"
            ))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::L2 => "l2",
            Self::Wd => "wd",
            Self::Kl => "kl",
            Self::W2ClosedForm => "w2-closed-form",
        }
    }

    pub fn tolerance(&self) -> f64 {
        match self {
            Self::L2 | Self::Wd => 1e-9,
            Self::Kl => 1e-3,
            Self::W2ClosedForm => 1e-4,
        }
    }
}

/// Outcome of one randomized suite.
#[derive(Debug, Clone)]
pub struct OracleReport {
    pub suite: OracleSuite,
    pub instances: usize,
    pub max_deviation: f64,
    /// Seeds of failing instances, for reproduction.
    pub failing_seeds: Vec<u64>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.failing_seeds.is_empty()
    }
}

fn random_sa_weights<R: Rng + ?Sized>(
    ns: usize,
    na: usize,
    task: usize,
    full_support: bool,
    rng: &mut R,
) -> VisitationWeights {
    let mut w: Vec<f64> = (0..ns * na)
        .map(|_| {
            if full_support || rng.random::<f64>() < 0.8 {
                rng.random_range(0.05..1.0)
            } else {
                0.0
            }
        })
        .collect();
    if w.iter().all(|x| *x == 0.0) {
        w[0] = 1.0;
    }
    let z: f64 = w.iter().sum();
    for x in &mut w {
        *x /= z;
    }
    let z2: f64 = w.iter().sum();
    if let Some(first) = w.iter_mut().find(|x| **x > 0.0) {
        *first += 1.0 - z2;
    }
    VisitationWeights::from_state_action_weights(w, ns, na, task).expect("normalized")
}

fn random_state_weights<R: Rng + ?Sized>(ns: usize, task: usize, rng: &mut R) -> VisitationWeights {
    let mut w: Vec<f64> = (0..ns)
        .map(|_| if rng.random::<f64>() < 0.75 { rng.random_range(0.05..1.0) } else { 0.0 })
        .collect();
    if w.iter().all(|x| *x == 0.0) {
        w[0] = 1.0;
    }
    let z: f64 = w.iter().sum();
    for x in &mut w {
        *x /= z;
    }
    let z2: f64 = w.iter().sum();
    if let Some(first) = w.iter_mut().find(|x| **x > 0.0) {
        *first += 1.0 - z2;
    }
    VisitationWeights::from_state_weights(w, task).expect("normalized")
}

/// One randomized incremental-vs-batch check for the ℓ2 rule; returns the
/// max absolute deviation over weighted entries.
pub fn check_l2_instance(seed: u64) -> f64 {
    let mut rng = stream(seed, &[0x6f72, 1]);
    let ns = rng.random_range(2..=12);
    let na = rng.random_range(2..=5);
    let k = rng.random_range(1..=6);
    let mut meta = MetaState::new_q_l2(ns, na, 1.0);
    let mut tables = Vec::new();
    let mut weights = Vec::new();
    for task in 0..k {
        let q = QTable::from_values(
            ns,
            na,
            (0..ns * na).map(|_| rng.random_range(-5.0..5.0)).collect(),
            1.0,
        );
        let w = random_sa_weights(ns, na, task, true, &mut rng);
        integrate_q_l2(&mut meta, &q, &w).expect("valid integration");
        tables.push(q);
        weights.push(w);
    }
    let batch = batch_q_weighted_average(&tables, &weights, 0.0).expect("batch oracle");
    meta.as_q()
        .unwrap()
        .values()
        .iter()
        .zip(&batch)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// One randomized incremental-vs-batch check for the Wasserstein rule.
pub fn check_wd_instance(seed: u64) -> f64 {
    let mut rng = stream(seed, &[0x6f72, 2]);
    let n_cells = rng.random_range(2..=12);
    let dim = rng.random_range(1..=2);
    let k = rng.random_range(1..=6);
    let mut meta = MetaState::new_gaussian(n_cells, dim);
    let mut policies = Vec::new();
    let mut weights = Vec::new();
    for task in 0..k {
        let mut pi = GaussianPolicyTable::new(n_cells, dim);
        for c in 0..n_cells {
            let mean: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
            let std: Vec<f64> = (0..dim).map(|_| rng.random_range(0.05..3.0)).collect();
            pi.set_cell(c, &mean, &std);
        }
        let w = random_state_weights(n_cells, task, &mut rng);
        integrate_policy_wd(&mut meta, &pi, &w).expect("valid integration");
        policies.push(pi);
        weights.push(w);
    }
    let (b_mean, b_std, total) = batch_gaussian_wd(&policies, &weights).expect("batch oracle");
    let g = meta.as_gaussian().unwrap();
    let mut dev: f64 = 0.0;
    for c in 0..n_cells {
        if total[c] == 0.0 {
            continue;
        }
        for i in 0..dim {
            dev = dev.max((g.mean(c)[i] - b_mean[c * dim + i]).abs());
            dev = dev.max((g.std(c)[i] - b_std[c * dim + i]).abs());
        }
    }
    dev
}

/// One randomized closed-form-vs-numeric check for the softmax-KL MLE;
/// returns the max per-state total variation.
pub fn check_kl_instance(seed: u64) -> f64 {
    let mut rng = stream(seed, &[0x6f72, 3]);
    let ns = rng.random_range(2..=12);
    let na = rng.random_range(2..=5);
    let k = rng.random_range(1..=6);
    let mut meta = MetaState::new_softmax_kl(ns, na, 1.0, 0.0);
    let mut pooled = vec![0.0; ns * na];
    for task in 0..k {
        let w = random_sa_weights(ns, na, task, true, &mut rng);
        for (p, x) in pooled.iter_mut().zip(w.state_action_weights().unwrap()) {
            *p += x;
        }
        integrate_softmax_kl(&mut meta, &w).expect("valid integration");
    }
    let numeric = numeric_softmax_kl_mle(&pooled, ns, na, 1.0, 20_000);
    meta.as_categorical().unwrap().max_tv_distance(&numeric)
}

/// One randomized closed-form-vs-quadrature check for the W2 distance.
pub fn check_w2_instance(seed: u64) -> f64 {
    let mut rng = stream(seed, &[0x6f72, 4]);
    let p = (rng.random_range(-5.0..5.0), rng.random_range(0.1..5.0));
    let q = (rng.random_range(-5.0..5.0), rng.random_range(0.1..5.0));
    let closed =
        crate::distance::w2_squared_diag_gaussian((&[p.0], &[p.1]), (&[q.0], &[q.1])).unwrap();
    (closed - w2_squared_quadrature(p, q)).abs()
}

/// Runs `instances` randomized checks of one suite.
pub fn run_suite(suite: OracleSuite, instances: usize, base_seed: u64) -> OracleReport {
    let tol = suite.tolerance();
    let mut max_dev: f64 = 0.0;
    let mut failing = Vec::new();
    for i in 0..instances {
        let seed = base_seed.wrapping_add(i as u64);
        let dev = match suite {
            OracleSuite::L2 => check_l2_instance(seed),
            OracleSuite::Wd => check_wd_instance(seed),
            OracleSuite::Kl => check_kl_instance(seed),
            OracleSuite::W2ClosedForm => check_w2_instance(seed),
        };
        max_dev = max_dev.max(dev);
        if dev > tol {
            failing.push(seed);
        }
    }
    OracleReport { suite, instances, max_deviation: max_dev, failing_seeds: failing }
}
