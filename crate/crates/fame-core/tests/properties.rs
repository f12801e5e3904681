//! Property tests for the library invariants that quantify over inputs.

use proptest::prelude::*;

use fame_core::gridworld::{generate_gridworld, GridworldSpec};
use fame_core::mdp::ROW_SUM_TOL;
use fame_core::*;

fn normalized_weights(raw: Vec<f64>) -> Vec<f64> {
    let z: f64 = raw.iter().sum();
    let mut w: Vec<f64> = raw.iter().map(|x| x / z).collect();
    let z2: f64 = w.iter().sum();
    w[0] += 1.0 - z2;
    w
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Generated transition tensors are row-stochastic and generation is a
    /// pure function of (spec, seed).
    #[test]
    fn gridworlds_are_row_stochastic_and_pure(
        seed in 0u64..500,
        slip in 0.0..0.45f64,
        density in 0.0..0.35f64,
        w in 2usize..8,
        h in 2usize..8,
    ) {
        let spec = GridworldSpec {
            width: w,
            height: h,
            slip,
            wall_density: density,
            ..Default::default()
        };
        let a = generate_gridworld(&spec, seed);
        let b = generate_gridworld(&spec, seed);
        match (a, b) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(&a, &b);
                for s in 0..a.n_states() {
                    for act in 0..a.n_actions() {
                        let sum: f64 = a.transition_row(s, act).iter().sum();
                        prop_assert!((sum - 1.0).abs() <= ROW_SUM_TOL);
                        prop_assert!(a.transition_row(s, act).iter().all(|p| *p >= 0.0));
                    }
                }
            }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "generation determinism broke"),
        }
    }

    /// cf_q under squared-l2 is invariant to jointly permuting (s,a) pairs
    /// with their weights.
    #[test]
    fn cf_q_is_permutation_invariant(
        raw in proptest::collection::vec(0.01..1.0f64, 12),
        qa in proptest::collection::vec(-3.0..3.0f64, 12),
        qb in proptest::collection::vec(-3.0..3.0f64, 12),
        perm_seed in 0u64..1000,
    ) {
        let (ns, na) = (4, 3);
        let w = normalized_weights(raw);
        let spec = DivergenceSpec::default();

        let base = {
            let qa = QTable::from_values(ns, na, qa.clone(), 1.0);
            let qb = QTable::from_values(ns, na, qb.clone(), 1.0);
            let wv = VisitationWeights::from_state_action_weights(w.clone(), ns, na, 0).unwrap();
            cf_q(&qa, &qb, &wv, &spec).unwrap()
        };

        // deterministic Fisher-Yates over the flat (s,a) index
        let mut order: Vec<usize> = (0..12).collect();
        let mut state = perm_seed.wrapping_add(1);
        for i in (1..order.len()).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (state >> 33) as usize % (i + 1));
        }
        let permute = |v: &[f64]| -> Vec<f64> { order.iter().map(|i| v[*i]).collect() };

        let permuted = {
            let qa = QTable::from_values(ns, na, permute(&qa), 1.0);
            let qb = QTable::from_values(ns, na, permute(&qb), 1.0);
            let wv = VisitationWeights::from_state_action_weights(permute(&w), ns, na, 0)
                .unwrap();
            cf_q(&qa, &qb, &wv, &spec).unwrap()
        };
        prop_assert!((base - permuted).abs() <= 1e-12);
    }

    /// Softmax-KL meta rows remain simplex-valued after any update stream,
    /// and the batch solution is order-robust.
    #[test]
    fn softmax_kl_rows_stay_simplex_and_order_robust(
        raws in proptest::collection::vec(proptest::collection::vec(0.01..1.0f64, 8), 1..5),
    ) {
        let (ns, na) = (2, 4);
        let weights: Vec<VisitationWeights> = raws
            .iter()
            .enumerate()
            .map(|(task, raw)| {
                VisitationWeights::from_state_action_weights(
                    normalized_weights(raw.clone()),
                    ns,
                    na,
                    task,
                )
                .unwrap()
            })
            .collect();

        let mut fwd = MetaState::new_softmax_kl(ns, na, 1.0, 1e-3);
        for w in &weights {
            integrate_softmax_kl(&mut fwd, w).unwrap();
            let pi = fwd.as_categorical().unwrap();
            for s in 0..ns {
                let sum: f64 = pi.row(s).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
                prop_assert!(pi.row(s).iter().all(|p| *p >= 0.0));
            }
        }
        let mut rev = MetaState::new_softmax_kl(ns, na, 1.0, 1e-3);
        for w in weights.iter().rev() {
            integrate_softmax_kl(&mut rev, w).unwrap();
        }
        let tv = fwd
            .as_categorical()
            .unwrap()
            .max_tv_distance(rev.as_categorical().unwrap());
        prop_assert!(tv <= 1e-10);
    }

    /// Wasserstein integration is order-robust in the batch sense.
    #[test]
    fn wd_batch_solution_is_order_robust(
        params in proptest::collection::vec((-2.0..2.0f64, 0.05..2.0f64), 9),
        raw in proptest::collection::vec(0.01..1.0f64, 9),
    ) {
        let n_cells = 3;
        let tasks = 3;
        let mut policies = Vec::new();
        let mut weights = Vec::new();
        for task in 0..tasks {
            let mut pi = GaussianPolicyTable::new(n_cells, 1);
            for c in 0..n_cells {
                let (m, s) = params[task * n_cells + c];
                pi.set_cell(c, &[m], &[s]);
            }
            policies.push(pi);
            let w = normalized_weights(raw[task * n_cells..(task + 1) * n_cells].to_vec());
            weights.push(VisitationWeights::from_state_weights(w, task).unwrap());
        }
        let mut fwd = MetaState::new_gaussian(n_cells, 1);
        for (pi, w) in policies.iter().zip(&weights) {
            integrate_policy_wd(&mut fwd, pi, w).unwrap();
        }
        let mut rev = MetaState::new_gaussian(n_cells, 1);
        for (pi, w) in policies.iter().zip(&weights).rev() {
            integrate_policy_wd(&mut rev, pi, w).unwrap();
        }
        let diff = fwd
            .as_gaussian()
            .unwrap()
            .max_abs_param_diff(rev.as_gaussian().unwrap());
        prop_assert!(diff <= 1e-9);
    }
}
