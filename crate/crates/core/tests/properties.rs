use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skippy_core::generators::{generate_instance, InstanceSpec};
use skippy_core::geometry::design::range_q;
use skippy_core::geometry::{compute_constants, q_from_sequence, Mode, Preconditioning};
use skippy_core::learner::{matrix_lse, predict_matrix, DataStore, LsState, Record};
use skippy_core::linalg::{top_eigenpair, Matrix, Vector};
use skippy_core::oracles::stage_designs;
use skippy_core::skippy::{
    e_terms, e_to_all, e_to_probability_form, estimated_value, estimated_value_by_enumeration, lsq_target,
    phi_bar_table, range_q_guess, run_skippy_policy, skip_tables, suffix_points, with_theta, Guess, OptimisticParams,
    SuffixPoint,
};

fn suffix_strategy(max_len: usize, horizon: f64) -> impl Strategy<Value = Vec<SuffixPoint>> {
    prop::collection::vec(
        (prop_oneof![Just(0.0), Just(1.0), 0.0..=1.0f64], 0.0..=horizon, 0.0..=1.0f64)
            .prop_map(|(tau, c, reward)| SuffixPoint { tau, c, reward }),
        0..=max_len,
    )
}

proptest! {
    #[test]
    fn correction_terms_telescope(s in suffix_strategy(10, 10.0)) {
        let to = e_to_all(&s);
        let e = e_terms(&s);
        for i in 0..s.len() {
            prop_assert!((e[i] - (to[i] - to[i + 1])).abs() <= 1e-10);
        }
        prop_assert!((e_to_probability_form(&s) - to[0]).abs() <= 1e-10);
        prop_assert!((estimated_value(&s) - estimated_value_by_enumeration(&s)).abs() <= 1e-10);
    }

    #[test]
    fn lsq_target_in_range(s in suffix_strategy(8, 8.0)) {
        prop_assume!(!s.is_empty());
        let h = 8.0;
        let y = lsq_target(&s);
        prop_assert!((-1e-12..=2.0 * h + 1e-12).contains(&y), "{}", y);
    }

    #[test]
    fn append_matches_rebuild(seed in 0u64..1000, d in 1usize..5, n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut q = Preconditioning::new(1, d, 1.5, 100.0);
        for _ in 0..n {
            let w = Vector::from_fn(d, |_, _| rng.gen_range(-2.0..2.0));
            q.append_direction(0, &w).unwrap();
        }
        let rebuilt = q_from_sequence(&q.directions[0], 1.5, d);
        prop_assert!((&rebuilt - q.q(0)).norm() <= 1e-9);
        let id = q.q(0) * q.q(0) * q.base(0);
        prop_assert!((id - Matrix::identity(d, d)).norm() <= 1e-9);
    }

    #[test]
    fn top_eigenvalue_dominates_random_directions(seed in 0u64..1000, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = Matrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
        let m = (&b + b.transpose()) * 0.5;
        let (x, v) = top_eigenpair(&m);
        prop_assert!((v.norm() - 1.0).abs() < 1e-10);
        prop_assert!((v.dot(&(&m * &v)) - x).abs() < 1e-9);
        let mut best = f64::NEG_INFINITY;
        for _ in 0..2000 {
            let u = Vector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
            let u = &u / u.norm();
            best = best.max(u.dot(&(&m * &u)));
        }
        prop_assert!(best <= x + 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn phi_bar_is_unit_or_zero(seed in 0u64..500) {
        let inst = generate_instance(&InstanceSpec::PaddedLinear { d: 3, horizon: 4, chain: 1, actions: 3, states: 2, seed }).unwrap();
        let q = Preconditioning::new(4, 3, inst.phi.l2, 50.0);
        for stage in phi_bar_table(&inst.phi, &q) {
            for v in stage {
                let n = v.norm();
                prop_assert!(n.abs() < 1e-12 || (n - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn correct_guess_reproduces_range_q(seed in 0u64..500) {
        let inst = generate_instance(&InstanceSpec::PaddedLinear { d: 2, horizon: 3, chain: 1, actions: 2, states: 2, seed }).unwrap();
        let c = compute_constants(2, 3, 0.1, 0.1, inst.phi.l1, inst.phi.l2, Mode::Practical, None).unwrap();
        let q = Preconditioning::new(3, 2, inst.phi.l2, c.l3);
        let designs = stage_designs(&inst.samples.thetas(), &q, c.d0).unwrap();
        let guess = Guess::correct(&designs, c.d0);
        for s in inst.mdp.states().filter(|s| s.stage > 0) {
            let a = range_q_guess(inst.phi.actions(s), &guess.stages[s.stage], q.q(s.stage));
            let b = range_q(inst.phi.actions(s), &designs[s.stage]);
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b), "{} vs {}", a, b);
        }
    }

    #[test]
    fn landing_counts_follow_tau(seed in 0u64..500, k in 1usize..=4) {
        let inst = generate_instance(&InstanceSpec::ZeroRange { horizon: 4, actions: 2, states: 2, seed }).unwrap();
        let theta = OptimisticParams::zeros(4, inst.phi.dim);
        let never: Vec<Vec<f64>> = (0..4).map(|t| vec![if t == 0 { 1.0 } else { 0.0 }; inst.mdp.stage_size(t)]).collect();
        let tables = with_theta(&inst.phi, never, &theta);
        let tr = run_skippy_policy(&inst.mdp, &tables, k, seed).unwrap();
        prop_assert_eq!(tr.landing(1), Some(0));
        prop_assert!((2..=4).all(|j| tr.landing(j).is_none()));
        prop_assert!(tr.steps()[1..].iter().all(|s| s.action == 0));

        let always: Vec<Vec<f64>> = (0..4).map(|t| vec![1.0; inst.mdp.stage_size(t)]).collect();
        let tables = with_theta(&inst.phi, always, &theta);
        let tr = run_skippy_policy(&inst.mdp, &tables, k, seed).unwrap();
        for j in 1..=4 {
            prop_assert_eq!(tr.landing(j), Some(j - 1));
        }
        // past the budget only action 0 is played
        prop_assert!(tr.steps()[k..].iter().all(|s| s.action == 0));
        prop_assert_eq!(tr, run_skippy_policy(&inst.mdp, &tables, k, seed).unwrap());
    }

    #[test]
    fn matrix_lse_two_routes(seed in 0u64..500) {
        let inst = generate_instance(&InstanceSpec::PaddedLinear { d: 2, horizon: 4, chain: 1, actions: 2, states: 2, seed }).unwrap();
        let (mdp, phi) = (&inst.mdp, &inst.phi);
        let q = Preconditioning::new(4, 2, phi.l2, 50.0);
        let guess = Guess::zeros(4, 16, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = OptimisticParams { theta: (0..4).map(|_| Vector::from_fn(2, |_, _| rng.gen_range(0.0..2.0))).collect() };
        let mut tables = skip_tables(phi, &guess, &theta, &q, 0.1);
        for t in 1..4 {
            for x in tables.tau[t].iter_mut() {
                *x = rng.gen_range(0.0..1.0);
            }
        }
        let pb = phi_bar_table(phi, &q);
        let mut data = DataStore::new(4);
        for e in 0..30u64 {
            let tr = run_skippy_policy(mdp, &tables, 1 + (e % 2) as usize, seed * 100 + e).unwrap();
            data.push(Record::new(phi, 1, e, tr));
        }
        let ls = LsState::new(&data, 1.0, 2);
        let x = Vector::from_fn(2, |_, _| rng.gen_range(0.0..1.0));
        for t in 0..4 {
            for i in t + 1..4 {
                let pred = predict_matrix(&matrix_lse(&data, &ls, &tables, &pb, t, i), &x);
                let mut want = Matrix::zeros(2, 2);
                for &r in &data.members[t] {
                    let rec = &data.records[r];
                    let steps = rec.traj.steps();
                    let e = e_terms(&suffix_points(steps, &tables, i))[0];
                    let p = &pb[i][steps[i].state.index];
                    let w = x.dot(&(&ls.x_inv[t] * rec.phi.as_ref().unwrap()));
                    want += p * p.transpose() * (e * w);
                }
                prop_assert!((pred - want).norm() <= 1e-9);
            }
        }
    }
}
