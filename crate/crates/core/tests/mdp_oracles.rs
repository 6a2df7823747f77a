use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skippy_core::features::{fit_q_tables, FeatureTable};
use skippy_core::generators::{fig1, generate_instance, tabular, zero_range, InstanceSpec};
use skippy_core::geometry::{compute_constants, Mode, Preconditioning};
use skippy_core::linalg::Vector;
use skippy_core::mdp::{
    evaluate_policy_exact, optimal_values, rollout, step, ActionData, Mdp, MemorylessPolicy, RewardDist, StateId,
};
use skippy_core::oracles::{
    certificate_radius, enumerate_policies, linearity_certificate, parameter_samples, skip_convert, Origin,
};
use skippy_core::skippy::{
    bar_f_monte_carlo, bar_f_table, phi_bar_table, skip_tables, Guess, OptimisticParams,
};

#[test]
fn fig1_edges() {
    let (mdp, _) = fig1();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let s1 = StateId::initial();
    assert_eq!(step(&mdp, s1, 0, &mut rng).unwrap(), (Some(StateId::new(1, 0)), 1.0));
    let s3 = StateId::new(1, 1);
    assert_eq!(step(&mdp, s3, 1, &mut rng).unwrap(), (Some(StateId::new(2, 0)), 0.5));
}

#[test]
fn fig1_first_action_rollout() {
    let (mdp, _) = fig1();
    let tr = rollout(&mdp, &MemorylessPolicy::first_action(&mdp), 9).unwrap();
    let visited: Vec<(usize, usize, f64)> = tr.steps.iter().map(|s| (s.state.stage, s.state.index, s.reward)).collect();
    assert_eq!(visited, vec![(0, 0, 1.0), (1, 0, 0.0), (2, 0, 0.0)]);
    assert_eq!(tr.total_reward(), 1.0);
    assert_eq!(tr, rollout(&mdp, &MemorylessPolicy::first_action(&mdp), 9).unwrap());
}

#[test]
fn fig1_uniform_returns_one() {
    let (mdp, _) = fig1();
    let pol = MemorylessPolicy::uniform(&mdp);
    let n = 100_000;
    let mean: f64 = (0..n).map(|i| rollout(&mdp, &pol, i).unwrap().total_reward()).sum::<f64>() / n as f64;
    assert!((mean - 1.0).abs() <= 3e-3, "{mean}");
}

#[test]
fn fig1_values() {
    let (mdp, phi) = fig1();
    let v = evaluate_policy_exact(&mdp, &MemorylessPolicy::first_action(&mdp)).unwrap();
    assert_eq!(v.v_initial(), 1.0);
    assert_eq!(v.q(StateId::initial(), 1), 1.0);
    let (opt, _) = optimal_values(&mdp);
    assert_eq!(opt.v_initial(), 1.0);
    // every policy has θ_h = (1) with zero error
    let en = enumerate_policies(&mdp, &phi).unwrap();
    for p in &en.params {
        for (t, th) in p.theta.iter().enumerate() {
            if t < 2 {
                assert!((th[0] - 1.0).abs() < 1e-12, "stage {t}: {th}");
            }
        }
        assert!(p.error.iter().all(|&e| e < 1e-12));
    }
}

fn three_state_mdp(seed: u64) -> Mdp {
    let inst = generate_instance(&InstanceSpec::RandomLinear { d: 2, horizon: 3, actions: 2, states: 3, seed }).unwrap();
    inst.mdp
}

#[test]
fn exact_evaluation_matches_monte_carlo() {
    let mdp = three_state_mdp(4);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pol = MemorylessPolicy::random(&mdp, &mut rng);
    let exact = evaluate_policy_exact(&mdp, &pol).unwrap().v_initial();
    let n = 200_000u64;
    let returns: Vec<f64> = (0..n).map(|i| rollout(&mdp, &pol, i).unwrap().total_reward()).collect();
    let mean = returns.iter().sum::<f64>() / n as f64;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    assert!((mean - exact).abs() <= 4.0 * se, "mc {mean} exact {exact} se {se}");
}

#[test]
fn optimal_dominates_random_policies() {
    let mdp = three_state_mdp(8);
    let (opt, _) = optimal_values(&mdp);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let p = MemorylessPolicy::random(&mdp, &mut rng);
        assert!(opt.v_initial() - evaluate_policy_exact(&mdp, &p).unwrap().v_initial() >= -1e-10);
    }
}

#[test]
fn single_stage_optimum_is_best_mean() {
    let mdp = Mdp::new(
        1,
        3,
        vec![vec![vec![
            ActionData { next: vec![], reward: RewardDist::point(0.2) },
            ActionData { next: vec![], reward: RewardDist::bernoulli(0.7) },
            ActionData { next: vec![], reward: RewardDist::point(0.4) },
        ]]],
    )
    .unwrap();
    assert!((optimal_values(&mdp).0.v_initial() - 0.7).abs() < 1e-15);
    assert_eq!(mdp.deterministic_policy_count(), 3);
}

#[test]
fn perturbed_fig1_is_misspecified() {
    let (mdp, phi) = fig1();
    let mut stages: Vec<Vec<Vec<ActionData>>> = (0..3)
        .map(|t| mdp.stage_states(t).map(|s| (0..2).map(|a| mdp.action(s, a).clone()).collect()).collect())
        .collect();
    for a in &mut stages[1][0] {
        a.reward = RewardDist::point(0.3);
    }
    let changed = Mdp::new(3, 2, stages).unwrap();
    let en = enumerate_policies(&changed, &phi).unwrap();
    assert!(en.eta_hat() > 0.1, "{}", en.eta_hat());
}

#[test]
fn tabular_features_interpolate() {
    let (mdp, phi) = tabular(3, 2, 2, 5).unwrap();
    let en = enumerate_policies(&mdp, &phi).unwrap();
    assert!(en.eta_hat() < 1e-10);
    let v = evaluate_policy_exact(&mdp, &MemorylessPolicy::uniform(&mdp)).unwrap();
    let p = fit_q_tables(&phi, &v).unwrap();
    for s in mdp.states() {
        for a in 0..2 {
            let nz = phi.phi(s, a).iter().position(|&x| x != 0.0).unwrap();
            assert!((p.theta[s.stage][nz] - v.q(s, a)).abs() < 1e-9);
        }
    }
}

fn constants_for(phi: &FeatureTable, horizon: usize) -> skippy_core::geometry::ConstantSet {
    compute_constants(phi.dim, horizon, 0.1, 0.1, phi.l1, phi.l2, Mode::Practical, None).unwrap()
}

#[test]
fn fig1_converts_at_alpha_001() {
    let (mdp, phi) = fig1();
    let samples = parameter_samples(&mdp, &phi, 1 << 20, 16, 0).unwrap();
    let ranges = samples.range_table(&phi);
    assert!(ranges.iter().flatten().all(|&r| r == 0.0));
    let conv = skip_convert(&mdp, &phi, 0.01, &ranges).unwrap();
    assert_eq!(conv.origin[0], vec![Origin::Copy(StateId::initial())]);
    let over = conv.index_of(1, Origin::Over).unwrap();
    for a in 0..2 {
        let data = conv.mdp.action(StateId::initial(), a);
        assert_eq!(data.next[over], 1.0);
        assert!((data.reward.mean() * conv.reward_scale - 1.0).abs() < 1e-12);
    }
    let c = constants_for(&phi, 3);
    let cert = linearity_certificate(&conv, 8, 8, certificate_radius(phi.l2, 3, 1, c.d0, 0.01), 0).unwrap();
    assert!(cert.kappa_hat <= 1e-9);
}

#[test]
fn all_low_range_collapses_to_one_step() {
    let (mdp, phi) = zero_range(4, 2, 3, 1).unwrap();
    let samples = parameter_samples(&mdp, &phi, 1 << 20, 16, 0).unwrap();
    let conv = skip_convert(&mdp, &phi, 0.01, &samples.range_table(&phi)).unwrap();
    assert_eq!(conv.origin[0].len(), 1);
    for stage in conv.origin.iter().skip(1) {
        assert!(stage.iter().all(|o| *o == Origin::Over));
    }
}

#[test]
fn padded_linear_converts_to_a_linear_mdp() {
    let inst = generate_instance(&InstanceSpec::PaddedLinear { d: 2, horizon: 5, chain: 2, actions: 2, states: 3, seed: 0 })
        .unwrap();
    assert!(inst.samples.eta_hat <= 1e-9);
    let c = constants_for(&inst.phi, 5);
    let conv = skip_convert(&inst.mdp, &inst.phi, c.alpha, &inst.samples.range_table(&inst.phi)).unwrap();
    let r = certificate_radius(inst.phi.l2, 5, 2, c.d0, c.alpha);
    let cert = linearity_certificate(&conv, 16, 16, r, 3).unwrap();
    assert!(cert.kappa_hat <= 1e-6, "{cert:?}");
}

#[test]
fn no_low_range_conversion_keeps_every_state() {
    let inst = generate_instance(&InstanceSpec::RandomLinear { d: 2, horizon: 3, actions: 2, states: 2, seed: 11 }).unwrap();
    let ranges = inst.samples.range_table(&inst.phi);
    let alpha = ranges.iter().flatten().cloned().fold(f64::INFINITY, f64::min) / 2.0;
    assert!(alpha > 0.0);
    let conv = skip_convert(&inst.mdp, &inst.phi, alpha, &ranges).unwrap();
    assert!(conv.kept.iter().flatten().all(|&k| k));
    let c = constants_for(&inst.phi, 3);
    let cert = linearity_certificate(&conv, 8, 8, certificate_radius(inst.phi.l2, 3, 2, c.d0, alpha), 1).unwrap();
    let bound = inst.samples.eta_hat * (1.0 + 5.0 * 3.0 * 2f64.sqrt() * 2.0 * c.d0 as f64 / alpha) + 1e-6;
    assert!(cert.kappa_hat <= bound, "{} > {bound}", cert.kappa_hat);
}

#[test]
fn bar_f_matches_monte_carlo() {
    let inst = generate_instance(&InstanceSpec::PaddedLinear { d: 2, horizon: 4, chain: 1, actions: 2, states: 2, seed: 3 })
        .unwrap();
    let (mdp, phi) = (&inst.mdp, &inst.phi);
    let c = constants_for(phi, 4);
    let q = Preconditioning::new(4, 2, phi.l2, c.l3);
    let designs = skippy_core::oracles::stage_designs(&inst.samples.thetas(), &q, c.d0).unwrap();
    let guess = Guess::correct(&designs, c.d0);
    let theta = OptimisticParams { theta: (0..4).map(|t| Vector::from_element(2, 0.3 + 0.1 * t as f64)).collect() };
    let tables = skip_tables(phi, &guess, &theta, &q, 0.1);
    let pb = phi_bar_table(phi, &q);
    let exact = bar_f_table(mdp, &tables, &pb).unwrap();
    for s in [StateId::new(1, 0), StateId::new(2, 1)] {
        let (mean, se) = bar_f_monte_carlo(mdp, &tables, &pb, s, 100_000, 17).unwrap();
        let want = &exact[s.stage][s.index];
        for (i, m) in mean.iter().enumerate() {
            assert!((m - want[i]).abs() <= 4.0 * se[i] + 1e-12, "{s:?} entry {i}: {m} vs {}", want[i]);
        }
    }
}
