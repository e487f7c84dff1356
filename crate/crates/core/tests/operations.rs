use fedsarsa_core::markov::check_ergodic;
use fedsarsa_core::mdp::{kernel_distance, reward_distance, reward_heterogeneity};
use fedsarsa_core::nalgebra::DVector;
use fedsarsa_core::oracle::{
    convergence_constants, monte_carlo_q, ConstantSettings, BoundSettings,
};
use fedsarsa_core::rng::{agent_stream, model_stream};
use fedsarsa_core::sarsa::td_operators;
use fedsarsa_core::*;
use rand::Rng;

fn random_policy(ns: usize, na: usize, seed: u64) -> PolicyTable {
    let mut rng = model_stream(seed);
    let mut probs = Vec::new();
    for _ in 0..ns {
        let row: Vec<f64> = (0..na).map(|_| rng.random::<f64>() + 0.1).collect();
        let total: f64 = row.iter().sum();
        probs.extend(row.iter().map(|x| x / total));
    }
    PolicyTable::new(ns, na, probs).unwrap()
}

fn with_rewards(mdp: &Mdp, values: Vec<f64>) -> Mdp {
    let rewards = RewardTable::new(mdp.num_states(), mdp.num_actions(), mdp.reward_cap(), values).unwrap();
    Mdp::new(mdp.kernel().clone(), rewards, mdp.discount()).unwrap()
}

#[test]
fn kernel_distance_is_max_over_initial_distributions() {
    let p = build_shifted_mdp(3, 2, 10, 11, 0.5, 1.0).unwrap();
    let q = build_shifted_mdp(3, 2, 20, 21, 0.5, 1.0).unwrap();
    let d = kernel_distance(p.kernel(), q.kernel()).unwrap();
    // ‖xP_a − xQ_a‖₁ over a grid on the simplex, vertices included
    let mut best = 0.0f64;
    let steps = 20;
    for i in 0..=steps {
        for j in 0..=steps - i {
            let x = [i as f64 / steps as f64, j as f64 / steps as f64, (steps - i - j) as f64 / steps as f64];
            for a in 0..2 {
                let mut l1 = 0.0;
                for s2 in 0..3 {
                    let diff: f64 = (0..3).map(|s| x[s] * (p.kernel().prob(a, s, s2) - q.kernel().prob(a, s, s2))).sum();
                    l1 += diff.abs();
                }
                best = best.max(l1);
            }
        }
    }
    assert!((best - d).abs() < 1e-12, "{best} vs {d}");
}

#[test]
fn reward_distance_examples() {
    let m = build_shifted_mdp(4, 2, 1, 2, 0.5, 3.0).unwrap();
    assert_eq!(reward_distance(m.rewards(), m.rewards()).unwrap(), 0.0);
    let zero = with_rewards(&m, vec![0.0; 8]);
    let full = with_rewards(&m, vec![3.0; 8]);
    assert_eq!(reward_distance(zero.rewards(), full.rewards()).unwrap(), 1.0);

    let fam = perturb_family(&m, 4, 0.3, 0.7, 9).unwrap();
    let mut scan = 0.0f64;
    for i in fam.agents() {
        for j in fam.agents() {
            for s in 0..4 {
                for a in 0..2 {
                    scan = scan.max((i.rewards().get(s, a) - j.rewards().get(s, a)).abs() / 3.0);
                }
            }
        }
    }
    assert_eq!(reward_heterogeneity(&fam).unwrap(), scan);
    assert!(scan <= 0.7);
}

#[test]
fn central_chain_ergodic_when_agents_are() {
    let nominal = build_shifted_mdp(6, 3, 4, 5, 0.5, 1.0).unwrap();
    let fam = perturb_family(&nominal, 5, 1.5, 0.0, 6).unwrap();
    let pi = random_policy(6, 3, 7);
    for mdp in fam.agents() {
        check_ergodic(&mdp.induced_chain(&pi).unwrap(), 6).unwrap();
    }
    check_ergodic(&fam.central().induced_chain(&pi).unwrap(), 6).unwrap();
}

#[test]
fn mean_path_matrix_matches_steady_state_average() {
    let mdp = build_shifted_mdp(5, 3, 31, 32, 0.8, 1.0).unwrap();
    let features = FeatureMap::tiled(5, 3, 2, 2).unwrap();
    let policy = random_policy(5, 3, 33);
    let op = PolicyImprovementOp::Fixed(policy.clone());
    let ops = mean_path_ops(&mdp, &features, &policy).unwrap();
    let d = features.dim();

    let schedule = StepSchedule::constant(0.0).unwrap();
    let mut agent = AgentState::new(0, 34, Parameter::zeros(d), &mdp, &features, &op).unwrap();
    for _ in 0..1_000 {
        local_step(&mut agent, &mdp, &features, &op, &schedule);
    }
    // batch means absorb the Markov correlation
    let (batches, per_batch) = (100usize, 10_000usize);
    let mut means = vec![vec![0.0; d * d]; batches];
    for batch in means.iter_mut() {
        for _ in 0..per_batch {
            let obs = local_step(&mut agent, &mdp, &features, &op, &schedule);
            let (a, _) = td_operators(&features, &obs, mdp.discount());
            for (m, x) in batch.iter_mut().zip(&a) {
                *m += x / per_batch as f64;
            }
        }
    }
    for k in 0..d * d {
        let xs: Vec<f64> = means.iter().map(|b| b[k]).collect();
        let mean = xs.iter().sum::<f64>() / batches as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (batches - 1) as f64;
        let se = (var / batches as f64).sqrt();
        let exact = ops.a_bar[(k / d, k % d)];
        assert!((mean - exact).abs() <= 3.0 * se + 1e-12, "entry {k}: {mean} vs {exact} (se {se})");
    }
}

#[test]
fn mean_path_matrix_is_negative_definite() {
    let mdp = build_shifted_mdp(8, 4, 41, 42, 0.9, 1.0).unwrap();
    let features = FeatureMap::tiled(8, 4, 4, 2).unwrap();
    let op = PolicyImprovementOp::softmax(2.0).unwrap();
    let theta = Parameter::new((0..8).map(|i| i as f64 * 0.3 - 1.0).collect());
    let ops = mean_path_ops(&mdp, &features, &improve_policy(&op, &features, &theta).unwrap()).unwrap();
    let mut rng = model_stream(43);
    for _ in 0..100 {
        let x = DVector::from_iterator(8, (0..8).map(|_| rng.random::<f64>() * 2.0 - 1.0));
        assert!(x.dot(&(&ops.a_bar * &x)) < 0.0);
    }
}

#[test]
fn zero_rewards_give_zero_solution() {
    let mdp = with_rewards(&build_shifted_mdp(5, 2, 1, 2, 0.6, 1.0).unwrap(), vec![0.0; 10]);
    let features = FeatureMap::tiled(5, 2, 3, 2).unwrap();
    let ops = mean_path_ops(&mdp, &features, &PolicyTable::uniform(5, 2)).unwrap();
    assert!(ops.b_bar.iter().all(|&x| x == 0.0));
    let theta = td0_fixed_point(&ops).unwrap();
    assert!(theta.norm() == 0.0);

    let mut rng = agent_stream(1, 0);
    let mc = monte_carlo_q(&mdp, &PolicyTable::uniform(5, 2), 2, 1, 100, 20, &mut rng).unwrap();
    assert_eq!(mc.mean, 0.0);
}

#[test]
fn myopic_monte_carlo_is_the_reward() {
    let mdp = build_shifted_mdp(5, 2, 1, 2, 0.0, 1.0).unwrap();
    let mut rng = agent_stream(1, 0);
    let mc = monte_carlo_q(&mdp, &PolicyTable::uniform(5, 2), 3, 1, 50, 10, &mut rng).unwrap();
    assert_eq!(mc.mean, mdp.rewards().get(3, 1));
    assert_eq!(mc.std_error, 0.0);
}

#[test]
fn direct_solve_residual_is_tiny() {
    let mdp = build_shifted_mdp(30, 5, 1, 2, 0.95, 10.0).unwrap();
    let features = FeatureMap::tiled(30, 5, 6, 5).unwrap();
    let ops = mean_path_ops(&mdp, &features, &random_policy(30, 5, 3)).unwrap();
    let theta = td0_fixed_point(&ops).unwrap();
    assert!(ops.residual(&theta) <= 1e-10);
}

#[test]
fn long_decaying_run_lands_on_fixed_point() {
    let mdp = build_shifted_mdp(10, 2, 51, 52, 0.5, 1.0).unwrap();
    let features = FeatureMap::tiled(10, 2, 2, 2).unwrap();
    let op = PolicyImprovementOp::softmax(1.0).unwrap();
    let d = features.dim();
    let fp = sarsa_fixed_point(&mdp, &features, &op, &Parameter::zeros(d), FixedPointOptions::default()).unwrap();
    let (w, _) = fedsarsa_core::oracle::curvature_at(&mdp, &features, &op, &fp.theta).unwrap();
    let schedule = StepSchedule::linear_decay_min_offset(w, 1).unwrap();
    let runs: Vec<Parameter> = (0..8)
        .map(|seed| run_single_agent(&mdp, &features, &op, &schedule, 400_000, seed, Parameter::zeros(d)).unwrap())
        .collect();
    let mean: Vec<f64> = (0..d).map(|k| runs.iter().map(|r| r.weights[k]).sum::<f64>() / 8.0).collect();
    let spread: f64 = runs.iter().map(|r| r.squared_distance(&Parameter::new(mean.clone()))).sum::<f64>() / 7.0;
    let gap = Parameter::new(mean).distance(&fp.theta);
    assert!(gap <= 3.0 * (spread / 8.0).sqrt() + 1e-8, "gap {gap}, spread {spread}");
}

#[test]
fn sigma_and_lambda_from_explicit_mixing() {
    let nominal = build_shifted_mdp(6, 2, 1, 2, 0.5, 1.0).unwrap();
    let fam = perturb_family(&nominal, 3, 0.0, 0.0, 3).unwrap();
    let features = FeatureMap::full_indicator(6, 2).unwrap();
    let op = PolicyImprovementOp::softmax(5.0).unwrap();
    let fp = sarsa_fixed_point(&nominal, &features, &op, &Parameter::zeros(12), FixedPointOptions::default())
        .unwrap()
        .theta;
    let settings = ConstantSettings {
        mixing: MixingConstants::new(1.0, 0.5).unwrap(),
        alpha0: 0.01,
        sync_period: 10,
        projection_radius: 10.0,
    };
    let c = convergence_constants(&fam, &features, &op, &vec![fp; 4], settings).unwrap();
    assert_eq!(c.sigma_prime, 2.0);
    assert_eq!(c.sigma, 4.0);
    assert_eq!(c.lambda_het, 0.0);

    // Λ = R ε_r + H σ ε_p is nondecreasing in ε_p at fixed w
    let mut last = 0.0;
    for k in 0..=20 {
        let eps_p = k as f64 * 0.1;
        let bound = (c.eps_r * nominal.reward_cap() + c.h * c.sigma * eps_p) / c.w;
        assert!(bound >= last);
        last = bound;
    }
}

#[test]
fn tabular_fixed_policy_family_respects_bound() {
    let nominal = build_shifted_mdp(10, 4, 61, 62, 0.5, 1.0).unwrap();
    let features = FeatureMap::full_indicator(10, 4).unwrap();
    let policy = random_policy(10, 4, 63);
    let op = PolicyImprovementOp::Fixed(policy.clone());
    for (k, eps) in [0.05, 0.2, 0.8].into_iter().enumerate() {
        let fam = perturb_family(&nominal, 3, eps, eps, 64 + k as u64).unwrap();
        let report = verify_perturbation_bound(&fam, &features, &op, BoundSettings::default()).unwrap();
        // fixed points of a fixed policy are plain linear solves
        for (mdp, theta) in fam.agents().iter().zip(&report.fixed_points) {
            let direct = td0_fixed_point(&mean_path_ops(mdp, &features, &policy).unwrap()).unwrap();
            assert!(direct.distance(theta) < 1e-9);
        }
        assert!(report.passed, "eps {eps}: {} > {}", report.observed, report.bound);
        assert_eq!(report.lipschitz_estimate, 0.0);
    }
}

#[test]
fn more_agents_lower_the_plateau() {
    let nominal = build_shifted_mdp(6, 3, 71, 72, 0.5, 1.0).unwrap();
    let features = FeatureMap::tiled(6, 3, 3, 3).unwrap();
    let op = PolicyImprovementOp::softmax(10.0).unwrap();
    let d = features.dim();
    let reference = sarsa_fixed_point(&nominal, &features, &op, &Parameter::zeros(d), FixedPointOptions::default())
        .unwrap()
        .theta;
    let schedule = StepSchedule::constant(0.05).unwrap();
    let plateau = |n: usize| {
        let fam = perturb_family(&nominal, n, 0.0, 0.0, 0).unwrap();
        let mut total = 0.0;
        for seed in 0..10 {
            let cfg = FederationConfig {
                n_agents: n,
                sync_period: 10,
                total_iters: 5_000,
                projection_radius: 100.0,
                master_seed: seed,
            };
            let theta0 = Parameter::zeros(d);
            let setup = FederationSetup {
                family: &fam,
                features: &features,
                op: &op,
                schedule: &schedule,
                config: &cfg,
                theta0: &theta0,
                reference: &reference,
            };
            run_federation_with(setup, &Sequential, |v| {
                if v.t > 4_500 {
                    total += v.mse;
                }
            })
            .unwrap();
        }
        total / 5_000.0
    };
    let (one, twenty) = (plateau(1), plateau(20));
    assert!(twenty < one, "N=20 plateau {twenty} vs N=1 {one}");
}
