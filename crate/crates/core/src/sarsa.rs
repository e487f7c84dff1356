//! Semi-gradients, step-size schedules, and on-policy local SARSA steps.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::features::{FeatureMap, Parameter};
use crate::mdp::Mdp;
use crate::policy::PolicyImprovementOp;
use crate::rng::{agent_stream, sample_index, AgentRng};

/// One SARSA transition `(s, a, r, s', a')`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
    pub a_next: usize,
}

/// `g = φ(s,a) · (r + γ φ(s',a')ᵀθ − φ(s,a)ᵀθ)`
pub fn semi_gradient(features: &FeatureMap, theta: &Parameter, obs: &Observation, gamma: f64) -> Vec<f64> {
    let td = td_error(features, &theta.weights, obs, gamma);
    let mut g = vec![0.0; features.dim()];
    features.add_scaled(obs.s, obs.a, td, &mut g);
    g
}

#[inline]
pub fn td_error(features: &FeatureMap, theta: &[f64], obs: &Observation, gamma: f64) -> f64 {
    obs.r + gamma * features.dot(obs.s_next, obs.a_next, theta) - features.dot(obs.s, obs.a, theta)
}

/// The affine decomposition `g(θ, O) = A(O) θ + b(O)` with `A = φ(γφ' − φ)ᵀ` (row-major
/// `d x d`) and `b = r φ`.
pub fn td_operators(features: &FeatureMap, obs: &Observation, gamma: f64) -> (Vec<f64>, Vec<f64>) {
    let d = features.dim();
    let phi = features.vector(obs.s, obs.a);
    let phi_next = features.vector(obs.s_next, obs.a_next);
    let mut a = vec![0.0; d * d];
    for i in 0..d {
        if phi[i] == 0.0 {
            continue;
        }
        for j in 0..d {
            a[i * d + j] = phi[i] * (gamma * phi_next[j] - phi[j]);
        }
    }
    let b = phi.iter().map(|x| x * obs.r).collect();
    (a, b)
}

/// Step-size schedule `α_t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSchedule {
    Constant { alpha0: f64 },
    /// `α_t = 4 / (w (1 + t + offset))`
    LinearDecay { w: f64, offset: f64 },
}

/// Largest constant step size covered by the constant-step convergence guarantee:
/// `w / (2120 (2K + 8 + ln(m / (ρ w))))`.
pub fn constant_step_ceiling(sync_period: usize, m: f64, rho: f64, w: f64) -> f64 {
    w / (2120.0 * (2.0 * sync_period as f64 + 8.0 + libm::log(m / (rho * w))))
}

/// Cap on the first decaying step: `min{1 / (8K), w / 64}`.
pub fn decay_initial_cap(sync_period: usize, w: f64) -> f64 {
    (1.0 / (8.0 * sync_period as f64)).min(w / 64.0)
}

impl StepSchedule {
    /// Constant step without checking it against problem constants.
    pub fn constant(alpha0: f64) -> Result<Self> {
        if !(alpha0 >= 0.0 && alpha0.is_finite()) {
            return Err(invalid(format!("step size must be finite and non-negative, got {alpha0}")));
        }
        Ok(Self::Constant { alpha0 })
    }

    /// Constant step that must sit below [`constant_step_ceiling`].
    pub fn constant_checked(alpha0: f64, sync_period: usize, m: f64, rho: f64, w: f64) -> Result<Self> {
        let ceiling = constant_step_ceiling(sync_period, m, rho, w);
        if alpha0 > ceiling {
            return Err(invalid(format!("constant step {alpha0} exceeds the admissible ceiling {ceiling}")));
        }
        Self::constant(alpha0)
    }

    /// Decaying schedule; rejects offsets whose first step exceeds [`decay_initial_cap`].
    pub fn linear_decay(w: f64, offset: f64, sync_period: usize) -> Result<Self> {
        if !(w > 0.0 && w.is_finite()) {
            return Err(invalid(format!("convergence constant w must be positive, got {w}")));
        }
        if !(offset > 0.0 && offset.is_finite()) {
            return Err(invalid(format!("decay offset must be positive, got {offset}")));
        }
        if sync_period == 0 {
            return Err(invalid("sync period must be at least 1"));
        }
        let schedule = Self::LinearDecay { w, offset };
        let first = schedule.step_size(0);
        let cap = decay_initial_cap(sync_period, w);
        if first > cap {
            return Err(invalid(format!(
                "initial decaying step {first} exceeds min(1/(8K), w/64) = {cap}"
            )));
        }
        Ok(schedule)
    }

    /// Decaying schedule with the smallest admissible offset.
    pub fn linear_decay_min_offset(w: f64, sync_period: usize) -> Result<Self> {
        if !(w > 0.0 && w.is_finite()) || sync_period == 0 {
            return Err(invalid("decaying schedule needs w > 0 and K >= 1"));
        }
        let cap = decay_initial_cap(sync_period, w);
        // 4 / (w (1 + a)) <= cap, nudged up so rounding keeps the first step under the cap
        let offset = (4.0 / (w * cap) - 1.0) * (1.0 + 1e-12);
        Self::linear_decay(w, offset.max(f64::MIN_POSITIVE), sync_period)
    }

    #[inline]
    pub fn step_size(&self, t: u64) -> f64 {
        match *self {
            Self::Constant { alpha0 } => alpha0,
            Self::LinearDecay { w, offset } => 4.0 / (w * (1.0 + t as f64 + offset)),
        }
    }
}

/// One agent's learner and trajectory state. The chain position survives synchronisation;
/// only `theta` is overwritten by aggregation.
#[derive(Debug, Clone)]
pub struct AgentState {
    pub theta: Parameter,
    pub s: usize,
    pub a: usize,
    pub t: u64,
    pub rng: AgentRng,
    probs: Vec<f64>,
}

impl AgentState {
    /// Starts at a uniformly drawn state with `a₀ ~ π_{θ₀}(·|s₀)`.
    pub fn new(
        agent_id: u64,
        master_seed: u64,
        theta0: Parameter,
        mdp: &Mdp,
        features: &FeatureMap,
        op: &PolicyImprovementOp,
    ) -> Result<Self> {
        check_setup(mdp, features, op, &theta0)?;
        let mut rng = agent_stream(master_seed, agent_id);
        let ns = mdp.num_states();
        let uniform = vec![1.0 / ns as f64; ns];
        let s = sample_index(&uniform, &mut rng);
        let mut probs = vec![0.0; mdp.num_actions()];
        op.action_probs(features, &theta0.weights, s, &mut probs);
        let a = sample_index(&probs, &mut rng);
        Ok(Self {
            theta: theta0,
            s,
            a,
            t: 0,
            rng,
            probs,
        })
    }
}

pub(crate) fn check_setup(mdp: &Mdp, features: &FeatureMap, op: &PolicyImprovementOp, theta: &Parameter) -> Result<()> {
    op.validate()?;
    op.check_dims(features)?;
    features.check_theta(theta)?;
    if features.num_states() != mdp.num_states() || features.num_actions() != mdp.num_actions() {
        return Err(Error::DimensionMismatch {
            what: "feature map state-action size",
            expected: mdp.num_states() * mdp.num_actions(),
            found: features.num_states() * features.num_actions(),
        });
    }
    Ok(())
}

/// One on-policy step: draw `s' ~ P_a(s,·)`, then `a' ~ π_{θ_t}(·|s')`, apply
/// `θ ← θ + α_t g`, and move the chain to `(s', a')`. Returns the observation used.
///
/// The random draws happen in that order, one uniform each.
pub fn local_step(
    agent: &mut AgentState,
    mdp: &Mdp,
    features: &FeatureMap,
    op: &PolicyImprovementOp,
    schedule: &StepSchedule,
) -> Observation {
    let (s, a) = (agent.s, agent.a);
    let r = mdp.rewards().get(s, a);
    let s_next = sample_index(mdp.kernel().row(a, s), &mut agent.rng);
    op.action_probs(features, &agent.theta.weights, s_next, &mut agent.probs);
    let a_next = sample_index(&agent.probs, &mut agent.rng);
    let obs = Observation {
        s,
        a,
        r,
        s_next,
        a_next,
    };
    let alpha = schedule.step_size(agent.t);
    if alpha != 0.0 {
        let td = td_error(features, &agent.theta.weights, &obs, mdp.discount());
        features.add_scaled(s, a, alpha * td, &mut agent.theta.weights);
    }
    agent.s = s_next;
    agent.a = a_next;
    agent.t += 1;
    obs
}

/// Single-agent linear SARSA for `iters` steps from `theta0` (agent stream 0).
pub fn run_single_agent(
    mdp: &Mdp,
    features: &FeatureMap,
    op: &PolicyImprovementOp,
    schedule: &StepSchedule,
    iters: u64,
    seed: u64,
    theta0: Parameter,
) -> Result<Parameter> {
    let mut agent = AgentState::new(0, seed, theta0, mdp, features, op)?;
    for _ in 0..iters {
        local_step(&mut agent, mdp, features, op, schedule);
    }
    Ok(agent.theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::norm2;
    use crate::mdp::{build_shifted_mdp, RewardTable, TransitionKernel};
    use proptest::prelude::*;

    fn obs() -> Observation {
        Observation {
            s: 1,
            a: 2,
            r: 0.7,
            s_next: 3,
            a_next: 0,
        }
    }

    #[test]
    fn zero_theta_gradient_is_reward_feature() {
        let f = FeatureMap::tiled(5, 4, 3, 2).unwrap();
        let g = semi_gradient(&f, &Parameter::zeros(6), &obs(), 0.9);
        let expect: Vec<f64> = f.vector(1, 2).iter().map(|x| x * 0.7).collect();
        assert_eq!(g, expect);
    }

    #[test]
    fn myopic_gradient_regresses_to_reward() {
        let f = FeatureMap::tiled(5, 4, 3, 2).unwrap();
        let theta = Parameter::new(vec![0.3, -1.0, 2.0, 0.5, 0.1, 4.0]);
        let g = semi_gradient(&f, &theta, &obs(), 0.0);
        let q = f.dot(1, 2, &theta.weights);
        let expect: Vec<f64> = f.vector(1, 2).iter().map(|x| x * (0.7 - q)).collect();
        assert_eq!(g, expect);
    }

    #[test]
    fn indicator_gradient_is_tabular_td_error() {
        let f = FeatureMap::full_indicator(5, 4).unwrap();
        let theta = Parameter::new((0..20).map(|i| (i as f64).sin()).collect());
        let gamma = 0.8;
        let g = semi_gradient(&f, &theta, &obs(), gamma);
        let td = 0.7 + gamma * theta.weights[3 * 4] - theta.weights[4 + 2];
        for (k, v) in g.iter().enumerate() {
            if k == 6 {
                assert_eq!(*v, td);
            } else {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn decaying_schedule_contract() {
        // 4 / (0.5 · 8) = 1.0, far above min(1/(8K), w/64)
        assert!(StepSchedule::linear_decay(0.5, 7.0, 10).is_err());
        let bad = StepSchedule::LinearDecay { w: 0.5, offset: 7.0 };
        assert_eq!(bad.step_size(0), 1.0);

        let s = StepSchedule::linear_decay_min_offset(0.3, 10).unwrap();
        assert!(s.step_size(0) <= decay_initial_cap(10, 0.3));
        let mut partial = 0.0;
        let mut last = f64::INFINITY;
        for t in 0..2_000_000u64 {
            let a = s.step_size(t);
            assert!(a <= last);
            last = a;
            partial += a;
        }
        assert!(last < s.step_size(0) / 5.0);
        // harmonic tail: Σ α_t ≈ (4 / w) ln((T + offset) / offset)
        let StepSchedule::LinearDecay { offset, .. } = s else { unreachable!() };
        let expected = 4.0 / 0.3 * libm::log((2e6 + offset) / offset);
        assert!((partial - expected).abs() < 1e-3 * expected, "{partial} vs {expected}");
    }

    #[test]
    fn constant_schedule() {
        let s = StepSchedule::constant(0.01).unwrap();
        assert_eq!(s.step_size(0), 0.01);
        assert_eq!(s.step_size(123_456), 0.01);
        assert!(StepSchedule::constant(-1.0).is_err());
        assert!(StepSchedule::constant_checked(0.01, 10, 2.0, 0.5, 0.1).is_err());
        let ceiling = constant_step_ceiling(10, 2.0, 0.5, 0.1);
        assert!(StepSchedule::constant_checked(ceiling * 0.9, 10, 2.0, 0.5, 0.1).is_ok());
    }

    #[test]
    fn zero_step_only_moves_the_chain() {
        let m = build_shifted_mdp(6, 3, 1, 2, 0.5, 1.0).unwrap();
        let f = FeatureMap::full_indicator(6, 3).unwrap();
        let op = PolicyImprovementOp::softmax(1.0).unwrap();
        let theta0 = Parameter::new((0..18).map(|i| i as f64 * 0.1).collect());
        let mut agent = AgentState::new(0, 3, theta0.clone(), &m, &f, &op).unwrap();
        let sched = StepSchedule::constant(0.0).unwrap();
        for _ in 0..50 {
            let obs = local_step(&mut agent, &m, &f, &op, &sched);
            assert_eq!((agent.s, agent.a), (obs.s_next, obs.a_next));
        }
        assert_eq!(agent.theta, theta0);
        assert_eq!(agent.t, 50);
    }

    #[test]
    fn deterministic_chain_follows_successor() {
        // state s moves to s+1 mod 3 under the only action
        let k = TransitionKernel::new(3, 1, vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let m = Mdp::new(k, RewardTable::new(3, 1, 1.0, vec![1.0; 3]).unwrap(), 0.5).unwrap();
        let f = FeatureMap::full_indicator(3, 1).unwrap();
        let op = PolicyImprovementOp::Greedy;
        let mut agent = AgentState::new(0, 9, Parameter::zeros(3), &m, &f, &op).unwrap();
        for _ in 0..10 {
            let s = agent.s;
            local_step(&mut agent, &m, &f, &op, &StepSchedule::Constant { alpha0: 0.1 });
            assert_eq!(agent.s, (s + 1) % 3);
            assert_eq!(agent.a, 0);
        }
    }

    #[test]
    fn seeded_runs_are_bit_identical() {
        let m = build_shifted_mdp(8, 4, 5, 6, 0.7, 3.0).unwrap();
        let f = FeatureMap::tiled(8, 4, 3, 3).unwrap();
        let op = PolicyImprovementOp::softmax(2.0).unwrap();
        let run = || {
            let mut agent = AgentState::new(2, 77, Parameter::zeros(9), &m, &f, &op).unwrap();
            let mut trace = Vec::new();
            for _ in 0..1000 {
                local_step(&mut agent, &m, &f, &op, &StepSchedule::Constant { alpha0: 0.05 });
                trace.extend(agent.theta.weights.iter().map(|x| x.to_bits()));
            }
            trace
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn setup_mismatch_rejected() {
        let m = build_shifted_mdp(6, 3, 1, 2, 0.5, 1.0).unwrap();
        let f = FeatureMap::full_indicator(5, 3).unwrap();
        let op = PolicyImprovementOp::Greedy;
        assert!(AgentState::new(0, 0, Parameter::zeros(15), &m, &f, &op).is_err());
    }

    fn arb_obs() -> impl Strategy<Value = Observation> {
        (0usize..6, 0usize..3, 0.0f64..5.0, 0usize..6, 0usize..3)
            .prop_map(|(s, a, r, s_next, a_next)| Observation { s, a, r, s_next, a_next })
    }

    fn table_features() -> FeatureMap {
        let vals: Vec<f64> = (0..6 * 3 * 4)
            .map(|i| ((i * 37 % 17) as f64 / 17.0 - 0.5) * 0.5)
            .collect();
        FeatureMap::table(6, 3, 4, vals).unwrap()
    }

    proptest! {
        #[test]
        fn gradient_is_affine_in_theta(
            o in arb_obs(),
            theta in proptest::collection::vec(-10.0f64..10.0, 4),
            gamma in 0.0f64..0.99,
        ) {
            let f = table_features();
            let (a, b) = td_operators(&f, &o, gamma);
            let g = semi_gradient(&f, &Parameter::new(theta.clone()), &o, gamma);
            for i in 0..4 {
                let lin: f64 = (0..4).map(|j| a[i * 4 + j] * theta[j]).sum::<f64>() + b[i];
                prop_assert!((lin - g[i]).abs() < 1e-10);
            }
        }

        #[test]
        fn operator_norm_and_gradient_bounds(
            o in arb_obs(),
            theta in proptest::collection::vec(-10.0f64..10.0, 4),
            gamma in 0.0f64..0.99,
        ) {
            let f = table_features();
            let (a, _) = td_operators(&f, &o, gamma);
            let m = nalgebra::DMatrix::from_row_slice(4, 4, &a);
            let spectral = m.singular_values().max();
            prop_assert!(spectral <= 1.0 + gamma + 1e-12);
            let g = semi_gradient(&f, &Parameter::new(theta.clone()), &o, gamma);
            let cap = 5.0;
            prop_assert!(norm2(&g) <= cap + (1.0 + gamma) * norm2(&theta) + 1e-12);
        }
    }
}
