//! Acceptance checks, parameterised so `fedsarsa verify` can run them on a configured
//! instance and the test suite can run them on fixed instances.

use std::fmt;

use fedsarsa_core::oracle::{
    bellman_q_values, horizon_for_tolerance, mean_path_ops, monte_carlo_q, parameter_bound, td0_fixed_point,
    BoundSettings,
};
use fedsarsa_core::rng::{agent_stream, model_stream, sample_index};
use fedsarsa_core::{
    build_shifted_mdp, local_step, perturb_family, run_federation_with, sarsa_fixed_point, AgentState, FeatureMap,
    FederationConfig, FederationSetup, FixedPointOptions, Mdp, MdpFamily, Parameter, PolicyImprovementOp, PolicyTable,
    RewardTable, Sequential, StepSchedule, TransitionKernel,
};
use rand::Rng;
use rayon::prelude::*;

use crate::config::{RunConfig, ScheduleSection};
use crate::experiment::{compute_reference, constants_report, Experiment, RunError};
use crate::parallel::{pool, RayonExecutor};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    pub fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }

    fn failed(name: &str, err: impl fmt::Display) -> Self {
        Self::new(name, false, format!("error: {err}"))
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

/// Number of adjacent increases in `values`.
pub fn increases(values: &[f64]) -> usize {
    values.windows(2).filter(|w| w[1] > w[0]).count()
}

/// Number of adjacent decreases in `values`.
pub fn decreases(values: &[f64]) -> usize {
    values.windows(2).filter(|w| w[1] < w[0]).count()
}

/// Least-squares slope of `y` on `x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// One federated configuration averaged over seeds.
#[derive(Debug, Clone, Copy)]
pub struct SweepSpec<'a> {
    pub family: &'a MdpFamily,
    pub features: &'a FeatureMap,
    pub op: &'a PolicyImprovementOp,
    pub schedule: StepSchedule,
    pub sync_period: usize,
    pub total_iters: u64,
    pub projection_radius: f64,
    pub reference: &'a Parameter,
    pub seeds: &'a [u64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    /// Seed-averaged mean MSE over the last 10% of iterations.
    pub plateau_mse: f64,
    /// Seed-averaged MSE at `t = T`.
    pub final_mse: f64,
    /// Seed-averaged `max_t Ω_t`.
    pub max_drift: f64,
    /// Largest `‖θ̄‖₂` right after any aggregation, over all seeds.
    pub max_sync_norm: f64,
    pub projection_radius: f64,
    pub sync_count: u64,
}

impl SweepPoint {
    pub fn projection_holds(&self) -> bool {
        self.max_sync_norm <= self.projection_radius
    }
}

/// First iteration counted in the plateau window.
pub fn plateau_start(total_iters: u64) -> u64 {
    total_iters - (total_iters / 10).max(1) + 1
}

/// Run every seed (in parallel on the current rayon pool) and average.
pub fn run_point(spec: SweepSpec<'_>) -> Result<SweepPoint, RunError> {
    let start = plateau_start(spec.total_iters);
    let window = (spec.total_iters - start + 1) as f64;
    let per_seed: Vec<(f64, f64, f64, f64, u64)> = spec
        .seeds
        .par_iter()
        .map(|&seed| {
            let cfg = FederationConfig {
                n_agents: spec.family.len(),
                sync_period: spec.sync_period,
                total_iters: spec.total_iters,
                projection_radius: spec.projection_radius,
                master_seed: seed,
            };
            let theta0 = Parameter::zeros(spec.features.dim());
            let (mut plateau, mut last, mut drift) = (0.0, 0.0, 0.0f64);
            let outcome = run_federation_with(
                FederationSetup {
                    family: spec.family,
                    features: spec.features,
                    op: spec.op,
                    schedule: &spec.schedule,
                    config: &cfg,
                    theta0: &theta0,
                    reference: spec.reference,
                },
                &Sequential,
                |v| {
                    if v.t >= start {
                        plateau += v.mse;
                    }
                    last = v.mse;
                    drift = drift.max(v.client_drift);
                },
            )?;
            Ok((plateau / window, last, drift, outcome.max_sync_norm, outcome.sync_count))
        })
        .collect::<Result<_, RunError>>()?;
    let n = per_seed.len() as f64;
    Ok(SweepPoint {
        plateau_mse: per_seed.iter().map(|r| r.0).sum::<f64>() / n,
        final_mse: per_seed.iter().map(|r| r.1).sum::<f64>() / n,
        max_drift: per_seed.iter().map(|r| r.2).sum::<f64>() / n,
        max_sync_norm: per_seed.iter().map(|r| r.3).fold(0.0, f64::max),
        projection_radius: spec.projection_radius,
        sync_count: per_seed.iter().map(|r| r.4).sum(),
    })
}

/// Random row-stochastic policy table.
pub fn random_policy(num_states: usize, num_actions: usize, seed: u64) -> PolicyTable {
    let mut rng = model_stream(seed);
    let mut probs = Vec::with_capacity(num_states * num_actions);
    for _ in 0..num_states {
        let row: Vec<f64> = (0..num_actions).map(|_| rng.random::<f64>() + 0.05).collect();
        let total: f64 = row.iter().sum();
        probs.extend(row.iter().map(|x| x / total));
    }
    PolicyTable::new(num_states, num_actions, probs).expect("normalised rows")
}

/// Settings for [`bound_families`].
#[derive(Debug, Clone)]
pub struct BoundFamilies {
    pub families: usize,
    pub num_states: usize,
    pub num_actions: usize,
    pub n_agents: usize,
    pub discount: f64,
    pub reward_cap: f64,
    pub temperature: f64,
    pub eps_levels: Vec<f64>,
    pub seed: u64,
}

impl Default for BoundFamilies {
    fn default() -> Self {
        Self {
            families: 50,
            num_states: 10,
            num_actions: 4,
            n_agents: 3,
            discount: 0.5,
            reward_cap: 1.0,
            temperature: 50.0,
            eps_levels: vec![0.0, 0.1, 0.5],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct BoundTally {
    pub reports: usize,
    pub violations: usize,
    pub errors: Vec<String>,
    /// Largest observed / bound ratio among cases with a positive bound.
    pub worst_ratio: f64,
    pub lipschitz_condition_failures: usize,
}

/// Fixed-point perturbation bound over randomized families, both operator kinds and every
/// `(ε_p, ε_r)` pair from `eps_levels`.
pub fn bound_families(settings: &BoundFamilies) -> BoundTally {
    let BoundFamilies {
        num_states: ns,
        num_actions: na,
        ..
    } = *settings;
    let features = FeatureMap::full_indicator(ns, na).expect("valid dims");
    let radius = ((ns * na) as f64).sqrt() * settings.reward_cap / (1.0 - settings.discount);
    let mut cases = Vec::new();
    for fam in 0..settings.families {
        for &eps_p in &settings.eps_levels {
            for &eps_r in &settings.eps_levels {
                for softmax in [false, true] {
                    cases.push((fam as u64, eps_p, eps_r, softmax));
                }
            }
        }
    }
    let results: Vec<Result<(f64, f64, bool, bool), String>> = cases
        .par_iter()
        .map(|&(fam, eps_p, eps_r, softmax)| {
            let base = settings.seed.wrapping_mul(1_000_003).wrapping_add(fam * 7919);
            let nominal = build_shifted_mdp(ns, na, base, base + 1, settings.discount, settings.reward_cap)
                .map_err(|e| e.to_string())?;
            let family = perturb_family(&nominal, settings.n_agents, eps_p, eps_r, base + 2).map_err(|e| e.to_string())?;
            let op = if softmax {
                PolicyImprovementOp::softmax(settings.temperature).map_err(|e| e.to_string())?
            } else {
                PolicyImprovementOp::Fixed(random_policy(ns, na, base + 3))
            };
            let report = fedsarsa_core::verify_perturbation_bound(
                &family,
                &features,
                &op,
                BoundSettings {
                    projection_radius: radius,
                    ..BoundSettings::default()
                },
            )
            .map_err(|e| format!("family {fam} eps ({eps_p}, {eps_r}): {e}"))?;
            Ok((report.observed, report.bound, report.passed, report.lipschitz_condition))
        })
        .collect();
    let mut tally = BoundTally::default();
    for r in results {
        match r {
            Ok((observed, bound, passed, lip)) => {
                tally.reports += 1;
                if !passed {
                    tally.violations += 1;
                }
                if !lip {
                    tally.lipschitz_condition_failures += 1;
                }
                if bound > 0.0 {
                    tally.worst_ratio = tally.worst_ratio.max(observed / bound);
                }
            }
            Err(e) => tally.errors.push(e),
        }
    }
    tally
}

pub fn check_bound_families(settings: &BoundFamilies) -> CheckOutcome {
    let t = bound_families(settings);
    CheckOutcome::new(
        "fixed-point perturbation bound",
        t.violations == 0 && t.errors.is_empty(),
        format!(
            "{} reports, {} violations, {} errors, worst observed/bound = {:.3e}, LHσ ≤ w failed in {} cases{}",
            t.reports,
            t.violations,
            t.errors.len(),
            t.worst_ratio,
            t.lipschitz_condition_failures,
            t.errors.first().map(|e| format!(" (first error: {e})")).unwrap_or_default()
        ),
    )
}

/// Tabular SARSA on a Q table, replaying the agent's random stream draw for draw.
pub fn tabular_sarsa(
    mdp: &Mdp,
    op: &PolicyImprovementOp,
    alpha: f64,
    steps: usize,
    seed: u64,
    mut on_step: impl FnMut(usize, &[f64]),
) -> Vec<f64> {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let features = FeatureMap::full_indicator(ns, na).expect("valid dims");
    let mut q = vec![0.0; ns * na];
    let mut rng = agent_stream(seed, 0);
    let mut probs = vec![0.0; na];
    let mut s = sample_index(&vec![1.0 / ns as f64; ns], &mut rng);
    op.action_probs(&features, &q, s, &mut probs);
    let mut a = sample_index(&probs, &mut rng);
    for step in 0..steps {
        let r = mdp.rewards().get(s, a);
        let s2 = sample_index(mdp.kernel().row(a, s), &mut rng);
        op.action_probs(&features, &q, s2, &mut probs);
        let a2 = sample_index(&probs, &mut rng);
        let target = r + mdp.discount() * q[s2 * na + a2];
        q[s * na + a] += alpha * (target - q[s * na + a]);
        on_step(step, &q);
        s = s2;
        a = a2;
    }
    q
}

/// Largest elementwise gap between linear SARSA with indicator features and the tabular
/// replay, checked after every step.
pub fn tabular_gap(mdp: &Mdp, op: &PolicyImprovementOp, alpha: f64, steps: usize, seed: u64) -> Result<f64, RunError> {
    let features = FeatureMap::full_indicator(mdp.num_states(), mdp.num_actions())?;
    let schedule = StepSchedule::constant(alpha)?;
    let mut agent = AgentState::new(0, seed, Parameter::zeros(features.dim()), mdp, &features, op)?;
    let mut thetas = Vec::with_capacity(steps);
    for _ in 0..steps {
        local_step(&mut agent, mdp, &features, op, &schedule);
        thetas.push(agent.theta.weights.clone());
    }
    let mut gap = 0.0f64;
    tabular_sarsa(mdp, op, alpha, steps, seed, |i, q| {
        for (x, y) in thetas[i].iter().zip(q) {
            gap = gap.max((x - y).abs());
        }
    });
    Ok(gap)
}

pub fn check_tabular_equivalence(mdp: &Mdp, op: &PolicyImprovementOp, steps: usize, seed: u64) -> CheckOutcome {
    const NAME: &str = "tabular equivalence";
    match tabular_gap(mdp, op, 0.1, steps, seed) {
        Ok(gap) => CheckOutcome::new(NAME, gap <= 1e-12, format!("{steps} steps, max |θ − Q| = {gap:.3e}")),
        Err(e) => CheckOutcome::failed(NAME, e),
    }
}

/// Settings for [`check_td0_reduction`].
#[derive(Debug, Clone)]
pub struct Td0Reduction {
    pub num_states: usize,
    pub num_actions: usize,
    pub discount: f64,
    pub reward_cap: f64,
    /// State tiles; one action tile.
    pub state_tiles: usize,
    pub n_agents: usize,
    pub sync_period: usize,
    pub total_iters: u64,
    pub seeds: Vec<u64>,
    pub model_seed: u64,
}

impl Default for Td0Reduction {
    fn default() -> Self {
        Self {
            num_states: 20,
            num_actions: 2,
            discount: 0.5,
            reward_cap: 1.0,
            state_tiles: 2,
            n_agents: 5,
            sync_period: 10,
            total_iters: 200_000,
            seeds: (1..=10).collect(),
            model_seed: 17,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Td0Outcome {
    pub solver_gap: f64,
    pub w: f64,
    pub point: SweepPoint,
}

pub fn td0_reduction(s: &Td0Reduction) -> Result<Td0Outcome, RunError> {
    let nominal = build_shifted_mdp(
        s.num_states,
        s.num_actions,
        s.model_seed,
        s.model_seed + 1,
        s.discount,
        s.reward_cap,
    )?;
    let family = perturb_family(&nominal, s.n_agents, 0.0, 0.0, s.model_seed + 2)?;
    let features = FeatureMap::tiled(s.num_states, s.num_actions, s.state_tiles, 1)?;
    let policy = random_policy(s.num_states, s.num_actions, s.model_seed + 3);
    let ops = mean_path_ops(&nominal, &features, &policy)?;
    let direct = td0_fixed_point(&ops)?;
    let op = PolicyImprovementOp::Fixed(policy);
    let damped = sarsa_fixed_point(
        &nominal,
        &features,
        &op,
        &Parameter::zeros(features.dim()),
        FixedPointOptions::default(),
    )?
    .theta;
    let (w, _) = fedsarsa_core::oracle::curvature_at(&nominal, &features, &op, &direct)?;
    let schedule = StepSchedule::linear_decay_min_offset(w, s.sync_period)?;
    let radius = 10.0 * (direct.norm() + s.reward_cap / (1.0 - s.discount));
    let point = run_point(SweepSpec {
        family: &family,
        features: &features,
        op: &op,
        schedule,
        sync_period: s.sync_period,
        total_iters: s.total_iters,
        projection_radius: radius,
        reference: &direct,
        seeds: &s.seeds,
    })?;
    Ok(Td0Outcome {
        solver_gap: damped.distance(&direct),
        w,
        point,
    })
}

pub fn check_td0_reduction(s: &Td0Reduction) -> (CheckOutcome, Option<SweepPoint>) {
    const NAME: &str = "TD(0) reduction";
    match td0_reduction(s) {
        Ok(o) => (
            CheckOutcome::new(
                NAME,
                o.solver_gap <= 1e-9 && o.point.final_mse < 1e-3,
                format!(
                    "‖damped − direct‖ = {:.3e}, w = {:.4}, mean MSE at T={} over {} seeds = {:.3e}",
                    o.solver_gap,
                    o.w,
                    s.total_iters,
                    s.seeds.len(),
                    o.point.final_mse
                ),
            ),
            Some(o.point),
        ),
        Err(e) => (CheckOutcome::failed(NAME, e), None),
    }
}

/// Everything a sweep needs from an instance.
#[derive(Debug, Clone)]
pub struct Instance {
    pub nominal: Mdp,
    pub features: FeatureMap,
    pub op: PolicyImprovementOp,
    pub alpha0: f64,
    pub sync_period: usize,
    pub total_iters: u64,
    pub projection_radius: f64,
    pub family_seed: u64,
    pub seeds: Vec<u64>,
}

impl Instance {
    pub fn from_config(cfg: &RunConfig, exp: &Experiment) -> Self {
        let alpha0 = match cfg.schedule {
            ScheduleSection::Constant { alpha0 } => alpha0,
            ScheduleSection::LinearDecay { .. } => 0.01,
        };
        Self {
            nominal: exp.family.agents()[0].clone(),
            features: exp.features.clone(),
            op: exp.op.clone(),
            alpha0,
            sync_period: cfg.federation.sync_period,
            total_iters: cfg.federation.total_iters,
            projection_radius: cfg.federation.projection_radius,
            family_seed: cfg.heterogeneity.family_seed,
            seeds: cfg.replications.clone(),
        }
    }

    /// Oracle fixed point of the nominal (agent 1) MDP.
    pub fn reference(&self) -> Result<Parameter, RunError> {
        Ok(sarsa_fixed_point(
            &self.nominal,
            &self.features,
            &self.op,
            &Parameter::zeros(self.features.dim()),
            FixedPointOptions::default(),
        )?
        .theta)
    }

    pub fn family(&self, n_agents: usize, eps: f64) -> Result<MdpFamily, RunError> {
        Ok(perturb_family(&self.nominal, n_agents, eps, eps, self.family_seed)?)
    }

    pub fn point(&self, family: &MdpFamily, alpha: f64, reference: &Parameter) -> Result<SweepPoint, RunError> {
        run_point(SweepSpec {
            family,
            features: &self.features,
            op: &self.op,
            schedule: StepSchedule::constant(alpha)?,
            sync_period: self.sync_period,
            total_iters: self.total_iters,
            projection_radius: self.projection_radius,
            reference,
            seeds: &self.seeds,
        })
    }
}

fn fmt_series(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.4e}")).collect::<Vec<_>>().join(", ")
}

/// Plateau MSE over agent counts on a homogeneous family.
pub fn check_linear_speedup(inst: &Instance, counts: &[usize]) -> (CheckOutcome, Vec<SweepPoint>) {
    const NAME: &str = "linear speedup";
    let run = || -> Result<Vec<SweepPoint>, RunError> {
        let reference = inst.reference()?;
        counts
            .iter()
            .map(|&n| inst.point(&inst.family(n, 0.0)?, inst.alpha0, &reference))
            .collect()
    };
    match run() {
        Ok(points) => {
            let plateau: Vec<f64> = points.iter().map(|p| p.plateau_mse).collect();
            let ratio = plateau[plateau.len() - 1] / plateau[0];
            let inversions = increases(&plateau);
            (
                CheckOutcome::new(
                    NAME,
                    ratio <= 0.5 && inversions <= 1,
                    format!(
                        "N = {counts:?}: plateau MSE [{}], last/first = {ratio:.3}, inversions = {inversions}",
                        fmt_series(&plateau)
                    ),
                ),
                points,
            )
        }
        Err(e) => (CheckOutcome::failed(NAME, e), Vec::new()),
    }
}

/// Plateau MSE against the agent-1 reference over heterogeneity levels.
pub fn check_heterogeneity(inst: &Instance, n_agents: usize, levels: &[f64]) -> (CheckOutcome, Vec<SweepPoint>) {
    const NAME: &str = "heterogeneity robustness";
    let run = || -> Result<(Vec<SweepPoint>, f64), RunError> {
        let reference = inst.reference()?;
        let points = levels
            .iter()
            .map(|&eps| inst.point(&inst.family(n_agents, eps)?, inst.alpha0, &reference))
            .collect::<Result<Vec<_>, _>>()?;
        let g = parameter_bound(
            inst.projection_radius,
            inst.nominal.reward_cap(),
            inst.alpha0,
            inst.sync_period,
            inst.nominal.discount(),
        )?;
        let region = (g + reference.norm()).powi(2);
        Ok((points, region))
    };
    match run() {
        Ok((points, region)) => {
            let plateau: Vec<f64> = points.iter().map(|p| p.plateau_mse).collect();
            let inversions = decreases(&plateau);
            let bounded = plateau.iter().all(|p| p.is_finite() && *p <= region);
            (
                CheckOutcome::new(
                    NAME,
                    inversions <= 1 && bounded,
                    format!(
                        "ε = {levels:?}: plateau MSE [{}], inversions = {inversions}, region (G + ‖θ_ref‖)² = {region:.4e}",
                        fmt_series(&plateau)
                    ),
                ),
                points,
            )
        }
        Err(e) => (CheckOutcome::failed(NAME, e), Vec::new()),
    }
}

/// Log-log slope of seed-averaged `max_t Ω_t` against the constant step size.
pub fn check_drift_scaling(inst: &Instance, family: &MdpFamily, alphas: &[f64]) -> (CheckOutcome, Vec<SweepPoint>) {
    const NAME: &str = "client drift scaling";
    let run = || -> Result<Vec<SweepPoint>, RunError> {
        let reference = inst.reference()?;
        alphas.iter().map(|&a| inst.point(family, a, &reference)).collect()
    };
    match run() {
        Ok(points) => {
            let drift: Vec<f64> = points.iter().map(|p| p.max_drift).collect();
            let lx: Vec<f64> = alphas.iter().map(|a| a.ln()).collect();
            let ly: Vec<f64> = drift.iter().map(|d| d.ln()).collect();
            let slope = ols_slope(&lx, &ly);
            (
                CheckOutcome::new(
                    NAME,
                    (slope - 2.0).abs() <= 0.3,
                    format!("α = {alphas:?}: max drift [{}], slope = {slope:.3}", fmt_series(&drift)),
                ),
                points,
            )
        }
        Err(e) => (CheckOutcome::failed(NAME, e), Vec::new()),
    }
}

pub fn check_projection(points: &[SweepPoint]) -> CheckOutcome {
    let violations = points.iter().filter(|p| !p.projection_holds()).count();
    let syncs: u64 = points.iter().map(|p| p.sync_count).sum();
    let worst = points
        .iter()
        .map(|p| p.max_sync_norm / p.projection_radius)
        .fold(0.0, f64::max);
    CheckOutcome::new(
        "projection contract",
        violations == 0 && !points.is_empty(),
        format!(
            "{} runs, {syncs} sync steps, {violations} violations, max ‖θ̄‖/Ḡ = {worst:.4}",
            points.len()
        ),
    )
}

/// A birth-death chain: action 0 drifts right, action 1 drifts left, with slip.
pub fn chain_mdp(num_states: usize, discount: f64, reward_cap: f64) -> Result<Mdp, RunError> {
    let n = num_states;
    let mut probs = vec![0.0; 2 * n * n];
    for a in 0..2 {
        for s in 0..n {
            let row = &mut probs[(a * n + s) * n..(a * n + s + 1) * n];
            let (fwd, back) = if a == 0 {
                ((s + 1).min(n - 1), s.saturating_sub(1))
            } else {
                (s.saturating_sub(1), (s + 1).min(n - 1))
            };
            row[fwd] += 0.7;
            row[s] += 0.2;
            row[back] += 0.1;
        }
    }
    let rewards = (0..n)
        .flat_map(|s| {
            let base = reward_cap * s as f64 / (n - 1) as f64;
            [base, 0.5 * base]
        })
        .collect();
    Ok(Mdp::new(
        TransitionKernel::new(n, 2, probs)?,
        RewardTable::new(n, 2, reward_cap, rewards)?,
        discount,
    )?)
}

#[derive(Debug, Clone)]
pub struct CrossOracle {
    pub max_z: f64,
    pub pairs: usize,
    pub horizon: usize,
}

pub fn cross_oracle(rollouts: usize, seed: u64) -> Result<CrossOracle, RunError> {
    let (gamma, cap) = (0.5, 1.0);
    let mdp = chain_mdp(5, gamma, cap)?;
    let policy = random_policy(5, 2, seed);
    let q = bellman_q_values(&mdp, &policy)?;
    let horizon = horizon_for_tolerance(gamma, cap, 1e-4);
    let pairs: Vec<usize> = (0..10).collect();
    let z = pairs
        .par_iter()
        .map(|&x| {
            let mut rng = agent_stream(seed, x as u64);
            let est = monte_carlo_q(&mdp, &policy, x / 2, x % 2, rollouts, horizon, &mut rng)?;
            Ok((est.mean - q[x]).abs() / est.std_error)
        })
        .collect::<Result<Vec<f64>, RunError>>()?;
    Ok(CrossOracle {
        max_z: z.into_iter().fold(0.0, f64::max),
        pairs: pairs.len(),
        horizon,
    })
}

pub fn check_cross_oracle(rollouts: usize, seed: u64) -> CheckOutcome {
    const NAME: &str = "Monte Carlo vs Bellman";
    match cross_oracle(rollouts, seed) {
        Ok(c) => CheckOutcome::new(
            NAME,
            c.max_z <= 3.0,
            format!(
                "{} pairs, {rollouts} rollouts, horizon {}, max |Δ|/SE = {:.3}",
                c.pairs, c.horizon, c.max_z
            ),
        ),
        Err(e) => CheckOutcome::failed(NAME, e),
    }
}

/// Sequential and multi-threaded agent stepping yield bit-identical traces.
pub fn check_worker_invariance(cfg: &RunConfig, exp: &Experiment, iters: u64) -> CheckOutcome {
    const NAME: &str = "worker invariance";
    let run = || -> Result<bool, RunError> {
        let reference = compute_reference(cfg, exp)?;
        let schedule = crate::experiment::resolve_schedule(cfg, exp)?;
        let fed = FederationConfig {
            n_agents: cfg.federation.n_agents,
            sync_period: cfg.federation.sync_period,
            total_iters: iters.min(cfg.federation.total_iters),
            projection_radius: cfg.federation.projection_radius,
            master_seed: cfg.replications[0],
        };
        let theta0 = exp.zero();
        let setup = FederationSetup {
            family: &exp.family,
            features: &exp.features,
            op: &exp.op,
            schedule: &schedule,
            config: &fed,
            theta0: &theta0,
            reference: &reference,
        };
        let mut a = Vec::new();
        run_federation_with(setup, &Sequential, |v| a.push((v.mse.to_bits(), v.client_drift.to_bits())))?;
        let mut b = Vec::new();
        pool(4).install(|| {
            run_federation_with(setup, &RayonExecutor, |v| b.push((v.mse.to_bits(), v.client_drift.to_bits())))
        })?;
        Ok(a == b)
    };
    match run() {
        Ok(same) => CheckOutcome::new(NAME, same, format!("1 vs 4 workers, {iters} iterations, identical = {same}")),
        Err(e) => CheckOutcome::failed(NAME, e),
    }
}

/// The full check list on a configured instance. Sweeps use the config's step size,
/// `K`, `T`, radius and replication seeds.
pub fn verify_suite(cfg: &RunConfig) -> Result<Vec<CheckOutcome>, RunError> {
    let exp = Experiment::build(cfg)?;
    let inst = Instance::from_config(cfg, &exp);
    let mut out = Vec::new();

    out.push(match constants_report(cfg, &exp) {
        Ok(r) => CheckOutcome::new(
            "configured bound",
            r.passed,
            format!("observed {:.4e} <= Λ/w = {:.4e}", r.observed, r.bound),
        ),
        Err(e) => CheckOutcome::failed("configured bound", e),
    });
    out.push(check_bound_families(&BoundFamilies::default()));
    out.push(check_tabular_equivalence(&inst.nominal, &inst.op, 10_000, cfg.replications[0]));

    let mut points = Vec::new();
    let (c, p) = check_td0_reduction(&Td0Reduction::default());
    out.push(c);
    points.extend(p);
    let (c, p) = check_linear_speedup(&inst, &[1, 4, 16]);
    out.push(c);
    points.extend(p);
    let (c, p) = check_heterogeneity(&inst, cfg.federation.n_agents, &[0.0, 0.5, 1.0, 2.0]);
    out.push(c);
    points.extend(p);
    let (c, p) = check_drift_scaling(&inst, &exp.family, &[0.04, 0.02, 0.01, 0.005]);
    out.push(c);
    points.extend(p);
    out.push(check_projection(&points));
    out.push(check_cross_oracle(100_000, 5));
    out.push(check_worker_invariance(cfg, &exp, 2_000));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn series_helpers() {
        assert_eq!(increases(&[3.0, 2.0, 2.5, 1.0]), 1);
        assert_eq!(decreases(&[1.0, 2.0, 1.5, 3.0]), 1);
        let x = [0.0f64, 1.0, 2.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((ols_slope(&x, &y) - 2.0).abs() < 1e-12);
        assert_eq!(plateau_start(100), 91);
        assert_eq!(plateau_start(5), 5);
    }

    #[test]
    fn chain_is_ergodic_and_stochastic() {
        let mdp = chain_mdp(5, 0.5, 1.0).unwrap();
        let chain = mdp.induced_chain(&PolicyTable::uniform(5, 2)).unwrap();
        fedsarsa_core::markov::check_ergodic(&chain, 5).unwrap();
    }

    #[test]
    fn tabular_replay_matches_small_run() {
        let mdp = build_shifted_mdp(4, 3, 1, 2, 0.7, 1.0).unwrap();
        let op = PolicyImprovementOp::softmax(0.5).unwrap();
        assert_eq!(tabular_gap(&mdp, &op, 0.2, 500, 3).unwrap(), 0.0);
    }
}
