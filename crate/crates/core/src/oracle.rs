//! Exact mean-path operators, projected Bellman fixed points, and problem constants.
//!
//! Everything here is computed from the model, never from samples (except
//! [`monte_carlo_q`], which exists to cross-check the Bellman solve).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::features::{FeatureMap, Parameter};
use crate::linalg::{norm2, solve, sym_eigen_range};
use crate::markov::{mixing_constants, stationary_distribution, MixingConstants, StationaryDistribution};
use crate::mdp::{kernel_heterogeneity, reward_heterogeneity, Mdp, MdpFamily};
use crate::policy::{empirical_lipschitz, improve_policy, PolicyImprovementOp, PolicyTable};
use crate::rng::sample_index;
use crate::sarsa::check_setup;

/// Steady-state expectations `Ā = E[φ(γφ' − φ)ᵀ]` and `b̄ = E[r φ]` under a fixed policy.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanPathOps {
    pub a_bar: DMatrix<f64>,
    pub b_bar: DVector<f64>,
    pub stationary: StationaryDistribution,
}

impl MeanPathOps {
    /// `‖Āθ + b̄‖₂`
    pub fn residual(&self, theta: &Parameter) -> f64 {
        let th = DVector::from_column_slice(theta.as_slice());
        (&self.a_bar * th + &self.b_bar).norm()
    }
}

pub fn mean_path_ops(mdp: &Mdp, features: &FeatureMap, policy: &PolicyTable) -> Result<MeanPathOps> {
    if features.num_states() != mdp.num_states() || features.num_actions() != mdp.num_actions() {
        return Err(Error::DimensionMismatch {
            what: "feature map state-action size",
            expected: mdp.num_states() * mdp.num_actions(),
            found: features.num_states() * features.num_actions(),
        });
    }
    let stationary = stationary_distribution(mdp, policy)?;
    let (ns, na, d) = (mdp.num_states(), mdp.num_actions(), features.dim());
    let gamma = mdp.discount();

    // ψ(s') = Σ_a' π(a'|s') φ(s',a')
    let mut psi = vec![0.0; ns * d];
    for s2 in 0..ns {
        for a2 in 0..na {
            let p = policy.prob(s2, a2);
            if p > 0.0 {
                features.add_scaled(s2, a2, p, &mut psi[s2 * d..(s2 + 1) * d]);
            }
        }
    }

    let mut a_bar = DMatrix::<f64>::zeros(d, d);
    let mut b_bar = DVector::<f64>::zeros(d);
    let mut direction = vec![0.0; d];
    for s in 0..ns {
        for a in 0..na {
            let mu = stationary.mu(s, a);
            if mu == 0.0 {
                continue;
            }
            // γ E[φ(s',a') | s, a] − φ(s,a)
            direction.fill(0.0);
            for (s2, &p) in mdp.kernel().row(a, s).iter().enumerate() {
                if p > 0.0 {
                    let scale = gamma * p;
                    for (o, x) in direction.iter_mut().zip(&psi[s2 * d..(s2 + 1) * d]) {
                        *o += scale * x;
                    }
                }
            }
            features.add_scaled(s, a, -1.0, &mut direction);
            let r = mdp.rewards().get(s, a);
            features.for_each_nonzero(s, a, |i, v| {
                let w = mu * v;
                for (j, x) in direction.iter().enumerate() {
                    a_bar[(i, j)] += w * x;
                }
                b_bar[i] += w * r;
            });
        }
    }
    Ok(MeanPathOps {
        a_bar,
        b_bar,
        stationary,
    })
}

/// Steady feature second moment `E_μ[φ φᵀ]`.
pub fn feature_second_moment(features: &FeatureMap, stationary: &StationaryDistribution) -> DMatrix<f64> {
    let d = features.dim();
    let mut out = DMatrix::<f64>::zeros(d, d);
    for s in 0..stationary.num_states() {
        for a in 0..stationary.num_actions() {
            let mu = stationary.mu(s, a);
            if mu == 0.0 {
                continue;
            }
            let phi = features.vector(s, a);
            for i in 0..d {
                if phi[i] == 0.0 {
                    continue;
                }
                for j in 0..d {
                    out[(i, j)] += mu * phi[i] * phi[j];
                }
            }
        }
    }
    out
}

/// Linear projected Bellman solution `Āθ + b̄ = 0`.
pub fn td0_fixed_point(ops: &MeanPathOps) -> Result<Parameter> {
    let x = solve(ops.a_bar.clone(), &(-&ops.b_bar), "mean-path TD system")?;
    Ok(Parameter::new(x.iter().copied().collect()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Weight on the freshly solved iterate.
    pub damping: f64,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 500,
            damping: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPoint {
    pub theta: Parameter,
    /// `‖Ā_θ θ + b̄_θ‖` at the returned point.
    pub residual: f64,
    pub iterations: usize,
}

/// Self-consistent solution of the nonlinear projected Bellman equation
/// `Ā_θ θ + b̄_θ = 0` with `π_θ` given by `op`.
///
/// Damped Picard iteration on the linearised solve:
/// `θ ← (1 − β) θ + β · solve(Ā_θ x = −b̄_θ)`. Returns the solved iterate once it is within
/// `tol` of the current one and its own residual is within `tol`.
pub fn sarsa_fixed_point(
    mdp: &Mdp,
    features: &FeatureMap,
    op: &PolicyImprovementOp,
    init: &Parameter,
    options: FixedPointOptions,
) -> Result<FixedPoint> {
    check_setup(mdp, features, op, init)?;
    if !(options.damping > 0.0 && options.damping <= 1.0) {
        return Err(invalid("damping must lie in (0, 1]"));
    }
    let beta = options.damping;
    let mut theta = init.clone();
    let mut last_residual = f64::INFINITY;
    for k in 1..=options.max_iter {
        let ops = mean_path_ops(mdp, features, &improve_policy(op, features, &theta)?)?;
        last_residual = ops.residual(&theta);
        let target = td0_fixed_point(&ops)?;
        if theta.distance(&target) <= options.tol {
            let at_target = mean_path_ops(mdp, features, &improve_policy(op, features, &target)?)?;
            let residual = at_target.residual(&target);
            if residual <= options.tol {
                return Ok(FixedPoint {
                    theta: target,
                    residual,
                    iterations: k,
                });
            }
        }
        for (x, y) in theta.weights.iter_mut().zip(&target.weights) {
            *x = (1.0 - beta) * *x + beta * y;
        }
    }
    Err(Error::NoConvergence {
        iterations: options.max_iter,
        residual: last_residual,
    })
}

/// `σ' = n̂ + m ρ^n̂ / (1 − ρ)` with `n̂ = ⌈log_ρ m⁻¹⌉`.
pub fn sigma_prime(mixing: MixingConstants) -> Result<f64> {
    let MixingConstants { m, rho } = mixing;
    if !(rho > 0.0 && rho < 1.0) {
        return Err(invalid(format!("rho must lie in (0, 1), got {rho}")));
    }
    if !(m >= 1.0) {
        return Err(invalid(format!("m must be at least 1, got {m}")));
    }
    let n_hat = libm::ceil(libm::log(1.0 / m) / libm::log(rho)).max(0.0);
    Ok(n_hat + m * libm::pow(rho, n_hat) / (1.0 - rho))
}

/// Bound on `‖θ̄_t‖` under projection: `G = 2(2Ḡ + R) / (1 − 16 α₀² K² γ)`.
pub fn parameter_bound(projection_radius: f64, reward_cap: f64, alpha0: f64, sync_period: usize, gamma: f64) -> Result<f64> {
    let k = sync_period as f64;
    let denom = 1.0 - 16.0 * alpha0 * alpha0 * k * k * gamma;
    if !(denom > 0.0) {
        return Err(invalid(format!(
            "parameter bound undefined: 16 α0² K² γ = {} >= 1",
            1.0 - denom
        )));
    }
    Ok(2.0 * (2.0 * projection_radius + reward_cap) / denom)
}

/// Settings for [`convergence_constants`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantSettings {
    pub mixing: MixingConstants,
    pub alpha0: f64,
    pub sync_period: usize,
    pub projection_radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemConstants {
    pub m: f64,
    pub rho: f64,
    pub sigma_prime: f64,
    pub sigma: f64,
    /// Parameter norm bound `G`.
    pub g: f64,
    /// Problem scale `H = R + (1 + γ) G`.
    pub h: f64,
    /// Convergence constant `w = min_i w_i`.
    pub w: f64,
    /// Exploration constant `λ = min_i λ_min(E_μ[φφᵀ])`.
    pub lambda: f64,
    /// Heterogeneity level `Λ = R ε_r + H σ ε_p`.
    pub lambda_het: f64,
    /// Measured heterogeneity.
    pub eps_p: f64,
    pub eps_r: f64,
    /// `w_i` for each agent, then the central MDP.
    pub w_per_mdp: Vec<f64>,
    pub lambda_per_mdp: Vec<f64>,
}

impl ProblemConstants {
    /// Fixed-point perturbation radius `Λ / w`.
    pub fn perturbation_bound(&self) -> f64 {
        self.lambda_het / self.w
    }
}

/// Local curvature constants at a fixed point: `(w_i, λ_i)`.
pub fn curvature_at(mdp: &Mdp, features: &FeatureMap, op: &PolicyImprovementOp, theta: &Parameter) -> Result<(f64, f64)> {
    let policy = improve_policy(op, features, theta)?;
    let ops = mean_path_ops(mdp, features, &policy)?;
    let (_, a_max) = sym_eigen_range(&ops.a_bar)?;
    let (phi_min, _) = sym_eigen_range(&feature_second_moment(features, &ops.stationary))?;
    Ok((-0.5 * a_max, phi_min))
}

/// Problem constants from the fixed points of every agent followed by the central MDP.
pub fn convergence_constants(
    family: &MdpFamily,
    features: &FeatureMap,
    op: &PolicyImprovementOp,
    fixed_points: &[Parameter],
    settings: ConstantSettings,
) -> Result<ProblemConstants> {
    if fixed_points.len() != family.len() + 1 {
        return Err(Error::DimensionMismatch {
            what: "fixed points (agents + central)",
            expected: family.len() + 1,
            found: fixed_points.len(),
        });
    }
    let mut w_per_mdp = Vec::with_capacity(fixed_points.len());
    let mut lambda_per_mdp = Vec::with_capacity(fixed_points.len());
    for (mdp, theta) in family.all_with_central().zip(fixed_points) {
        let (w, lambda) = curvature_at(mdp, features, op, theta)?;
        w_per_mdp.push(w);
        lambda_per_mdp.push(lambda);
    }
    let w = w_per_mdp.iter().copied().fold(f64::INFINITY, f64::min);
    let lambda = lambda_per_mdp.iter().copied().fold(f64::INFINITY, f64::min);
    let sigma_prime = sigma_prime(settings.mixing)?;
    let sigma = sigma_prime + 2.0;
    let central = family.central();
    let (cap, gamma) = (central.reward_cap(), central.discount());
    let g = parameter_bound(settings.projection_radius, cap, settings.alpha0, settings.sync_period, gamma)?;
    let h = cap + (1.0 + gamma) * g;
    let eps_p = kernel_heterogeneity(family)?;
    let eps_r = reward_heterogeneity(family)?;
    Ok(ProblemConstants {
        m: settings.mixing.m,
        rho: settings.mixing.rho,
        sigma_prime,
        sigma,
        g,
        h,
        w,
        lambda,
        lambda_het: cap * eps_r + h * sigma * eps_p,
        eps_p,
        eps_r,
        w_per_mdp,
        lambda_per_mdp,
    })
}

/// Settings for [`verify_perturbation_bound`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundSettings {
    /// Explicit `(m, ρ)`; estimated from a policy sample when `None`.
    pub mixing: Option<MixingConstants>,
    /// TV horizon used when estimating `m`.
    pub mixing_horizon: usize,
    pub alpha0: f64,
    pub sync_period: usize,
    pub projection_radius: f64,
    pub fixed_point: FixedPointOptions,
}

impl Default for BoundSettings {
    fn default() -> Self {
        Self {
            mixing: None,
            mixing_horizon: 200,
            alpha0: 0.01,
            sync_period: 10,
            projection_radius: 100.0,
            fixed_point: FixedPointOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationReport {
    /// `max_{i,j} ‖θ*_i − θ*_j‖₂` over agents.
    pub observed: f64,
    /// `Λ(ε_p, ε_r) / w`
    pub bound: f64,
    pub passed: bool,
    pub constants: ProblemConstants,
    /// Agents' fixed points followed by the central one.
    pub fixed_points: Vec<Parameter>,
    /// Empirical lower bound on the policy operator's Lipschitz constant.
    pub lipschitz_estimate: f64,
    /// Whether `L H σ ≤ w` holds for the estimate (informational only).
    pub lipschitz_condition: bool,
    /// Whether every fixed point lies inside the projection ball.
    pub radius_covers_fixed_points: bool,
}

/// Absolute slack on the bound comparison.
pub const BOUND_COMPARISON_TOL: f64 = 1e-8;

/// Solve every fixed point, derive the constants, and compare the observed spread of agent
/// fixed points with `Λ / w`.
pub fn verify_perturbation_bound(
    family: &MdpFamily,
    features: &FeatureMap,
    op: &PolicyImprovementOp,
    settings: BoundSettings,
) -> Result<PerturbationReport> {
    let init = Parameter::zeros(features.dim());
    let fixed_points = family
        .all_with_central()
        .map(|mdp| sarsa_fixed_point(mdp, features, op, &init, settings.fixed_point).map(|fp| fp.theta))
        .collect::<Result<Vec<_>>>()?;
    report_from_fixed_points(family, features, op, fixed_points, settings)
}

/// [`verify_perturbation_bound`] with precomputed fixed points (agents, then central).
pub fn report_from_fixed_points(
    family: &MdpFamily,
    features: &FeatureMap,
    op: &PolicyImprovementOp,
    fixed_points: Vec<Parameter>,
    settings: BoundSettings,
) -> Result<PerturbationReport> {
    let mixing = match settings.mixing {
        Some(m) => m,
        None => estimate_family_mixing(family, features, op, &fixed_points, settings.mixing_horizon)?,
    };
    let constants = convergence_constants(
        family,
        features,
        op,
        &fixed_points,
        ConstantSettings {
            mixing,
            alpha0: settings.alpha0,
            sync_period: settings.sync_period,
            projection_radius: settings.projection_radius,
        },
    )?;
    let agents = &fixed_points[..family.len()];
    let mut observed = 0.0f64;
    for i in 0..agents.len() {
        for j in i + 1..agents.len() {
            observed = observed.max(agents[i].distance(&agents[j]));
        }
    }
    let bound = constants.perturbation_bound();
    let lipschitz_estimate = empirical_lipschitz(op, features, &probe_pairs(&fixed_points))?;
    Ok(PerturbationReport {
        observed,
        bound,
        passed: observed <= bound + BOUND_COMPARISON_TOL,
        lipschitz_condition: lipschitz_estimate * constants.h * constants.sigma <= constants.w,
        radius_covers_fixed_points: fixed_points.iter().all(|p| p.norm() <= settings.projection_radius),
        constants,
        fixed_points,
        lipschitz_estimate,
    })
}

/// Mixing envelope over every MDP of the family (and the central one), sampled at the
/// policies induced by the fixed points plus the uniform policy.
pub fn estimate_family_mixing(
    family: &MdpFamily,
    features: &FeatureMap,
    op: &PolicyImprovementOp,
    fixed_points: &[Parameter],
    horizon: usize,
) -> Result<MixingConstants> {
    let central = family.central();
    let mut sample = vec![PolicyTable::uniform(central.num_states(), central.num_actions())];
    for theta in fixed_points {
        sample.push(improve_policy(op, features, theta)?);
    }
    let mut acc: Option<MixingConstants> = None;
    for mdp in family.all_with_central() {
        let mc = mixing_constants(mdp, &sample, horizon)?;
        acc = Some(acc.map_or(mc, |a| a.max(mc)));
    }
    acc.ok_or_else(|| invalid("empty family"))
}

/// Fixed-point pairs plus small coordinate nudges around each fixed point.
fn probe_pairs(points: &[Parameter]) -> Vec<(Parameter, Parameter)> {
    let mut pairs = Vec::new();
    for (i, p) in points.iter().enumerate() {
        for q in &points[i + 1..] {
            pairs.push((p.clone(), q.clone()));
        }
        for k in 0..p.dim().min(8) {
            let mut nudged = p.clone();
            nudged.weights[k] += 1e-3;
            pairs.push((p.clone(), nudged));
        }
    }
    pairs
}

/// Tabular action values `q_π` from `(I − γ P^π) q = r` over state-action pairs.
pub fn bellman_q_values(mdp: &Mdp, policy: &PolicyTable) -> Result<Vec<f64>> {
    mdp.induced_chain(policy)?;
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let n = ns * na;
    let gamma = mdp.discount();
    let mut m = DMatrix::<f64>::identity(n, n);
    for s in 0..ns {
        for a in 0..na {
            let row = s * na + a;
            for (s2, &p) in mdp.kernel().row(a, s).iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                for a2 in 0..na {
                    m[(row, s2 * na + a2)] -= gamma * p * policy.prob(s2, a2);
                }
            }
        }
    }
    let r = DVector::from_column_slice(mdp.rewards().as_slice());
    Ok(solve(m, &r, "tabular Bellman system")?.iter().copied().collect())
}

/// `R / (1 − γ)`, the sup-norm bound on any action value.
pub fn value_bound(mdp: &Mdp) -> f64 {
    mdp.reward_cap() / (1.0 - mdp.discount())
}

/// Smallest horizon `h ≥ 1` with `γ^h R / (1 − γ) < tol`.
pub fn horizon_for_tolerance(gamma: f64, reward_cap: f64, tol: f64) -> usize {
    let mut h = 1usize;
    let mut tail = gamma * reward_cap / (1.0 - gamma);
    while tail >= tol && h < 1_000_000 {
        tail *= gamma;
        h += 1;
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
}

/// Average truncated discounted return from `(s, a)` following `policy`.
pub fn monte_carlo_q<R: Rng + ?Sized>(
    mdp: &Mdp,
    policy: &PolicyTable,
    s: usize,
    a: usize,
    n_rollouts: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    mdp.check_policy(policy)?;
    if s >= mdp.num_states() || a >= mdp.num_actions() {
        return Err(Error::IndexOutOfRange {
            what: "state-action pair",
            index: s * mdp.num_actions() + a,
            bound: mdp.num_states() * mdp.num_actions(),
        });
    }
    if n_rollouts == 0 {
        return Err(invalid("need at least one rollout"));
    }
    let gamma = mdp.discount();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_rollouts {
        let (mut st, mut at) = (s, a);
        let mut discount = 1.0;
        let mut ret = 0.0;
        for step in 0..horizon {
            ret += discount * mdp.rewards().get(st, at);
            discount *= gamma;
            if step + 1 == horizon || discount == 0.0 {
                break;
            }
            st = sample_index(mdp.kernel().row(at, st), rng);
            at = sample_index(policy.row(st), rng);
        }
        sum += ret;
        sum_sq += ret * ret;
    }
    let n = n_rollouts as f64;
    let mean = sum / n;
    let var = if n_rollouts > 1 {
        ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(McEstimate {
        mean,
        std_error: libm::sqrt(var / n),
    })
}

/// Euclidean norm of a plain slice, re-exported for report code.
pub fn l2(v: &[f64]) -> f64 {
    norm2(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{build_shifted_mdp, perturb_family};
    use crate::rng::model_stream;
    use approx::assert_relative_eq;

    fn small_mdp(gamma: f64) -> Mdp {
        build_shifted_mdp(5, 3, 11, 12, gamma, 2.0).unwrap()
    }

    #[test]
    fn mean_path_matches_two_step_tensor() {
        let mdp = small_mdp(0.7);
        let features = FeatureMap::tiled(5, 3, 2, 2).unwrap();
        let policy = improve_policy(&PolicyImprovementOp::softmax(2.0).unwrap(), &features, &Parameter::new(vec![0.3, -0.2, 0.5, 0.1])).unwrap();
        let ops = mean_path_ops(&mdp, &features, &policy).unwrap();
        let tensor = ops.stationary.two_step_tensor(&mdp, &policy);
        let n = 15;
        let d = features.dim();
        let mut a_ref = DMatrix::<f64>::zeros(d, d);
        for x in 0..n {
            let (s, a) = (x / 3, x % 3);
            let phi = features.vector(s, a);
            for y in 0..n {
                let p = tensor[x * n + y];
                let phi2 = features.vector(y / 3, y % 3);
                for i in 0..d {
                    for j in 0..d {
                        a_ref[(i, j)] += p * phi[i] * (0.7 * phi2[j] - phi[j]);
                    }
                }
            }
        }
        assert_relative_eq!(ops.a_bar, a_ref, epsilon = 1e-12);
    }

    #[test]
    fn tabular_fixed_point_is_bellman_solution() {
        let mdp = small_mdp(0.6);
        let features = FeatureMap::full_indicator(5, 3).unwrap();
        let policy = PolicyTable::uniform(5, 3);
        let ops = mean_path_ops(&mdp, &features, &policy).unwrap();
        let theta = td0_fixed_point(&ops).unwrap();
        let q = bellman_q_values(&mdp, &policy).unwrap();
        for (x, y) in theta.weights.iter().zip(&q) {
            assert_relative_eq!(*x, *y, epsilon = 1e-10);
        }
        assert!(ops.residual(&theta) < 1e-12);
        let (_, lambda) = curvature_at(&mdp, &features, &PolicyImprovementOp::Fixed(policy), &theta).unwrap();
        let min_mu = (0..15).map(|x| ops.stationary.mu(x / 3, x % 3)).fold(f64::INFINITY, f64::min);
        assert_relative_eq!(lambda, min_mu, epsilon = 1e-12);
    }

    #[test]
    fn fixed_policy_damped_equals_direct() {
        let mdp = small_mdp(0.9);
        let features = FeatureMap::tiled(5, 3, 3, 2).unwrap();
        let policy = PolicyTable::uniform(5, 3);
        let direct = td0_fixed_point(&mean_path_ops(&mdp, &features, &policy).unwrap()).unwrap();
        let fp = sarsa_fixed_point(
            &mdp,
            &features,
            &PolicyImprovementOp::Fixed(policy),
            &Parameter::zeros(6),
            FixedPointOptions::default(),
        )
        .unwrap();
        assert_eq!(fp.theta, direct);
    }

    #[test]
    fn softmax_fixed_point_is_self_consistent() {
        let mdp = small_mdp(0.5);
        let features = FeatureMap::full_indicator(5, 3).unwrap();
        let op = PolicyImprovementOp::softmax(1.0).unwrap();
        let fp = sarsa_fixed_point(&mdp, &features, &op, &Parameter::zeros(15), FixedPointOptions::default()).unwrap();
        let ops = mean_path_ops(&mdp, &features, &improve_policy(&op, &features, &fp.theta).unwrap()).unwrap();
        assert!(ops.residual(&fp.theta) <= 1e-9);
    }

    #[test]
    fn iteration_cap_reports_no_convergence() {
        let mdp = small_mdp(0.5);
        let features = FeatureMap::full_indicator(5, 3).unwrap();
        let op = PolicyImprovementOp::softmax(1.0).unwrap();
        let options = FixedPointOptions { max_iter: 2, ..Default::default() };
        let err = sarsa_fixed_point(&mdp, &features, &op, &Parameter::zeros(15), options).unwrap_err();
        assert!(matches!(err, Error::NoConvergence { iterations: 2, .. }));
    }

    #[test]
    fn sigma_prime_examples() {
        assert_relative_eq!(sigma_prime(MixingConstants::new(1.0, 0.5).unwrap()).unwrap(), 2.0);
        // n̂ = ⌈ln 4 / ln 2⌉ = 2, σ' = 2 + 4·0.25/0.5
        assert_relative_eq!(sigma_prime(MixingConstants::new(4.0, 0.5).unwrap()).unwrap(), 4.0, epsilon = 1e-12);
    }

    #[test]
    fn parameter_bound_domain() {
        assert_relative_eq!(parameter_bound(1.0, 1.0, 0.0, 10, 0.9).unwrap(), 6.0);
        assert!(parameter_bound(1.0, 1.0, 0.1, 10, 0.9).is_err());
    }

    #[test]
    fn horizon_examples() {
        // 0.5^h · 2 < 1e-4 first holds at h = 15
        assert_eq!(horizon_for_tolerance(0.5, 1.0, 1e-4), 15);
        assert_eq!(horizon_for_tolerance(0.0, 1.0, 1e-4), 1);
    }

    #[test]
    fn monte_carlo_agrees_with_bellman() {
        let mdp = small_mdp(0.5);
        let policy = PolicyTable::uniform(5, 3);
        let q = bellman_q_values(&mdp, &policy).unwrap();
        let h = horizon_for_tolerance(0.5, 2.0, 1e-4);
        let mut rng = model_stream(3);
        for x in [0, 7, 14] {
            let est = monte_carlo_q(&mdp, &policy, x / 3, x % 3, 20_000, h, &mut rng).unwrap();
            assert!((est.mean - q[x]).abs() <= 4.0 * est.std_error + 1e-4, "{x}: {est:?} vs {}", q[x]);
        }
    }

    #[test]
    fn homogeneous_family_has_zero_spread() {
        let mdp = small_mdp(0.5);
        let family = perturb_family(&mdp, 3, 0.0, 0.0, 1).unwrap();
        let features = FeatureMap::full_indicator(5, 3).unwrap();
        let op = PolicyImprovementOp::softmax(1.0).unwrap();
        let report = verify_perturbation_bound(&family, &features, &op, BoundSettings::default()).unwrap();
        assert_eq!(report.observed, 0.0);
        assert_eq!(report.constants.lambda_het, 0.0);
        assert!(report.passed);
        assert!(report.constants.w > 0.0);
    }

    #[test]
    fn heterogeneous_family_within_bound() {
        let mdp = small_mdp(0.5);
        let family = perturb_family(&mdp, 3, 0.5, 0.5, 9).unwrap();
        let features = FeatureMap::full_indicator(5, 3).unwrap();
        let report =
            verify_perturbation_bound(&family, &features, &PolicyImprovementOp::softmax(2.0).unwrap(), BoundSettings::default())
                .unwrap();
        assert!(report.observed > 0.0);
        assert!(report.passed, "{} > {}", report.observed, report.bound);
    }
}
