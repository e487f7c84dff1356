//! Steady-state machinery for policy-induced chains: ergodicity, stationary laws, mixing.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, ErgodicityFailure, Error, Result};
use crate::linalg::{eigen_moduli, l1_dist, solve};
use crate::mdp::Mdp;
use crate::policy::PolicyTable;

/// Above this many states the stationary law falls back to power iteration.
pub const DIRECT_SOLVE_LIMIT: usize = 2000;

/// TV distances at or below this level are treated as numerically converged.
pub const TV_FLOOR: f64 = 1e-12;

/// Irreducibility and aperiodicity of a row-major `n x n` chain, judged on its support graph.
pub fn check_ergodic(chain: &[f64], n: usize) -> Result<()> {
    if chain.len() != n * n || n == 0 {
        return Err(Error::DimensionMismatch {
            what: "chain entries",
            expected: n * n,
            found: chain.len(),
        });
    }
    let succ: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| chain[i * n + j] > 0.0).collect())
        .collect();
    let mut pred = vec![Vec::new(); n];
    for (i, js) in succ.iter().enumerate() {
        for &j in js {
            pred[j].push(i);
        }
    }
    // one strongly connected component iff state 0 reaches all and is reached by all
    let forward = bfs_levels(&succ, 0);
    if let Some(s) = forward.iter().position(Option::is_none) {
        return Err(Error::Ergodicity(ErgodicityFailure::Reducible { unreachable_state: s }));
    }
    let backward = bfs_levels(&pred, 0);
    if let Some(s) = backward.iter().position(Option::is_none) {
        return Err(Error::Ergodicity(ErgodicityFailure::Reducible { unreachable_state: s }));
    }
    // period = gcd over edges u→v of level(u) + 1 − level(v)
    let mut period = 0usize;
    for (u, js) in succ.iter().enumerate() {
        let lu = forward[u].unwrap_or_default();
        for &v in js {
            let lv = forward[v].unwrap_or_default();
            period = gcd(period, (lu + 1).abs_diff(lv));
        }
    }
    if period == 1 {
        Ok(())
    } else {
        Err(Error::Ergodicity(ErgodicityFailure::Periodic { period }))
    }
}

fn bfs_levels(adj: &[Vec<usize>], root: usize) -> Vec<Option<usize>> {
    let mut level = vec![None; adj.len()];
    level[root] = Some(0);
    let mut queue = VecDeque::from([root]);
    while let Some(u) = queue.pop_front() {
        let next = level[u].unwrap_or_default() + 1;
        for &v in &adj[u] {
            if level[v].is_none() {
                level[v] = Some(next);
                queue.push_back(v);
            }
        }
    }
    level
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Solve `η P = η`, `Σ η = 1` for an ergodic row-major chain.
pub fn chain_stationary(chain: &[f64], n: usize) -> Result<Vec<f64>> {
    check_ergodic(chain, n)?;
    let mut eta = if n <= DIRECT_SOLVE_LIMIT {
        // (Pᵀ − I) η = 0 with the last balance equation replaced by normalisation
        let mut m = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                m[(j, i)] = chain[i * n + j];
            }
            m[(i, i)] -= 1.0;
        }
        for j in 0..n {
            m[(n - 1, j)] = 1.0;
        }
        let mut rhs = DVector::<f64>::zeros(n);
        rhs[n - 1] = 1.0;
        solve(m, &rhs, "stationary distribution")?.iter().copied().collect()
    } else {
        power_iteration(chain, n)?
    };
    for x in eta.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
    let total: f64 = eta.iter().sum();
    eta.iter_mut().for_each(|x| *x /= total);
    Ok(eta)
}

fn power_iteration(chain: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut eta = vec![1.0 / n as f64; n];
    let mut next = vec![0.0; n];
    for _ in 0..1_000_000 {
        next.fill(0.0);
        for (i, &e) in eta.iter().enumerate() {
            for (o, &p) in next.iter_mut().zip(&chain[i * n..(i + 1) * n]) {
                *o += e * p;
            }
        }
        let diff = l1_dist(&eta, &next);
        core::mem::swap(&mut eta, &mut next);
        if diff < 1e-15 {
            return Ok(eta);
        }
    }
    Err(Error::NoConvergence {
        iterations: 1_000_000,
        residual: l1_dist(&eta, &next),
    })
}

/// Steady state and state-action laws of an MDP under a fixed policy.
///
/// The two-step law `φ(s,a,s',a') = μ(s,a) P_a(s,s') π(a'|s')` is exposed through
/// [`StationaryDistribution::two_step_prob`] and materialised only on request, since it has
/// `(S·A)²` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryDistribution {
    num_states: usize,
    num_actions: usize,
    /// `η(s)`
    pub state_probs: Vec<f64>,
    /// `μ(s,a) = η(s) π(a|s)`, laid out `[state][action]`
    pub state_action_probs: Vec<f64>,
}

impl StationaryDistribution {
    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    #[inline]
    pub fn mu(&self, s: usize, a: usize) -> f64 {
        self.state_action_probs[s * self.num_actions + a]
    }

    pub fn two_step_prob(&self, mdp: &Mdp, policy: &PolicyTable, s: usize, a: usize, s2: usize, a2: usize) -> f64 {
        self.mu(s, a) * mdp.kernel().prob(a, s, s2) * policy.prob(s2, a2)
    }

    /// Dense `[s][a][s'][a']` tensor.
    pub fn two_step_tensor(&self, mdp: &Mdp, policy: &PolicyTable) -> Vec<f64> {
        let (ns, na) = (self.num_states, self.num_actions);
        let mut out = Vec::with_capacity(ns * na * ns * na);
        for s in 0..ns {
            for a in 0..na {
                for s2 in 0..ns {
                    for a2 in 0..na {
                        out.push(self.two_step_prob(mdp, policy, s, a, s2, a2));
                    }
                }
            }
        }
        out
    }
}

/// Exact steady-state distributions of `mdp` under `policy` by a direct linear solve.
pub fn stationary_distribution(mdp: &Mdp, policy: &PolicyTable) -> Result<StationaryDistribution> {
    let n = mdp.num_states();
    let na = mdp.num_actions();
    let chain = mdp.induced_chain(policy)?;
    let eta = chain_stationary(&chain, n)?;
    let mut mu = Vec::with_capacity(n * na);
    for (s, &e) in eta.iter().enumerate() {
        mu.extend(policy.row(s).iter().map(|p| e * p));
    }
    Ok(StationaryDistribution {
        num_states: n,
        num_actions: na,
        state_probs: eta,
        state_action_probs: mu,
    })
}

/// Geometric mixing envelope `sup_s ‖P^t(s,·) − η‖_TV ≤ m ρ^t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixingConstants {
    pub m: f64,
    pub rho: f64,
}

impl MixingConstants {
    pub fn new(m: f64, rho: f64) -> Result<Self> {
        if !(m >= 1.0 && m.is_finite()) {
            return Err(invalid("mixing constant m must be a finite value >= 1"));
        }
        if !(rho > 0.0 && rho < 1.0) {
            return Err(invalid("mixing rate rho must lie in (0, 1)"));
        }
        Ok(Self { m, rho })
    }

    /// Componentwise maximum, the uniform envelope over both.
    pub fn max(self, other: Self) -> Self {
        Self {
            m: self.m.max(other.m),
            rho: self.rho.max(other.rho),
        }
    }
}

/// `sup_s ‖P^t(s,·) − η‖_TV` for `t = 1..=horizon`, stopping early once below [`TV_FLOOR`].
pub fn tv_decay(chain: &[f64], n: usize, eta: &[f64], horizon: usize) -> Vec<f64> {
    let p = DMatrix::from_row_slice(n, n, chain);
    let mut power = p.clone();
    let mut out = Vec::with_capacity(horizon);
    for t in 1..=horizon {
        let tv = (0..n)
            .map(|s| {
                (0..n)
                    .map(|j| libm::fabs(power[(s, j)] - eta[j]))
                    .sum::<f64>()
            })
            .fold(0.0, f64::max);
        out.push(tv);
        if tv <= TV_FLOOR || t == horizon {
            break;
        }
        power = &power * &p;
    }
    out
}

/// Mixing envelope of a single ergodic chain: `ρ` is the second-largest eigenvalue modulus
/// and `m` the smallest value ≥ 1 covering the measured TV curve over `1..=horizon`.
pub fn chain_mixing(chain: &[f64], n: usize, horizon: usize) -> Result<MixingConstants> {
    let eta = chain_stationary(chain, n)?;
    let moduli = eigen_moduli(&DMatrix::from_row_slice(n, n, chain))?;
    // drop the Perron eigenvalue (the one closest to 1)
    let perron = moduli
        .iter()
        .enumerate()
        .min_by(|x, y| libm::fabs(x.1 - 1.0).total_cmp(&libm::fabs(y.1 - 1.0)))
        .map(|(i, _)| i)
        .unwrap_or_default();
    let slem = moduli
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != perron)
        .map(|(_, m)| *m)
        .fold(0.0, f64::max);
    let rho = slem.clamp(f64::EPSILON, 1.0 - f64::EPSILON);
    let mut m = 1.0f64;
    for (i, &tv) in tv_decay(chain, n, &eta, horizon).iter().enumerate() {
        if tv > TV_FLOOR {
            m = m.max(tv / libm::pow(rho, (i + 1) as f64));
        }
    }
    MixingConstants::new(m, rho)
}

/// Largest envelope over a sample of policies. Since the true constants are a supremum over
/// all policies, the result is a lower bound on them.
pub fn mixing_constants(mdp: &Mdp, policy_sample: &[PolicyTable], horizon: usize) -> Result<MixingConstants> {
    if policy_sample.is_empty() {
        return Err(invalid("mixing constants need at least one policy"));
    }
    let n = mdp.num_states();
    let mut acc: Option<MixingConstants> = None;
    for policy in policy_sample {
        let chain = mdp.induced_chain(policy)?;
        let mc = chain_mixing(&chain, n, horizon)?;
        acc = Some(acc.map_or(mc, |a| a.max(mc)));
    }
    acc.ok_or_else(|| invalid("empty policy sample"))
}
