//! Finite MDPs, heterogeneous agent families, and heterogeneity metrics.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::linalg::l1_dist;
use crate::policy::PolicyTable;
use crate::rng::{model_stream, random_simplex_row};

/// Row-sum tolerance for every stochastic row in the crate.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Transition probabilities indexed `[action][from][to]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionKernel {
    num_states: usize,
    num_actions: usize,
    probs: Vec<f64>,
}

impl TransitionKernel {
    pub fn new(num_states: usize, num_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(invalid("kernel needs at least one state and one action"));
        }
        let expected = num_actions * num_states * num_states;
        if probs.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "kernel entries",
                expected,
                found: probs.len(),
            });
        }
        for (row_idx, row) in probs.chunks_exact(num_states).enumerate() {
            if let Some(&p) = row.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(invalid(format!(
                    "kernel row (action {}, state {}) has entry {p} outside [0, 1]",
                    row_idx / num_states,
                    row_idx % num_states
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(invalid(format!(
                    "kernel row (action {}, state {}) sums to {sum}",
                    row_idx / num_states,
                    row_idx % num_states
                )));
            }
        }
        Ok(Self {
            num_states,
            num_actions,
            probs,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    /// `P_a(s, ·)`
    #[inline]
    pub fn row(&self, a: usize, s: usize) -> &[f64] {
        let n = self.num_states;
        let start = (a * n + s) * n;
        &self.probs[start..start + n]
    }

    #[inline]
    pub fn prob(&self, a: usize, s: usize, next: usize) -> f64 {
        self.row(a, s)[next]
    }

    /// Flat `[action][from][to]` storage.
    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }
}

/// Rewards indexed `[state][action]`, bounded by `reward_cap`.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardTable {
    num_states: usize,
    num_actions: usize,
    reward_cap: f64,
    values: Vec<f64>,
}

impl RewardTable {
    pub fn new(num_states: usize, num_actions: usize, reward_cap: f64, values: Vec<f64>) -> Result<Self> {
        if !(reward_cap > 0.0 && reward_cap.is_finite()) {
            return Err(invalid(format!("reward cap must be positive and finite, got {reward_cap}")));
        }
        if values.len() != num_states * num_actions {
            return Err(Error::DimensionMismatch {
                what: "reward entries",
                expected: num_states * num_actions,
                found: values.len(),
            });
        }
        if let Some((i, &v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=reward_cap).contains(*v))
        {
            return Err(invalid(format!(
                "reward at (state {}, action {}) is {v}, outside [0, {reward_cap}]",
                i / num_actions,
                i % num_actions
            )));
        }
        Ok(Self {
            num_states,
            num_actions,
            reward_cap,
            values,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn reward_cap(&self) -> f64 {
        self.reward_cap
    }

    #[inline]
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.num_actions + a]
    }

    /// Flat `[state][action]` storage.
    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mdp {
    kernel: TransitionKernel,
    rewards: RewardTable,
    discount: f64,
}

impl Mdp {
    /// The discount must lie in `[0, 1)`; zero is admitted for the myopic special case.
    pub fn new(kernel: TransitionKernel, rewards: RewardTable, discount: f64) -> Result<Self> {
        if kernel.num_states() != rewards.num_states() {
            return Err(Error::DimensionMismatch {
                what: "reward table states",
                expected: kernel.num_states(),
                found: rewards.num_states(),
            });
        }
        if kernel.num_actions() != rewards.num_actions() {
            return Err(Error::DimensionMismatch {
                what: "reward table actions",
                expected: kernel.num_actions(),
                found: rewards.num_actions(),
            });
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(invalid(format!("discount must lie in [0, 1), got {discount}")));
        }
        Ok(Self {
            kernel,
            rewards,
            discount,
        })
    }

    pub fn kernel(&self) -> &TransitionKernel {
        &self.kernel
    }

    pub fn rewards(&self) -> &RewardTable {
        &self.rewards
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn num_states(&self) -> usize {
        self.kernel.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.kernel.num_actions
    }

    pub fn reward_cap(&self) -> f64 {
        self.rewards.reward_cap
    }

    /// Same model with a different discount factor.
    pub fn with_discount(&self, discount: f64) -> Result<Self> {
        Self::new(self.kernel.clone(), self.rewards.clone(), discount)
    }

    /// State chain `P_π(s, s') = Σ_a π(a|s) P_a(s, s')`, row-major `S x S`.
    pub fn induced_chain(&self, policy: &PolicyTable) -> Result<Vec<f64>> {
        self.check_policy(policy)?;
        let n = self.num_states();
        let mut chain = vec![0.0; n * n];
        for s in 0..n {
            let out = &mut chain[s * n..(s + 1) * n];
            for (a, &pa) in policy.row(s).iter().enumerate() {
                if pa == 0.0 {
                    continue;
                }
                for (o, &p) in out.iter_mut().zip(self.kernel.row(a, s)) {
                    *o += pa * p;
                }
            }
        }
        Ok(chain)
    }

    pub(crate) fn check_policy(&self, policy: &PolicyTable) -> Result<()> {
        if policy.num_states() != self.num_states() {
            return Err(Error::DimensionMismatch {
                what: "policy states",
                expected: self.num_states(),
                found: policy.num_states(),
            });
        }
        if policy.num_actions() != self.num_actions() {
            return Err(Error::DimensionMismatch {
                what: "policy actions",
                expected: self.num_actions(),
                found: policy.num_actions(),
            });
        }
        Ok(())
    }

    fn check_compatible(&self, other: &Mdp) -> Result<()> {
        if other.num_states() != self.num_states() {
            return Err(Error::DimensionMismatch {
                what: "agent states",
                expected: self.num_states(),
                found: other.num_states(),
            });
        }
        if other.num_actions() != self.num_actions() {
            return Err(Error::DimensionMismatch {
                what: "agent actions",
                expected: self.num_actions(),
                found: other.num_actions(),
            });
        }
        if other.discount != self.discount {
            return Err(invalid("agents disagree on the discount factor"));
        }
        if other.reward_cap() != self.reward_cap() {
            return Err(invalid("agents disagree on the reward cap"));
        }
        Ok(())
    }
}

/// Random row-stochastic reference matrix, with action `a` reading it with columns
/// circularly shifted right by `a`: `P_a(s, s') = P0(s, (s' - a) mod S)`.
pub fn build_shifted_mdp(
    num_states: usize,
    num_actions: usize,
    kernel_seed: u64,
    reward_seed: u64,
    discount: f64,
    reward_cap: f64,
) -> Result<Mdp> {
    if num_states < 2 || num_actions < 2 {
        return Err(invalid("shifted MDPs need at least two states and two actions"));
    }
    let n = num_states;
    let mut rng = model_stream(kernel_seed);
    let mut reference = vec![0.0; n * n];
    for row in reference.chunks_exact_mut(n) {
        random_simplex_row(&mut rng, row);
    }
    let kernel = TransitionKernel::new(n, num_actions, shift_columns(&reference, n, num_actions))?;

    let mut rng = model_stream(reward_seed);
    let values = (0..n * num_actions)
        .map(|_| rng.random::<f64>() * reward_cap)
        .collect();
    let rewards = RewardTable::new(n, num_actions, reward_cap, values)?;
    Mdp::new(kernel, rewards, discount)
}

/// Stack `num_actions` column-shifted copies of an `n x n` row-major matrix.
pub fn shift_columns(reference: &[f64], n: usize, num_actions: usize) -> Vec<f64> {
    let mut probs = Vec::with_capacity(num_actions * n * n);
    for a in 0..num_actions {
        let shift = a % n;
        for s in 0..n {
            let row = &reference[s * n..(s + 1) * n];
            probs.extend((0..n).map(|j| row[(j + n - shift) % n]));
        }
    }
    probs
}

/// A set of agent MDPs sharing `(S, A, γ, R)` plus their entrywise-mean central MDP.
#[derive(Debug, Clone, PartialEq)]
pub struct MdpFamily {
    agents: Vec<Mdp>,
    central: Mdp,
    eps_p_target: f64,
    eps_r_target: f64,
}

impl MdpFamily {
    pub fn new(agents: Vec<Mdp>, eps_p_target: f64, eps_r_target: f64) -> Result<Self> {
        let central = central_mdp(&agents)?;
        Ok(Self {
            agents,
            central,
            eps_p_target,
            eps_r_target,
        })
    }

    pub fn agents(&self) -> &[Mdp] {
        &self.agents
    }

    pub fn central(&self) -> &Mdp {
        &self.central
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    pub fn eps_p_target(&self) -> f64 {
        self.eps_p_target
    }

    pub fn eps_r_target(&self) -> f64 {
        self.eps_r_target
    }

    /// Agents first, then the central MDP.
    pub fn all_with_central(&self) -> impl Iterator<Item = &Mdp> {
        self.agents.iter().chain(core::iter::once(&self.central))
    }
}

/// Agent 1 is `nominal`; each other agent mixes the nominal kernel with a random kernel
/// (weight `eps_p / 2`) and adds uniform reward noise of half-width `R eps_r / 2`,
/// clamped back into `[0, R]`.
pub fn perturb_family(nominal: &Mdp, n_agents: usize, eps_p: f64, eps_r: f64, seed: u64) -> Result<MdpFamily> {
    if n_agents == 0 {
        return Err(invalid("a family needs at least one agent"));
    }
    if !(0.0..=2.0).contains(&eps_p) {
        return Err(invalid(format!("eps_p must lie in [0, 2], got {eps_p}")));
    }
    if !(0.0..=2.0).contains(&eps_r) {
        return Err(invalid(format!("eps_r must lie in [0, 2], got {eps_r}")));
    }
    let n = nominal.num_states();
    let na = nominal.num_actions();
    let cap = nominal.reward_cap();
    let delta = eps_p / 2.0;
    let half_width = cap * eps_r / 2.0;

    let mut rng = model_stream(seed);
    let mut agents = Vec::with_capacity(n_agents);
    agents.push(nominal.clone());
    let mut noise_row = vec![0.0; n];
    for _ in 1..n_agents {
        let mut probs = nominal.kernel.probs.clone();
        for row in probs.chunks_exact_mut(n) {
            random_simplex_row(&mut rng, &mut noise_row);
            if delta > 0.0 {
                for (p, q) in row.iter_mut().zip(&noise_row) {
                    *p = (1.0 - delta) * *p + delta * q;
                }
            }
        }
        let values = nominal
            .rewards
            .values
            .iter()
            .map(|&r| {
                let u: f64 = rng.random();
                (r + half_width * (2.0 * u - 1.0)).clamp(0.0, cap)
            })
            .collect();
        let kernel = TransitionKernel::new(n, na, probs)?;
        let rewards = RewardTable::new(n, na, cap, values)?;
        agents.push(Mdp::new(kernel, rewards, nominal.discount)?);
    }
    MdpFamily::new(agents, eps_p, eps_r)
}

/// Entrywise mean of agent kernels and rewards.
pub fn central_mdp(agents: &[Mdp]) -> Result<Mdp> {
    let first = agents.first().ok_or_else(|| invalid("central MDP of an empty family"))?;
    for other in &agents[1..] {
        first.check_compatible(other)?;
    }
    let scale = 1.0 / agents.len() as f64;
    let mut probs = vec![0.0; first.kernel.probs.len()];
    let mut values = vec![0.0; first.rewards.values.len()];
    for m in agents {
        for (acc, p) in probs.iter_mut().zip(&m.kernel.probs) {
            *acc += p;
        }
        for (acc, r) in values.iter_mut().zip(&m.rewards.values) {
            *acc += r;
        }
    }
    probs.iter_mut().for_each(|p| *p *= scale);
    values
        .iter_mut()
        .for_each(|r| *r = (*r * scale).clamp(0.0, first.reward_cap()));
    let kernel = TransitionKernel::new(first.num_states(), first.num_actions(), probs)?;
    let rewards = RewardTable::new(first.num_states(), first.num_actions(), first.reward_cap(), values)?;
    Mdp::new(kernel, rewards, first.discount)
}

/// TV-induced norm of `P - Q` over finite spaces: the largest L1 distance between
/// matching rows. The supremum over unit signed measures is attained at point masses.
pub fn kernel_distance(p: &TransitionKernel, q: &TransitionKernel) -> Result<f64> {
    if p.num_states != q.num_states || p.num_actions != q.num_actions {
        return Err(Error::DimensionMismatch {
            what: "kernel size",
            expected: p.probs.len(),
            found: q.probs.len(),
        });
    }
    let n = p.num_states;
    Ok(p.probs
        .chunks_exact(n)
        .zip(q.probs.chunks_exact(n))
        .map(|(x, y)| l1_dist(x, y))
        .fold(0.0, f64::max))
}

/// `max_{i,j} ‖r_i − r_j‖_∞ / R`
pub fn reward_distance(p: &RewardTable, q: &RewardTable) -> Result<f64> {
    if p.values.len() != q.values.len() {
        return Err(Error::DimensionMismatch {
            what: "reward table size",
            expected: p.values.len(),
            found: q.values.len(),
        });
    }
    let cap = p.reward_cap;
    if cap <= 0.0 {
        return Err(invalid("reward cap must be positive"));
    }
    Ok(p.values
        .iter()
        .zip(&q.values)
        .map(|(a, b)| libm::fabs(a - b))
        .fold(0.0, f64::max)
        / cap)
}

fn max_pairwise<F>(agents: &[Mdp], f: F) -> Result<f64>
where
    F: Fn(&Mdp, &Mdp) -> Result<f64>,
{
    if agents.is_empty() {
        return Err(invalid("heterogeneity of an empty family"));
    }
    let mut best = 0.0f64;
    for i in 0..agents.len() {
        for j in i + 1..agents.len() {
            best = best.max(f(&agents[i], &agents[j])?);
        }
    }
    Ok(best)
}

/// Measured transition-kernel heterogeneity `ε_p ∈ [0, 2]`.
pub fn kernel_heterogeneity(family: &MdpFamily) -> Result<f64> {
    max_pairwise(&family.agents, |a, b| kernel_distance(&a.kernel, &b.kernel))
}

/// Measured reward heterogeneity `ε_r ∈ [0, 2]`.
pub fn reward_heterogeneity(family: &MdpFamily) -> Result<f64> {
    max_pairwise(&family.agents, |a, b| reward_distance(&a.rewards, &b.rewards))
}
