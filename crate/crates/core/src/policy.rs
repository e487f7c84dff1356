//! Policy tables and the policy-improvement operators `θ ↦ π_θ`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::features::{FeatureMap, Parameter};
use crate::linalg::l1_dist;
use crate::mdp::STOCHASTIC_TOL;
use crate::rng::sample_index;

/// Action probabilities `π(a|s)`, laid out `[state][action]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    num_states: usize,
    num_actions: usize,
    probs: Vec<f64>,
}

impl PolicyTable {
    pub fn new(num_states: usize, num_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(invalid("policy needs at least one state and one action"));
        }
        if probs.len() != num_states * num_actions {
            return Err(Error::DimensionMismatch {
                what: "policy entries",
                expected: num_states * num_actions,
                found: probs.len(),
            });
        }
        for (s, row) in probs.chunks_exact(num_actions).enumerate() {
            if row.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
                return Err(invalid(format!("policy row {s} has a negative or non-finite entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(invalid(format!("policy row {s} sums to {sum}")));
            }
        }
        Ok(Self {
            num_states,
            num_actions,
            probs,
        })
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_states,
            num_actions,
            probs: vec![1.0 / num_actions as f64; num_states * num_actions],
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    #[inline]
    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.num_actions..(s + 1) * self.num_actions]
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.num_actions + a]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }
}

/// Maps a parameter to a stochastic policy.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicyImprovementOp {
    /// `π(a|s) ∝ exp(φ(s,a)ᵀθ / temperature)`
    Softmax { temperature: f64 },
    /// Point mass on the lowest-index maximiser of `φ(s,a)ᵀθ`.
    Greedy,
    /// Ignores `θ`; turns SARSA into TD(0) policy evaluation.
    Fixed(PolicyTable),
}

impl PolicyImprovementOp {
    pub fn softmax(temperature: f64) -> Result<Self> {
        let op = Self::Softmax { temperature };
        op.validate()?;
        Ok(op)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Softmax { temperature } if !(*temperature > 0.0 && temperature.is_finite()) => Err(
                invalid(format!("softmax temperature must be positive, got {temperature}")),
            ),
            _ => Ok(()),
        }
    }

    pub(crate) fn check_dims(&self, features: &FeatureMap) -> Result<()> {
        if let Self::Fixed(table) = self {
            if table.num_states != features.num_states() || table.num_actions != features.num_actions() {
                return Err(Error::DimensionMismatch {
                    what: "fixed policy size",
                    expected: features.num_states() * features.num_actions(),
                    found: table.probs.len(),
                });
            }
        }
        Ok(())
    }

    /// Writes `π_θ(·|s)` into `out` (length = number of actions). Assumes a validated operator.
    pub fn action_probs(&self, features: &FeatureMap, theta: &[f64], s: usize, out: &mut [f64]) {
        match self {
            Self::Fixed(table) => out.copy_from_slice(table.row(s)),
            Self::Softmax { temperature } => {
                let mut max = f64::NEG_INFINITY;
                for (a, o) in out.iter_mut().enumerate() {
                    *o = features.dot(s, a, theta) / temperature;
                    max = max.max(*o);
                }
                let mut total = 0.0;
                for o in out.iter_mut() {
                    *o = libm::exp(*o - max);
                    total += *o;
                }
                for o in out.iter_mut() {
                    *o /= total;
                }
            }
            Self::Greedy => {
                let mut best = 0;
                let mut best_q = f64::NEG_INFINITY;
                for a in 0..out.len() {
                    let q = features.dot(s, a, theta);
                    if q > best_q {
                        best_q = q;
                        best = a;
                    }
                }
                out.fill(0.0);
                out[best] = 1.0;
            }
        }
    }
}

/// Full policy table `π_θ`.
pub fn improve_policy(op: &PolicyImprovementOp, features: &FeatureMap, theta: &Parameter) -> Result<PolicyTable> {
    op.validate()?;
    op.check_dims(features)?;
    features.check_theta(theta)?;
    if let PolicyImprovementOp::Fixed(table) = op {
        return Ok(table.clone());
    }
    let (ns, na) = (features.num_states(), features.num_actions());
    let mut probs = vec![0.0; ns * na];
    for (s, row) in probs.chunks_exact_mut(na).enumerate() {
        op.action_probs(features, &theta.weights, s, row);
    }
    Ok(PolicyTable {
        num_states: ns,
        num_actions: na,
        probs,
    })
}

/// Largest observed `‖π_{θ1}(·|s) − π_{θ2}(·|s)‖_TV / ‖θ1 − θ2‖₂` over the pairs and all states.
///
/// TV is the L1 (functional-analytic) distance, bounded by 2. The result is a lower bound on
/// the operator's Lipschitz constant. Pairs with identical parameters are skipped.
pub fn empirical_lipschitz(
    op: &PolicyImprovementOp,
    features: &FeatureMap,
    theta_pairs: &[(Parameter, Parameter)],
) -> Result<f64> {
    op.validate()?;
    op.check_dims(features)?;
    let na = features.num_actions();
    let mut p1 = vec![0.0; na];
    let mut p2 = vec![0.0; na];
    let mut best = 0.0f64;
    for (t1, t2) in theta_pairs {
        features.check_theta(t1)?;
        features.check_theta(t2)?;
        let gap = t1.distance(t2);
        if gap == 0.0 {
            continue;
        }
        for s in 0..features.num_states() {
            op.action_probs(features, &t1.weights, s, &mut p1);
            op.action_probs(features, &t2.weights, s, &mut p2);
            best = best.max(l1_dist(&p1, &p2) / gap);
        }
    }
    Ok(best)
}

/// Draw `a ~ π(·|s)` by inverse CDF.
pub fn sample_action<R: Rng + ?Sized>(policy: &PolicyTable, s: usize, rng: &mut R) -> Result<usize> {
    if s >= policy.num_states {
        return Err(Error::IndexOutOfRange {
            what: "state",
            index: s,
            bound: policy.num_states,
        });
    }
    Ok(sample_index(policy.row(s), rng))
}
