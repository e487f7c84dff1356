//! Deterministic random streams.
//!
//! Every agent draws from its own ChaCha stream keyed by `(master_seed, agent_id)`,
//! so a run's output never depends on which thread executes which agent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type AgentRng = ChaCha8Rng;

/// Stream for agent `agent_id` under `master_seed`.
pub fn agent_stream(master_seed: u64, agent_id: u64) -> AgentRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(agent_id);
    rng
}

/// Generator for model construction (kernels, rewards, perturbations).
pub fn model_stream(seed: u64) -> AgentRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Inverse-CDF lookup: first index whose cumulative weight exceeds `u`.
///
/// `u` is expected in `[0, 1)`. Falls back to the last index carrying positive mass
/// when rounding leaves the cumulative sum slightly below `u`.
pub fn inverse_cdf(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Draw an index from a probability row.
pub fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    inverse_cdf(weights, u)
}

/// A random row-stochastic vector with i.i.d. uniform weights, normalised.
pub(crate) fn random_simplex_row<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    let mut total = 0.0;
    for x in out.iter_mut() {
        // open interval keeps every entry strictly positive
        let v: f64 = rng.random();
        *x = v + f64::EPSILON;
        total += *x;
    }
    for x in out.iter_mut() {
        *x /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_cdf_point_mass() {
        let w = [0.0, 0.0, 1.0, 0.0];
        for u in [0.0, 0.3, 0.999_999] {
            assert_eq!(inverse_cdf(&w, u), 2);
        }
    }

    #[test]
    fn inverse_cdf_boundaries() {
        let w = [0.25, 0.25, 0.5];
        assert_eq!(inverse_cdf(&w, 0.0), 0);
        assert_eq!(inverse_cdf(&w, 0.25), 1);
        assert_eq!(inverse_cdf(&w, 0.49), 1);
        assert_eq!(inverse_cdf(&w, 0.5), 2);
        // rounding slack past the total mass
        assert_eq!(inverse_cdf(&[0.5, 0.5 - 1e-17, 0.0], 0.999_999_999_999_999_9), 1);
    }

    #[test]
    fn streams_are_keyed_by_agent() {
        let mut a = agent_stream(7, 0);
        let mut b = agent_stream(7, 1);
        let mut a2 = agent_stream(7, 0);
        let xa: u64 = a.random();
        let xb: u64 = b.random();
        let xa2: u64 = a2.random();
        assert_eq!(xa, xa2);
        assert_ne!(xa, xb);
    }

    #[test]
    fn simplex_rows_sum_to_one() {
        let mut rng = model_stream(3);
        let mut row = [0.0; 17];
        for _ in 0..50 {
            random_simplex_row(&mut rng, &mut row);
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-14);
            assert!(row.iter().all(|&x| x > 0.0));
        }
    }
}
